//! Group summaries, the studentized range distribution, and Tukey–Kramer
//! all-pairs comparisons.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::morph::MorphometricRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub name: String,
    pub values: Vec<f64>,
}

impl GroupSample {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); absent for n < 2.
    pub std: Option<f64>,
}

/// Mean and sample standard deviation per group (Welford's update).
pub fn summarize(groups: &[GroupSample]) -> Vec<Summary> {
    groups
        .iter()
        .map(|g| {
            let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
            for &v in &g.values {
                n += 1;
                let d = v - mean;
                mean += d / n as f64;
                m2 += d * (v - mean);
            }
            let mean = if n == 0 { f64::NAN } else { mean };
            Summary { name: g.name.clone(), n, mean, std: (n >= 2).then(|| (m2 / (n - 1) as f64).sqrt()) }
        })
        .collect()
}

/// Fixed-order Gauss–Legendre rule on [-1, 1].
fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    let mut rule = Vec::with_capacity(order);
    for i in 0..order {
        // Chebyshev-style starting guess, refined by Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=order {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        rule.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    rule
}

/// Composite Gauss–Legendre settings for the double integral behind
/// [`studentized_range_sf`].
#[derive(Clone, Debug, PartialEq)]
pub struct RangeQuadrature {
    order: usize,
    inner_panels: usize,
    outer_panels: usize,
    /// Half-width of the inner integration window, in standard deviations.
    inner_limit: f64,
    /// Outer window half-width, in chi standard deviations (≈ 1/√(2·df)).
    outer_sds: f64,
    rule: Vec<(f64, f64)>,
}

impl Default for RangeQuadrature {
    fn default() -> Self {
        Self::new(16, 24, 32, 8.5, 12.0).expect("default quadrature is valid")
    }
}

impl RangeQuadrature {
    /// Rejects settings too coarse to reach ~1e-6 absolute accuracy.
    pub fn new(order: usize, inner_panels: usize, outer_panels: usize, inner_limit: f64, outer_sds: f64) -> Result<Self> {
        if !(4..=64).contains(&order) {
            return invalid(format!("quadrature order {order} outside 4..=64"));
        }
        if inner_panels < 8 || outer_panels < 8 {
            return invalid("at least 8 inner and 8 outer panels are required");
        }
        if !(inner_limit >= 7.0) || !(outer_sds >= 8.0) {
            return invalid("integration windows must cover at least 7 (inner) and 8 (outer) standard deviations");
        }
        Ok(Self { order, inner_panels, outer_panels, inner_limit, outer_sds, rule: gauss_legendre(order) })
    }

    fn nodes(&self, lo: f64, hi: f64, panels: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = (hi - lo) / panels as f64;
        (0..panels).flat_map(move |p| {
            let mid = lo + (p as f64 + 0.5) * h;
            self.rule.iter().map(move |&(x, w)| (mid + 0.5 * h * x, 0.5 * h * w))
        })
    }

    /// Upper tail `P(Q > q)` of the studentized range for `k` means and `df`
    /// error degrees of freedom.
    pub fn sf(&self, q: f64, k: usize, df: f64) -> Result<f64> {
        if k < 2 || !(df >= 1.0) || q.is_nan() {
            return invalid(format!("studentized range needs k >= 2, df >= 1 (got k={k}, df={df}, q={q})"));
        }
        if q <= 0.0 {
            return Ok(1.0);
        }
        if q.is_infinite() {
            return Ok(0.0);
        }
        let inner: Vec<(f64, f64, f64)> = self
            .nodes(-self.inner_limit, self.inner_limit, self.inner_panels)
            .map(|(z, w)| (z, w * normal_pdf(z), normal_cdf(z)))
            .collect();
        // P(range of k normals > w) = k ∫ φ(z) [Φ(z)^{k-1} − (Φ(z) − Φ(z−w))^{k-1}] dz,
        // with aᵐ − bᵐ = (a − b) Σ aⁱ bᵐ⁻¹⁻ⁱ so small tails do not cancel.
        let range_sf = |w: f64| -> f64 {
            let m = k - 1;
            let mut acc = 0.0;
            for &(z, wphi, a) in &inner {
                let d = normal_cdf(z - w);
                let b = a - d;
                let mut sum = 0.0;
                let mut ai = 1.0;
                for i in 0..m {
                    sum += ai * b.powi((m - 1 - i) as i32);
                    ai *= a;
                }
                acc += wphi * d * sum;
            }
            k as f64 * acc
        };
        let nu = df;
        let sd = 1.0 / (2.0 * nu).sqrt();
        let lo = (1.0 - self.outer_sds * sd).max(0.0);
        let hi = 1.0 + self.outer_sds * sd.max(0.7);
        let log_norm = 0.5 * nu * nu.ln() - libm::lgamma(0.5 * nu) - (0.5 * nu - 1.0) * std::f64::consts::LN_2;
        let mut total = 0.0;
        for (s, w) in self.nodes(lo, hi, self.outer_panels) {
            if s <= 0.0 {
                continue;
            }
            let log_f = log_norm + (nu - 1.0) * s.ln() - 0.5 * nu * s * s;
            total += w * log_f.exp() * range_sf(q * s);
        }
        Ok(total.clamp(0.0, 1.0))
    }
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// `P(Q > q)` with the default quadrature.
pub fn studentized_range_sf(q: f64, k: usize, df: f64) -> Result<f64> {
    thread_local! {
        static QUAD: RangeQuadrature = RangeQuadrature::default();
    }
    QUAD.with(|quad| quad.sf(q, k, df))
}

/// Significance label: `*` below 0.05 (or the chosen alpha), `**` below 0.01.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Inference {
    #[serde(rename = "insignificant")]
    Insignificant,
    #[serde(rename = "*")]
    Significant,
    #[serde(rename = "**")]
    HighlySignificant,
}

impl Inference {
    pub fn from_p(p: f64, alpha: f64) -> Self {
        if p < alpha && p < 0.01 {
            Inference::HighlySignificant
        } else if p < alpha {
            Inference::Significant
        } else {
            Inference::Insignificant
        }
    }

    pub fn is_significant(self) -> bool {
        self != Inference::Insignificant
    }

    pub fn label(self) -> &'static str {
        match self {
            Inference::Insignificant => "insignificant",
            Inference::Significant => "*",
            Inference::HighlySignificant => "**",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub group1: String,
    pub group2: String,
    #[serde(rename = "Q")]
    pub q: f64,
    pub p: f64,
    pub inference: Inference,
    /// Zero within-group variance with unequal means: `Q` is infinite and `p` is 0.
    #[serde(default)]
    pub degenerate: bool,
}

/// All-pairs Tukey–Kramer test with the one-way ANOVA pooled variance.
pub fn tukey_kramer(groups: &[GroupSample], alpha: f64) -> Result<Vec<PairwiseResult>> {
    let k = groups.len();
    if k < 2 {
        return invalid("Tukey-Kramer needs at least two groups");
    }
    if let Some(g) = groups.iter().find(|g| g.values.len() < 2) {
        return invalid(format!("group `{}` has fewer than two values", g.name));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must be in (0, 1), got {alpha}"));
    }
    let summaries = summarize(groups);
    let total: usize = groups.iter().map(|g| g.values.len()).sum();
    let df = (total - k) as f64;
    let ssw: f64 = groups
        .iter()
        .zip(&summaries)
        .map(|(g, s)| g.values.iter().map(|v| (v - s.mean).powi(2)).sum::<f64>())
        .sum();
    let mse = ssw / df;
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (&summaries[i], &summaries[j]);
            let diff = (a.mean - b.mean).abs();
            let se = (mse / 2.0 * (1.0 / a.n as f64 + 1.0 / b.n as f64)).sqrt();
            let (q, p, degenerate) = if diff == 0.0 {
                (0.0, 1.0, false)
            } else if se == 0.0 {
                (f64::INFINITY, 0.0, true)
            } else {
                let q = diff / se;
                (q, studentized_range_sf(q, k, df)?, false)
            };
            out.push(PairwiseResult {
                group1: a.name.clone(),
                group2: b.name.clone(),
                q,
                p,
                inference: Inference::from_p(p, alpha),
                degenerate,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Area,
    Eccentricity,
    Circularity,
    Solidity,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Area, Metric::Eccentricity, Metric::Circularity, Metric::Solidity];

    pub fn of(self, r: &MorphometricRecord) -> f64 {
        match self {
            Metric::Area => r.area,
            Metric::Eccentricity => r.eccentricity,
            Metric::Circularity => r.circularity,
            Metric::Solidity => r.solidity,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Area => "area",
            Metric::Eccentricity => "eccentricity",
            Metric::Circularity => "circularity",
            Metric::Solidity => "solidity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: Metric,
    pub summaries: Vec<Summary>,
    pub pairs: Vec<PairwiseResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub alpha: f64,
    pub tables: Vec<MetricTable>,
}

impl SignificanceReport {
    pub fn table(&self, metric: Metric) -> Option<&MetricTable> {
        self.tables.iter().find(|t| t.metric == metric)
    }
}

/// Groups records by class (sorted by name) and runs Tukey–Kramer on each of
/// the four descriptors. Classes with fewer than two records are left out.
pub fn significance_report(records: &[MorphometricRecord], alpha: f64) -> Result<SignificanceReport> {
    let mut classes: Vec<&str> = records.iter().map(|r| r.class.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut tables = Vec::new();
    for metric in Metric::ALL {
        let groups: Vec<GroupSample> = classes
            .iter()
            .map(|&c| {
                GroupSample::new(c, records.iter().filter(|r| r.class == c).map(|r| metric.of(r)).collect())
            })
            .filter(|g| {
                let keep = g.values.len() >= 2;
                if !keep {
                    log::warn!("class `{}` has fewer than two records; left out of the {} table", g.name, metric.name());
                }
                keep
            })
            .collect();
        if groups.len() < 2 {
            return invalid("significance report needs at least two classes with two or more records");
        }
        tables.push(MetricTable { metric, summaries: summarize(&groups), pairs: tukey_kramer(&groups, alpha)? });
    }
    Ok(SignificanceReport { alpha, tables })
}

/// `group1,group2,Q,p,inference` rows.
pub fn write_pairwise_csv<W: std::io::Write>(pairs: &[PairwiseResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["group1", "group2", "Q", "p", "inference"])?;
    for p in pairs {
        out.write_record([p.group1.clone(), p.group2.clone(), p.q.to_string(), p.p.to_string(), p.inference.label().to_string()])?;
    }
    out.flush()?;
    Ok(())
}
