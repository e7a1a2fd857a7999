//! Independent reference computations shared by integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

/// Monte Carlo estimate of `P(range(k normals) / sqrt(χ²_df / df) > q)` for each `q`.
pub fn mc_range_sf(k: usize, df: f64, qs: &[f64], draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chi = ChiSquared::new(df).unwrap();
    let mut exceed = vec![0usize; qs.len()];
    for _ in 0..draws {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..k {
            let z: f64 = StandardNormal.sample(&mut rng);
            lo = lo.min(z);
            hi = hi.max(z);
        }
        let s = (chi.sample(&mut rng) / df).sqrt();
        let stat = (hi - lo) / s;
        for (e, &q) in exceed.iter_mut().zip(qs) {
            if stat > q {
                *e += 1;
            }
        }
    }
    exceed.into_iter().map(|e| e as f64 / draws as f64).collect()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn inc_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - inc_beta(1.0 - x, b, a);
    }
    let tiny = 1e-300;
    let (mut c, mut d) = (1.0, 1.0 - (a + b) * x / (a + 1.0));
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..10_000 {
        let m = m as f64;
        for step in 0..2 {
            let num = if step == 0 {
                m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m))
            } else {
                -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0))
            };
            d = 1.0 + num * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = 1.0 + num / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            f *= c * d;
        }
        if (c * d - 1.0).abs() < 1e-15 {
            break;
        }
    }
    ln_front.exp() * f / a
}

/// Two-sided Student t tail `P(|T| > t)`.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    inc_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Pooled-variance two-sample t test: `(t, df, p)`.
pub fn pooled_t(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
    let df = (a.len() + b.len() - 2) as f64;
    let sp2 = ss / df;
    let t = (ma - mb).abs() / (sp2 * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt();
    (t, df, t_two_sided(t, df))
}
