//! Report bundle: stage metric tables, pipeline against baseline,
//! truth-vs-pipeline morphometric agreement and significance tables, gathered
//! from a finished run into one directory of CSV files with a JSON index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pipeline::PipelineEval;
use crate::stats::{Metric, SignificanceReport};
use crate::synth::io::read_scene;
use crate::tournament::TournamentReport;
use crate::workflow::{read_instance_map, read_rows, require, write_rows, InferIndex, InferMetrics, MorphRow, RunDir};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub rank: usize,
    pub candidate: String,
    pub preset: String,
    pub seed: u64,
    pub params: usize,
    pub train_mmac: u64,
    pub metric: String,
    pub validation: Option<f64>,
    pub test: Option<f64>,
    pub winner: bool,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    /// `pooled` or a class name.
    pub class: String,
    pub jaccard: Option<f64>,
    pub global_accuracy: Option<f64>,
    pub intersection: usize,
    pub union: usize,
}

/// One truth instance paired with one pipeline instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub scene: String,
    pub truth_id: u32,
    pub pipeline_id: u32,
    pub truth_class: String,
    pub pipeline_class: String,
    pub iou: f64,
    pub area_truth: f64,
    pub area_pipeline: f64,
    pub area_abs_diff: f64,
    pub eccentricity_truth: f64,
    pub eccentricity_pipeline: f64,
    pub eccentricity_abs_diff: f64,
    pub circularity_truth: f64,
    pub circularity_pipeline: f64,
    pub circularity_abs_diff: f64,
    pub solidity_truth: f64,
    pub solidity_pipeline: f64,
    pub solidity_abs_diff: f64,
}

impl AgreementRow {
    pub fn abs_diff(&self, m: Metric) -> f64 {
        match m {
            Metric::Area => self.area_abs_diff,
            Metric::Eccentricity => self.eccentricity_abs_diff,
            Metric::Circularity => self.circularity_abs_diff,
            Metric::Solidity => self.solidity_abs_diff,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub matched: usize,
    pub truth_unmatched: usize,
    pub pipeline_unmatched: usize,
    /// Fraction of matched pairs whose predicted class equals the truth class.
    pub class_agreement: Option<f64>,
    /// Median |pipeline − truth| per morphometric; absent without matches.
    pub median_abs_diff: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceGroupRow {
    pub source: String,
    pub metric: String,
    pub group: String,
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificancePairRow {
    pub source: String,
    pub metric: String,
    pub group1: String,
    pub group2: String,
    #[serde(rename = "Q")]
    pub q: f64,
    pub p: f64,
    pub inference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub file: String,
    pub rows: usize,
    /// Upstream files, relative to the run root.
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleIndex {
    pub tables: Vec<TableEntry>,
    pub agreement: AgreementSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub stage_metrics: Vec<StageRow>,
    pub pipeline_vs_baseline: Vec<ComparisonRow>,
    pub agreement: Vec<AgreementRow>,
    pub significance_groups: Vec<SignificanceGroupRow>,
    pub significance_pairs: Vec<SignificancePairRow>,
    pub index: BundleIndex,
}

pub const STAGE_METRICS: &str = "stage_metrics.csv";
pub const PIPELINE_VS_BASELINE: &str = "pipeline_vs_baseline.csv";
pub const AGREEMENT: &str = "agreement.csv";
pub const SIGNIFICANCE_GROUPS: &str = "significance_groups.csv";
pub const SIGNIFICANCE_PAIRS: &str = "significance_pairs.csv";
pub const INDEX: &str = "index.json";

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

fn stage_rows(report: &TournamentReport) -> Vec<StageRow> {
    let mut rows = Vec::new();
    for s in &report.stages {
        for (i, e) in s.ranked.iter().enumerate() {
            rows.push(StageRow {
                stage: s.stage.name().into(),
                rank: i + 1,
                candidate: e.id.clone(),
                preset: e.preset.clone(),
                seed: e.seed,
                params: e.param_count,
                train_mmac: e.train_mmac,
                metric: format!("{:?}", s.metric).to_lowercase(),
                validation: e.selection.filter(|_| !e.failed()),
                test: e.test.as_ref().and_then(|t| t.get(s.metric)),
                winner: s.winner.as_deref() == Some(e.id.as_str()),
                failed: e.failed(),
            });
        }
    }
    rows
}

fn comparison_rows(method: &str, e: &PipelineEval) -> Vec<ComparisonRow> {
    let (i, u) = e.per_class.iter().fold((0, 0), |(i, u), c| (i + c.intersection, u + c.union));
    let mut rows = vec![ComparisonRow {
        method: method.into(),
        class: "pooled".into(),
        jaccard: Some(e.jaccard),
        global_accuracy: Some(e.global_accuracy),
        intersection: i,
        union: u,
    }];
    rows.extend(e.per_class.iter().map(|c| ComparisonRow {
        method: method.into(),
        class: c.class.clone(),
        jaccard: c.jaccard,
        global_accuracy: None,
        intersection: c.intersection,
        union: c.union,
    }));
    rows
}

/// Pairs instances by descending IoU (ties by lower truth id, then lower
/// pipeline id), keeping pairs with IoU ≥ `min_iou`. `overlap` maps
/// (truth id, pipeline id) to shared pixels; `sizes` give pixel counts.
pub fn pair_by_iou(
    overlap: &BTreeMap<(u32, u32), usize>,
    truth_sizes: &BTreeMap<u32, usize>,
    pipeline_sizes: &BTreeMap<u32, usize>,
    min_iou: f64,
) -> Vec<(u32, u32, f64)> {
    let mut cands: Vec<(f64, u32, u32)> = overlap
        .iter()
        .map(|(&(t, p), &i)| {
            let u = truth_sizes[&t] + pipeline_sizes[&p] - i;
            (i as f64 / u as f64, t, p)
        })
        .filter(|c| c.0 >= min_iou)
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_t, mut used_p) = (std::collections::BTreeSet::new(), std::collections::BTreeSet::new());
    let mut out = Vec::new();
    for (v, t, p) in cands {
        if !used_t.contains(&t) && !used_p.contains(&p) {
            used_t.insert(t);
            used_p.insert(p);
            out.push((t, p, v));
        }
    }
    out
}

fn agreement(run: &RunDir, index: &InferIndex, truth: &[MorphRow], pipeline: &[MorphRow]) -> Result<(Vec<AgreementRow>, AgreementSummary)> {
    let key = |r: &MorphRow| (r.scene.clone(), r.instance_id);
    let t_rows: BTreeMap<_, &MorphRow> = truth.iter().map(|r| (key(r), r)).collect();
    let p_rows: BTreeMap<_, &MorphRow> = pipeline.iter().map(|r| (key(r), r)).collect();
    let mut rows = Vec::new();
    let (mut t_total, mut p_total) = (0usize, 0usize);
    for s in &index.scenes {
        let Some(t) = &s.truth else { continue };
        let scene = read_scene(run.root().join(t))?;
        let (w, ids, entries) = read_instance_map(&run.infer(), &s.stem)?;
        let mut pipeline_sizes: BTreeMap<u32, usize> = entries.iter().map(|e| (e.id as u32, 0)).collect();
        for &id in ids.iter().filter(|&&i| i != 0) {
            *pipeline_sizes.get_mut(&(id as u32)).expect("ids checked against the sidecar") += 1;
        }
        let mut truth_sizes = BTreeMap::new();
        let mut overlap: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for inst in scene.complete() {
            truth_sizes.insert(inst.id, inst.area());
            for (x, y) in inst.mask.iter_set() {
                let id = ids[(inst.bbox.y + y) * w + inst.bbox.x + x];
                if id != 0 {
                    *overlap.entry((inst.id, id as u32)).or_default() += 1;
                }
            }
        }
        t_total += rows_in(&t_rows, &scene.id);
        p_total += rows_in(&p_rows, &s.stem);
        for (tid, pid, iou) in pair_by_iou(&overlap, &truth_sizes, &pipeline_sizes, 0.5) {
            let (Some(a), Some(b)) = (t_rows.get(&(scene.id.clone(), tid)), p_rows.get(&(s.stem.clone(), pid))) else { continue };
            rows.push(AgreementRow {
                scene: scene.id.clone(),
                truth_id: tid,
                pipeline_id: pid,
                truth_class: a.class.clone(),
                pipeline_class: b.class.clone(),
                iou,
                area_truth: a.area,
                area_pipeline: b.area,
                area_abs_diff: (b.area - a.area).abs(),
                eccentricity_truth: a.eccentricity,
                eccentricity_pipeline: b.eccentricity,
                eccentricity_abs_diff: (b.eccentricity - a.eccentricity).abs(),
                circularity_truth: a.circularity,
                circularity_pipeline: b.circularity,
                circularity_abs_diff: (b.circularity - a.circularity).abs(),
                solidity_truth: a.solidity,
                solidity_pipeline: b.solidity,
                solidity_abs_diff: (b.solidity - a.solidity).abs(),
            });
        }
    }
    let matched = rows.len();
    let median_abs_diff =
        Metric::ALL.iter().map(|&m| (m.name().to_string(), median(&mut rows.iter().map(|r| r.abs_diff(m)).collect::<Vec<_>>()))).collect();
    let summary = AgreementSummary {
        matched,
        truth_unmatched: t_total - matched,
        pipeline_unmatched: p_total - matched,
        class_agreement: (matched > 0).then(|| rows.iter().filter(|r| r.truth_class == r.pipeline_class).count() as f64 / matched as f64),
        median_abs_diff,
    };
    Ok((rows, summary))
}

fn rows_in(rows: &BTreeMap<(String, u32), &MorphRow>, scene: &str) -> usize {
    rows.keys().filter(|(s, _)| s == scene).count()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| CoreError::Format { path: path.into(), detail: e.to_string() })
}

/// Upstream files the bundle is built from.
pub fn report_inputs(run: &RunDir) -> Vec<PathBuf> {
    vec![
        run.report_json(),
        run.infer().join("index.json"),
        run.infer().join("metrics.json"),
        run.morph().join("truth.csv"),
        run.morph().join("pipeline.csv"),
        run.stats().join("truth").join("summary.json"),
        run.stats().join("pipeline").join("summary.json"),
    ]
}

/// Gathers the bundle from a finished run. Every missing upstream file is
/// named in the error.
pub fn build_report(run: &RunDir) -> Result<ReportBundle> {
    let inputs = report_inputs(run);
    require(&inputs)?;
    let rel = |p: &PathBuf| run.relative(p);
    let report: TournamentReport = read_json(&inputs[0])?;
    let index: InferIndex = read_json(&inputs[1])?;
    let metrics: InferMetrics = read_json(&inputs[2])?;
    let truth: Vec<MorphRow> = read_rows(&inputs[3])?;
    let pipeline: Vec<MorphRow> = read_rows(&inputs[4])?;
    let stats: Vec<(&str, SignificanceReport)> = vec![("truth", read_json(&inputs[5])?), ("pipeline", read_json(&inputs[6])?)];

    let stage_metrics = stage_rows(&report);
    let mut pipeline_vs_baseline = comparison_rows("pipeline", &metrics.pipeline);
    let mut comparison_sources = vec![rel(&inputs[2])];
    if let Some(b) = &metrics.baseline {
        pipeline_vs_baseline.extend(comparison_rows("baseline", b));
        comparison_sources.push(rel(&run.baseline_model()));
    }
    let (agreement_rows, summary) = agreement(run, &index, &truth, &pipeline)?;
    let mut significance_groups = Vec::new();
    let mut significance_pairs = Vec::new();
    for (source, rep) in &stats {
        for t in &rep.tables {
            let m = t.metric.name();
            significance_groups.extend(t.summaries.iter().map(|s| SignificanceGroupRow {
                source: source.to_string(),
                metric: m.into(),
                group: s.name.clone(),
                n: s.n,
                mean: s.mean,
                std: s.std,
            }));
            significance_pairs.extend(t.pairs.iter().map(|p| SignificancePairRow {
                source: source.to_string(),
                metric: m.into(),
                group1: p.group1.clone(),
                group2: p.group2.clone(),
                q: p.q,
                p: p.p,
                inference: p.inference.label().into(),
            }));
        }
    }
    let mut agreement_sources = vec![rel(&inputs[1]), rel(&inputs[3]), rel(&inputs[4])];
    for s in &index.scenes {
        agreement_sources.push(format!("infer/{}.pgm", s.stem));
        agreement_sources.extend(s.truth.clone());
    }
    let tables = vec![
        TableEntry { file: STAGE_METRICS.into(), rows: stage_metrics.len(), sources: vec![rel(&inputs[0])] },
        TableEntry { file: PIPELINE_VS_BASELINE.into(), rows: pipeline_vs_baseline.len(), sources: comparison_sources },
        TableEntry { file: AGREEMENT.into(), rows: agreement_rows.len(), sources: agreement_sources },
        TableEntry { file: SIGNIFICANCE_GROUPS.into(), rows: significance_groups.len(), sources: vec![rel(&inputs[5]), rel(&inputs[6])] },
        TableEntry { file: SIGNIFICANCE_PAIRS.into(), rows: significance_pairs.len(), sources: vec![rel(&inputs[5]), rel(&inputs[6])] },
    ];
    Ok(ReportBundle {
        stage_metrics,
        pipeline_vs_baseline,
        agreement: agreement_rows,
        significance_groups,
        significance_pairs,
        index: BundleIndex { tables, agreement: summary },
    })
}

impl ReportBundle {
    /// Writes the bundle into `dir` and returns the files written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let index = dir.join(INDEX);
        fs::write(&index, serde_json::to_string_pretty(&self.index)? + "\n")?;
        Ok(vec![
            write_rows(&dir.join(STAGE_METRICS), &self.stage_metrics)?,
            write_rows(&dir.join(PIPELINE_VS_BASELINE), &self.pipeline_vs_baseline)?,
            write_rows(&dir.join(AGREEMENT), &self.agreement)?,
            write_rows(&dir.join(SIGNIFICANCE_GROUPS), &self.significance_groups)?,
            write_rows(&dir.join(SIGNIFICANCE_PAIRS), &self.significance_pairs)?,
            index,
        ])
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let files: Vec<PathBuf> =
            [STAGE_METRICS, PIPELINE_VS_BASELINE, AGREEMENT, SIGNIFICANCE_GROUPS, SIGNIFICANCE_PAIRS, INDEX].iter().map(|f| dir.join(f)).collect();
        require(&files)?;
        Ok(Self {
            stage_metrics: read_rows(&files[0])?,
            pipeline_vs_baseline: read_rows(&files[1])?,
            agreement: read_rows(&files[2])?,
            significance_groups: read_rows(&files[3])?,
            significance_pairs: read_rows(&files[4])?,
            index: read_json(&files[5])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(&mut []), None);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn pairing_is_greedy_by_iou() {
        // truth 1 meets pipeline 10 at IoU 0.8 and 11 at 6/14; truth 2 meets 11 at 0.5.
        let overlap = BTreeMap::from([((1, 10), 8), ((1, 11), 6), ((2, 11), 5)]);
        let t = BTreeMap::from([(1, 10), (2, 5)]);
        let p = BTreeMap::from([(10, 8), (11, 10)]);
        let pairs = pair_by_iou(&overlap, &t, &p, 0.5);
        assert_eq!(pairs.iter().map(|x| (x.0, x.1)).collect::<Vec<_>>(), vec![(1, 10), (2, 11)]);
        assert!((pairs[1].2 - 0.5).abs() < 1e-12);
    }
}
