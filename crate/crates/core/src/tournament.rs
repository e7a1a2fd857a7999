//! Per-stage model tournaments: train every candidate, rank them on the
//! validation split, keep the winner, and allow culling and replacing later.
//!
//! Ranking is a total order: selection metric descending, then fewer
//! parameters, then lower training cost, then candidate id. Failed candidates
//! rank after every successful one.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Instant;

use darwin_nn::{LayerSpec, Model, NnError, TrainHistory};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Classify,
    Segment,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Detect, Stage::Classify, Stage::Segment];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Detect => "detect",
            Stage::Classify => "classify",
            Stage::Segment => "segment",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CoreError::Invalid(format!("unknown stage `{s}` (detect, classify, segment)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Ap,
    Accuracy,
    Jaccard,
    GlobalAccuracy,
}

impl SelectionMetric {
    pub fn default_for(stage: Stage) -> Self {
        match stage {
            Stage::Detect => SelectionMetric::Ap,
            Stage::Classify => SelectionMetric::Accuracy,
            Stage::Segment => SelectionMetric::Jaccard,
        }
    }

    pub fn valid_for(self, stage: Stage) -> bool {
        matches!(
            (stage, self),
            (Stage::Detect, SelectionMetric::Ap)
                | (Stage::Classify, SelectionMetric::Accuracy)
                | (Stage::Segment, SelectionMetric::Jaccard | SelectionMetric::GlobalAccuracy)
        )
    }
}

/// Evaluation results; only the fields that apply to the stage are set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_accuracy: Option<f64>,
}

impl StageMetrics {
    pub fn get(&self, m: SelectionMetric) -> Option<f64> {
        match m {
            SelectionMetric::Ap => self.ap,
            SelectionMetric::Accuracy => self.accuracy,
            SelectionMetric::Jaccard => self.jaccard,
            SelectionMetric::GlobalAccuracy => self.global_accuracy,
        }
    }
}

/// What to train: a preset under a seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    pub id: String,
    pub preset: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub id: String,
    pub stage: Stage,
    pub preset: String,
    pub seed: u64,
    pub param_count: usize,
    /// Training work in millions of multiply-accumulates (forward and backward
    /// passes over every sample seen). Stands in for training time so that
    /// reports are reproducible; wall-clock time is kept in a separate file.
    pub train_mmac: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Selection value on the validation split; `None` when training failed.
    pub selection: Option<f64>,
    pub validation: Option<StageMetrics>,
    /// Observed on the test split, never used for ranking.
    pub test: Option<StageMetrics>,
    pub failure: Option<String>,
}

impl CandidateEntry {
    pub fn failed(&self) -> bool {
        self.failure.is_some() || self.selection.is_none_or(|v| !v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Failure,
    Metric,
    Params,
    Cost,
    Id,
}

/// Compares two candidates under the ranking order (`Less` means `a` ranks
/// higher) and lists the criteria consulted, the last one deciding.
pub fn rank_cmp(a: &CandidateEntry, b: &CandidateEntry) -> (Ordering, Vec<Criterion>) {
    let mut trail = vec![Criterion::Failure];
    let ord = a.failed().cmp(&b.failed());
    if ord != Ordering::Equal {
        return (ord, trail);
    }
    if !a.failed() {
        trail.push(Criterion::Metric);
        let ord = b.selection.unwrap().total_cmp(&a.selection.unwrap());
        if ord != Ordering::Equal {
            return (ord, trail);
        }
    }
    trail.push(Criterion::Params);
    let ord = a.param_count.cmp(&b.param_count);
    if ord != Ordering::Equal {
        return (ord, trail);
    }
    trail.push(Criterion::Cost);
    let ord = a.train_mmac.cmp(&b.train_mmac);
    if ord != Ordering::Equal {
        return (ord, trail);
    }
    trail.push(Criterion::Id);
    (a.id.cmp(&b.id), trail)
}

/// Why one candidate ranks directly above the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub higher: String,
    pub lower: String,
    pub consulted: Vec<Criterion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub metric: SelectionMetric,
    /// Rank 1 first.
    pub ranked: Vec<CandidateEntry>,
    pub winner: Option<String>,
    pub trail: Vec<Decision>,
}

impl StageResult {
    pub fn from_entries(stage: Stage, metric: SelectionMetric, mut entries: Vec<CandidateEntry>) -> Self {
        entries.sort_by(|a, b| rank_cmp(a, b).0);
        let trail = entries
            .windows(2)
            .map(|w| Decision { higher: w[0].id.clone(), lower: w[1].id.clone(), consulted: rank_cmp(&w[0], &w[1]).1 })
            .collect();
        let winner = entries.first().filter(|e| !e.failed()).map(|e| e.id.clone());
        StageResult { stage, metric, ranked: entries, winner, trail }
    }

    pub fn winner_entry(&self) -> Option<&CandidateEntry> {
        let id = self.winner.as_ref()?;
        self.ranked.iter().find(|e| &e.id == id)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TournamentReport {
    pub stages: Vec<StageResult>,
}

impl TournamentReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Inserts or replaces the result for its stage, keeping stage order.
    pub fn set(&mut self, result: StageResult) {
        self.stages.retain(|s| s.stage != result.stage);
        self.stages.push(result);
        self.stages.sort_by_key(|s| s.stage);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table, one block per stage.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let _ = writeln!(out, "stage {} (selected by {:?} on validation)", s.stage.name(), s.metric);
            let _ = writeln!(out, "{:>4}  {:<24} {:<16} {:>8} {:>10} {:>10} {:>10}", "rank", "candidate", "preset", "params", "mmac", "val", "test");
            for (i, e) in s.ranked.iter().enumerate() {
                let fmt = |m: Option<f64>| m.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                let test = e.test.as_ref().and_then(|t| t.get(s.metric));
                let val = if e.failed() { "failed".to_string() } else { fmt(e.selection) };
                let _ = writeln!(
                    out,
                    "{:>4}  {:<24} {:<16} {:>8} {:>10} {:>10} {:>10}",
                    i + 1,
                    e.id,
                    e.preset,
                    e.param_count,
                    e.train_mmac,
                    val,
                    fmt(test)
                );
            }
            let _ = writeln!(out, "winner: {}\n", s.winner.as_deref().unwrap_or("none"));
        }
        out
    }
}

/// Multiply-accumulates of one forward pass for a single item.
pub fn forward_macs(model: &Model) -> u64 {
    let shapes = model.shapes();
    let mut total = 0u64;
    for (i, layer) in model.layers().iter().enumerate() {
        let out: u64 = shapes[i].iter().product::<usize>() as u64;
        total += match *layer {
            LayerSpec::Conv2d { in_channels, kernel, .. } => out * (in_channels * kernel * kernel) as u64,
            LayerSpec::Dense { in_features, .. } => out * in_features as u64,
            _ => 0,
        };
    }
    total
}

/// A stage's training data and evaluation, as seen by the tournament.
pub trait StageRunner: Sync {
    fn stage(&self) -> Stage;
    fn build(&self, spec: &CandidateSpec) -> Result<Model>;
    fn train(&self, model: &mut Model, seed: u64) -> Result<TrainHistory>;
    fn train_len(&self) -> usize;
    fn evaluate_validation(&self, model: &Model) -> Result<StageMetrics>;
    fn evaluate_test(&self, model: &Model) -> Result<StageMetrics>;
}

/// A trained candidate: its entry, the model (absent on failure), and the
/// wall-clock training seconds.
pub struct Trained {
    pub entry: CandidateEntry,
    pub model: Option<Model>,
    pub seconds: f64,
}

fn is_divergence(e: &CoreError) -> bool {
    matches!(e, CoreError::Nn(NnError::NonFinite(_)) | CoreError::Diverged(_))
}

/// Trains and evaluates one candidate. Divergence is recorded as a failed
/// entry; any other error is returned.
pub fn run_candidate(runner: &dyn StageRunner, spec: &CandidateSpec, metric: SelectionMetric) -> Result<Trained> {
    let mut model = runner.build(spec)?;
    let mut entry = CandidateEntry {
        id: spec.id.clone(),
        stage: runner.stage(),
        preset: spec.preset.clone(),
        seed: spec.seed,
        param_count: model.param_count(),
        train_mmac: 0,
        epochs_run: 0,
        best_epoch: 0,
        selection: None,
        validation: None,
        test: None,
        failure: None,
    };
    let start = Instant::now();
    let history = match runner.train(&mut model, spec.seed) {
        Ok(h) => h,
        Err(e) if is_divergence(&e) => {
            log::warn!("candidate {} failed: {e}", spec.id);
            entry.failure = Some(e.to_string());
            return Ok(Trained { entry, model: None, seconds: start.elapsed().as_secs_f64() });
        }
        Err(e) => return Err(e),
    };
    let seconds = start.elapsed().as_secs_f64();
    entry.epochs_run = history.train_loss.len();
    entry.best_epoch = history.best_epoch;
    let samples = (entry.epochs_run * runner.train_len()) as u64;
    entry.train_mmac = 3 * forward_macs(&model) * samples / 1_000_000;
    if !model.all_finite() {
        entry.failure = Some("non-finite parameters after training".into());
        return Ok(Trained { entry, model: None, seconds });
    }
    let val = runner.evaluate_validation(&model)?;
    entry.selection = val.get(metric);
    if entry.selection.is_none() {
        return invalid(format!("metric {metric:?} is not produced by stage {}", runner.stage().name()));
    }
    entry.validation = Some(val);
    entry.test = Some(runner.evaluate_test(&model)?);
    Ok(Trained { entry, model: Some(model), seconds })
}

fn check_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for id in ids {
        if id.is_empty() || !seen.insert(id) {
            return invalid(format!("candidate id `{id}` is empty or duplicated"));
        }
    }
    Ok(())
}

/// Trains every candidate (on up to `jobs` threads) and ranks them. Models
/// are returned in the order of `candidates`.
pub fn run_stage_tournament(
    runner: &dyn StageRunner,
    candidates: &[CandidateSpec],
    metric: SelectionMetric,
    jobs: usize,
) -> Result<(StageResult, Vec<Trained>)> {
    if candidates.len() < 2 {
        return invalid(format!("a tournament needs at least 2 candidates, got {}", candidates.len()));
    }
    if !metric.valid_for(runner.stage()) {
        return invalid(format!("{metric:?} cannot rank the {} stage", runner.stage().name()));
    }
    check_ids(candidates.iter().map(|c| c.id.as_str()))?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Trained>>>> = Mutex::new((0..candidates.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, candidates.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                let Some(spec) = candidates.get(i) else { break };
                let result = run_candidate(runner, spec, metric);
                slots.lock().expect("no panics while holding the lock")[i] = Some(result);
            });
        }
    });
    let trained = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every candidate ran"))
        .collect::<Result<Vec<_>>>()?;
    let result = StageResult::from_entries(runner.stage(), metric, trained.iter().map(|t| t.entry.clone()).collect());
    Ok((result, trained))
}

/// Optionally removes a losing candidate, then trains `new` under the same
/// data and seeds policy and re-ranks. The winner changes only when the
/// newcomer ranks above it.
pub fn cull_and_replace(
    result: &StageResult,
    runner: &dyn StageRunner,
    cull: Option<&str>,
    new: &CandidateSpec,
) -> Result<(StageResult, Trained)> {
    if runner.stage() != result.stage {
        return invalid("runner and result belong to different stages");
    }
    check_ids(result.ranked.iter().map(|e| e.id.as_str()).chain([new.id.as_str()]))?;
    let mut entries = result.ranked.clone();
    if let Some(id) = cull {
        if result.winner.as_deref() == Some(id) {
            return invalid(format!("cannot cull the current winner `{id}`"));
        }
        let before = entries.len();
        entries.retain(|e| e.id != id);
        if entries.len() == before {
            return invalid(format!("no candidate `{id}` to cull"));
        }
    }
    let trained = run_candidate(runner, new, result.metric)?;
    entries.push(trained.entry.clone());
    Ok((StageResult::from_entries(result.stage, result.metric, entries), trained))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn entry(id: &str, selection: Option<f64>, params: usize, cost: u64) -> CandidateEntry {
        CandidateEntry {
            id: id.into(),
            stage: Stage::Classify,
            preset: "p".into(),
            seed: 0,
            param_count: params,
            train_mmac: cost,
            epochs_run: 1,
            best_epoch: 0,
            selection,
            validation: None,
            test: None,
            failure: None,
        }
    }

    #[test]
    fn higher_metric_wins() {
        let r = StageResult::from_entries(Stage::Classify, SelectionMetric::Accuracy, vec![entry("b", Some(0.8), 1, 1), entry("a", Some(0.9), 1, 1)]);
        assert_eq!(r.winner.as_deref(), Some("a"));
        assert_eq!(r.trail[0].consulted, vec![Criterion::Failure, Criterion::Metric]);
    }

    #[test]
    fn equal_metric_prefers_fewer_parameters() {
        let r = StageResult::from_entries(
            Stage::Classify,
            SelectionMetric::Accuracy,
            vec![entry("big", Some(1.0), 50_000, 1), entry("small", Some(1.0), 10_000, 9)],
        );
        assert_eq!(r.winner.as_deref(), Some("small"));
        assert_eq!(r.trail[0].consulted.last(), Some(&Criterion::Params));
    }

    #[test]
    fn failures_rank_last_and_never_win() {
        let mut f = entry("a", Some(1.0), 1, 1);
        f.failure = Some("nan".into());
        let r = StageResult::from_entries(Stage::Classify, SelectionMetric::Accuracy, vec![f.clone(), entry("z", Some(0.1), 9, 9)]);
        assert_eq!(r.ranked.last().unwrap().id, "a");
        assert_eq!(r.winner.as_deref(), Some("z"));
        let only = StageResult::from_entries(Stage::Classify, SelectionMetric::Accuracy, vec![f]);
        assert_eq!(only.winner, None);
    }

    #[test]
    fn metric_applicability() {
        assert!(SelectionMetric::GlobalAccuracy.valid_for(Stage::Segment));
        assert!(!SelectionMetric::Ap.valid_for(Stage::Segment));
        assert_eq!("classify".parse::<Stage>().unwrap(), Stage::Classify);
        assert!("cnn".parse::<Stage>().is_err());
    }
}
