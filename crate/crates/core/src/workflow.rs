//! On-disk experiment runs. Each step reads the previous steps' outputs from a
//! run directory, writes its own files, and records a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use darwin_nn::{save_model, Model};
use image::GrayImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{activation_map, evaluate_classifier, train_classifier_with_hook, LabeledPatches};
use crate::config::ExperimentConfig;
use crate::crops::{detector_crops, ground_truth_crops, CropSource, InstanceCrop};
use crate::detect::DetectorHyper;
use crate::error::{invalid, CoreError, Result};
use crate::mask::Mask;
use crate::morph::{morphometrics_table, LabeledMask, MorphometricRecord};
use crate::pipeline::{
    baseline_labels, baseline_model, evaluate_labels, evaluate_pipeline, reconstruct, run_pipeline, train_baseline, InstanceEntry,
    InstanceMap, Pipeline, PipelineConfig, PipelineEval, TruthScope,
};
use crate::pnm::{read_pgm, read_pgm16, write_pgm};
use crate::runners::{labeled, ClassifyRunner, CropSplits, DetectRunner, SegmentRunner};
use crate::stats::{significance_report, SignificanceReport};
use crate::synth::io::{load_dataset, read_scene, write_index, write_scene, Dataset, DatasetIndex, SceneManifest, INDEX_FILE};
use crate::synth::{generate_scenes, split_dataset, Scene};
use crate::tournament::{run_stage_tournament, Stage, StageResult, StageRunner, TournamentReport, Trained};

/// Layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn index(&self) -> PathBuf {
        self.dataset().join(INDEX_FILE)
    }
    pub fn tournament(&self) -> PathBuf {
        self.root.join("tournament")
    }
    pub fn models(&self) -> PathBuf {
        self.tournament().join("models")
    }
    pub fn report_json(&self) -> PathBuf {
        self.tournament().join("report.json")
    }
    pub fn pipeline_config(&self) -> PathBuf {
        self.tournament().join("pipeline.json")
    }
    pub fn baseline_model(&self) -> PathBuf {
        self.tournament().join("baseline.dnn")
    }
    pub fn infer(&self) -> PathBuf {
        self.root.join("infer")
    }
    pub fn morph(&self) -> PathBuf {
        self.root.join("morph")
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("stats")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    /// `path` relative to the run root when it lies inside it.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }
}

/// Fails with every path in `paths` that does not exist.
pub fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CoreError::Missing(missing))
    }
}

/// What a command read and wrote. Carries no timestamps so reruns reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(run: &RunDir, command: &str, config_text: &str, seed: u64, inputs: &[PathBuf], outputs: &[PathBuf]) -> Self {
        let rel = |v: &[PathBuf]| {
            let mut out: Vec<String> = v.iter().map(|p| run.relative(p)).collect();
            out.sort();
            out.dedup();
            out
        };
        Self { command: command.into(), config_sha256: sha256_hex(config_text.as_bytes()), seed, inputs: rel(inputs), outputs: rel(outputs) }
    }

    pub fn write(&self, run: &RunDir) -> Result<PathBuf> {
        fs::create_dir_all(run.manifests())?;
        let path = run.manifests().join(format!("{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| CoreError::Format { path: path.into(), detail: e.to_string() })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path.to_path_buf())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require(&[path.to_path_buf()])?;
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| CoreError::Format { path: path.into(), detail: e.to_string() })
}

/// Generates the scenes and split of `cfg` into `<run>/dataset`, replacing any
/// previous dataset there. Returns the files written.
pub fn generate(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let d = &cfg.dataset;
    let classes = d.resolve_classes()?;
    let scenes = generate_scenes(&classes, &d.scene, d.scenes, cfg.seed)?;
    let split = split_dataset(scenes.len(), d.ratios, cfg.seed)?;
    let dir = run.dataset();
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let scene_dir = dir.join("scenes");
    let mut outputs = Vec::new();
    let mut names = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let path = write_scene(&scene_dir, s)?;
        names.push(format!("scenes/{}.json", s.id));
        outputs.push(path);
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| names[i].clone()).collect::<Vec<_>>();
    let index = DatasetIndex {
        seed: cfg.seed,
        ratios: d.ratios,
        classes,
        scene: d.scene.clone(),
        scenes: names.clone(),
        train: pick(&split.train),
        validation: pick(&split.validation),
        test: pick(&split.test),
    };
    outputs.push(write_index(&dir, &index)?);
    Ok(outputs)
}

/// Loads the run's dataset and checks it was generated from `cfg`.
pub fn load_run_dataset(cfg: &ExperimentConfig, run: &RunDir) -> Result<Dataset> {
    require(&[run.index()])?;
    let ds = load_dataset(run.index())?;
    let same = ds.index.seed == cfg.seed
        && ds.index.classes == cfg.dataset.resolve_classes()?
        && ds.index.scene == cfg.dataset.scene
        && ds.index.scenes.len() == cfg.dataset.scenes
        && ds.index.ratios == cfg.dataset.ratios;
    if !same {
        return invalid(format!("{} was generated from a different configuration or seed; rerun gen", run.index().display()));
    }
    Ok(ds)
}

fn class_names(ds: &Dataset) -> Vec<String> {
    ds.index.classes.iter().map(|c| c.name.clone()).collect()
}

/// Wall-clock seconds per stage and candidate; kept apart from the report so
/// the report itself is reproducible.
pub type Timings = BTreeMap<String, BTreeMap<String, f64>>;

/// Training summary of the whole-scene baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub preset: String,
    pub param_count: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub truth: TruthScope,
}

/// One activation map written for the classifier winner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry {
    /// Training iteration, or `None` for the final model.
    pub iteration: Option<u64>,
    pub scene: String,
    pub instance_id: u32,
    pub class: String,
    pub file: String,
}

/// Number of test crops whose activation maps are saved.
pub const ACTIVATION_PROBES: usize = 4;

fn save_trained(run: &RunDir, trained: &[Trained]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(run.models())?;
    let mut out = Vec::new();
    for t in trained {
        if let Some(m) = &t.model {
            let path = run.models().join(format!("{}.dnn", t.entry.id));
            save_model(m, &path)?;
            out.push(path);
        }
    }
    Ok(out)
}

fn winner_model(run: &RunDir, report: &TournamentReport, stage: Stage) -> Result<(String, PathBuf)> {
    let id = report
        .stage(stage)
        .and_then(|s| s.winner.clone())
        .ok_or_else(|| CoreError::Invalid(format!("no {} winner yet; run the {} tournament first", stage.name(), stage.name())))?;
    let path = run.models().join(format!("{id}.dnn"));
    require(&[path.clone()])?;
    Ok((id, path))
}

/// Crops of every split from ground truth or from the detector winner.
pub fn stage_crops(cfg: &ExperimentConfig, ds: &Dataset, source: CropSource, detector: Option<&Model>) -> Result<CropSplits> {
    let p = &cfg.pipeline;
    let crops = |idx: &[usize]| -> Result<Vec<InstanceCrop>> {
        match (source, detector) {
            (CropSource::GroundTruth, _) => Ok(ground_truth_crops(&ds.scenes, idx, p.margin, p.patch_size)),
            (CropSource::Detector, Some(d)) => detector_crops(d, &ds.scenes, idx, &p.detect_params(), p.margin, p.patch_size),
            (CropSource::Detector, None) => invalid("detector crops need a trained detector"),
        }
    };
    let splits = CropSplits { train: crops(&ds.split.train)?, validation: crops(&ds.split.validation)?, test: crops(&ds.split.test)? };
    if splits.train.is_empty() || splits.validation.is_empty() {
        return invalid("no training or validation crops; the dataset has too few complete instances");
    }
    Ok(splits)
}

fn write_predictions(path: &Path, model: &Model, crops: &[InstanceCrop], ds: &Dataset, classes: &[String]) -> Result<PathBuf> {
    let labeled = LabeledPatches { patches: crops.iter().map(|c| &c.crop.patch).collect(), labels: crops.iter().map(|c| c.class_index).collect() };
    let (_, preds) = evaluate_classifier(model, &labeled)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["crop_id".to_string(), "scene".into(), "instance_id".into(), "true_class".into(), "predicted_class".into()];
    header.extend(classes.iter().map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for (i, (c, p)) in crops.iter().zip(&preds).enumerate() {
        let mut row = vec![i.to_string(), ds.scenes[c.scene].id.clone(), c.instance_id.to_string(), classes[c.class_index].clone(), p.class.clone()];
        row.extend(p.probabilities.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

/// Saves activation maps of the winner on the first test crops: at each
/// requested iteration (by replaying the winner's deterministic training) and
/// for the final model.
fn write_activations(
    run: &RunDir,
    cfg: &ExperimentConfig,
    runner: &ClassifyRunner,
    winner: &Trained,
    ds: &Dataset,
) -> Result<Vec<PathBuf>> {
    let Some(model) = &winner.model else { return Ok(vec![]) };
    let dir = run.tournament().join("activations");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let probes: Vec<&InstanceCrop> = runner.crops.test.iter().take(ACTIVATION_PROBES).collect();
    let mut snapshots: Vec<(Option<u64>, Vec<GrayImage>)> = Vec::new();
    let wanted = &cfg.classify.snapshot_iterations;
    if !wanted.is_empty() {
        let spec = cfg.classify.candidates.iter().find(|c| c.id == winner.entry.id).expect("winner comes from the roster");
        let mut replay = runner.build(spec)?;
        let mut err = None;
        let train = labeled(&runner.crops.train);
        let val = labeled(&runner.crops.validation);
        let mut tc = runner.train_cfg.clone();
        tc.seed = spec.seed;
        if wanted.contains(&0) {
            snapshots.push((Some(0), probes.iter().map(|c| activation_map(&replay, &c.crop.patch).map(|a| a.to_image())).collect::<Result<_>>()?));
        }
        train_classifier_with_hook(&mut replay, &train, &val, &tc, &mut |it, m| {
            if wanted.contains(&it) && err.is_none() {
                match probes.iter().map(|c| activation_map(m, &c.crop.patch).map(|a| a.to_image())).collect::<Result<Vec<_>>>() {
                    Ok(maps) => snapshots.push((Some(it), maps)),
                    Err(e) => err = Some(e),
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        if &replay != model {
            log::warn!("replayed training of {} did not reproduce the saved winner", winner.entry.id);
        }
        for it in wanted {
            if !snapshots.iter().any(|(i, _)| *i == Some(*it)) {
                log::warn!("iteration {it} was never reached; no activation snapshot");
            }
        }
    }
    snapshots.push((None, probes.iter().map(|c| activation_map(model, &c.crop.patch).map(|a| a.to_image())).collect::<Result<_>>()?));
    let classes = &runner.classes;
    let mut index = Vec::new();
    let mut out = Vec::new();
    for (it, maps) in snapshots {
        for (c, img) in probes.iter().zip(maps) {
            let tag = it.map_or_else(|| "final".to_string(), |i| format!("iter{i:06}"));
            let scene = &ds.scenes[c.scene].id;
            let file = format!("{tag}_{scene}_{:03}.pgm", c.instance_id);
            write_pgm(dir.join(&file), &img)?;
            out.push(dir.join(&file));
            index.push(ActivationEntry { iteration: it, scene: scene.clone(), instance_id: c.instance_id, class: classes[c.class_index].clone(), file });
        }
    }
    for c in &probes {
        let file = format!("patch_{}_{:03}.pgm", ds.scenes[c.scene].id, c.instance_id);
        write_pgm(dir.join(&file), &c.crop.patch)?;
        out.push(dir.join(file));
    }
    out.push(write_json(&dir.join("index.json"), &index)?);
    Ok(out)
}

/// Output of [`tournament`].
pub struct TournamentRun {
    pub report: TournamentReport,
    pub pipeline: Option<PipelineConfig>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// Runs the tournaments of `stages` (in stage order), keeping earlier results
/// of other stages, then trains the baseline when the segment stage ran and
/// assembles the pipeline once every stage has a winner.
pub fn tournament(cfg: &ExperimentConfig, run: &RunDir, stages: &[Stage], jobs: usize) -> Result<TournamentRun> {
    let ds = load_run_dataset(cfg, run)?;
    let classes = class_names(&ds);
    let size = cfg.dataset.scene.width;
    let mut inputs = vec![run.index()];
    let mut outputs = Vec::new();
    let mut report: TournamentReport = if run.report_json().exists() { read_json(&run.report_json())? } else { Default::default() };
    let timings_path = run.tournament().join("timings.json");
    let mut timings: Timings = if timings_path.exists() { read_json(&timings_path)? } else { Default::default() };
    fs::create_dir_all(run.models())?;
    let mut record = |report: &mut TournamentReport, result: StageResult, trained: &[Trained]| -> Result<Vec<PathBuf>> {
        timings.insert(result.stage.name().into(), trained.iter().map(|t| (t.entry.id.clone(), t.seconds)).collect());
        log::info!("{} winner: {}", result.stage.name(), result.winner.as_deref().unwrap_or("none"));
        report.set(result);
        save_trained(run, trained)
    };

    for stage in Stage::ALL.into_iter().filter(|s| stages.contains(s)) {
        match stage {
            Stage::Detect => {
                let hyper = DetectorHyper { train: cfg.detect.train.clone(), box_weight: cfg.detect.box_weight };
                let runner = DetectRunner {
                    scenes: &ds.scenes,
                    split: &ds.split,
                    size,
                    grid: cfg.detect.grid,
                    hyper,
                    eval: cfg.detect.eval.clone(),
                    iou_match: cfg.detect.iou_match,
                };
                let (result, trained) = run_stage_tournament(&runner, &cfg.detect.candidates, cfg.detect.metric, jobs)?;
                outputs.extend(record(&mut report, result, &trained)?);
            }
            Stage::Classify | Stage::Segment => {
                let source = if stage == Stage::Classify { cfg.classify.crop_source } else { cfg.segment.crop_source };
                let detector = match source {
                    CropSource::Detector => {
                        let (_, path) = winner_model(run, &report, Stage::Detect)?;
                        inputs.push(path.clone());
                        Some(darwin_nn::load_model(path)?)
                    }
                    CropSource::GroundTruth => None,
                };
                let crops = stage_crops(cfg, &ds, source, detector.as_ref())?;
                if stage == Stage::Classify {
                    let runner = ClassifyRunner { crops: &crops, classes: classes.clone(), size: cfg.pipeline.patch_size, train_cfg: cfg.classify.train.clone() };
                    let (result, trained) = run_stage_tournament(&runner, &cfg.classify.candidates, cfg.classify.metric, jobs)?;
                    if let Some(w) = result.winner.as_ref().and_then(|id| trained.iter().find(|t| &t.entry.id == id)) {
                        let path = run.tournament().join("predictions.csv");
                        outputs.push(write_predictions(&path, w.model.as_ref().expect("winner trained"), &crops.test, &ds, &classes)?);
                        outputs.extend(write_activations(run, cfg, &runner, w, &ds)?);
                    }
                    outputs.extend(record(&mut report, result, &trained)?);
                } else {
                    let runner = SegmentRunner { crops: &crops, size: cfg.pipeline.patch_size, train_cfg: cfg.segment.train.clone() };
                    let (result, trained) = run_stage_tournament(&runner, &cfg.segment.candidates, cfg.segment.metric, jobs)?;
                    outputs.extend(record(&mut report, result, &trained)?);
                }
            }
        }
    }

    if stages.contains(&Stage::Segment) && cfg.baseline.enabled {
        let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.scenes[i]).collect::<Vec<_>>();
        let mut model = baseline_model(size, classes.len(), cfg.seed)?;
        let mut tc = cfg.baseline.train.clone();
        tc.seed = cfg.seed;
        let h = train_baseline(&mut model, &pick(&ds.split.train), &pick(&ds.split.validation), cfg.pipeline.truth, &tc)?;
        save_model(&model, run.baseline_model())?;
        outputs.push(run.baseline_model());
        let summary = BaselineSummary {
            preset: crate::pipeline::BASELINE_PRESET.into(),
            param_count: model.param_count(),
            epochs_run: h.train_loss.len(),
            best_epoch: h.best_epoch,
            truth: cfg.pipeline.truth,
        };
        outputs.push(write_json(&run.tournament().join("baseline.json"), &summary)?);
    }

    outputs.push(write_json(&run.report_json(), &report)?);
    let txt = run.tournament().join("report.txt");
    fs::write(&txt, report.table())?;
    outputs.push(txt);
    outputs.push(write_json(&timings_path, &timings)?);

    let pipeline = if Stage::ALL.iter().all(|&s| report.stage(s).and_then(|r| r.winner.as_ref()).is_some()) {
        let mut models = Vec::new();
        for s in Stage::ALL {
            let (id, path) = winner_model(run, &report, s)?;
            models.push((darwin_nn::load_model(&path)?, PathBuf::from(format!("models/{id}.dnn"))));
        }
        let [d, c, s]: [(Model, PathBuf); 3] = models.try_into().map_err(|_| CoreError::Invalid("three stages".into()))?;
        let config = crate::pipeline::assemble_dnn(
            [(&d.0, d.1.clone()), (&c.0, c.1.clone()), (&s.0, s.1.clone())],
            &classes,
            cfg.pipeline.margin,
            cfg.pipeline.detect_params(),
        )?;
        config.save(run.pipeline_config())?;
        outputs.push(run.pipeline_config());
        Some(config)
    } else {
        None
    };
    Ok(TournamentRun { report, pipeline, inputs, outputs })
}

/// One scene processed by [`infer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferredScene {
    pub stem: String,
    /// Scene manifest with ground truth, relative to the run root.
    pub truth: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferIndex {
    pub scenes: Vec<InferredScene>,
    /// Inputs that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferMetrics {
    pub truth: TruthScope,
    pub scenes: usize,
    pub pipeline: PipelineEval,
    pub baseline: Option<PipelineEval>,
}

pub struct InferRun {
    pub index: InferIndex,
    pub metrics: Option<InferMetrics>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

enum InferInput {
    Scene(PathBuf),
    Image(PathBuf),
}

fn is_scene_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
        && fs::read_to_string(path).ok().is_some_and(|t| serde_json::from_str::<SceneManifest>(&t).is_ok())
}

fn list_inputs(path: &Path) -> Result<Vec<InferInput>> {
    require(&[path.to_path_buf()])?;
    if path.is_file() {
        return Ok(vec![if path.extension().is_some_and(|e| e == "json") { InferInput::Scene(path.into()) } else { InferInput::Image(path.into()) }]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    files.sort();
    let scenes: Vec<InferInput> = files.iter().filter(|p| is_scene_manifest(p)).map(|p| InferInput::Scene(p.clone())).collect();
    if !scenes.is_empty() {
        return Ok(scenes);
    }
    Ok(files.into_iter().filter(|p| p.extension().is_some_and(|e| e == "pgm")).map(InferInput::Image).collect())
}

/// Runs the assembled pipeline on the test split (no `input`), a scene
/// manifest, an image, or a directory of either. Unreadable inputs are
/// skipped and listed in the index.
pub fn infer(cfg: &ExperimentConfig, run: &RunDir, input: Option<&Path>) -> Result<InferRun> {
    require(&[run.pipeline_config()])?;
    let pcfg = PipelineConfig::load(run.pipeline_config())?;
    let pipeline = Pipeline::load(pcfg.clone(), run.tournament())?;
    let mut inputs = vec![run.pipeline_config(), run.tournament().join(&pcfg.detector), run.tournament().join(&pcfg.classifier), run.tournament().join(&pcfg.segmenter)];
    let items = match input {
        Some(p) => list_inputs(p)?,
        None => {
            let ds = load_run_dataset(cfg, run)?;
            ds.split.test.iter().map(|&i| InferInput::Scene(run.dataset().join(&ds.index.scenes[i]))).collect()
        }
    };
    let dir = run.infer();
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut index = InferIndex { scenes: vec![], skipped: vec![] };
    let mut outputs = Vec::new();
    let mut maps = Vec::new();
    let mut truths: Vec<Scene> = Vec::new();
    let mut detections = csv::Writer::from_path(dir.join("detections.csv"))?;
    detections.write_record(["scene", "id", "class", "probability", "x", "y", "w", "h", "score"])?;
    for item in items {
        let (path, loaded) = match &item {
            InferInput::Scene(p) => (p, read_scene(p).map(|s| (s.id.clone(), s.image.clone(), Some(s)))),
            InferInput::Image(p) => {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (p, read_pgm(p).map(|img| (stem, img, None)))
            }
        };
        inputs.push(path.clone());
        let (stem, image, truth) = match loaded {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                index.skipped.push((path.display().to_string(), e.to_string()));
                continue;
            }
        };
        if (image.width() as usize, image.height() as usize) != (pcfg.scene_size, pcfg.scene_size) {
            let why = format!("image is {}x{}, pipeline expects {}x{}", image.width(), image.height(), pcfg.scene_size, pcfg.scene_size);
            log::warn!("skipping {}: {why}", path.display());
            index.skipped.push((path.display().to_string(), why));
            continue;
        }
        let records = run_pipeline(&pipeline, &image)?;
        let map = reconstruct(pcfg.scene_size, pcfg.scene_size, &records)?;
        outputs.extend(map.write(&dir, &stem, &image)?);
        for e in map.entries() {
            detections.write_record([
                stem.clone(),
                e.id.to_string(),
                e.class.clone(),
                e.probability.to_string(),
                e.bbox.x.to_string(),
                e.bbox.y.to_string(),
                e.bbox.w.to_string(),
                e.bbox.h.to_string(),
                e.bbox.score.to_string(),
            ])?;
        }
        let has_truth = truth.is_some();
        index.scenes.push(InferredScene { stem, truth: has_truth.then(|| run.relative(path)) });
        if let Some(t) = truth {
            maps.push(map);
            truths.push(t);
        }
    }
    detections.flush()?;
    outputs.push(dir.join("detections.csv"));
    outputs.push(write_json(&dir.join("index.json"), &index)?);

    let metrics = if truths.is_empty() {
        None
    } else {
        let scope = cfg.pipeline.truth;
        let scene_refs: Vec<&Scene> = truths.iter().collect();
        let map_refs: Vec<&InstanceMap> = maps.iter().collect();
        let pipeline_eval = evaluate_pipeline(&map_refs, &scene_refs, &pcfg.classes, scope)?;
        let baseline = if run.baseline_model().is_file() {
            inputs.push(run.baseline_model());
            let model = darwin_nn::load_model(run.baseline_model())?;
            let labels = baseline_labels(&model, &scene_refs)?;
            let refs: Vec<&[u16]> = labels.iter().map(|l| l.as_slice()).collect();
            Some(evaluate_labels(&refs, &scene_refs, &pcfg.classes, scope)?)
        } else {
            None
        };
        let m = InferMetrics { truth: scope, scenes: truths.len(), pipeline: pipeline_eval, baseline };
        outputs.push(write_json(&dir.join("metrics.json"), &m)?);
        Some(m)
    };
    Ok(InferRun { index, metrics, inputs, outputs })
}

/// One morphometric row, keyed by scene and instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphRow {
    pub scene: String,
    pub instance_id: u32,
    pub class: String,
    pub area: f64,
    pub eccentricity: f64,
    pub circularity: f64,
    pub solidity: f64,
}

impl MorphRow {
    pub fn new(scene: &str, r: &MorphometricRecord) -> Self {
        Self {
            scene: scene.into(),
            instance_id: r.instance_id,
            class: r.class.clone(),
            area: r.area,
            eccentricity: r.eccentricity,
            circularity: r.circularity,
            solidity: r.solidity,
        }
    }

    pub fn record(&self) -> MorphometricRecord {
        MorphometricRecord {
            instance_id: self.instance_id,
            class: self.class.clone(),
            area: self.area,
            eccentricity: self.eccentricity,
            circularity: self.circularity,
            solidity: self.solidity,
        }
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

pub fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    require(&[path.to_path_buf()])?;
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Morphometrics of the complete instances of a scene.
pub fn truth_rows(scene: &Scene) -> Vec<MorphRow> {
    let items: Vec<LabeledMask> = scene
        .complete()
        .map(|i| LabeledMask { instance_id: i.id, class: i.class.clone(), mask: i.mask.clone() })
        .collect();
    morphometrics_table(&items, 1.0).records.iter().map(|r| MorphRow::new(&scene.id, r)).collect()
}

/// Morphometrics of every instance of a reconstructed map, classes taken
/// from `classes` by the predicted index.
pub fn map_rows(scene: &str, ids: &[u16], width: usize, entries: &[InstanceEntry]) -> Vec<MorphRow> {
    let height = if width == 0 { 0 } else { ids.len() / width };
    let items: Vec<LabeledMask> = entries
        .iter()
        .map(|e| LabeledMask { instance_id: e.id as u32, class: e.class.clone(), mask: Mask::from_fn(width, height, |x, y| ids[y * width + x] == e.id) })
        .collect();
    morphometrics_table(&items, 1.0).records.iter().map(|r| MorphRow::new(scene, r)).collect()
}

/// Instance map written by [`infer`]: ids and sidecar entries.
pub fn read_instance_map(dir: &Path, stem: &str) -> Result<(usize, Vec<u16>, Vec<InstanceEntry>)> {
    let (pgm, json) = (dir.join(format!("{stem}.pgm")), dir.join(format!("{stem}.json")));
    require(&[pgm.clone(), json.clone()])?;
    let (w, _, ids) = read_pgm16(&pgm)?;
    let entries: Vec<InstanceEntry> = read_json(&json)?;
    let known: std::collections::BTreeSet<u16> = entries.iter().map(|e| e.id).collect();
    if let Some(bad) = ids.iter().find(|&&i| i != 0 && !known.contains(&i)) {
        return Err(CoreError::Format { path: pgm, detail: format!("instance id {bad} has no sidecar entry") });
    }
    Ok((w as usize, ids, entries))
}

pub struct MorphRun {
    pub truth: Vec<MorphRow>,
    pub pipeline: Vec<MorphRow>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// Morphometrics of the inferred scenes: `truth.csv` from the complete
/// ground-truth instances of scenes that have truth, `pipeline.csv` from every
/// reconstructed instance.
pub fn morph(run: &RunDir) -> Result<MorphRun> {
    let index_path = run.infer().join("index.json");
    let index: InferIndex = read_json(&index_path)?;
    let mut inputs = vec![index_path];
    let (mut truth, mut pipeline) = (Vec::new(), Vec::new());
    for s in &index.scenes {
        let (w, ids, entries) = read_instance_map(&run.infer(), &s.stem)?;
        inputs.push(run.infer().join(format!("{}.pgm", s.stem)));
        inputs.push(run.infer().join(format!("{}.json", s.stem)));
        pipeline.extend(map_rows(&s.stem, &ids, w, &entries));
        if let Some(t) = &s.truth {
            let path = run.root().join(t);
            truth.extend(truth_rows(&read_scene(&path)?));
            inputs.push(path);
        }
    }
    let outputs = vec![write_rows(&run.morph().join("truth.csv"), &truth)?, write_rows(&run.morph().join("pipeline.csv"), &pipeline)?];
    Ok(MorphRun { truth, pipeline, inputs, outputs })
}

/// Morphometrics of standalone inputs: an instance map written by `infer`
/// (`<stem>.pgm` with a `<stem>.json` sidecar), an 8-bit mask PGM (one
/// instance per connected component, class `unlabeled`), or a directory of
/// them. Writes `<out>/<name>.csv`.
pub fn morph_inputs(path: &Path, out: &Path) -> Result<(Vec<MorphRow>, Vec<PathBuf>)> {
    require(&[path.to_path_buf()])?;
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> =
            fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<Vec<_>>>()?;
        v.retain(|p| p.extension().is_some_and(|e| e == "pgm") && !p.to_string_lossy().ends_with("_overlay.ppm"));
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut rows = Vec::new();
    for f in &files {
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dir = f.parent().unwrap_or(Path::new("."));
        if dir.join(format!("{stem}.json")).is_file() {
            let (w, ids, entries) = read_instance_map(dir, &stem)?;
            rows.extend(map_rows(&stem, &ids, w, &entries));
        } else {
            let img = read_pgm(f)?;
            let mask = Mask::from_fn(img.width() as usize, img.height() as usize, |x, y| img.get_pixel(x as u32, y as u32).0[0] > 0);
            let items: Vec<LabeledMask> = crate::morph::connected_components(&mask)
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut m = Mask::new(mask.width(), mask.height());
                    for &(x, y) in r.pixels() {
                        m.set(x as usize, y as usize, true);
                    }
                    LabeledMask { instance_id: i as u32 + 1, class: "unlabeled".into(), mask: m }
                })
                .collect();
            rows.extend(morphometrics_table(&items, 1.0).records.iter().map(|r| MorphRow::new(&stem, r)));
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "morph".into());
    let csv = write_rows(&out.join(format!("{name}.csv")), &rows)?;
    Ok((rows, vec![csv]))
}

/// Group summary row of a significance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub metric: String,
    pub group: String,
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

/// Pairwise row of a significance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub metric: String,
    pub group1: String,
    pub group2: String,
    #[serde(rename = "Q")]
    pub q: f64,
    pub p: f64,
    pub inference: String,
}

/// Writes `groups.csv`, `pairs.csv` and `summary.json` for one morphometric table.
pub fn write_significance(dir: &Path, report: &SignificanceReport) -> Result<Vec<PathBuf>> {
    let mut groups = Vec::new();
    let mut pairs = Vec::new();
    for t in &report.tables {
        let m = t.metric.name();
        groups.extend(t.summaries.iter().map(|s| GroupRow { metric: m.into(), group: s.name.clone(), n: s.n, mean: s.mean, std: s.std }));
        pairs.extend(t.pairs.iter().map(|p| PairRow {
            metric: m.into(),
            group1: p.group1.clone(),
            group2: p.group2.clone(),
            q: p.q,
            p: p.p,
            inference: p.inference.label().into(),
        }));
    }
    Ok(vec![
        write_rows(&dir.join("groups.csv"), &groups)?,
        write_rows(&dir.join("pairs.csv"), &pairs)?,
        write_json(&dir.join("summary.json"), report)?,
    ])
}

pub struct StatsRun {
    pub reports: Vec<(String, SignificanceReport)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// Tukey–Kramer tables for each morphometrics CSV, written to
/// `<out>/<csv stem>/`. Without explicit inputs, the run's `truth.csv` and
/// `pipeline.csv` are used.
pub fn stats(run: &RunDir, csvs: &[PathBuf], alpha: f64) -> Result<StatsRun> {
    let csvs: Vec<PathBuf> = if csvs.is_empty() { vec![run.morph().join("truth.csv"), run.morph().join("pipeline.csv")] } else { csvs.to_vec() };
    require(&csvs)?;
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for path in &csvs {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let rows: Vec<MorphRow> = read_rows(path)?;
        let records: Vec<MorphometricRecord> = rows.iter().map(MorphRow::record).collect();
        let report = significance_report(&records, alpha).map_err(|e| CoreError::Invalid(format!("{}: {e}", path.display())))?;
        outputs.extend(write_significance(&run.stats().join(&name), &report)?);
        reports.push((name, report));
    }
    Ok(StatsRun { reports, inputs: csvs, outputs })
}
