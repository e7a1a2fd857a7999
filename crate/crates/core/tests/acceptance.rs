//! Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
//! arguments to run a subset (`cargo test --test acceptance -- 6 7`).

mod oracle;

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use darwin_core::classify::{build_classifier, train_classifier};
use darwin_core::config::ExperimentConfig;
use darwin_core::crops::detector_crops;
use darwin_core::detect::{build_detector, train_detector, DetectParams, DetectorHyper};
use darwin_core::morph::{morphometrics, Region};
use darwin_core::pipeline::{
    baseline_labels, baseline_model, evaluate_labels, evaluate_pipeline, reconstruct, run_pipeline, train_baseline, InstanceMap, Pipeline,
    PipelineConfig, TruthScope,
};
use darwin_core::report::{build_report, ReportBundle};
use darwin_core::runners::{labeled, masked};
use darwin_core::segment::{build_segmenter, train_segmenter};
use darwin_core::stats::{significance_report, studentized_range_sf, tukey_kramer, GroupSample, Inference, Metric};
use darwin_core::synth::io::{read_scene, write_scene};
use darwin_core::synth::{generate_scenes, split_dataset, virus_classes, Scene, SceneConfig};
use darwin_core::tournament::{rank_cmp, CandidateEntry, Criterion, Stage, StageMetrics, StageResult, TournamentReport};
use darwin_core::verify::check_all_presets;
use darwin_core::workflow::{self, map_rows, truth_rows, RunDir, RunManifest};
use darwin_nn::{load_model, save_model, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

/// The shipped desk configuration, run end to end once and shared by several criteria.
struct DeskRun {
    _dir: TempDir,
    cfg: ExperimentConfig,
    run: RunDir,
    report: TournamentReport,
    tournament_seconds: f64,
    infer: workflow::InferRun,
    timings: BTreeMap<String, BTreeMap<String, f64>>,
}

fn desk_run() -> Result<DeskRun, String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::parse(DESK_CONFIG).map_err(|e| e.to_string())?;
    cfg.out_dir = dir.path().to_path_buf();
    let run = RunDir::new(dir.path());
    let e = |e: darwin_core::CoreError| e.to_string();
    workflow::generate(&cfg, &run).map_err(e)?;
    let start = Instant::now();
    let t = workflow::tournament(&cfg, &run, &Stage::ALL, 1).map_err(e)?;
    let tournament_seconds = start.elapsed().as_secs_f64();
    let infer = workflow::infer(&cfg, &run, None).map_err(e)?;
    workflow::morph(&run).map_err(e)?;
    workflow::stats(&run, &[], cfg.pipeline.alpha).map_err(e)?;
    build_report(&run).map_err(e)?.write(&run.report()).map_err(e)?;
    let timings = serde_json::from_str(&fs::read_to_string(run.tournament().join("timings.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(DeskRun { _dir: dir, cfg, run, report: t.report, tournament_seconds, infer, timings })
}

fn stage_seconds(d: &DeskRun, stage: Stage) -> f64 {
    d.timings.get(stage.name()).map_or(0.0, |m| m.values().sum())
}

fn winner(d: &DeskRun, stage: Stage) -> Result<&CandidateEntry, String> {
    d.report.stage(stage).and_then(|s| s.winner_entry()).ok_or_else(|| format!("no {} winner", stage.name()))
}

// 1. Every shipped preset passes the finite-difference check within a minute.
fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let checks = check_all_presets(1e-4).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    let names: Vec<String> = checks.iter().map(|c| format!("{}={:.1e}", c.preset, c.max_relative_error)).collect();
    check(worst < 1e-3 && secs < 60.0, format!("max rel err {worst:.2e} over {} presets in {secs:.1}s ({})", checks.len(), names.join(", ")))
}

// 2. Winning detector: validation AP at IoU 0.5.
fn detection(d: &DeskRun) -> Outcome {
    let w = winner(d, Stage::Detect)?;
    let ap = w.validation.as_ref().and_then(|m| m.ap).unwrap_or(0.0);
    let secs = stage_seconds(d, Stage::Detect);
    check(ap >= 0.90 && secs <= 600.0, format!("winner {} validation AP {ap:.4} (>= 0.90), detector training {secs:.0}s (<= 600)", w.id))
}

const CELL_CONFIG: &str = r#"
out_dir = "unused"
seed = 4

[dataset]
classes = "cell"
scale = 0.75
scenes = 200

[dataset.scene]
width = 128
height = 128
count_target = 8
overlap_fraction = 0.25

[detect]
grid = 8
candidates = [{ id = "d1", preset = "shallow", seed = 1 }, { id = "d2", preset = "deep", seed = 1 }]

[classify]
candidates = [{ id = "cls-two", preset = "two_conv", seed = 1 }, { id = "cls-four", preset = "four_conv", seed = 1 }]

[segment]
candidates = [{ id = "s1", preset = "unet_small", seed = 1 }, { id = "s2", preset = "unet_large", seed = 1 }]

[baseline]
enabled = false
"#;

// 3. Winning classifier test accuracy on virus crops (desk run) and cell crops.
fn classification(d: &DeskRun) -> Outcome {
    let w = winner(d, Stage::Classify)?;
    let virus = w.test.as_ref().and_then(|m| m.accuracy).unwrap_or(0.0);
    let virus_secs = stage_seconds(d, Stage::Classify);

    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::parse(CELL_CONFIG).map_err(|e| e.to_string())?;
    cfg.out_dir = dir.path().to_path_buf();
    let run = RunDir::new(dir.path());
    workflow::generate(&cfg, &run).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let t = workflow::tournament(&cfg, &run, &[Stage::Classify], 1).map_err(|e| e.to_string())?;
    let cell_secs = start.elapsed().as_secs_f64();
    let cw = t.report.stage(Stage::Classify).and_then(|s| s.winner_entry()).ok_or("no cell classifier winner")?;
    let cell = cw.test.as_ref().and_then(|m| m.accuracy).unwrap_or(0.0);
    check(
        virus >= 0.95 && cell >= 0.90 && virus_secs <= 600.0 && cell_secs <= 600.0,
        format!("virus {} test accuracy {virus:.4} (>= 0.95, {virus_secs:.0}s); cell {} test accuracy {cell:.4} (>= 0.90, {cell_secs:.0}s)", w.id, cw.id),
    )
}

// 4. Composed pipeline pooled Jaccard on the held-out split.
fn segmentation_pipeline(d: &DeskRun) -> Outcome {
    let m = d.infer.metrics.as_ref().ok_or("no metrics for the test split")?;
    let secs = d.tournament_seconds;
    check(
        m.pipeline.jaccard >= 0.75 && secs <= 900.0,
        format!("pipeline pooled Jaccard {:.4} on {} test scenes (>= 0.75), tournament with baseline {secs:.0}s (<= 900)", m.pipeline.jaccard, m.scenes),
    )
}

/// Epochs given to the segmenter and to the whole-scene baseline in each repetition.
const REP_EPOCHS: usize = 15;
const REP_SCENES: usize = 200;

/// One repetition of pipeline versus whole-scene baseline on overlapping scenes.
fn repetition(seed: u64) -> Result<(f64, f64, f64), String> {
    let e = |e: darwin_core::CoreError| e.to_string();
    let classes: Vec<_> = virus_classes().iter().map(|c| c.scaled(0.75)).collect();
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    let cfg = SceneConfig { width: 128, height: 128, count_target: 8, overlap_fraction: 0.35, border_fraction: 0.05, ..Default::default() };
    let scenes = generate_scenes(&classes, &cfg, REP_SCENES, 100 + seed).map_err(e)?;
    let incomplete = scenes.iter().map(Scene::overlap_fraction).sum::<f64>() / scenes.len() as f64;
    let split = split_dataset(scenes.len(), "6:3:1".parse()?, seed).map_err(e)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &scenes[i]).collect::<Vec<_>>();
    let (train, val, test) = (pick(&split.train), pick(&split.validation), pick(&split.test));

    let mut det = build_detector("shallow", 128, 8, seed, "d").map_err(e)?;
    let mut dh = DetectorHyper::default();
    dh.train.seed = seed;
    train_detector(&mut det, &train, &val, &dh).map_err(e)?;
    let dp = DetectParams::default();
    let (patch, margin) = (48, 0.1);
    let tr = detector_crops(&det, &scenes, &split.train, &dp, margin, patch).map_err(e)?;
    let va = detector_crops(&det, &scenes, &split.validation, &dp, margin, patch).map_err(e)?;
    let tc = TrainConfig { epochs: REP_EPOCHS, batch_size: 16, lr: 0.01, momentum: 0.9, patience: 6, seed };
    let mut cls = build_classifier("two_conv", patch, &names, seed, "c").map_err(e)?;
    train_classifier(&mut cls, &labeled(&tr), &labeled(&va), &tc).map_err(e)?;
    let mut seg = build_segmenter("unet_small", patch, seed, "s").map_err(e)?;
    train_segmenter(&mut seg, &masked(&tr), &masked(&va), &tc).map_err(e)?;
    let pcfg = PipelineConfig {
        detector: "d".into(),
        classifier: "c".into(),
        segmenter: "s".into(),
        classes: names.clone(),
        scene_size: 128,
        patch_size: patch,
        margin,
        detect: dp,
    };
    let p = Pipeline::new(pcfg, det, cls, seg).map_err(e)?;
    let maps: Vec<InstanceMap> = test.iter().map(|s| reconstruct(128, 128, &run_pipeline(&p, &s.image)?)).collect::<Result<_, _>>().map_err(e)?;
    let pipeline = evaluate_pipeline(&maps.iter().collect::<Vec<_>>(), &test, &names, TruthScope::Complete).map_err(e)?.jaccard;

    let mut base = baseline_model(128, names.len(), seed).map_err(e)?;
    let bt = TrainConfig { epochs: REP_EPOCHS, batch_size: 8, lr: 0.01, momentum: 0.9, patience: 6, seed };
    train_baseline(&mut base, &train, &val, TruthScope::Complete, &bt).map_err(e)?;
    let labels = baseline_labels(&base, &test).map_err(e)?;
    let refs: Vec<&[u16]> = labels.iter().map(Vec::as_slice).collect();
    let baseline = evaluate_labels(&refs, &test, &names, TruthScope::Complete).map_err(e)?.jaccard;
    Ok((incomplete, pipeline, baseline))
}

// 5. Pipeline versus single-stage baseline over five seeded repetitions.
fn architecture() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut min_incomplete: f64 = 1.0;
    let mut parts = Vec::new();
    for seed in 1..=5 {
        let (inc, p, b) = repetition(seed)?;
        min_incomplete = min_incomplete.min(inc);
        wins += (p >= b) as usize;
        parts.push(format!("{p:.3}/{b:.3}"));
    }
    check(
        wins >= 4 && min_incomplete >= 0.25,
        format!(
            "pipeline >= baseline in {wins}/5 reps (pipeline/baseline: {}), incomplete fraction >= {min_incomplete:.3}, {REP_EPOCHS} epochs each, {:.0}s",
            parts.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn region(pixels: Vec<(i64, i64)>) -> Region {
    Region::from_pixels(pixels).expect("non-empty fixture")
}

/// Pixel-center rasterization of an ellipse with semi-axes `a`, `b` rotated by `theta`.
fn ellipse(a: f64, b: f64, theta: f64) -> Region {
    let r = a.ceil() as i64 + 2;
    let (c, s) = (theta.cos(), theta.sin());
    let mut px = Vec::new();
    for y in -r..=r {
        for x in -r..=r {
            let (fx, fy) = (x as f64 + 0.5 - 0.3, y as f64 + 0.5 - 0.7);
            let (u, v) = (c * fx + s * fy, -s * fx + c * fy);
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                px.push((x, y));
            }
        }
    }
    region(px)
}

// 6. Morphometrics fixtures.
fn morphometrics_fixtures() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    // Equivalent diameter 2·sqrt(a·b) = 2·sqrt(800) ≈ 56.6 px.
    for theta in [0.0, 0.3, PI / 4.0, 1.1] {
        let rec = morphometrics(&ellipse(40.0, 20.0, theta));
        ok &= (rec.eccentricity - 0.75f64.sqrt()).abs() <= 0.02;
        notes.push(format!("ellipse@{theta:.2} e={:.4}", rec.eccentricity));
    }
    let disk = morphometrics(&ellipse(32.0, 32.0, 0.0));
    ok &= (0.95..=1.05).contains(&disk.circularity) && disk.solidity >= 0.98;
    notes.push(format!("disk r=32 circularity={:.4} solidity={:.4}", disk.circularity, disk.solidity));
    let row = morphometrics(&region(vec![(0, 0), (1, 0)]));
    ok &= row.eccentricity == 3f64.sqrt() / 2.0;
    notes.push(format!("1x2 row e={}", row.eccentricity));
    let dot = morphometrics(&region(vec![(3, 4)]));
    ok &= dot.eccentricity == 0.0 && dot.solidity == 1.0 && dot.circularity == PI / 4.0;
    notes.push(format!("single pixel e={} solidity={} circularity={}", dot.eccentricity, dot.solidity, dot.circularity));
    check(ok, notes.join("; "))
}

fn noisy_group(rng: &mut ChaCha8Rng, shift: f64) -> Vec<f64> {
    let n = rng.random_range(2..15);
    let spread = rng.random_range(0.2..3.0);
    (0..n).map(|_| shift + spread * rng.random_range(-1.0..1.0)).collect()
}

// 7. Studentized range against Monte Carlo, and k = 2 Tukey against the pooled t test.
fn statistics() -> Outcome {
    let qs = [1.0, 2.0, 3.0, 4.0, 5.0];
    let mut worst: f64 = 0.0;
    let mut seed = 0;
    for k in [2, 3, 5, 6] {
        for df in [10.0, 30.0, 100.0] {
            seed += 1;
            let mc = oracle::mc_range_sf(k, df, &qs, 10_000_000, seed);
            for (q, m) in qs.iter().zip(&mc) {
                let sf = studentized_range_sf(*q, k, df).map_err(|e| e.to_string())?;
                worst = worst.max((sf - m).abs());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    for _ in 0..1000 {
        let shift = rng.random_range(0.0..2.0);
        let a = noisy_group(&mut rng, 0.0);
        let b = noisy_group(&mut rng, shift);
        let tk = tukey_kramer(&[GroupSample::new("a", a.clone()), GroupSample::new("b", b.clone())], 0.05).map_err(|e| e.to_string())?;
        let (_, _, p) = oracle::pooled_t(&a, &b);
        agree += (tk[0].inference == Inference::from_p(p, 0.05)) as usize;
    }
    check(worst <= 2e-3 && agree == 1000, format!("max |quadrature - MC| {worst:.2e} over 60 grid points (<= 2e-3); k=2 inference agrees with pooled t in {agree}/1000"))
}

/// Test scenes for one discrimination run: the desk scene settings under a fresh seed.
fn discrimination_run(d: &DeskRun, p: &Pipeline, seed: u64) -> Result<(f64, f64, Vec<f64>, Vec<f64>, bool), String> {
    let e = |e: darwin_core::CoreError| e.to_string();
    let classes = d.cfg.dataset.resolve_classes().map_err(e)?;
    let scenes = generate_scenes(&classes, &d.cfg.dataset.scene, 30, 5000 + seed).map_err(e)?;
    let (mut truth, mut piped) = (Vec::new(), Vec::new());
    for s in &scenes {
        truth.extend(truth_rows(s));
        let map = reconstruct(s.width(), s.height(), &run_pipeline(p, &s.image).map_err(e)?).map_err(e)?;
        piped.extend(map_rows(&s.id, &map.ids, map.width, &map.entries()));
    }
    let area = |rows: &[workflow::MorphRow]| -> Result<(f64, Inference), String> {
        let recs: Vec<_> = rows.iter().map(workflow::MorphRow::record).collect();
        let rep = significance_report(&recs, 0.05).map_err(e)?;
        let pair = rep.table(Metric::Area).and_then(|t| t.pairs.first()).ok_or("no area comparison")?;
        Ok((pair.p, pair.inference))
    };
    let ((pt, it), (pp, ip)) = (area(&truth)?, area(&piped)?);
    let by_class = |c: &str| truth.iter().filter(|r| r.class == c).map(|r| r.area).collect::<Vec<f64>>();
    Ok((pt, pp, by_class(&classes[0].name), by_class(&classes[1].name), it == ip))
}

// 8. Area differences are found in both the truth and the pipeline tables.
fn discrimination(d: &DeskRun) -> Outcome {
    let config = PipelineConfig::load(d.run.pipeline_config()).map_err(|e| e.to_string())?;
    let p = Pipeline::load(config, d.run.tournament()).map_err(|e| e.to_string())?;
    let (mut both, mut agree) = (0, 0);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut worst_p: f64 = 0.0;
    for seed in 0..10 {
        let (pt, pp, ca, cb, same) = discrimination_run(d, &p, seed)?;
        both += (pt < 0.05 && pp < 0.05) as usize;
        agree += same as usize;
        worst_p = worst_p.max(pt).max(pp);
        a.extend(ca);
        b.extend(cb);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ss = |v: &[f64]| v.iter().map(|x| (x - mean(v)).powi(2)).sum::<f64>();
    let pooled_sd = ((ss(&a) + ss(&b)) / (a.len() + b.len() - 2) as f64).sqrt();
    let separation = (mean(&a) - mean(&b)).abs() / pooled_sd;
    check(
        separation >= 2.0 && both == 10 && agree >= 9,
        format!("area separation {separation:.2} pooled SD (>= 2); p < 0.05 in both tables in {both}/10 runs (largest p {worst_p:.1e}); area labels agree in {agree}/10"),
    )
}

const TINY_CONFIG: &str = r#"
out_dir = "unused"
seed = 11

[dataset]
classes = "virus"
scale = 0.5
scenes = 20

[dataset.scene]
width = 64
height = 64
count_target = 6

[detect]
grid = 4
train = { epochs = 10, batch_size = 4, lr = 0.002, momentum = 0.9, patience = 3, seed = 0 }
candidates = [{ id = "d1", preset = "shallow", seed = 1 }, { id = "d2", preset = "deep", seed = 1 }]

[classify]
train = { epochs = 4, batch_size = 8, lr = 0.01, momentum = 0.9, patience = 2, seed = 0 }
candidates = [{ id = "c1", preset = "two_conv", seed = 1 }, { id = "c2", preset = "four_conv", seed = 1 }]

[segment]
train = { epochs = 2, batch_size = 8, lr = 0.01, momentum = 0.9, patience = 2, seed = 0 }
candidates = [{ id = "s1", preset = "unet_small", seed = 1 }, { id = "s2", preset = "unet_small", seed = 2 }]

[pipeline]
patch_size = 16

[baseline]
enabled = false
"#;

fn tournament_bytes() -> Result<Vec<u8>, String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::parse(TINY_CONFIG).map_err(|e| e.to_string())?;
    cfg.out_dir = dir.path().to_path_buf();
    let run = RunDir::new(dir.path());
    workflow::generate(&cfg, &run).map_err(|e| e.to_string())?;
    workflow::tournament(&cfg, &run, &Stage::ALL, 1).map_err(|e| e.to_string())?;
    fs::read(run.report_json()).map_err(|e| e.to_string())
}

/// Documented order: failures last, higher metric, fewer parameters, less
/// training work, then id. Returns the ordering and the criteria consulted.
fn documented_order(a: &CandidateEntry, b: &CandidateEntry) -> (Ordering, Vec<Criterion>) {
    let failed = |e: &CandidateEntry| e.failure.is_some() || !e.selection.is_some_and(f64::is_finite);
    let mut steps: Vec<(Criterion, Ordering)> = vec![(Criterion::Failure, failed(a).cmp(&failed(b)))];
    if !failed(a) && !failed(b) {
        steps.push((Criterion::Metric, b.selection.unwrap().partial_cmp(&a.selection.unwrap()).unwrap()));
    }
    steps.push((Criterion::Params, a.param_count.cmp(&b.param_count)));
    steps.push((Criterion::Cost, a.train_mmac.cmp(&b.train_mmac)));
    steps.push((Criterion::Id, a.id.cmp(&b.id)));
    let mut consulted = Vec::new();
    for (c, o) in steps {
        consulted.push(c);
        if o != Ordering::Equal {
            return (o, consulted);
        }
    }
    (Ordering::Equal, consulted)
}

fn random_entry(rng: &mut ChaCha8Rng, id: String) -> CandidateEntry {
    let selection = match rng.random_range(0..6) {
        0 => None,
        1 => Some(f64::NAN),
        k => Some([0.5, 0.75, 0.9, 1.0][k - 2]),
    };
    CandidateEntry {
        id,
        stage: Stage::Classify,
        preset: "two_conv".into(),
        seed: 0,
        param_count: [100, 200, 300][rng.random_range(0..3)],
        train_mmac: rng.random_range(1..3),
        epochs_run: 1,
        best_epoch: 0,
        selection,
        validation: selection.map(|v| StageMetrics { accuracy: Some(v), ..Default::default() }),
        test: None,
        failure: rng.random_bool(0.1).then(|| "diverged".to_string()),
    }
}

// 9. Reproducible reports and a total, documented selection order.
fn tournament_order() -> Outcome {
    let first = tournament_bytes()?;
    let second = tournament_bytes()?;
    let identical = first == second;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut violations = Vec::new();
    let mut fired: BTreeMap<String, usize> = BTreeMap::new();
    for tuple in 0..1000 {
        let n = rng.random_range(2..7);
        let mut ids: Vec<String> = (0..10).map(|i| format!("cand{i}")).collect();
        ids.shuffle(&mut rng);
        let entries: Vec<CandidateEntry> = ids.into_iter().take(n).map(|id| random_entry(&mut rng, id)).collect();
        for a in &entries {
            for b in &entries {
                let (got, trail) = rank_cmp(a, b);
                let (want, want_trail) = documented_order(a, b);
                if got != want || trail != want_trail || got != rank_cmp(b, a).0.reverse() || (a.id != b.id && got == Ordering::Equal) {
                    violations.push(format!("tuple {tuple}: {} vs {}", a.id, b.id));
                }
                for c in entries.iter() {
                    if rank_cmp(a, b).0 == Ordering::Less && rank_cmp(b, c).0 == Ordering::Less && rank_cmp(a, c).0 != Ordering::Less {
                        violations.push(format!("tuple {tuple}: intransitive {} {} {}", a.id, b.id, c.id));
                    }
                }
            }
        }
        let ranked = StageResult::from_entries(Stage::Classify, darwin_core::tournament::SelectionMetric::Accuracy, entries.clone());
        let mut shuffled = entries.clone();
        shuffled.shuffle(&mut rng);
        let again = StageResult::from_entries(Stage::Classify, darwin_core::tournament::SelectionMetric::Accuracy, shuffled);
        // Compared by id: entries holding a NaN score never equal themselves.
        let ids = |r: &StageResult| r.ranked.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
        if ids(&ranked) != ids(&again) || ranked.trail != again.trail || ranked.winner != again.winner {
            violations.push(format!("tuple {tuple}: ranking depends on input order"));
        }
        for d in &ranked.trail {
            *fired.entry(format!("{:?}", d.consulted.last().unwrap())).or_default() += 1;
        }
        let expected_winner = ranked.ranked.first().filter(|e| e.failure.is_none() && e.selection.is_some_and(f64::is_finite)).map(|e| e.id.clone());
        if ranked.winner != expected_winner {
            violations.push(format!("tuple {tuple}: winner {:?} vs {expected_winner:?}", ranked.winner));
        }
    }
    let every_rule_fired = ["Failure", "Metric", "Params", "Cost", "Id"].iter().all(|k| fired.get(*k).copied().unwrap_or(0) > 0);
    check(
        identical && violations.is_empty() && every_rule_fired,
        format!(
            "repeat run report byte-identical: {identical} ({} bytes); 1000 fuzz tuples, {} violations{}; deciding rule counts {fired:?}",
            first.len(),
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).map(|r| r.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect()).unwrap_or_default();
    v.sort();
    v
}

// 10. Model files, scene manifests, run manifests and report bundles round-trip bit-exactly.
fn round_trips(d: &DeskRun) -> Outcome {
    let scratch = TempDir::new().map_err(|e| e.to_string())?;
    let e = |e: darwin_core::CoreError| e.to_string();
    let mut mismatches = Vec::new();

    let models: Vec<PathBuf> = files_in(&d.run.models()).into_iter().chain([d.run.baseline_model()]).collect();
    for m in &models {
        let model = load_model(m).map_err(|e| e.to_string())?;
        let copy = scratch.path().join("copy.dnn");
        save_model(&model, &copy).map_err(|e| e.to_string())?;
        if fs::read(m).ok() != fs::read(&copy).ok() || load_model(&copy).ok().as_ref() != Some(&model) {
            mismatches.push(m.display().to_string());
        }
    }

    let scene_dir = d.run.dataset().join("scenes");
    let manifests: Vec<PathBuf> = files_in(&scene_dir).into_iter().filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
    let out = scratch.path().join("scenes");
    fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    for m in &manifests {
        let scene = read_scene(m).map_err(e)?;
        let written = write_scene(&out, &scene).map_err(e)?;
        let stem = m.file_stem().unwrap().to_string_lossy().into_owned();
        for ext in ["json", "pgm"] {
            let name = format!("{stem}.{ext}");
            if fs::read(scene_dir.join(&name)).ok() != fs::read(out.join(&name)).ok() {
                mismatches.push(name);
            }
        }
        if read_scene(&written).map_err(e)? != scene {
            mismatches.push(format!("{stem} reread"));
        }
    }

    let scratch_run = RunDir::new(scratch.path().join("run"));
    let mut run_manifests = Vec::new();
    for (command, inputs, outputs) in [("gen", vec![], manifests.clone()), ("tournament", manifests.clone(), models.clone())] {
        let m = RunManifest::new(&d.run, command, DESK_CONFIG, d.cfg.seed, &inputs, &outputs);
        run_manifests.push(m.write(&scratch_run).map_err(e)?);
    }
    for m in &run_manifests {
        let parsed = RunManifest::read(m).map_err(e)?;
        let text = serde_json::to_string_pretty(&parsed).map_err(|e| e.to_string())? + "\n";
        if fs::read_to_string(m).ok().as_deref() != Some(text.as_str()) {
            mismatches.push(m.display().to_string());
        }
    }

    let bundle = ReportBundle::read(&d.run.report()).map_err(e)?;
    let copy = scratch.path().join("report");
    bundle.write(&copy).map_err(e)?;
    for f in files_in(&d.run.report()) {
        if fs::read(&f).ok() != fs::read(copy.join(f.file_name().unwrap())).ok() {
            mismatches.push(f.display().to_string());
        }
    }
    if ReportBundle::read(&copy).map_err(e)? != bundle {
        mismatches.push("report bundle reread".into());
    }
    check(
        mismatches.is_empty() && !models.is_empty() && !manifests.is_empty(),
        format!(
            "{} model files, {} scene manifests, {} run manifests, report bundle of {} tables; mismatches: {mismatches:?}",
            models.len(),
            manifests.len(),
            run_manifests.len(),
            bundle.index.tables.len()
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let results: RefCell<Vec<(u32, &str, Outcome)>> = RefCell::new(Vec::new());
    let run = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        if on(n) {
            let start = Instant::now();
            let outcome = f();
            eprintln!("criterion {n} finished in {:.0}s", start.elapsed().as_secs_f64());
            results.borrow_mut().push((n, name, outcome));
        }
    };
    run(1, "gradient fidelity", &gradient_fidelity);
    run(6, "morphometrics oracles", &morphometrics_fixtures);
    run(7, "statistics oracles", &statistics);
    run(9, "tournament determinism and ordering", &tournament_order);
    if [2, 3, 4, 8, 10].iter().any(|&n| on(n)) {
        eprintln!("training the desk configuration end to end");
        match desk_run() {
            Ok(d) => {
                run(2, "detection", &|| detection(&d));
                run(3, "classification", &|| classification(&d));
                run(4, "segmentation and pipeline", &|| segmentation_pipeline(&d));
                run(8, "end-to-end discrimination", &|| discrimination(&d));
                run(10, "format round-trips", &|| round_trips(&d));
            }
            Err(e) => {
                for (n, name) in [(2, "detection"), (3, "classification"), (4, "segmentation and pipeline"), (8, "end-to-end discrimination"), (10, "format round-trips")] {
                    if on(n) {
                        results.borrow_mut().push((n, name, Err(format!("desk run failed: {e}"))));
                    }
                }
            }
        }
    }
    run(5, "pipeline versus single-stage baseline", &architecture);
    let mut results = results.into_inner();
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
