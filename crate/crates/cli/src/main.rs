use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use darwin_core::config::ExperimentConfig;
use darwin_core::report::build_report;
use darwin_core::tournament::Stage;
use darwin_core::verify::{all_presets, check_preset};
use darwin_core::workflow::{self, RunDir, RunManifest};
use darwin_core::CoreError;

/// Environment variable that overrides the configured output directory.
const OUT_ENV: &str = "DARWIN_OUT";

#[derive(Parser, Debug)]
#[command(name = "darwin", version, about = "Detect, classify and segment specimens with per-stage model tournaments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides DARWIN_OUT and the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for candidate training.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its 6:3:1 split.
    Gen,
    /// Train and rank candidates, keep the winners, assemble the pipeline.
    Tournament {
        /// Run a single stage (detect, classify or segment).
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Run the pipeline on the test split, or on a scene, image or directory.
    Infer { input: Option<PathBuf> },
    /// Morphometrics of the inferred scenes, or of given maps or masks.
    Morph { input: Option<PathBuf> },
    /// Tukey-Kramer tables for morphometrics CSVs (default: the run's).
    Stats { csv: Vec<PathBuf> },
    /// Finite-difference check of the shipped presets.
    Gradcheck {
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        /// Restrict to these presets.
        #[arg(long = "preset")]
        presets: Vec<String>,
    },
    /// Gather the report bundle from a finished run.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Tournament { .. } => "tournament",
            Command::Infer { .. } => "infer",
            Command::Morph { .. } => "morph",
            Command::Stats { .. } => "stats",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Report => "report",
        }
    }
}

enum Failure {
    /// Usage or validation problem: exit 2.
    Usage(String),
    /// Ran, but a check or threshold failed: exit 1.
    Check(String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Invalid(_)
            | CoreError::UnknownPreset { .. }
            | CoreError::Missing(_)
            | CoreError::Format { .. }
            | CoreError::Mismatch(_)
            | CoreError::Io(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

struct Context {
    config: Option<(ExperimentConfig, String)>,
    seed: u64,
    run: Option<RunDir>,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, Failure> {
        let config = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                let mut cfg = ExperimentConfig::parse(&text)?;
                if let Some(s) = cli.seed {
                    cfg.seed = s;
                }
                Some((cfg, text))
            }
            None => None,
        };
        let out = cli
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .or_else(|| config.as_ref().map(|(c, _)| c.out_dir.clone()));
        let seed = config.as_ref().map_or(cli.seed.unwrap_or(0), |(c, _)| c.seed);
        Ok(Self { config, seed, run: out.map(RunDir::new) })
    }

    fn config(&self) -> Result<&ExperimentConfig, Failure> {
        self.config.as_ref().map(|(c, _)| c).ok_or_else(|| Failure::Usage("this command needs --config".into()))
    }

    fn run(&self) -> Result<&RunDir, Failure> {
        self.run.as_ref().ok_or_else(|| Failure::Usage(format!("no run directory: pass --out, set {OUT_ENV}, or give --config")))
    }

    fn manifest(&self, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<(), Failure> {
        let run = self.run()?;
        let text = self.config.as_ref().map_or("", |(_, t)| t.as_str());
        // The seed override changes results without changing the file, so it is hashed along.
        let hashed = format!("{text}\n# seed {}\n", self.seed);
        let path = RunManifest::new(run, command, &hashed, self.seed, inputs, outputs).write(run)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::Gen => {
            let cfg = ctx.config()?;
            let outputs = workflow::generate(cfg, ctx.run()?)?;
            println!("generated {} scenes into {}", cfg.dataset.scenes, ctx.run()?.dataset().display());
            ctx.manifest(cli.command.name(), &[], &outputs)?;
        }
        Command::Tournament { stage } => {
            let stages: Vec<Stage> = stage.map_or(Stage::ALL.to_vec(), |s| vec![s]);
            let t = workflow::tournament(ctx.config()?, ctx.run()?, &stages, cli.jobs.max(1))?;
            print!("{}", t.report.table());
            match &t.pipeline {
                Some(_) => println!("pipeline: {}", ctx.run()?.pipeline_config().display()),
                None => println!("pipeline not assembled: not every stage has a winner yet"),
            }
            ctx.manifest(cli.command.name(), &t.inputs, &t.outputs)?;
        }
        Command::Infer { input } => {
            let r = workflow::infer(ctx.config()?, ctx.run()?, input.as_deref())?;
            println!("processed {} scenes into {}", r.index.scenes.len(), ctx.run()?.infer().display());
            if let Some(m) = &r.metrics {
                println!("pipeline pooled jaccard {:.4}, global accuracy {:.4} ({} scenes)", m.pipeline.jaccard, m.pipeline.global_accuracy, m.scenes);
                if let Some(b) = &m.baseline {
                    println!("baseline pooled jaccard {:.4}, global accuracy {:.4}", b.jaccard, b.global_accuracy);
                }
            }
            ctx.manifest(cli.command.name(), &r.inputs, &r.outputs)?;
            if !r.index.skipped.is_empty() {
                for (path, why) in &r.index.skipped {
                    eprintln!("skipped {path}: {why}");
                }
                return Err(Failure::Usage(format!("{} inputs could not be processed", r.index.skipped.len())));
            }
        }
        Command::Morph { input } => {
            let run = ctx.run()?;
            match input {
                Some(path) => {
                    let (rows, outputs) = workflow::morph_inputs(path, &run.morph())?;
                    println!("{} instances measured into {}", rows.len(), run.morph().display());
                    ctx.manifest(cli.command.name(), &[path.clone()], &outputs)?;
                }
                None => {
                    let m = workflow::morph(run)?;
                    println!("{} truth and {} pipeline instances measured into {}", m.truth.len(), m.pipeline.len(), run.morph().display());
                    ctx.manifest(cli.command.name(), &m.inputs, &m.outputs)?;
                }
            }
        }
        Command::Stats { csv } => {
            let alpha = ctx.config.as_ref().map_or(0.05, |(c, _)| c.pipeline.alpha);
            let s = workflow::stats(ctx.run()?, csv, alpha)?;
            for (name, rep) in &s.reports {
                println!("{name}:");
                for t in &rep.tables {
                    for p in &t.pairs {
                        println!("  {:<13} {} vs {}: Q {:.3}, p {:.4} {}", t.metric.name(), p.group1, p.group2, p.q, p.p, p.inference.label());
                    }
                }
            }
            ctx.manifest(cli.command.name(), &s.inputs, &s.outputs)?;
        }
        Command::Gradcheck { threshold, epsilon, presets } => {
            let known = all_presets();
            for p in presets {
                if !known.iter().any(|(_, k)| k == p) {
                    return Err(Failure::Usage(format!("unknown preset `{p}`")));
                }
            }
            let mut worst: f64 = 0.0;
            for (stage, preset) in known.into_iter().filter(|(_, p)| presets.is_empty() || presets.iter().any(|q| q == p)) {
                let r = check_preset(stage, preset, *epsilon)?;
                let verdict = if r.max_relative_error < *threshold { "ok" } else { "FAIL" };
                println!(
                    "{:<9} {:<15} params {:>6}  checked {:>6}  kinks {:>5}  max rel err {:.3e}  {verdict}",
                    stage.name(),
                    preset,
                    r.params,
                    r.checked,
                    r.kinks,
                    r.max_relative_error
                );
                worst = worst.max(r.max_relative_error);
            }
            if ctx.run.is_some() {
                ctx.manifest(cli.command.name(), &[], &[])?;
            }
            if worst >= *threshold {
                return Err(Failure::Check(format!("max relative error {worst:.3e} is not below {threshold:e}")));
            }
        }
        Command::Report => {
            let run = ctx.run()?;
            let bundle = build_report(run)?;
            let outputs = bundle.write(&run.report())?;
            println!("report bundle in {}", run.report().display());
            for (m, v) in &bundle.index.agreement.median_abs_diff {
                println!("  median |pipeline - truth| {m}: {}", v.map_or("-".into(), |x| format!("{x:.4}")));
            }
            ctx.manifest(cli.command.name(), &darwin_core::report::report_inputs(run), &outputs)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn stage_flag_parses() {
        let cli = Cli::try_parse_from(["darwin", "tournament", "--stage", "classify"]).unwrap();
        assert!(matches!(cli.command, Command::Tournament { stage: Some(Stage::Classify) }));
        assert!(Cli::try_parse_from(["darwin", "tournament", "--stage", "track"]).is_err());
    }

    #[test]
    fn out_flag_beats_config() {
        let cli = Cli::try_parse_from(["darwin", "--out", "/tmp/x", "report"]).unwrap();
        let ctx = Context::load(&cli).ok().unwrap();
        assert_eq!(ctx.run.unwrap().root(), Path::new("/tmp/x"));
    }
}
