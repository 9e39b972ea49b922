//! `urelab`: train and probe spectrogram classifiers of synthetic device
//! emissions.
//!
//! Exit codes: 0 success, 2 config error, 3 missing prerequisite artifact,
//! 1 any internal failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use urelab_core::workbench::config::MethodKind;
use urelab_core::workbench::pipeline::{
    self, compare_runs, evaluate_clean, exit_code, run_pipeline, stage_keys, Stage,
};
use urelab_core::workbench::{ExperimentConfig, PipelineError};

#[derive(Parser)]
#[command(name = "urelab", version, about = "Spectrogram emission-classification workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for this run.
    #[arg(long)]
    out: PathBuf,
    /// Override every seed in the config with this value.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize recordings and build the spectrogram image dataset.
    Generate(CommonArgs),
    /// Train the residual classifier on the generated training split.
    Train(CommonArgs),
    /// Evaluate the trained model on the clean test split.
    Evaluate(CommonArgs),
    /// Run the Gaussian-noise robustness sweep over the test split.
    Sweep(CommonArgs),
    /// Compute attribution maps, heatmaps, and band scores.
    Explain {
        #[command(flatten)]
        common: CommonArgs,
        /// Attribution method (overrides the config).
        #[arg(long, value_parser = parse_method)]
        method: Option<MethodKind>,
        /// Correctly classified samples to explain per class.
        #[arg(long)]
        samples_per_class: Option<usize>,
    },
    /// Emit CSV/Markdown report tables from sweep results.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Another run's output directory to compare macro-F1 against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Run a subset of stages in canonical order.
    All {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated list from generate,train,sweep,explain,report.
        #[arg(long, default_value = "generate,train,sweep,explain,report")]
        stages: String,
    },
}

fn parse_method(s: &str) -> Result<MethodKind, String> {
    MethodKind::parse(s)
        .ok_or_else(|| format!("unknown method '{s}' (expected ig|ig-nt|gradshap|gradcam|occlusion)"))
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, PipelineError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Generate(common) => {
            let config = load_config(&common)?;
            let meta = run_pipeline(&config, &[Stage::Generate], &common.out)?;
            let keys = stage_keys(&config);
            println!(
                "generate: dataset-{} ({} artifacts)",
                keys.generate,
                meta.inventory.len()
            );
        }
        Command::Train(common) => {
            let config = load_config(&common)?;
            run_pipeline(&config, &[Stage::Train], &common.out)?;
            let keys = stage_keys(&config);
            let log_path = pipeline::model_dir(&common.out, &keys).join("train_log.csv");
            if let Ok(log) = std::fs::read_to_string(&log_path) {
                if let Some(last) = log.lines().last() {
                    println!("train: model-{} final epoch {last}", keys.train);
                }
            }
        }
        Command::Evaluate(common) => {
            let config = load_config(&common)?;
            let report = evaluate_clean(&config, &common.out)?;
            println!(
                "evaluate ({}): clean accuracy {:.6}, macro F1 {:.6}",
                report.model_tag, report.accuracy, report.macro_f1
            );
        }
        Command::Sweep(common) => {
            let config = load_config(&common)?;
            run_pipeline(&config, &[Stage::Sweep], &common.out)?;
            let keys = stage_keys(&config);
            let reports = pipeline::load_reports(&pipeline::sweep_dir(&common.out, &keys))?;
            for r in &reports {
                println!(
                    "sweep ({}): sigma {:.2} -> macro F1 {:.6}",
                    r.model_tag, r.noise_sigma, r.macro_f1
                );
            }
        }
        Command::Explain { common, method, samples_per_class } => {
            let mut config = load_config(&common)?;
            if let Some(m) = method {
                config.attribution.method = m;
            }
            if let Some(n) = samples_per_class {
                config.attribution.samples_per_class = n;
            }
            config.validate()?;
            run_pipeline(&config, &[Stage::Explain], &common.out)?;
            let keys = stage_keys(&config);
            let dir = pipeline::explain_dir(&common.out, &keys);
            println!("explain: {} ({})", dir.display(), config.attribution.method.as_str());
            if let Ok(csv) = std::fs::read_to_string(dir.join("band_scores.csv")) {
                let scores: Vec<f64> = csv
                    .lines()
                    .skip(1)
                    .filter_map(|l| l.rsplit(',').next()?.parse().ok())
                    .collect();
                if !scores.is_empty() {
                    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                    println!("explain: mean band score {mean:.6} over {} maps", scores.len());
                }
            }
        }
        Command::Report { common, compare } => {
            let config = load_config(&common)?;
            run_pipeline(&config, &[Stage::Report], &common.out)?;
            let keys = stage_keys(&config);
            let dir = pipeline::report_dir(&common.out, &keys);
            println!("report: {}", dir.join("report.csv").display());
            if let Some(other) = compare {
                let rows = compare_runs(&config, &common.out, &other)?;
                for row in &rows {
                    println!("compare: sigma {:.2} -> {}", row.sigma, row.verdict);
                }
            }
        }
        Command::All { common, stages } => {
            let config = load_config(&common)?;
            let mut wanted = Vec::new();
            for part in stages.split(',') {
                let stage = Stage::parse(part).ok_or_else(|| PipelineError::Stage {
                    stage: "all",
                    msg: format!("unknown stage '{part}'"),
                })?;
                if !wanted.contains(&stage) {
                    wanted.push(stage);
                }
            }
            let meta = run_pipeline(&config, &wanted, &common.out)?;
            for (name, record) in &meta.stages {
                println!(
                    "{name}: {} in {} ms{}",
                    record.out_dir,
                    record.wall_ms,
                    if record.skipped { " (cached)" } else { "" }
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
