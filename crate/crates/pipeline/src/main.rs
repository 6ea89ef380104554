use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use riskydiff::stages::Pipeline;
use riskydiff::store::Store;
use riskydiff::{ablate, run_experiment, sweep, RunConfig, RunRecord, SweepAxis};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "riskydiff", version, about = "Generate and evaluate risky samples for a target classifier")]
struct Cli {
    /// JSON run config; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to the config's `output_dir` or `runs/<hash>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reuse complete stage outputs already in the run directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic dataset.
    Data,
    /// Train the embedder, noise predictor, classifiers and error predictor.
    Train,
    /// Train, then generate samples.
    Generate,
    /// Train, generate, then evaluate.
    Eval,
    /// The full pipeline including retraining.
    Retrain,
    /// Repeat generation and evaluation over one hyperparameter.
    Sweep {
        /// s, lambda or val_fraction.
        #[arg(long)]
        axis: String,
        /// Comma-separated, ascending.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Base, +Screening, +Gradient and +Both arms.
    Ablate,
    /// Print the run record of the run directory.
    Report,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let root = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.hash()[..16]));

    match cli.command {
        Command::Report => {
            let path = root.join("manifest.json");
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let record: RunRecord = serde_json::from_str(&text)?;
            println!("run {}", record.run_id);
            for (stage, status) in &record.stages {
                println!("  {stage:<22} {} {}", if status.done { "done" } else { "-" }, status.key);
            }
            for (name, value) in &record.metrics {
                println!("  {name:<32} {value:.4}");
            }
            if let Some(e) = &record.error {
                println!("  failed: {e}");
            }
        }
        Command::Retrain => {
            let record = run_experiment(&cfg, &root, cli.resume)?;
            println!("{}", serde_json::to_string_pretty(&record.metrics)?);
        }
        Command::Sweep { axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let table = sweep(&cfg, &root, axis, &values, cli.resume)?;
            println!("{:>12} {:>10} {:>11} {:>9}", axis.name(), "error", "conformity", "frechet");
            for r in &table.rows {
                let m = &r.metrics;
                println!(
                    "{:>12} {:>10.4} {:>11.4} {:>9.4}",
                    r.value, m.error_rate, m.conformity_rate, m.frechet_distance
                );
            }
        }
        Command::Ablate => {
            let report = ablate(&cfg, &root, cli.resume)?;
            for a in &report.arms {
                let m = &a.metrics;
                println!(
                    "{:>11} error {:.4} conformity {:.4} frechet {:.4}",
                    m.arm, m.error_rate, m.conformity_rate, m.frechet_distance
                );
            }
        }
        stage => {
            let store = Store::new(&root, cli.resume)?;
            let mut p = Pipeline::new(cfg, &store)?;
            p.recording(|p| {
                match stage {
                    Command::Data => {
                        p.dataset()?;
                    }
                    Command::Train => {
                        p.train()?;
                    }
                    Command::Generate => {
                        let t = p.train()?;
                        p.generate(&t)?;
                    }
                    Command::Eval => {
                        let t = p.train()?;
                        let samples = p.generate(&t)?;
                        let r = p.evaluate(&t, &samples)?;
                        println!(
                            "{}: error {:.4} conformity {:.4} frechet {:.4}",
                            r.arm, r.evaluation.error_rate, r.evaluation.conformity_rate, r.evaluation.frechet_distance
                        );
                    }
                    _ => unreachable!("handled above"),
                }
                Ok(())
            })?;
        }
    }
    eprintln!("run directory: {}", root.display());
    Ok(())
}
