//! Command-line driver for the experiment pipeline.
//!
//! Stage commands (`generate`, `regiongen`, `train`, `eval`) run the
//! pipeline up to their stage, reusing artifacts already on disk when
//! `--resume` is set. `ablate` and `sweep` drive multi-run experiments;
//! `report` re-prints tables from existing artifacts.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use clis_core::harness::{self, ExperimentConfig, SweepParameter};
use clis_core::trainer::AblationSwitches;

#[derive(Parser)]
#[command(name = "clis", about = "Long-tailed detection with image-level supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Load a config JSON file instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: `desk` or `paper-scale`.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip stages whose artifacts already exist.
    #[arg(long)]
    resume: bool,
    /// Override any config field by dotted path, e.g. `--set train.alpha=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; runs land in `<output>/<name>/`.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        for spec in &self.overrides {
            cfg.set_override(spec)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the synthetic benchmark.
    Generate(ConfigArgs),
    /// Run the full pipeline: dataset, baseline, regions, joint training,
    /// evaluation, comparison report.
    Train(ConfigArgs),
    /// Produce pre-defined regions with the baseline checkpoint (runs the
    /// dataset and baseline stages first if needed).
    Regiongen(ConfigArgs),
    /// Evaluate existing checkpoints on the validation split.
    Eval(ConfigArgs),
    /// Run the six ablation configurations and emit one table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seeds to average over.
        #[arg(long, value_delimiter = ',', default_values_t = vec![7u64, 11, 13])]
        seeds: Vec<u64>,
    },
    /// Sweep one hyperparameter over a value list.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of: alpha, beta, s, t, data_fraction.
        #[arg(long)]
        parameter: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Print the report tables found under the run directory.
    Report(ConfigArgs),
}

fn print_pipeline_result(r: &harness::PipelineResult) {
    println!("run: {}", r.run_dir.display());
    println!("baseline checkpoint: {}", r.baseline_checkpoint_hash);
    println!(
        "regiongen: {} regions, {} fallbacks ({:.1}%)",
        r.regiongen.total,
        r.regiongen.fallbacks,
        100.0 * r.regiongen.fallback_rate
    );
    println!("run,AP,AP_r,AP_c,AP_f");
    println!(
        "baseline,{:.2},{:.2},{:.2},{:.2}",
        r.baseline.ap, r.baseline.ap_rare, r.baseline.ap_common, r.baseline.ap_frequent
    );
    println!(
        "clis,{:.2},{:.2},{:.2},{:.2}",
        r.clis.ap, r.clis.ap_rare, r.clis.ap_common, r.clis.ap_frequent
    );
    println!(
        "delta,{:+.2},{:+.2},{:+.2},{:+.2}",
        r.clis.ap - r.baseline.ap,
        r.clis.ap_rare - r.baseline.ap_rare,
        r.clis.ap_common - r.baseline.ap_common,
        r.clis.ap_frequent - r.baseline.ap_frequent
    );
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.resolve()?;
            let data = harness::ensure_dataset(&cfg, args.resume)?;
            println!(
                "dataset at {}: {} detection / {} weak / {} val images, {} categories",
                cfg.run_dir().join("dataset").display(),
                data.detection.len(),
                data.weak.len(),
                data.val.len(),
                data.categories.len()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let result = harness::run_pipeline(&cfg, args.resume)?;
            print_pipeline_result(&result);
        }
        Command::Regiongen(args) => {
            let cfg = args.resolve()?;
            let mut data = harness::ensure_dataset(&cfg, true)?;
            let baseline = harness::ensure_trained(
                &cfg,
                &AblationSwitches::all_off(),
                &data,
                "baseline",
                true,
            )?;
            let dataset_dir = cfg.run_dir().join("dataset");
            let report =
                harness::ensure_regions(&cfg, &baseline, &mut data, args.resume, &dataset_dir)?;
            println!(
                "regions: {} total, {} fallbacks ({:.1}%)",
                report.total,
                report.fallbacks,
                100.0 * report.fallback_rate
            );
        }
        Command::Eval(args) => {
            let cfg = args.resolve()?;
            // evaluation stage over existing artifacts only
            let result = harness::run_pipeline(&cfg, true)?;
            print_pipeline_result(&result);
        }
        Command::Ablate { config, seeds } => {
            let cfg = config.resolve()?;
            let table = harness::run_ablation(&cfg, &seeds, config.resume)?;
            println!("method,AP,AP_r,AP_c,AP_f,step_time_ratio");
            for row in &table.rows {
                println!(
                    "{},{:.2},{:.2},{:.2},{:.2},{:.2}",
                    row.label,
                    row.mean.ap,
                    row.mean.ap_rare,
                    row.mean.ap_common,
                    row.mean.ap_frequent,
                    row.step_time_ratio
                );
            }
            println!("table written to {}", table.run_dir.join("ablation.csv").display());
        }
        Command::Sweep {
            config,
            parameter,
            values,
        } => {
            let cfg = config.resolve()?;
            let parameter: SweepParameter = parameter.parse()?;
            let table = harness::sweep(&cfg, parameter, &values, config.resume)?;
            println!("{},AP,AP_r,AP_c,AP_f", parameter.as_str());
            for row in &table.rows {
                let cell = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:.2}"));
                println!(
                    "{},{},{},{},{}",
                    row.value,
                    cell(row.ap),
                    cell(row.ap_rare),
                    cell(row.ap_common),
                    cell(row.ap_frequent)
                );
            }
        }
        Command::Report(args) => {
            let cfg = args.resolve()?;
            let dir = cfg.run_dir();
            let mut printed = false;
            for name in ["reports/comparison.csv", "ablation.csv"] {
                let path = dir.join(name);
                if path.exists() {
                    println!("== {}", path.display());
                    print!("{}", std::fs::read_to_string(&path)?);
                    printed = true;
                }
            }
            for entry in std::fs::read_dir(&dir).into_iter().flatten().flatten() {
                let p = entry.path();
                if p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sweep_") && n.ends_with(".csv"))
                {
                    println!("== {}", p.display());
                    print!("{}", std::fs::read_to_string(&p)?);
                    printed = true;
                }
            }
            if !printed {
                bail!("no reports found under {}", dir.display());
            }
        }
    }
    Ok(())
}
