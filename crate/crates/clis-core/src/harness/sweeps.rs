//! Ablation and hyperparameter sweep runners.
//!
//! Both share the staged pipeline's artifacts: the dataset is generated
//! once, a baseline is trained per seed, regions come from that baseline,
//! and every configuration trains and evaluates on top. Rows are traceable:
//! each one points at a run directory holding its metrics.jsonl and
//! checkpoint.

use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::{ensure_dataset, ensure_regions, ensure_trained, evaluate_checkpoint};
use super::ExperimentConfig;
use crate::datasets::Benchmark;
use crate::error::{ClisError, Result};
use crate::evalkit::ApReport;
use crate::nn::fnv1a64;
use crate::trainer::{self, AblationSwitches};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP_r")]
    pub ap_rare: f64,
    #[serde(rename = "AP_c")]
    pub ap_common: f64,
    #[serde(rename = "AP_f")]
    pub ap_frequent: f64,
}

impl From<&ApReport> for ApSummary {
    fn from(r: &ApReport) -> Self {
        Self {
            ap: r.ap,
            ap_rare: r.ap_rare,
            ap_common: r.ap_common,
            ap_frequent: r.ap_frequent,
        }
    }
}

fn mean_summary(rows: &[ApSummary]) -> ApSummary {
    let n = rows.len().max(1) as f64;
    ApSummary {
        ap: rows.iter().map(|r| r.ap).sum::<f64>() / n,
        ap_rare: rows.iter().map(|r| r.ap_rare).sum::<f64>() / n,
        ap_common: rows.iter().map(|r| r.ap_common).sum::<f64>() / n,
        ap_frequent: rows.iter().map(|r| r.ap_frequent).sum::<f64>() / n,
    }
}

/// The six ablation configurations in presentation order.
pub fn ablation_configs() -> Vec<(&'static str, AblationSwitches)> {
    vec![
        ("CLIS", AblationSwitches::all_on()),
        (
            "w/o (TSS)",
            AblationSwitches {
                use_tss: false,
                use_ss: true,
                use_clr: true,
                use_ils: true,
            },
        ),
        (
            "w/o (SS)",
            AblationSwitches {
                use_tss: true,
                use_ss: false,
                use_clr: true,
                use_ils: true,
            },
        ),
        (
            "w/o (CLR)",
            AblationSwitches {
                use_tss: true,
                use_ss: true,
                use_clr: false,
                use_ils: true,
            },
        ),
        (
            "w/o (ILS)",
            AblationSwitches {
                use_tss: true,
                use_ss: false,
                use_clr: false,
                use_ils: false,
            },
        ),
        ("w/o (TSS + ILS)", AblationSwitches::all_off()),
    ]
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(flatten)]
    pub summary: ApSummary,
    pub mean_step_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub switches: AblationSwitches,
    pub per_seed: Vec<SeedResult>,
    pub mean: ApSummary,
    pub mean_step_seconds: f64,
    /// Step time relative to the all-off baseline row.
    pub step_time_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub run_dir: PathBuf,
}

struct RunOutcome {
    summary: ApSummary,
    mean_step_seconds: f64,
}

fn train_eval_config(
    cfg: &ExperimentConfig,
    switches: &AblationSwitches,
    data: &Benchmark,
    label: &str,
    resume: bool,
) -> Result<RunOutcome> {
    let dir = cfg.run_dir().join(label);
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| ClisError::io(&dir, e))?;
    let metrics_path = dir.join("metrics.jsonl");
    let ckpt_path = dir.join("checkpoints").join("final.ckpt");
    let timing_path = dir.join("timing.json");

    let report_path = dir.join("ap_report.json");
    if resume && ckpt_path.exists() && timing_path.exists() && report_path.exists() {
        let t: serde_json::Value = serde_json::from_slice(
            &fs::read(&timing_path).map_err(|e| ClisError::io(&timing_path, e))?,
        )?;
        let report: ApReport = serde_json::from_slice(
            &fs::read(&report_path).map_err(|e| ClisError::io(&report_path, e))?,
        )?;
        return Ok(RunOutcome {
            summary: ApSummary::from(&report),
            mean_step_seconds: t["mean_step_seconds"].as_f64().unwrap_or(0.0),
        });
    }
    let (params, mean_step_seconds) = if resume && ckpt_path.exists() && timing_path.exists() {
        let t: serde_json::Value =
            serde_json::from_slice(&fs::read(&timing_path).map_err(|e| ClisError::io(&timing_path, e))?)?;
        (
            crate::nn::ParamStore::load(&ckpt_path)?,
            t["mean_step_seconds"].as_f64().unwrap_or(0.0),
        )
    } else {
        let mut sink =
            fs::File::create(&metrics_path).map_err(|e| ClisError::io(&metrics_path, e))?;
        let out = trainer::train(&cfg.model, &cfg.train, switches, data, cfg.seed, Some(&mut sink))?;
        out.params.save(&ckpt_path)?;
        fs::write(
            &timing_path,
            serde_json::to_vec(&serde_json::json!({
                "mean_step_seconds": out.mean_step_seconds
            }))?,
        )
        .map_err(|e| ClisError::io(&timing_path, e))?;
        (out.params, out.mean_step_seconds)
    };

    let report = evaluate_checkpoint(cfg, switches, &params, data, &dir.join("detections.json"))?;
    let body = serde_json::to_vec_pretty(&report)?;
    fs::write(&report_path, body).map_err(|e| ClisError::io(&report_path, e))?;
    Ok(RunOutcome {
        summary: ApSummary::from(&report),
        mean_step_seconds,
    })
}

/// Run the six-configuration ablation over the given seeds, sharing the
/// dataset across seeds and the per-seed baseline between the all-off row
/// and region generation.
pub fn run_ablation(
    base: &ExperimentConfig,
    seeds: &[u64],
    resume: bool,
) -> Result<AblationTable> {
    base.validate()?;
    let run_dir = base.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| ClisError::io(&run_dir, e))?;
    base.save(&run_dir.join("config.json"))?;
    let data = ensure_dataset(base, resume)?;

    let configs = ablation_configs();
    let mut per_config_results: Vec<Vec<SeedResult>> = vec![Vec::new(); configs.len()];

    for &seed in seeds {
        let mut seed_cfg = base.clone();
        seed_cfg.seed = seed;
        seed_cfg.name = format!("{}/seed{}", base.name, seed);

        // baseline first: the all-off row and the region source
        let baseline_params = ensure_trained(
            &seed_cfg,
            &AblationSwitches::all_off(),
            &data,
            &slug("w/o (TSS + ILS)"),
            resume,
        )?;
        let mut seed_data = data.clone();
        let regions_dir = seed_cfg.run_dir().join("regiongen");
        ensure_regions(&seed_cfg, &baseline_params, &mut seed_data, resume, &regions_dir)?;

        let outcomes: Vec<Result<RunOutcome>> = configs
            .par_iter()
            .map(|(label, switches)| {
                train_eval_config(&seed_cfg, switches, &seed_data, &slug(label), resume)
            })
            .collect();
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let o = outcome?;
            per_config_results[i].push(SeedResult {
                seed,
                summary: o.summary,
                mean_step_seconds: o.mean_step_seconds,
            });
        }
    }

    let baseline_time: f64 = {
        let last = &per_config_results[configs.len() - 1];
        let t: f64 = last.iter().map(|r| r.mean_step_seconds).sum::<f64>() / last.len() as f64;
        t.max(1e-12)
    };
    let rows: Vec<AblationRow> = configs
        .iter()
        .zip(per_config_results)
        .map(|((label, switches), per_seed)| {
            let mean = mean_summary(&per_seed.iter().map(|r| r.summary).collect::<Vec<_>>());
            let mean_step_seconds = per_seed.iter().map(|r| r.mean_step_seconds).sum::<f64>()
                / per_seed.len().max(1) as f64;
            AblationRow {
                label: label.to_string(),
                switches: *switches,
                per_seed,
                mean,
                mean_step_seconds,
                step_time_ratio: mean_step_seconds / baseline_time,
            }
        })
        .collect();

    let table = AblationTable {
        rows,
        seeds: seeds.to_vec(),
        run_dir: run_dir.clone(),
    };
    let mut csv = String::from("method,AP,AP_r,AP_c,AP_f,step_time_ratio\n");
    for row in &table.rows {
        csv.push_str(&format!(
            "{},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
            row.label, row.mean.ap, row.mean.ap_rare, row.mean.ap_common, row.mean.ap_frequent,
            row.step_time_ratio
        ));
    }
    fs::write(run_dir.join("ablation.csv"), csv).map_err(|e| ClisError::io(&run_dir, e))?;
    let body = serde_json::to_vec_pretty(&table)?;
    fs::write(run_dir.join("ablation.json"), body).map_err(|e| ClisError::io(&run_dir, e))?;
    Ok(table)
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    Beta,
    S,
    T,
    DataFraction,
}

impl FromStr for SweepParameter {
    type Err = ClisError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "s" => Ok(Self::S),
            "t" => Ok(Self::T),
            "data_fraction" => Ok(Self::DataFraction),
            other => Err(ClisError::Config(format!(
                "unknown sweep parameter `{other}` (alpha, beta, s, t, data_fraction)"
            ))),
        }
    }
}

impl SweepParameter {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::S => "s",
            Self::T => "t",
            Self::DataFraction => "data_fraction",
        }
    }

    /// Derive the per-value experiment: the varied parameter plus the
    /// switches it implies. Sweeping alpha or s studies the weak branch
    /// without the contrastive term; sweeping beta or t varies the
    /// contrastive term on top of the full framework; a zero value always
    /// degrades to the matching baseline configuration.
    fn configure(&self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Self::Alpha => {
                cfg.train.alpha = value;
                cfg.train.beta = 0.0;
                cfg.switches.use_clr = false;
                if value == 0.0 {
                    cfg.switches = AblationSwitches {
                        use_tss: true,
                        use_ss: false,
                        use_clr: false,
                        use_ils: false,
                    };
                }
            }
            Self::Beta => {
                cfg.train.beta = value;
                cfg.switches.use_clr = value > 0.0;
            }
            Self::S => {
                cfg.train.s = value as usize;
                cfg.train.t = cfg.train.t.min(cfg.train.s);
                cfg.train.beta = 0.0;
                cfg.switches.use_clr = false;
                if value == 0.0 {
                    cfg.switches = AblationSwitches {
                        use_tss: true,
                        use_ss: false,
                        use_clr: false,
                        use_ils: false,
                    };
                }
            }
            Self::T => {
                cfg.train.t = value as usize;
                cfg.switches.use_clr = value > 0.0;
            }
            Self::DataFraction => {
                if value == 0.0 {
                    cfg.switches = AblationSwitches {
                        use_tss: true,
                        use_ss: false,
                        use_clr: false,
                        use_ils: false,
                    };
                }
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// `None` marks a run aborted by a non-finite loss: a NaN row.
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AP_r")]
    pub ap_rare: Option<f64>,
    #[serde(rename = "AP_c")]
    pub ap_common: Option<f64>,
    #[serde(rename = "AP_f")]
    pub ap_frequent: Option<f64>,
    pub mean_step_seconds: Option<f64>,
    /// Relative to the first row's step time.
    pub step_time_ratio: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepRow>,
    pub run_dir: PathBuf,
}

/// Sweep one hyperparameter over the given values at a fixed seed. Runs
/// destabilized into non-finite losses are recorded as NaN rows; the sweep
/// itself always completes.
pub fn sweep(
    base: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[f64],
    resume: bool,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(ClisError::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let run_dir = base.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| ClisError::io(&run_dir, e))?;
    let mut data = ensure_dataset(base, resume)?;

    // all sweep points share the baseline and its generated regions
    let baseline_params =
        ensure_trained(base, &AblationSwitches::all_off(), &data, "baseline", resume)?;
    let regions_dir = base.run_dir().join("regiongen");
    ensure_regions(base, &baseline_params, &mut data, resume, &regions_dir)?;

    // deterministic subsample order for the data-fraction sweep
    let weak_order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..data.weak.len()).collect();
        let mut state = base.seed ^ fnv1a64(b"data-fraction");
        for i in (1..idx.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            idx.swap(i, (state >> 33) as usize % (i + 1));
        }
        idx
    };

    let outcomes: Vec<Result<SweepRow>> = values
        .par_iter()
        .map(|&value| {
            let mut cfg = parameter.configure(base, value);
            cfg.name = format!("{}/{}_{}", base.name, parameter.as_str(), fmt_value(value));
            let mut point_data = data.clone();
            if parameter == SweepParameter::DataFraction {
                let keep = ((value * data.weak.len() as f64).round() as usize).min(data.weak.len());
                let chosen: std::collections::BTreeSet<usize> =
                    weak_order.iter().take(keep).copied().collect();
                let mut i = 0;
                point_data.weak.retain(|_| {
                    let k = chosen.contains(&i);
                    i += 1;
                    k
                });
            }
            match train_eval_config(&cfg, &cfg.switches.clone(), &point_data, "run", resume) {
                Ok(o) => Ok(SweepRow {
                    value,
                    ap: Some(o.summary.ap),
                    ap_rare: Some(o.summary.ap_rare),
                    ap_common: Some(o.summary.ap_common),
                    ap_frequent: Some(o.summary.ap_frequent),
                    mean_step_seconds: Some(o.mean_step_seconds),
                    step_time_ratio: None,
                    note: None,
                }),
                Err(ClisError::NonFiniteLoss { step, detail }) => Ok(SweepRow {
                    value,
                    ap: None,
                    ap_rare: None,
                    ap_common: None,
                    ap_frequent: None,
                    mean_step_seconds: None,
                    step_time_ratio: None,
                    note: Some(format!("non-finite loss at step {step}: {detail}")),
                }),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(values.len());
    for o in outcomes {
        rows.push(o?);
    }
    let reference = rows
        .first()
        .and_then(|r| r.mean_step_seconds)
        .unwrap_or(0.0)
        .max(1e-12);
    for r in rows.iter_mut() {
        r.step_time_ratio = r.mean_step_seconds.map(|t| t / reference);
    }

    let table = SweepTable {
        parameter,
        rows,
        run_dir: run_dir.clone(),
    };
    let mut csv = format!("{},AP,AP_r,AP_c,AP_f,step_time_ratio\n", parameter.as_str());
    for r in &table.rows {
        let cell = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:.2}"));
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_value(r.value),
            cell(r.ap),
            cell(r.ap_rare),
            cell(r.ap_common),
            cell(r.ap_frequent),
            cell(r.step_time_ratio),
        ));
    }
    let csv_path = run_dir.join(format!("sweep_{}.csv", parameter.as_str()));
    fs::write(&csv_path, csv).map_err(|e| ClisError::io(&csv_path, e))?;
    let body = serde_json::to_vec_pretty(&table)?;
    fs::write(
        run_dir.join(format!("sweep_{}.json", parameter.as_str())),
        body,
    )
    .map_err(|e| ClisError::io(&run_dir, e))?;
    Ok(table)
}

fn fmt_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        format!("{v}").replace('.', "p")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_carry_the_published_labels() {
        let labels: Vec<&str> = ablation_configs().iter().map(|(l, _)| *l).collect();
        assert_eq!(
            labels,
            vec![
                "CLIS",
                "w/o (TSS)",
                "w/o (SS)",
                "w/o (CLR)",
                "w/o (ILS)",
                "w/o (TSS + ILS)"
            ]
        );
        for (_, s) in ablation_configs() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn sweep_parameter_parses() {
        assert_eq!("alpha".parse::<SweepParameter>().unwrap(), SweepParameter::Alpha);
        assert_eq!(
            "data_fraction".parse::<SweepParameter>().unwrap(),
            SweepParameter::DataFraction
        );
        assert!("gamma".parse::<SweepParameter>().is_err());
    }

    #[test]
    fn zero_values_degrade_to_the_matching_baseline() {
        let base = ExperimentConfig::desk();
        let cfg = SweepParameter::Alpha.configure(&base, 0.0);
        assert!(!cfg.switches.use_ils);
        let cfg = SweepParameter::S.configure(&base, 0.0);
        assert!(!cfg.switches.use_ils);
        let cfg = SweepParameter::Beta.configure(&base, 0.0);
        assert!(cfg.switches.use_ils && !cfg.switches.use_clr);
        let cfg = SweepParameter::T.configure(&base, 0.0);
        assert!(!cfg.switches.use_clr);
        let cfg = SweepParameter::Beta.configure(&base, 0.05);
        assert!(cfg.switches.use_clr);
    }
}
