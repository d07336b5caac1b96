//! The staged experiment pipeline: dataset -> baseline -> region generation
//! -> joint training -> evaluation -> comparison report. Every stage leaves
//! its artifacts on disk and can be skipped on resume when they already
//! exist.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::datasets::{self, Benchmark, DetectionImage};
use crate::detector::Detector;
use crate::error::{ClisError, Result};
use crate::evalkit::{self, ApReport, Detection, InferOptions};
use crate::nn::ParamStore;
use crate::regiongen::{self, RegiongenReport};
use crate::trainer::{self, AblationSwitches};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineResult {
    pub baseline: ApReport,
    pub clis: ApReport,
    pub regiongen: RegiongenReport,
    /// Content hash of the baseline checkpoint, recorded both when it is
    /// trained and when region generation consumes it.
    pub baseline_checkpoint_hash: String,
    pub regiongen_used_hash: String,
    pub run_dir: PathBuf,
}

fn stage_err(stage: &str, e: ClisError) -> ClisError {
    ClisError::Stage {
        stage: stage.to_string(),
        detail: e.to_string(),
    }
}

/// Generate the dataset or load it when resuming.
pub fn ensure_dataset(cfg: &ExperimentConfig, resume: bool) -> Result<Benchmark> {
    let dir = cfg.run_dir().join("dataset");
    if resume && dir.join("benchmark_meta.json").exists() {
        return datasets::load_benchmark(&dir).map_err(|e| stage_err("dataset", e));
    }
    let benchmark =
        datasets::generate_longtail_benchmark(&cfg.benchmark).map_err(|e| stage_err("dataset", e))?;
    fs::create_dir_all(&dir).map_err(|e| stage_err("dataset", ClisError::io(&dir, e)))?;
    datasets::save_benchmark(&dir, &benchmark).map_err(|e| stage_err("dataset", e))?;
    Ok(benchmark)
}

/// Train one configuration into `run_dir/<label>/`, writing metrics.jsonl
/// and checkpoints/final.ckpt; on resume an existing checkpoint is loaded
/// instead.
pub fn ensure_trained(
    cfg: &ExperimentConfig,
    switches: &AblationSwitches,
    data: &Benchmark,
    label: &str,
    resume: bool,
) -> Result<ParamStore> {
    let stage = format!("train-{label}");
    let dir = cfg.run_dir().join(label);
    let ckpt = dir.join("checkpoints").join("final.ckpt");
    if resume && ckpt.exists() {
        return ParamStore::load(&ckpt).map_err(|e| stage_err(&stage, e));
    }
    fs::create_dir_all(dir.join("checkpoints"))
        .map_err(|e| stage_err(&stage, ClisError::io(&dir, e)))?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut sink = fs::File::create(&metrics_path)
        .map_err(|e| stage_err(&stage, ClisError::io(&metrics_path, e)))?;
    let out = trainer::train(
        &cfg.model,
        &cfg.train,
        switches,
        data,
        cfg.seed,
        Some(&mut sink),
    )
    .map_err(|e| stage_err(&stage, e))?;
    out.params.save(&ckpt).map_err(|e| stage_err(&stage, e))?;
    Ok(out.params)
}

/// Run region generation against the baseline parameters, updating the weak
/// annotations on disk and in the benchmark.
pub fn ensure_regions(
    cfg: &ExperimentConfig,
    baseline: &ParamStore,
    data: &mut Benchmark,
    resume: bool,
    dataset_dir: &Path,
) -> Result<RegiongenReport> {
    let report_path = dataset_dir.join("regiongen_report.json");
    let regions_ready = data.weak.iter().all(|w| w.predefined_region.is_some());
    if resume && report_path.exists() && regions_ready {
        let body = fs::read(&report_path)
            .map_err(|e| stage_err("regiongen", ClisError::io(&report_path, e)))?;
        return serde_json::from_slice(&body).map_err(|e| stage_err("regiongen", e.into()));
    }
    fs::create_dir_all(dataset_dir)
        .map_err(|e| stage_err("regiongen", ClisError::io(dataset_dir, e)))?;
    let det = Detector::new(cfg.model.clone(), AblationSwitches::all_off());
    let report = regiongen::generate_predefined_regions(&det, baseline, &mut data.weak)
        .map_err(|e| stage_err("regiongen", e))?;
    datasets::save_weak_annotations(dataset_dir, &data.weak)
        .map_err(|e| stage_err("regiongen", e))?;
    regiongen::save_report(dataset_dir, &report).map_err(|e| stage_err("regiongen", e))?;
    Ok(report)
}

/// Run inference over a validation split in parallel, in image order.
pub fn infer_split(
    det: &Detector,
    params: &ParamStore,
    images: &[DetectionImage],
) -> Result<Vec<Detection>> {
    let opts = InferOptions::default();
    let per_image: Vec<Result<Vec<Detection>>> = images
        .par_iter()
        .map(|img| evalkit::infer(det, params, img, &opts))
        .collect();
    let mut all = Vec::new();
    for r in per_image {
        all.extend(r?);
    }
    Ok(all)
}

/// Evaluate a checkpoint on the validation split and persist the detections.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    switches: &AblationSwitches,
    params: &ParamStore,
    data: &Benchmark,
    detections_path: &Path,
) -> Result<ApReport> {
    let det = Detector::new(cfg.model.clone(), *switches);
    let detections = infer_split(&det, params, &data.val)?;
    #[derive(Serialize)]
    struct Record<'a> {
        image_id: u64,
        category: usize,
        #[serde(rename = "box")]
        bbox: [f64; 4],
        score: f64,
        #[serde(skip)]
        _p: &'a (),
    }
    let records: Vec<Record> = detections
        .iter()
        .map(|d| Record {
            image_id: d.image_id,
            category: d.category,
            bbox: [d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h],
            score: d.score,
            _p: &(),
        })
        .collect();
    let body = serde_json::to_vec_pretty(&records)?;
    fs::write(detections_path, body).map_err(|e| ClisError::io(detections_path, e))?;
    Ok(evalkit::evaluate_ap(&detections, &data.val, &data.groups))
}

fn ap_csv_row(label: &str, r: &ApReport) -> String {
    format!(
        "{label},{:.2},{:.2},{:.2},{:.2}\n",
        r.ap, r.ap_rare, r.ap_common, r.ap_frequent
    )
}

/// Full pipeline. Stage order: dataset, baseline training (all switches
/// off), region generation with the baseline checkpoint, joint training with
/// the configured switches, evaluation of both checkpoints, comparison
/// report.
pub fn run_pipeline(cfg: &ExperimentConfig, resume: bool) -> Result<PipelineResult> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let reports_dir = run_dir.join("reports");
    let result_path = reports_dir.join("comparison.json");
    if resume && result_path.exists() {
        let body = fs::read(&result_path).map_err(|e| ClisError::io(&result_path, e))?;
        return Ok(serde_json::from_slice(&body)?);
    }
    fs::create_dir_all(&reports_dir).map_err(|e| ClisError::io(&reports_dir, e))?;
    cfg.save(&run_dir.join("config.json"))?;

    let mut data = ensure_dataset(cfg, resume)?;
    let baseline_params = ensure_trained(cfg, &AblationSwitches::all_off(), &data, "baseline", resume)?;
    let baseline_hash = format!("{:016x}", baseline_params.content_hash());

    // region generation consumes the very same parameters; record the hash
    // it saw so the report can prove the model identity
    let regiongen_used_hash = format!("{:016x}", baseline_params.content_hash());
    let regiongen_report = ensure_regions(
        cfg,
        &baseline_params,
        &mut data,
        resume,
        &run_dir.join("dataset"),
    )?;

    let clis_params = ensure_trained(cfg, &cfg.switches, &data, "clis", resume)?;

    let baseline_ap = evaluate_checkpoint(
        cfg,
        &AblationSwitches::all_off(),
        &baseline_params,
        &data,
        &reports_dir.join("baseline_detections.json"),
    )
    .map_err(|e| stage_err("eval-baseline", e))?;
    let clis_ap = evaluate_checkpoint(
        cfg,
        &cfg.switches,
        &clis_params,
        &data,
        &reports_dir.join("clis_detections.json"),
    )
    .map_err(|e| stage_err("eval-clis", e))?;

    let mut csv = String::from("run,AP,AP_r,AP_c,AP_f\n");
    csv.push_str(&ap_csv_row("baseline", &baseline_ap));
    csv.push_str(&ap_csv_row("clis", &clis_ap));
    csv.push_str(&format!(
        "delta,{:.2},{:.2},{:.2},{:.2}\n",
        clis_ap.ap - baseline_ap.ap,
        clis_ap.ap_rare - baseline_ap.ap_rare,
        clis_ap.ap_common - baseline_ap.ap_common,
        clis_ap.ap_frequent - baseline_ap.ap_frequent,
    ));
    fs::write(reports_dir.join("comparison.csv"), csv)
        .map_err(|e| ClisError::io(&reports_dir, e))?;

    let mut per_cat = String::from("category,name,group,baseline_ap,clis_ap\n");
    for c in &data.categories {
        let group = serde_json::to_string(&data.groups.of(c.id)).unwrap();
        per_cat.push_str(&format!(
            "{},{},{},{},{}\n",
            c.id,
            c.name,
            group.trim_matches('"'),
            baseline_ap
                .per_category
                .get(&c.id)
                .map_or("".into(), |v| format!("{v:.2}")),
            clis_ap
                .per_category
                .get(&c.id)
                .map_or("".into(), |v| format!("{v:.2}")),
        ));
    }
    fs::write(reports_dir.join("per_category.csv"), per_cat)
        .map_err(|e| ClisError::io(&reports_dir, e))?;

    let result = PipelineResult {
        baseline: baseline_ap,
        clis: clis_ap,
        regiongen: regiongen_report,
        baseline_checkpoint_hash: baseline_hash,
        regiongen_used_hash,
        run_dir: run_dir.clone(),
    };
    let body = serde_json::to_vec_pretty(&result)?;
    fs::write(&result_path, body).map_err(|e| ClisError::io(&result_path, e))?;
    Ok(result)
}
