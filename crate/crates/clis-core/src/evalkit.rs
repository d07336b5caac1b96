//! Inference (objectness x classification scoring, per-class NMS, top-K) and
//! long-tailed average precision with rare/common/frequent splits.
//!
//! AP follows the COCO-style protocol: per category and IoU threshold in
//! `0.5:0.05:0.95`, detections are matched greedily in score order (each
//! ground-truth box matched at most once, highest-IoU available box wins),
//! the precision envelope is sampled at 101 recall points, and the category
//! AP is the mean over the ten thresholds. Categories with no ground truth
//! are excluded from all means. Reported values are on the 100 scale.

use std::collections::BTreeMap;

use ndarray::Ix2;
use serde::{Deserialize, Serialize};

use crate::datasets::{DetectionImage, FrequencyGroup, FrequencyGroups};
use crate::detector::{propose_regions, Detector};
use crate::error::Result;
use crate::geometry::{decode_deltas_clamped, iou, nms, BoxCxcywh};
use crate::nn::{sigmoid, ParamBinder, ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One final detection. The score is always
/// `sigmoid(objectness logit) * softmax(class logits)[category]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category: usize,
    pub bbox: BoxCxcywh,
    pub score: f64,
}

/// Inference thresholds. Defaults follow the detection evaluation setting:
/// strict `score > 1e-4` filter and at most 300 boxes per image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub score_floor: f64,
    pub max_detections: usize,
    pub nms_iou: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            score_floor: 1e-4,
            max_detections: 300,
            nms_iou: 0.5,
        }
    }
}

/// Raw per-class scored boxes before filtering; used by inference and by
/// region generation (which needs candidates below the score floor).
pub fn score_image(
    det: &Detector,
    params: &ParamStore,
    image: &DetectionImage,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let tape = Tape::new();
    let binder = ParamBinder::new(&tape, params);
    let fp = det.extract_features(&tape, &binder, &image.pixels.to_chw());
    // rng is unused on the eval path; proposals need no sampling
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rpn = propose_regions(det, &tape, &binder, &fp, None, &mut rng);
    if rpn.proposals.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<BoxCxcywh> = rpn.proposals.iter().map(|p| p.bbox).collect();
    let roi_flat = det.roi_features(&tape, &fp, &boxes)?;
    let logits = det.incls_forward(&tape, &binder, roi_flat);
    let (deltas, obj) = det.loc_forward(&tape, &binder, roi_flat);

    let logits_v = tape.value(logits);
    let logits_v = logits_v.view().into_dimensionality::<Ix2>().unwrap();
    let deltas_v = tape.value(deltas);
    let deltas_v = deltas_v.view().into_dimensionality::<Ix2>().unwrap();
    let obj_v = tape.value(obj);

    let k = det.cfg.num_classes;
    let (img_w, img_h) = (fp.image_w as f64, fp.image_h as f64);
    let mut decoded = Vec::with_capacity(boxes.len());
    let mut class_probs = Vec::with_capacity(boxes.len());
    let mut obj_probs = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let d = [
            deltas_v[(i, 0)],
            deltas_v[(i, 1)],
            deltas_v[(i, 2)],
            deltas_v[(i, 3)],
        ];
        let refined = decode_deltas_clamped(&d, b).clipped(img_w, img_h);
        decoded.push(refined);
        let row = logits_v.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        class_probs.push(exps.iter().map(|e| e / z).collect::<Vec<f64>>());
        obj_probs.push(sigmoid(obj_v[[i]]));
    }

    // per-class greedy NMS over the composed scores
    let mut detections = Vec::new();
    for c in 0..k {
        let mut cls_boxes = Vec::new();
        let mut cls_scores = Vec::new();
        for i in 0..decoded.len() {
            if decoded[i].w < 1.0 || decoded[i].h < 1.0 {
                continue;
            }
            cls_boxes.push(decoded[i]);
            cls_scores.push(obj_probs[i] * class_probs[i][c]);
        }
        for idx in nms(&cls_boxes, &cls_scores, nms_iou) {
            detections.push(Detection {
                image_id: image.image_id,
                category: c,
                bbox: cls_boxes[idx],
                score: cls_scores[idx],
            });
        }
    }
    Ok(detections)
}

/// Apply the final filtering contract to scored boxes: strict score floor,
/// then the top `max_detections` by score.
pub fn select_final_detections(mut detections: Vec<Detection>, opts: &InferOptions) -> Vec<Detection> {
    detections.retain(|d| d.score > opts.score_floor);
    detections.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    detections.truncate(opts.max_detections);
    detections
}

/// Full inference for one image.
pub fn infer(
    det: &Detector,
    params: &ParamStore,
    image: &DetectionImage,
    opts: &InferOptions,
) -> Result<Vec<Detection>> {
    let scored = score_image(det, params, image, opts.nms_iou)?;
    Ok(select_final_detections(scored, opts))
}

/// AP report on the 100 scale, overall and per frequency group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP_r")]
    pub ap_rare: f64,
    #[serde(rename = "AP_c")]
    pub ap_common: f64,
    #[serde(rename = "AP_f")]
    pub ap_frequent: f64,
    /// Per-category AP; categories without ground truth are absent.
    pub per_category: BTreeMap<usize, f64>,
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Greedy matching of one category's detections (sorted by score, stable) at
/// one IoU threshold; returns a true/false flag per detection.
fn match_category(
    detections: &[(usize, BoxCxcywh)], // (image slot, box), already score-sorted
    gt: &[Vec<BoxCxcywh>],             // per image slot
    threshold: f64,
) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(detections.len());
    for (slot, bbox) in detections {
        let mut best = 0.0;
        let mut best_idx = None;
        for (gi, g) in gt[*slot].iter().enumerate() {
            if taken[*slot][gi] {
                continue;
            }
            let v = iou(bbox, g);
            if v >= threshold && v > best {
                best = v;
                best_idx = Some(gi);
            }
        }
        match best_idx {
            Some(gi) => {
                taken[*slot][gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// 101-point interpolated AP from per-detection match flags: build the
/// right-to-left precision envelope, then walk the recall grid once.
fn interpolated_ap(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let n = flags.len();
    let mut envelope = vec![0.0f64; n];
    let mut recalls = vec![0.0f64; n];
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        envelope[i] = tp as f64 / (i + 1) as f64;
        recalls[i] = tp as f64 / num_gt as f64;
    }
    for i in (0..n - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    let mut k = 0usize;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while k < n && recalls[k] < r {
            k += 1;
        }
        if k == n {
            break; // recall never reaches r; precision is 0 from here on
        }
        total += envelope[k];
    }
    total / 101.0
}

/// Evaluate AP over a detection set against ground truth with frequency-group
/// splits. Detections may arrive in any order; they are sorted by score
/// within each category (stable on ties).
pub fn evaluate_ap(
    detections: &[Detection],
    ground_truth: &[DetectionImage],
    groups: &FrequencyGroups,
) -> ApReport {
    let slot_of: BTreeMap<u64, usize> = ground_truth
        .iter()
        .enumerate()
        .map(|(i, g)| (g.image_id, i))
        .collect();

    let categories: Vec<usize> = groups.group.keys().copied().collect();
    let mut per_category = BTreeMap::new();

    for &c in &categories {
        let gt_boxes: Vec<Vec<BoxCxcywh>> = ground_truth
            .iter()
            .map(|img| {
                img.annotations
                    .iter()
                    .filter(|a| a.category == c)
                    .map(|a| a.bbox)
                    .collect()
            })
            .collect();
        let num_gt: usize = gt_boxes.iter().map(|g| g.len()).sum();
        if num_gt == 0 {
            continue; // excluded from every mean
        }
        let mut cat_dets: Vec<(f64, usize, BoxCxcywh)> = detections
            .iter()
            .filter(|d| d.category == c && slot_of.contains_key(&d.image_id))
            .map(|d| (d.score, slot_of[&d.image_id], d.bbox))
            .collect();
        cat_dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let ordered: Vec<(usize, BoxCxcywh)> = cat_dets.iter().map(|d| (d.1, d.2)).collect();

        let mut ap_sum = 0.0;
        for &t in &IOU_THRESHOLDS {
            let flags = match_category(&ordered, &gt_boxes, t);
            ap_sum += interpolated_ap(&flags, num_gt);
        }
        per_category.insert(c, 100.0 * ap_sum / IOU_THRESHOLDS.len() as f64);
    }

    let mean_over = |which: Option<FrequencyGroup>| -> f64 {
        let vals: Vec<f64> = per_category
            .iter()
            .filter(|(c, _)| which.map_or(true, |w| groups.of(**c) == w))
            .map(|(_, &v)| v)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };

    ApReport {
        ap: mean_over(None),
        ap_rare: mean_over(Some(FrequencyGroup::Rare)),
        ap_common: mean_over(Some(FrequencyGroup::Common)),
        ap_frequent: mean_over(Some(FrequencyGroup::Frequent)),
        per_category,
    }
}
