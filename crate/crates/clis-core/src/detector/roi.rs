//! Second-stage ROI sampling and the three detection head losses.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Detector, FeaturePyramid, Proposal};
use crate::datasets::InstanceAnnotation;
use crate::error::Result;
use crate::geometry::{encode_deltas, iou, BoxCxcywh};
use crate::nn::{ParamBinder, Tape, Var};

/// Balanced ROI sample for one image: boxes with their classification labels
/// (background = `num_classes`) and regression targets for the positives.
pub struct SampledRois {
    pub boxes: Vec<BoxCxcywh>,
    pub labels: Vec<usize>,
    pub pos_rows: Vec<usize>,
    pub reg_targets: Array2<f64>,
    pub obj_targets: Vec<f64>,
}

/// Sample ROIs from proposals plus the ground-truth boxes themselves (so
/// positives exist before the proposal head has learned anything).
pub fn sample_rois(
    det: &Detector,
    proposals: &[Proposal],
    gt: &[InstanceAnnotation],
    rng: &mut ChaCha8Rng,
) -> SampledRois {
    let cfg = &det.cfg;
    let mut candidates: Vec<BoxCxcywh> = proposals.iter().map(|p| p.bbox).collect();
    candidates.extend(gt.iter().map(|a| a.bbox));

    let mut pos: Vec<(BoxCxcywh, usize, [f64; 4])> = Vec::new();
    let mut neg: Vec<BoxCxcywh> = Vec::new();
    for c in &candidates {
        if c.w <= 1.0 || c.h <= 1.0 {
            continue;
        }
        let mut best = 0.0;
        let mut best_gt = None;
        for g in gt {
            let v = iou(c, &g.bbox);
            if v > best {
                best = v;
                best_gt = Some(g);
            }
        }
        if best >= cfg.match_pos_iou {
            let g = best_gt.unwrap();
            pos.push((*c, g.category, encode_deltas(&g.bbox, c)));
        } else if best < cfg.match_neg_iou {
            neg.push(*c);
        }
    }

    let max_pos = (cfg.samples_per_image as f64 * cfg.pos_fraction) as usize;
    shuffle(&mut pos, rng);
    pos.truncate(max_pos);
    shuffle(&mut neg, rng);
    neg.truncate(cfg.samples_per_image - pos.len());

    let mut boxes = Vec::with_capacity(pos.len() + neg.len());
    let mut labels = Vec::with_capacity(pos.len() + neg.len());
    let mut obj_targets = Vec::with_capacity(pos.len() + neg.len());
    let mut reg_targets = Array2::zeros((pos.len(), 4));
    let mut pos_rows = Vec::with_capacity(pos.len());
    for (row, (b, cat, enc)) in pos.iter().enumerate() {
        boxes.push(*b);
        labels.push(*cat);
        obj_targets.push(1.0);
        pos_rows.push(row);
        for d in 0..4 {
            reg_targets[(row, d)] = enc[d];
        }
    }
    for b in &neg {
        boxes.push(*b);
        labels.push(cfg.num_classes);
        obj_targets.push(0.0);
    }
    SampledRois {
        boxes,
        labels,
        pos_rows,
        reg_targets,
        obj_targets,
    }
}

pub struct RoiLosses {
    pub l_incls: Var,
    pub l_loc: Var,
    pub l_obj: Var,
}

/// Pool the sampled ROIs and compute instance-classification CE, positive-ROI
/// smooth-L1 box regression, and the class-agnostic objectness BCE.
pub fn roi_losses(
    det: &Detector,
    tape: &Tape,
    binder: &ParamBinder,
    fp: &FeaturePyramid,
    sample: &SampledRois,
) -> Result<RoiLosses> {
    let n = sample.boxes.len();
    let roi_flat = det.roi_features(tape, fp, &sample.boxes)?;
    let logits = det.incls_forward(tape, binder, roi_flat);
    let l_incls = tape.softmax_ce_mean(logits, &sample.labels);

    let (deltas, obj) = det.loc_forward(tape, binder, roi_flat);
    let l_obj = tape.bce_with_logits_mean(obj, &sample.obj_targets);
    let l_loc = if sample.pos_rows.is_empty() {
        tape.scalar(0.0)
    } else {
        let pos_deltas = tape.gather0(deltas, &sample.pos_rows);
        tape.smooth_l1_sum(pos_deltas, sample.reg_targets.clone(), n as f64)
    };
    Ok(RoiLosses {
        l_incls,
        l_loc,
        l_obj,
    })
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}
