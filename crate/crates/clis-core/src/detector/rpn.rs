//! Proposal stage: dense anchors over both pyramid levels, a small conv head
//! scoring them, binary objectness + box regression losses on sampled
//! anchors, and greedy-NMS proposal selection.

use ndarray::Ix1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Detector, FeaturePyramid};
use crate::datasets::InstanceAnnotation;
use crate::geometry::{decode_deltas_clamped, encode_deltas, iou, nms, BoxCxcywh};
use crate::nn::{ParamBinder, Tape, Var};

/// One region proposal with its objectness score in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoxCxcywh,
    pub score: f64,
}

pub struct RpnOutput {
    pub proposals: Vec<Proposal>,
    /// Objectness + regression loss; present in training mode only.
    pub loss: Option<Var>,
}

/// Dense anchors for one level, enumerated anchor-major then row-major so the
/// layout matches the flattened `[A, H, W]` conv outputs.
pub fn generate_anchors(scales: &[f64], stride: usize, fh: usize, fw: usize) -> Vec<BoxCxcywh> {
    let mut anchors = Vec::with_capacity(scales.len() * fh * fw);
    for &s in scales {
        for i in 0..fh {
            for j in 0..fw {
                anchors.push(BoxCxcywh::new(
                    (j as f64 + 0.5) * stride as f64,
                    (i as f64 + 0.5) * stride as f64,
                    s,
                    s,
                ));
            }
        }
    }
    anchors
}

/// Anchor label assignment: positive at IoU >= `pos`, negative below `neg`,
/// ignored in between. No forcing of a best anchor per box: an image whose
/// boxes overlap nothing above the threshold simply trains all anchors as
/// negatives.
fn match_anchors(
    anchors: &[BoxCxcywh],
    gt: &[InstanceAnnotation],
    pos: f64,
    neg: f64,
) -> Vec<(i8, usize)> {
    anchors
        .iter()
        .map(|a| {
            let mut best = 0.0;
            let mut best_gt = 0;
            for (gi, g) in gt.iter().enumerate() {
                let v = iou(a, &g.bbox);
                if v > best {
                    best = v;
                    best_gt = gi;
                }
            }
            if best >= pos {
                (1, best_gt)
            } else if best < neg {
                (0, best_gt)
            } else {
                (-1, best_gt)
            }
        })
        .collect()
}

/// Run the proposal stage. With ground truth present, also returns the RPN
/// loss over a balanced anchor sample.
pub fn propose_regions(
    det: &Detector,
    tape: &Tape,
    binder: &ParamBinder,
    fp: &FeaturePyramid,
    gt: Option<&[InstanceAnnotation]>,
    rng: &mut ChaCha8Rng,
) -> RpnOutput {
    let cfg = &det.cfg;
    let mut all_anchors = Vec::new();
    let mut obj_flat_vars = Vec::new();
    let mut delta_flat_vars = Vec::new();
    let mut level_dims = Vec::new();

    for level in &fp.levels {
        let shape = tape.shape(level.features);
        let (fh, fw) = (shape[1], shape[2]);
        let scales = if level.stride == cfg.strides[0] {
            &cfg.anchor_scales[0]
        } else {
            &cfg.anchor_scales[1]
        };
        all_anchors.extend(generate_anchors(scales, level.stride, fh, fw));

        let stem = tape.relu(tape.conv2d(
            level.features,
            binder.var("rpn.stem.weight"),
            binder.var("rpn.stem.bias"),
            1,
            1,
        ));
        let n_a = scales.len();
        let obj = tape.conv2d(
            stem,
            binder.var("rpn.obj.weight"),
            binder.var("rpn.obj.bias"),
            1,
            0,
        );
        let delta = tape.conv2d(
            stem,
            binder.var("rpn.delta.weight"),
            binder.var("rpn.delta.bias"),
            1,
            0,
        );
        obj_flat_vars.push(tape.reshape(obj, &[n_a * fh * fw]));
        delta_flat_vars.push(tape.reshape(delta, &[4 * n_a * fh * fw]));
        level_dims.push((n_a, fh, fw));
    }

    let obj_all = if obj_flat_vars.len() == 1 {
        obj_flat_vars[0]
    } else {
        tape.concat0(&obj_flat_vars)
    };
    let delta_all = if delta_flat_vars.len() == 1 {
        delta_flat_vars[0]
    } else {
        tape.concat0(&delta_flat_vars)
    };

    // flat index of (anchor a, cell i, j, component d) across levels
    let mut level_anchor_offset = Vec::new();
    let mut level_delta_offset = Vec::new();
    let mut acc_a = 0;
    let mut acc_d = 0;
    for &(n_a, fh, fw) in &level_dims {
        level_anchor_offset.push(acc_a);
        level_delta_offset.push(acc_d);
        acc_a += n_a * fh * fw;
        acc_d += 4 * n_a * fh * fw;
    }
    let delta_index = |anchor_idx: usize, d: usize| -> usize {
        // locate the level containing this anchor
        let mut level = 0;
        while level + 1 < level_dims.len() && anchor_idx >= level_anchor_offset[level + 1] {
            level += 1;
        }
        let (_, fh, fw) = level_dims[level];
        let local = anchor_idx - level_anchor_offset[level];
        let a = local / (fh * fw);
        let cell = local % (fh * fw);
        level_delta_offset[level] + ((a * 4 + d) * fh + cell / fw) * fw + cell % fw
    };

    // decode proposals from detached predictions
    let obj_values = tape.value(obj_all);
    let obj_values = obj_values.view().into_dimensionality::<Ix1>().unwrap();
    let delta_values = tape.value(delta_all);
    let delta_values = delta_values.view().into_dimensionality::<Ix1>().unwrap();

    let mut scored: Vec<(usize, f64)> = (0..all_anchors.len())
        .map(|i| (i, crate::nn::sigmoid(obj_values[i])))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(cfg.rpn_pre_nms_top_n);

    let mut cand_boxes = Vec::new();
    let mut cand_scores = Vec::new();
    for &(i, score) in &scored {
        let d = [
            delta_values[delta_index(i, 0)],
            delta_values[delta_index(i, 1)],
            delta_values[delta_index(i, 2)],
            delta_values[delta_index(i, 3)],
        ];
        let decoded = decode_deltas_clamped(&d, &all_anchors[i])
            .clipped(fp.image_w as f64, fp.image_h as f64);
        if decoded.w >= 2.0 && decoded.h >= 2.0 {
            cand_boxes.push(decoded);
            cand_scores.push(score);
        }
    }
    let keep = nms(&cand_boxes, &cand_scores, cfg.rpn_nms_iou);
    let proposals: Vec<Proposal> = keep
        .into_iter()
        .take(cfg.proposal_count)
        .map(|i| Proposal {
            bbox: cand_boxes[i],
            score: cand_scores[i],
        })
        .collect();

    let loss = gt.map(|gt| {
        let matches = match_anchors(&all_anchors, gt, cfg.match_pos_iou, cfg.match_neg_iou);
        let mut pos_idx: Vec<usize> = Vec::new();
        let mut neg_idx: Vec<usize> = Vec::new();
        for (i, &(label, _)) in matches.iter().enumerate() {
            match label {
                1 => pos_idx.push(i),
                0 => neg_idx.push(i),
                _ => {}
            }
        }
        let max_pos = (cfg.samples_per_image as f64 * cfg.pos_fraction) as usize;
        shuffle(&mut pos_idx, rng);
        pos_idx.truncate(max_pos);
        shuffle(&mut neg_idx, rng);
        neg_idx.truncate(cfg.samples_per_image - pos_idx.len());

        let mut sampled = pos_idx.clone();
        sampled.extend(&neg_idx);
        let targets: Vec<f64> = sampled
            .iter()
            .map(|&i| if matches[i].0 == 1 { 1.0 } else { 0.0 })
            .collect();
        let sampled_obj = tape.gather0(obj_all, &sampled);
        let cls_loss = tape.bce_with_logits_mean(sampled_obj, &targets);

        if pos_idx.is_empty() {
            return cls_loss;
        }
        let mut delta_gather = Vec::with_capacity(pos_idx.len() * 4);
        let mut reg_targets = ndarray::Array2::<f64>::zeros((pos_idx.len(), 4));
        for (row, &i) in pos_idx.iter().enumerate() {
            for d in 0..4 {
                delta_gather.push(delta_index(i, d));
            }
            let enc = encode_deltas(&gt[matches[i].1].bbox, &all_anchors[i]);
            for d in 0..4 {
                reg_targets[(row, d)] = enc[d];
            }
        }
        let pred = tape.reshape(tape.gather0(delta_all, &delta_gather), &[pos_idx.len(), 4]);
        let reg_loss = tape.smooth_l1_sum(pred, reg_targets, sampled.len() as f64);
        tape.add(cls_loss, reg_loss)
    });

    RpnOutput { proposals, loss }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}
