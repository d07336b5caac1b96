//! Minimal two-stage detector with task-specialized sub-networks.
//!
//! A small strided CNN feeds a two-level feature pyramid. The proposal stage
//! scores anchors and regresses boxes; pooled ROI features then go through
//! two fully-connected trunks: the localization sub-network (box deltas +
//! class-agnostic objectness) and the classification sub-network (category
//! logits). The two trunks share no parameters unless task specialization is
//! switched off, in which case both heads read one `shared` trunk. The
//! classification trunk is the single owner of the classifier weights used by
//! both the instance-level and the image-level task when the siamese head is
//! active.

mod rpn;
mod roi;

pub use roi::{roi_losses, sample_rois, RoiLosses, SampledRois};
pub use rpn::{generate_anchors, propose_regions, Proposal, RpnOutput};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{ClisError, Result};
use crate::geometry::BoxCxcywh;
use crate::nn::{he_normal, normal_init, zeros, ParamBinder, ParamStore, Tape, Var};
use crate::trainer::AblationSwitches;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Widths of the four strided conv blocks.
    pub block_channels: [usize; 4],
    /// Channel count of both pyramid levels.
    pub pyramid_channels: usize,
    /// Width of the two fully-connected trunk layers.
    pub hidden_dim: usize,
    /// ROI pooling output is `pool_size x pool_size`.
    pub pool_size: usize,
    /// Contrastive embedding dimension.
    pub embed_dim: usize,
    /// Foreground category count; background is class `num_classes`.
    pub num_classes: usize,
    pub strides: [usize; 2],
    /// Anchor side lengths per pyramid level.
    pub anchor_scales: [Vec<f64>; 2],
    /// Boxes with `sqrt(area)` below this pool from level 0, others level 1.
    pub level_boundary: f64,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_nms_iou: f64,
    /// Proposals kept after NMS.
    pub proposal_count: usize,
    pub match_pos_iou: f64,
    pub match_neg_iou: f64,
    /// ROIs (and RPN anchors) sampled per image for the losses.
    pub samples_per_image: usize,
    pub pos_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block_channels: [16, 32, 64, 64],
            pyramid_channels: 64,
            hidden_dim: 256,
            pool_size: 7,
            embed_dim: 128,
            num_classes: 20,
            strides: [8, 16],
            anchor_scales: [vec![10.0, 16.0, 24.0], vec![32.0, 44.0, 58.0]],
            level_boundary: 28.0,
            rpn_pre_nms_top_n: 200,
            rpn_nms_iou: 0.7,
            proposal_count: 64,
            match_pos_iou: 0.5,
            match_neg_iou: 0.4,
            samples_per_image: 32,
            pos_fraction: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn roi_feature_len(&self) -> usize {
        self.pyramid_channels * self.pool_size * self.pool_size
    }
}

/// Multi-level convolutional features for one image.
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    pub image_w: usize,
    pub image_h: usize,
}

pub struct PyramidLevel {
    pub features: Var,
    pub stride: usize,
}

/// Detector = model config + the structural ablation switches that shape the
/// parameter layout.
#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub switches: AblationSwitches,
}

impl Detector {
    pub fn new(cfg: ModelConfig, switches: AblationSwitches) -> Self {
        Self { cfg, switches }
    }

    /// Trunk namespace used by the localization head.
    pub fn loc_trunk(&self) -> &'static str {
        if self.switches.use_tss {
            "loc"
        } else {
            "shared"
        }
    }

    /// Trunk namespace used by the instance-classification head.
    pub fn cls_trunk(&self) -> &'static str {
        if self.switches.use_tss {
            "cls"
        } else {
            "shared"
        }
    }

    /// Trunk namespace used by the image-classification head: the siamese
    /// design shares the instance-classification trunk, otherwise the task
    /// owns an independent copy.
    pub fn imcls_trunk(&self) -> &'static str {
        if self.switches.use_ss {
            self.cls_trunk()
        } else {
            "imcls"
        }
    }

    /// Classifier layer used by the image-classification task.
    pub fn imcls_logits_name(&self) -> &'static str {
        if self.switches.use_ss {
            "cls.logits"
        } else {
            "imcls.logits"
        }
    }

    /// Names of the online parameters the momentum branch mirrors, paired
    /// with their momentum copies.
    pub fn momentum_pairs(&self) -> Vec<(String, String)> {
        let trunk = self.cls_trunk();
        let mut pairs = vec![
            (format!("{trunk}.fc1.weight"), "momentum.fc1.weight".into()),
            (format!("{trunk}.fc1.bias"), "momentum.fc1.bias".into()),
            (format!("{trunk}.fc2.weight"), "momentum.fc2.weight".into()),
            (format!("{trunk}.fc2.bias"), "momentum.fc2.bias".into()),
            ("cls.logits.weight".into(), "momentum.logits.weight".into()),
            ("cls.logits.bias".into(), "momentum.logits.bias".into()),
        ];
        pairs.push(("proj.weight".into(), "momentum.proj.weight".into()));
        pairs.push(("proj.bias".into(), "momentum.proj.bias".into()));
        pairs
    }

    fn insert_conv(store: &mut ParamStore, seed: u64, name: &str, c_out: usize, c_in: usize, k: usize) {
        let w = format!("{name}.weight");
        store.insert(&w, he_normal(seed, &w, &[c_out, c_in, k, k], c_in * k * k));
        store.insert(format!("{name}.bias"), zeros(&[c_out]));
    }

    fn insert_fc(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize) {
        let w = format!("{name}.weight");
        store.insert(&w, he_normal(seed, &w, &[d_in, d_out], d_in));
        store.insert(format!("{name}.bias"), zeros(&[d_out]));
    }

    fn insert_output(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize, std: f64) {
        let w = format!("{name}.weight");
        store.insert(&w, normal_init(seed, &w, &[d_in, d_out], std));
        store.insert(format!("{name}.bias"), zeros(&[d_out]));
    }

    fn insert_trunk(&self, store: &mut ParamStore, seed: u64, trunk: &str) {
        let d_in = self.cfg.roi_feature_len();
        Self::insert_fc(store, seed, &format!("{trunk}.fc1"), d_in, self.cfg.hidden_dim);
        Self::insert_fc(
            store,
            seed,
            &format!("{trunk}.fc2"),
            self.cfg.hidden_dim,
            self.cfg.hidden_dim,
        );
    }

    /// Build the full parameter set for the configured switches. Momentum
    /// parameters start as exact copies of their online counterparts.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.cfg;
        let mut store = ParamStore::new();
        let [c0, c1, c2, c3] = cfg.block_channels;
        Self::insert_conv(&mut store, seed, "backbone.block0", c0, 3, 3);
        Self::insert_conv(&mut store, seed, "backbone.block1", c1, c0, 3);
        Self::insert_conv(&mut store, seed, "backbone.block2", c2, c1, 3);
        Self::insert_conv(&mut store, seed, "backbone.block3", c3, c2, 3);
        Self::insert_conv(&mut store, seed, "fpn.lateral0", cfg.pyramid_channels, c2, 1);
        Self::insert_conv(&mut store, seed, "fpn.lateral1", cfg.pyramid_channels, c3, 1);

        let n_anchors = cfg.anchor_scales[0].len();
        Self::insert_conv(
            &mut store,
            seed,
            "rpn.stem",
            cfg.pyramid_channels,
            cfg.pyramid_channels,
            3,
        );
        let w = "rpn.obj.weight";
        store.insert(
            w,
            normal_init(seed, w, &[n_anchors, cfg.pyramid_channels, 1, 1], 0.01),
        );
        store.insert("rpn.obj.bias", zeros(&[n_anchors]));
        let w = "rpn.delta.weight";
        store.insert(
            w,
            normal_init(seed, w, &[4 * n_anchors, cfg.pyramid_channels, 1, 1], 0.01),
        );
        store.insert("rpn.delta.bias", zeros(&[4 * n_anchors]));

        if self.switches.use_tss {
            self.insert_trunk(&mut store, seed, "loc");
            self.insert_trunk(&mut store, seed, "cls");
        } else {
            self.insert_trunk(&mut store, seed, "shared");
        }
        Self::insert_output(&mut store, seed, "loc.delta", cfg.hidden_dim, 4, 0.001);
        Self::insert_output(&mut store, seed, "loc.obj", cfg.hidden_dim, 1, 0.01);
        Self::insert_output(
            &mut store,
            seed,
            "cls.logits",
            cfg.hidden_dim,
            cfg.num_classes + 1,
            0.01,
        );

        if self.switches.use_ils && !self.switches.use_ss {
            self.insert_trunk(&mut store, seed, "imcls");
            Self::insert_output(
                &mut store,
                seed,
                "imcls.logits",
                cfg.hidden_dim,
                cfg.num_classes + 1,
                0.01,
            );
        }

        if self.switches.use_clr {
            Self::insert_output(&mut store, seed, "proj", cfg.hidden_dim, cfg.embed_dim, 0.05);
            for (online, momentum) in self.momentum_pairs() {
                let value = store.get(&online).clone();
                store.insert(momentum, value);
            }
        }
        store
    }

    /// Backbone + lateral projections: strides 8 and 16, deterministic given
    /// parameters.
    pub fn extract_features(
        &self,
        tape: &Tape,
        binder: &ParamBinder,
        image: &Array3<f64>,
    ) -> FeaturePyramid {
        let (_, h, w) = image.dim();
        let x = tape.leaf(image.clone().into_dyn());
        let conv = |x: Var, name: &str, stride: usize, pad: usize| {
            tape.conv2d(
                x,
                binder.var(&format!("{name}.weight")),
                binder.var(&format!("{name}.bias")),
                stride,
                pad,
            )
        };
        let b0 = tape.relu(conv(x, "backbone.block0", 2, 1));
        let b1 = tape.relu(conv(b0, "backbone.block1", 2, 1));
        let b2 = tape.relu(conv(b1, "backbone.block2", 2, 1));
        let b3 = tape.relu(conv(b2, "backbone.block3", 2, 1));
        let p0 = conv(b2, "fpn.lateral0", 1, 0);
        let p1 = conv(b3, "fpn.lateral1", 1, 0);
        FeaturePyramid {
            levels: vec![
                PyramidLevel {
                    features: p0,
                    stride: self.cfg.strides[0],
                },
                PyramidLevel {
                    features: p1,
                    stride: self.cfg.strides[1],
                },
            ],
            image_w: w,
            image_h: h,
        }
    }

    /// Scale-aware pooling: each box is pooled from the level its size
    /// selects, and rows are returned in the input box order, flattened to
    /// `[n, C*P*P]`. Degenerate boxes (side <= 1 px) are rejected.
    pub fn roi_features(&self, tape: &Tape, fp: &FeaturePyramid, boxes: &[BoxCxcywh]) -> Result<Var> {
        for b in boxes {
            if b.w <= 1.0 || b.h <= 1.0 {
                return Err(ClisError::Shape(format!(
                    "degenerate ROI {:.2}x{:.2} rejected",
                    b.w, b.h
                )));
            }
        }
        let p = self.cfg.pool_size;
        let mut per_level: Vec<Vec<(usize, BoxCxcywh)>> = vec![Vec::new(); fp.levels.len()];
        for (i, b) in boxes.iter().enumerate() {
            let level = if (b.w * b.h).sqrt() < self.cfg.level_boundary {
                0
            } else {
                1
            };
            per_level[level].push((i, *b));
        }
        let mut chunks = Vec::new();
        let mut order = Vec::new();
        for (level, group) in per_level.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let level_boxes: Vec<BoxCxcywh> = group.iter().map(|(_, b)| *b).collect();
            let pooled = tape.roi_align(
                fp.levels[level].features,
                &level_boxes,
                fp.levels[level].stride as f64,
                p,
            );
            chunks.push(pooled);
            order.extend(group.iter().map(|(i, _)| *i));
        }
        let stacked = if chunks.len() == 1 {
            chunks[0]
        } else {
            tape.concat0(&chunks)
        };
        // restore input order: row j of the result must be box j
        let mut perm = vec![0usize; boxes.len()];
        for (row, &orig) in order.iter().enumerate() {
            perm[orig] = row;
        }
        let ordered = tape.gather0(stacked, &perm);
        Ok(tape.reshape(ordered, &[boxes.len(), self.cfg.roi_feature_len()]))
    }

    /// Two fully-connected layers of the named trunk.
    pub fn trunk_forward(&self, tape: &Tape, binder: &ParamBinder, trunk: &str, x: Var) -> Var {
        let h1 = tape.relu(tape.add_row_bias(
            tape.matmul(x, binder.var(&format!("{trunk}.fc1.weight"))),
            binder.var(&format!("{trunk}.fc1.bias")),
        ));
        tape.relu(tape.add_row_bias(
            tape.matmul(h1, binder.var(&format!("{trunk}.fc2.weight"))),
            binder.var(&format!("{trunk}.fc2.bias")),
        ))
    }

    /// Localization outputs from pooled features: per-ROI box deltas
    /// `(dx, dy, dw, dh)` and a class-agnostic objectness logit.
    pub fn loc_forward(&self, tape: &Tape, binder: &ParamBinder, roi_flat: Var) -> (Var, Var) {
        let feats = self.trunk_forward(tape, binder, self.loc_trunk(), roi_flat);
        let deltas = tape.add_row_bias(
            tape.matmul(feats, binder.var("loc.delta.weight")),
            binder.var("loc.delta.bias"),
        );
        let n = tape.shape(roi_flat)[0];
        let obj = tape.reshape(
            tape.add_row_bias(
                tape.matmul(feats, binder.var("loc.obj.weight")),
                binder.var("loc.obj.bias"),
            ),
            &[n],
        );
        (deltas, obj)
    }

    /// Category logits (including background) from pooled features through
    /// the classification sub-network.
    pub fn incls_forward(&self, tape: &Tape, binder: &ParamBinder, roi_flat: Var) -> Var {
        let feats = self.trunk_forward(tape, binder, self.cls_trunk(), roi_flat);
        tape.add_row_bias(
            tape.matmul(feats, binder.var("cls.logits.weight")),
            binder.var("cls.logits.bias"),
        )
    }
}
