//! Collaborative-learning core: the siamese image-classification branch, the
//! projection head, the momentum branch, the bounded FIFO feature queue, and
//! the contrastive regularizer.
//!
//! The image-classification task pools the pre-defined region of each weak
//! view and runs it through the same classifier as the detector's
//! instance-classification head (when the siamese switch is on, literally the
//! same parameters). For each picked instance, the query embedding `f_i`
//! comes from the online branch on the weak scene and the key `f_d` from the
//! momentum branch on the detection scene; the loss pulls them together
//! against the queue of negatives. Gradients flow only through `f_i`.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};

use crate::detector::{Detector, FeaturePyramid, PyramidLevel};
use crate::error::{ClisError, Result};
use crate::nn::{ParamBinder, ParamStore, Tape, Var};
use crate::trainer::{ContrastivePick, WeakView};

/// Bounded FIFO dictionary of unit-norm embeddings used as contrastive
/// negatives.
#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    entries: VecDeque<Array1<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.entries.iter()
    }

    /// Stack the queue into `[m, d]`, oldest first.
    pub fn as_matrix(&self) -> Option<Array2<f64>> {
        let first = self.entries.front()?;
        let d = first.len();
        let mut out = Array2::zeros((self.entries.len(), d));
        for (i, e) in self.entries.iter().enumerate() {
            out.row_mut(i).assign(e);
        }
        Some(out)
    }
}

/// Append embeddings in order; the oldest entries are evicted first once the
/// queue is full. Entries are expected unit-norm.
pub fn enqueue(queue: &mut FeatureQueue, embeddings: Vec<Array1<f64>>) {
    for e in embeddings {
        debug_assert!(
            (e.dot(&e).sqrt() - 1.0).abs() < 1e-6,
            "queue entries must be unit-norm"
        );
        if queue.entries.len() == queue.capacity {
            queue.entries.pop_front();
        }
        queue.entries.push_back(e);
    }
}

/// Momentum copies of the classification trunk and its projection head.
/// `update` applies `theta_k <- m * theta_k + (1 - m) * theta_q` elementwise.
#[derive(Debug, Clone)]
pub struct MomentumBranch {
    pairs: Vec<(String, String)>,
    m: f64,
}

impl MomentumBranch {
    pub fn new(pairs: Vec<(String, String)>, m: f64) -> Self {
        Self { pairs, m }
    }

    pub fn coefficient(&self) -> f64 {
        self.m
    }

    pub fn update(&self, params: &mut ParamStore) -> Result<()> {
        for (online, momentum) in &self.pairs {
            let q = params.get(online).clone();
            let k = params.get_mut(momentum);
            if q.shape() != k.shape() {
                return Err(ClisError::Shape(format!(
                    "momentum update: {online} {:?} vs {momentum} {:?}",
                    q.shape(),
                    k.shape()
                )));
            }
            k.zip_mut_with(&q, |kv, &qv| *kv = self.m * *kv + (1.0 - self.m) * qv);
        }
        Ok(())
    }
}

/// Projection head: one fully-connected layer to the embedding dimension
/// followed by L2 normalization. Zero feature rows fall back to the first
/// basis vector and are flagged.
pub fn project(
    tape: &Tape,
    binder: &ParamBinder,
    features: Var,
    head: &str,
) -> (Var, Vec<bool>) {
    let z = tape.add_row_bias(
        tape.matmul(features, binder.var(&format!("{head}.weight"))),
        binder.var(&format!("{head}.bias")),
    );
    tape.l2_normalize_rows(z)
}

/// The InfoNCE-style loss over unit embeddings: for each row,
/// `-log( exp(f_i . f_d / tau) / (exp(f_i . f_d / tau) + sum_q exp(f_i . q / tau)) )`.
/// `f_d` and the queue are constants; gradients reach `f_i` only. An empty
/// queue makes the ratio 1 and the loss exactly 0.
pub fn contrastive_loss(
    tape: &Tape,
    f_i: Var,
    f_d: &Array2<f64>,
    queue: &FeatureQueue,
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(ClisError::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let Some(q) = queue.as_matrix() else {
        return Ok(tape.scalar(0.0));
    };
    let f_d_var = tape.leaf(f_d.clone().into_dyn());
    let s_pos = tape.scale(tape.rows_dot(f_i, f_d_var), 1.0 / tau);
    let q_t = tape.leaf(q.t().to_owned().into_dyn());
    let s_neg = tape.scale(tape.matmul(f_i, q_t), 1.0 / tau);
    let scores = tape.prepend_col(s_pos, s_neg);
    let lse = tape.logsumexp_rows(scores);
    tape_mean_sub(tape, lse, s_pos)
}

fn tape_mean_sub(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    Ok(tape.mean_all(tape.sub(a, b)))
}

/// Output of the image-classification forward pass over a batch of weak
/// views.
pub struct ImclsOutput {
    /// Category logits, one row per weak sample across all views.
    pub logits: Var,
    /// Mean CE against the single labels (averaged over `B_i`).
    pub loss: Var,
    /// Pooled ROI features (pre-trunk), row-aligned with `logits`.
    pub pooled: Var,
    /// Trunk features (post-trunk), row-aligned with `logits`.
    pub features: Var,
    /// Row index of `(view, sample)`.
    pub row_of: Vec<Vec<usize>>,
}

/// Run the image-classification task: shared backbone on each weak view,
/// ROI pooling on the pre-defined regions, the (siamese) classification
/// trunk, and softmax CE against the image labels.
pub fn imcls_forward(
    det: &Detector,
    tape: &Tape,
    binder: &ParamBinder,
    views: &[WeakView],
) -> Result<ImclsOutput> {
    if views.is_empty() {
        return Err(ClisError::Dataset("imcls_forward on an empty batch".into()));
    }
    let mut pooled_chunks = Vec::new();
    let mut labels = Vec::new();
    let mut row_of = Vec::with_capacity(views.len());
    let mut next_row = 0;
    for view in views {
        let fp = det.extract_features(tape, binder, &view.pixels.to_chw());
        let boxes: Vec<_> = view.samples.iter().map(|s| s.region).collect();
        let pooled = det.roi_features(tape, &fp, &boxes)?;
        pooled_chunks.push(pooled);
        let mut rows = Vec::with_capacity(view.samples.len());
        for s in &view.samples {
            labels.push(s.label);
            rows.push(next_row);
            next_row += 1;
        }
        row_of.push(rows);
    }
    let pooled = if pooled_chunks.len() == 1 {
        pooled_chunks[0]
    } else {
        tape.concat0(&pooled_chunks)
    };
    let features = det.trunk_forward(tape, binder, det.imcls_trunk(), pooled);
    let logits = tape.add_row_bias(
        tape.matmul(
            features,
            binder.var(&format!("{}.weight", det.imcls_logits_name())),
        ),
        binder.var(&format!("{}.bias", det.imcls_logits_name())),
    );
    let loss = tape.softmax_ce_mean(logits, &labels);
    Ok(ImclsOutput {
        logits,
        loss,
        pooled,
        features,
        row_of,
    })
}

/// Assemble the contrastive pairs for the picked instances and evaluate the
/// loss against the queue.
///
/// `f_i` is the online projection of the weak-scene trunk features; `f_d` is
/// the momentum projection of the detection-scene ROI at the paste box,
/// pooled from detached detection features so no gradient reaches the
/// backbone through the key side. Returns the loss and the momentum
/// embeddings of both views (the keys to enqueue after the step).
#[allow(clippy::too_many_arguments)]
pub fn build_contrastive_pairs(
    det: &Detector,
    tape: &Tape,
    binder: &ParamBinder,
    imcls: &ImclsOutput,
    picks: &[ContrastivePick],
    det_pyramids: &[FeaturePyramid],
    queue: &FeatureQueue,
    tau: f64,
) -> Result<(Var, Vec<Array1<f64>>)> {
    assert!(!picks.is_empty());
    // query side: online trunk features of the picked weak samples
    let rows: Vec<usize> = picks
        .iter()
        .map(|p| imcls.row_of[p.view_index][p.sample_index])
        .collect();
    let query_feats = tape.gather0(imcls.features, &rows);
    let (f_i, _) = project(tape, binder, query_feats, "proj");

    // key side, weak view: momentum trunk + projection on the same pooled
    // regions (values only; nothing depends on these nodes)
    let pooled_weak = tape.gather0(imcls.pooled, &rows);
    let k_i = momentum_embed(det, tape, binder, pooled_weak);

    // key side, detection scene: pool the paste boxes from detached features
    let mut k_d_rows: Vec<Array1<f64>> = Vec::with_capacity(picks.len());
    {
        // detach each detection pyramid once
        let mut detached: Vec<Option<FeaturePyramid>> = Vec::new();
        for _ in det_pyramids {
            detached.push(None);
        }
        for (i, fp) in det_pyramids.iter().enumerate() {
            if picks.iter().any(|p| p.detection_index == i) {
                detached[i] = Some(FeaturePyramid {
                    levels: fp
                        .levels
                        .iter()
                        .map(|l| PyramidLevel {
                            features: tape.detach(l.features),
                            stride: l.stride,
                        })
                        .collect(),
                    image_w: fp.image_w,
                    image_h: fp.image_h,
                });
            }
        }
        for p in picks {
            let fp = detached[p.detection_index]
                .as_ref()
                .expect("detached above");
            let pooled = det.roi_features(tape, fp, &[p.paste_box])?;
            let emb = momentum_embed(det, tape, binder, pooled);
            k_d_rows.push(row_to_array(tape, emb, 0));
        }
    }

    let d = det.cfg.embed_dim;
    let mut f_d = Array2::zeros((picks.len(), d));
    for (i, row) in k_d_rows.iter().enumerate() {
        f_d.row_mut(i).assign(row);
    }

    let loss = contrastive_loss(tape, f_i, &f_d, queue, tau)?;

    // keys from both views of each picked instance, in pick order
    let mut keys = Vec::with_capacity(picks.len() * 2);
    for (i, k_d) in k_d_rows.into_iter().enumerate() {
        keys.push(row_to_array(tape, k_i, i));
        keys.push(k_d);
    }
    Ok((loss, keys))
}

/// Momentum-branch embedding of pooled ROI features (values used as keys).
fn momentum_embed(det: &Detector, tape: &Tape, binder: &ParamBinder, pooled: Var) -> Var {
    let h1 = tape.relu(tape.add_row_bias(
        tape.matmul(pooled, binder.var("momentum.fc1.weight")),
        binder.var("momentum.fc1.bias"),
    ));
    let h2 = tape.relu(tape.add_row_bias(
        tape.matmul(h1, binder.var("momentum.fc2.weight")),
        binder.var("momentum.fc2.bias"),
    ));
    let _ = det;
    let (emb, _) = project(tape, binder, h2, "momentum.proj");
    emb
}

fn row_to_array(tape: &Tape, mat: Var, row: usize) -> Array1<f64> {
    let v = tape.value(mat);
    let v2 = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    v2.row(row).to_owned()
}
