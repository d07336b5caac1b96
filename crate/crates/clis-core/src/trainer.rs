//! Mixed-batch composition, the joint loss, the SGD schedule, and the
//! end-to-end training loop with all ablation switches.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, MosaicImage, PastedComposite};
use crate::collab::{self, FeatureQueue, MomentumBranch};
use crate::datasets::{Benchmark, DetectionImage, WeakImage};
use crate::detector::{self, Detector, ModelConfig};
use crate::error::{ClisError, Result};
use crate::geometry::BoxCxcywh;
use crate::nn::{fnv1a64, ParamBinder, ParamStore, SgdMomentum, Tape};

/// Which mechanisms are active. The dependent switches require image-level
/// supervision: contrastive regularization and the siamese head are
/// meaningless without the weak branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    pub use_tss: bool,
    pub use_ss: bool,
    pub use_clr: bool,
    pub use_ils: bool,
}

impl AblationSwitches {
    pub fn all_on() -> Self {
        Self {
            use_tss: true,
            use_ss: true,
            use_clr: true,
            use_ils: true,
        }
    }

    /// The plain detector: no task specialization, no weak supervision.
    pub fn all_off() -> Self {
        Self {
            use_tss: false,
            use_ss: false,
            use_clr: false,
            use_ils: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_clr && !self.use_ils {
            return Err(ClisError::Config(
                "contrastive regularization requires image-level supervision".into(),
            ));
        }
        if self.use_ss && !self.use_ils {
            return Err(ClisError::Config(
                "the siamese sub-network requires image-level supervision".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step loss values. `total` is always the exact linear combination
/// `L_rpn + L_incls + L_loc + L_obj + alpha * L_imcls + beta * L_con`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_rpn")]
    pub l_rpn: f64,
    #[serde(rename = "L_incls")]
    pub l_incls: f64,
    #[serde(rename = "L_loc")]
    pub l_loc: f64,
    #[serde(rename = "L_obj")]
    pub l_obj: f64,
    #[serde(rename = "L_imcls")]
    pub l_imcls: f64,
    #[serde(rename = "L_con")]
    pub l_con: f64,
    pub total: f64,
}

/// Compose the joint loss from its parts.
pub fn total_loss(
    l_rpn: f64,
    l_incls: f64,
    l_loc: f64,
    l_obj: f64,
    l_imcls: f64,
    l_con: f64,
    alpha: f64,
    beta: f64,
) -> LossBreakdown {
    assert!(alpha >= 0.0 && beta >= 0.0, "loss weights must be non-negative");
    LossBreakdown {
        l_rpn,
        l_incls,
        l_loc,
        l_obj,
        l_imcls,
        l_con,
        total: l_rpn + l_incls + l_loc + l_obj + alpha * l_imcls + beta * l_con,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub detection_batch: usize,
    /// Weak images per detection image (`B_i = s * B_d`).
    pub s: usize,
    /// Instances picked per detection image for contrastive pairs.
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub queue_capacity: usize,
    pub momentum_m: f64,
    /// Reference learning rate at the reference batch size of 16; the
    /// effective rate is scaled linearly by `detection_batch / 16`.
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the schedule at which the rate decays by 10x.
    pub lr_decay_at: (f64, f64),
    pub repeat_factor_threshold: f64,
    /// Whether pasted instances join the detection image's ground truth and
    /// participate in the instance-classification and localization losses.
    pub paste_as_annotation: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            detection_batch: 2,
            s: 4,
            t: 2,
            alpha: 0.1,
            beta: 0.05,
            tau: 0.2,
            queue_capacity: 4096,
            momentum_m: 0.999,
            base_lr: 0.02,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_at: (0.7, 0.9),
            repeat_factor_threshold: 0.05,
            paste_as_annotation: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t > self.s {
            return Err(ClisError::Config(format!(
                "t = {} picked instances cannot exceed s = {}",
                self.t, self.s
            )));
        }
        if self.tau <= 0.0 {
            return Err(ClisError::Config("temperature must be positive".into()));
        }
        if self.iterations == 0 || self.detection_batch == 0 {
            return Err(ClisError::Config("empty schedule".into()));
        }
        Ok(())
    }

    pub fn effective_lr(&self, step: usize) -> f64 {
        let base = self.base_lr * self.detection_batch as f64 / 16.0;
        let frac = step as f64 / self.iterations as f64;
        if frac >= self.lr_decay_at.1 {
            base * 0.01
        } else if frac >= self.lr_decay_at.0 {
            base * 0.1
        } else {
            base
        }
    }
}

/// One weak view entering the image-classification task: a (possibly mosaic)
/// pixel canvas with the regions and labels of the source instances.
pub struct WeakView {
    pub pixels: crate::datasets::ImageData,
    pub samples: Vec<WeakViewSample>,
}

pub struct WeakViewSample {
    pub source_id: u64,
    pub region: BoxCxcywh,
    pub label: usize,
}

/// A contrastive pick: where the instance sits in the weak views and where
/// its paste landed in the detection scene.
pub struct ContrastivePick {
    /// Index of the view and the sample within it (the `f_i` side).
    pub view_index: usize,
    pub sample_index: usize,
    /// Index of the detection image carrying the paste (the `f_d` side).
    pub detection_index: usize,
    pub paste_box: BoxCxcywh,
    pub label: usize,
}

/// One composed training batch across the two supervision types.
pub struct MixedBatch {
    pub detection: Vec<DetectionImage>,
    pub weak_views: Vec<WeakView>,
    pub picks: Vec<ContrastivePick>,
    /// Weak images per detection image actually drawn.
    pub s: usize,
}

/// Internal epoch-ordered stream of detection image ids under repeat-factor
/// sampling.
struct EpochStream {
    seed: u64,
    threshold: f64,
    epoch: usize,
    queue: Vec<u64>,
}

impl EpochStream {
    fn new(seed: u64, threshold: f64) -> Self {
        Self {
            seed,
            threshold,
            epoch: 0,
            queue: Vec::new(),
        }
    }

    fn next(&mut self, detection: &[DetectionImage]) -> u64 {
        if self.queue.is_empty() {
            let epoch_seed = self
                .seed
                .wrapping_add(fnv1a64(b"epoch").wrapping_mul(self.epoch as u64 + 1));
            let mut order =
                crate::datasets::repeat_factor_sample(detection, self.threshold, epoch_seed);
            order.reverse(); // pop from the back
            self.queue = order;
            self.epoch += 1;
        }
        self.queue.pop().expect("epoch order cannot be empty")
    }
}

/// Draw and augment one mixed batch: detection images in repeat-factor order
/// with scale/flip augmentation, weak images grouped into mosaics of four,
/// `t` picked instances pasted into their detection image.
#[allow(clippy::too_many_arguments)]
fn compose_batch_inner(
    data: &Benchmark,
    cfg: &TrainConfig,
    switches: &AblationSwitches,
    stream: &mut EpochStream,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    let mut detection = Vec::with_capacity(cfg.detection_batch);
    let mut weak_views = Vec::new();
    let mut picks = Vec::new();
    let s = if switches.use_ils { cfg.s } else { 0 };

    if s > 0 && data.weak.is_empty() {
        return Err(ClisError::Config(
            "weak supervision requested (s > 0) but the weak set is empty".into(),
        ));
    }
    for det_index in 0..cfg.detection_batch {
        let id = stream.next(&data.detection);
        let (mut image, _) =
            augment::augment_detection(data.detection_by_id(id), &cfg.augment, rng);

        if s > 0 {
            // choose this detection image's weak companions
            let weak_indices: Vec<usize> =
                (0..s).map(|_| rng.gen_range(0..data.weak.len())).collect();
            let mut augmented: Vec<WeakImage> = Vec::with_capacity(s);
            for &wi in &weak_indices {
                let weak = &data.weak[wi];
                if weak.predefined_region.is_none() {
                    return Err(ClisError::Dataset(format!(
                        "weak image {} has no pre-defined region; run region generation first",
                        weak.image_id
                    )));
                }
                let (aug, _) = augment::augment_weak(weak, &cfg.augment, rng);
                augmented.push(aug);
            }

            // mosaic complete groups of four; leftovers go in singly
            let first_view = weak_views.len();
            let mut owner: Vec<(usize, usize)> = Vec::with_capacity(s); // weak slot -> (view, sample)
            let mut chunks = augmented.chunks_exact(4);
            for group in chunks.by_ref() {
                let m: MosaicImage = augment::mosaic(group, cfg.augment.mosaic_size, rng)?;
                let mut samples = Vec::with_capacity(4);
                for (q, src) in m.provenance.iter().zip(group) {
                    samples.push(WeakViewSample {
                        source_id: q.source_id,
                        region: q.mapped_regions[0],
                        label: src.label,
                    });
                }
                for k in 0..4 {
                    owner.push((weak_views.len(), k));
                }
                weak_views.push(WeakView {
                    pixels: m.pixels,
                    samples,
                });
            }
            for aug in chunks.remainder() {
                owner.push((weak_views.len(), 0));
                weak_views.push(WeakView {
                    pixels: aug.pixels.clone(),
                    samples: vec![WeakViewSample {
                        source_id: aug.image_id,
                        region: aug.predefined_region.expect("checked above"),
                        label: aug.label,
                    }],
                });
            }
            let _ = first_view;

            // pick t instances for contrastive pairing, pasting each into
            // this detection image; unplaceable pastes shrink the pick count
            if switches.use_clr && cfg.t > 0 {
                let mut slots: Vec<usize> = (0..s).collect();
                for i in (1..slots.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    slots.swap(i, j);
                }
                for &slot in slots.iter().take(cfg.t) {
                    let weak = &data.weak[weak_indices[slot]];
                    match augment::paste_instance(weak, &image, &cfg.augment, rng) {
                        Ok(PastedComposite {
                            pixels,
                            paste_box,
                            label,
                            ..
                        }) => {
                            image.pixels = pixels;
                            if cfg.paste_as_annotation {
                                image.annotations.push(crate::datasets::InstanceAnnotation {
                                    bbox: paste_box,
                                    category: label,
                                });
                            }
                            let (view_index, sample_index) = owner[slot];
                            picks.push(ContrastivePick {
                                view_index,
                                sample_index,
                                detection_index: det_index,
                                paste_box,
                                label,
                            });
                        }
                        Err(ClisError::Unplaceable { .. }) => continue,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        detection.push(image);
    }

    Ok(MixedBatch {
        detection,
        weak_views,
        picks,
        s,
    })
}

/// Public batch composition over explicit datasets, mirroring the training
/// loop's sampling but callable standalone.
pub fn compose_batch(
    data: &Benchmark,
    cfg: &TrainConfig,
    switches: &AblationSwitches,
    seed: u64,
) -> Result<MixedBatch> {
    cfg.validate()?;
    switches.validate()?;
    let mut stream = EpochStream::new(seed, cfg.repeat_factor_threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    compose_batch_inner(data, cfg, switches, &mut stream, &mut rng)
}

/// One metrics record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub lr: f64,
}

pub struct TrainOutput {
    pub params: ParamStore,
    pub metrics: Vec<StepRecord>,
    /// Mean wall-clock seconds per optimizer step.
    pub mean_step_seconds: f64,
}

/// Joint training. Aborts with a diagnostic on non-finite loss instead of
/// continuing silently. Deterministic for a fixed (config, switches, seed).
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    switches: &AblationSwitches,
    data: &Benchmark,
    seed: u64,
    mut metrics_sink: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    switches.validate()?;
    let det = Detector::new(model.clone(), *switches);
    let mut params = det.init_params(seed);
    let mut opt = SgdMomentum::new(cfg.sgd_momentum, cfg.weight_decay);
    let momentum_branch = if switches.use_clr {
        Some(MomentumBranch::new(det.momentum_pairs(), cfg.momentum_m))
    } else {
        None
    };
    let mut queue = FeatureQueue::new(cfg.queue_capacity);
    let mut stream = EpochStream::new(seed, cfg.repeat_factor_threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(b"train"));

    let mut metrics = Vec::with_capacity(cfg.iterations);
    let started = std::time::Instant::now();

    for step in 0..cfg.iterations {
        let lr = cfg.effective_lr(step);
        let batch = compose_batch_inner(data, cfg, switches, &mut stream, &mut rng)?;
        let (breakdown, grads, keys) =
            training_step(&det, cfg, switches, &params, &batch, &queue, &mut rng)?;

        if !breakdown.total.is_finite() {
            return Err(ClisError::NonFiniteLoss {
                step,
                detail: format!(
                    "L_rpn={} L_incls={} L_loc={} L_obj={} L_imcls={} L_con={}",
                    breakdown.l_rpn,
                    breakdown.l_incls,
                    breakdown.l_loc,
                    breakdown.l_obj,
                    breakdown.l_imcls,
                    breakdown.l_con
                ),
            });
        }

        opt.step(&mut params, &grads, lr);
        if let Some(branch) = &momentum_branch {
            branch.update(&mut params)?;
            collab::enqueue(&mut queue, keys);
        }

        let record = StepRecord {
            step,
            losses: breakdown,
            lr,
        };
        if let Some(sink) = metrics_sink.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &record)?;
            sink.write_all(b"\n")
                .map_err(|e| ClisError::io("metrics stream", e))?;
        }
        metrics.push(record);
    }

    Ok(TrainOutput {
        params,
        metrics,
        mean_step_seconds: started.elapsed().as_secs_f64() / cfg.iterations as f64,
    })
}

/// Forward + backward for one composed batch. Returns the loss breakdown,
/// per-parameter gradients, and the momentum keys to enqueue.
fn training_step(
    det: &Detector,
    cfg: &TrainConfig,
    switches: &AblationSwitches,
    params: &ParamStore,
    batch: &MixedBatch,
    queue: &FeatureQueue,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, BTreeMap<String, ndarray::ArrayD<f64>>, Vec<ndarray::Array1<f64>>)> {
    let tape = Tape::new();
    let binder = ParamBinder::new(&tape, params);
    let b_d = batch.detection.len() as f64;

    // detection branch
    let mut rpn_terms = Vec::new();
    let mut incls_terms = Vec::new();
    let mut loc_terms = Vec::new();
    let mut obj_terms = Vec::new();
    let mut det_pyramids = Vec::new();
    for image in &batch.detection {
        let fp = det.extract_features(&tape, &binder, &image.pixels.to_chw());
        let rpn = detector::propose_regions(det, &tape, &binder, &fp, Some(&image.annotations), rng);
        let sample = detector::sample_rois(det, &rpn.proposals, &image.annotations, rng);
        let losses = detector::roi_losses(det, &tape, &binder, &fp, &sample)?;
        rpn_terms.push(rpn.loss.expect("training mode returns the loss"));
        incls_terms.push(losses.l_incls);
        loc_terms.push(losses.l_loc);
        obj_terms.push(losses.l_obj);
        det_pyramids.push(fp);
    }
    let l_rpn = tape.scale(tape.add_n(&rpn_terms), 1.0 / b_d);
    let l_incls = tape.scale(tape.add_n(&incls_terms), 1.0 / b_d);
    let l_loc = tape.scale(tape.add_n(&loc_terms), 1.0 / b_d);
    let l_obj = tape.scale(tape.add_n(&obj_terms), 1.0 / b_d);

    // weak branch
    let mut keys = Vec::new();
    let (l_imcls, l_con) = if batch.s > 0 {
        let imcls = collab::imcls_forward(det, &tape, &binder, &batch.weak_views)?;
        let l_con = if switches.use_clr && !batch.picks.is_empty() {
            let (loss, pair_keys) = collab::build_contrastive_pairs(
                det,
                &tape,
                &binder,
                &imcls,
                &batch.picks,
                &det_pyramids,
                queue,
                cfg.tau,
            )?;
            keys = pair_keys;
            loss
        } else {
            tape.scalar(0.0)
        };
        (imcls.loss, l_con)
    } else {
        (tape.scalar(0.0), tape.scalar(0.0))
    };

    // Eq-2 composition on the tape so gradients carry the same weights
    let weak_part = tape.add(
        tape.scale(l_imcls, cfg.alpha),
        tape.scale(l_con, cfg.beta),
    );
    let total = tape.add(tape.add_n(&[l_rpn, l_incls, l_loc, l_obj]), weak_part);

    let grads = tape.backward(total);
    let by_name = binder.grads_by_name(&grads);

    let breakdown = total_loss(
        tape.scalar_value(l_rpn),
        tape.scalar_value(l_incls),
        tape.scalar_value(l_loc),
        tape.scalar_value(l_obj),
        tape.scalar_value(l_imcls),
        tape.scalar_value(l_con),
        cfg.alpha,
        cfg.beta,
    );
    Ok((breakdown, by_name, keys))
}
