//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. The end-to-end criteria share one ablation run over
//! seeds {7, 11, 13} at the desk preset.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use clis_core::collab::{self, enqueue, FeatureQueue, MomentumBranch};
use clis_core::datasets::{DetectionImage, FrequencyGroup, FrequencyGroups, ImageData, InstanceAnnotation};
use clis_core::detector::{Detector, ModelConfig};
use clis_core::evalkit::{self, evaluate_ap, select_final_detections, Detection, InferOptions};
use clis_core::geometry::{iou, BoxCxcywh};
use clis_core::harness::{self, AblationTable, ExperimentConfig, SweepParameter};
use clis_core::nn::{normal_init, sigmoid, ParamBinder, ParamStore, Tape};
use clis_core::regiongen::{category_rank_first, ScoredBox};
use clis_core::trainer::{total_loss, AblationSwitches};

fn unit(v: Vec<f64>) -> Array1<f64> {
    let a = Array1::from_vec(v);
    let n = a.dot(&a).sqrt();
    a / n
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_contrastive_formula_fidelity() {
    let started = Instant::now();

    // empty queue -> exactly 0
    let tape = Tape::new();
    let f_i = tape.leaf(unit(vec![0.6, 0.8]).insert_axis(ndarray::Axis(0)).into_dyn());
    let f_d = unit(vec![1.0, 0.0]).insert_axis(ndarray::Axis(0));
    let empty = FeatureQueue::new(16);
    let loss0 = tape.scalar_value(collab::contrastive_loss(&tape, f_i, &f_d, &empty, 0.2).unwrap());
    assert!(loss0.abs() < 1e-9, "empty queue: {loss0}");

    // f_i.f_d = 1, one orthogonal negative, tau = 0.2 -> log(1 + e^-5)
    let tape = Tape::new();
    let e0 = unit(vec![1.0, 0.0]);
    let f_i = tape.leaf(e0.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let f_d = e0.insert_axis(ndarray::Axis(0));
    let mut q = FeatureQueue::new(16);
    enqueue(&mut q, vec![unit(vec![0.0, 1.0])]);
    let loss1 = tape.scalar_value(collab::contrastive_loss(&tape, f_i, &f_d, &q, 0.2).unwrap());
    let expected1 = (1.0f64 + (-5.0f64).exp()).ln();
    assert!((loss1 - expected1).abs() < 1e-9, "{loss1} vs {expected1}");
    assert!((expected1 - 0.006715).abs() < 1e-6);

    // f_i.f_d = 0, one orthogonal negative, any tau -> ln 2
    let tape = Tape::new();
    let f_i = tape.leaf(unit(vec![1.0, 0.0, 0.0]).insert_axis(ndarray::Axis(0)).into_dyn());
    let f_d = unit(vec![0.0, 1.0, 0.0]).insert_axis(ndarray::Axis(0));
    let mut q = FeatureQueue::new(16);
    enqueue(&mut q, vec![unit(vec![0.0, 0.0, 1.0])]);
    for tau in [0.07, 0.2, 1.0, 3.0] {
        let loss2 =
            tape.scalar_value(collab::contrastive_loss(&tape, f_i, &f_d, &q, tau).unwrap());
        assert!(
            (loss2 - std::f64::consts::LN_2).abs() < 1e-9,
            "tau {tau}: {loss2}"
        );
    }

    // analytic gradient vs central differences over 100 random unit configs
    let tau = 0.2;
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let mut q = FeatureQueue::new(32);
        for j in 0..6 {
            let raw = normal_init(1000 + trial * 7 + j, "q", &[8], 1.0);
            let a = Array1::from_vec(raw.iter().copied().collect());
            let n = a.dot(&a).sqrt();
            enqueue(&mut q, vec![a / n]);
        }
        let raw_d = normal_init(5000 + trial, "fd", &[8], 1.0);
        let fd1 = Array1::from_vec(raw_d.iter().copied().collect::<Vec<f64>>());
        let f_d = (&fd1 / fd1.dot(&fd1).sqrt()).insert_axis(ndarray::Axis(0));

        let x0 = normal_init(trial, "fi", &[8], 1.0)
            .into_shape_with_order(IxDyn(&[1, 8]))
            .unwrap();
        let loss_of = |x: &ArrayD<f64>| {
            let t = Tape::new();
            let xv = t.leaf(x.clone());
            let (fi, _) = t.l2_normalize_rows(xv);
            t.scalar_value(collab::contrastive_loss(&t, fi, &f_d, &q, tau).unwrap())
        };
        let tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let (fi, _) = tape.l2_normalize_rows(xv);
        let loss = collab::contrastive_loss(&tape, fi, &f_d, &q, tau).unwrap();
        let grads = tape.backward(loss);
        let g = grads.get(xv).unwrap().clone();
        let h = 1e-6;
        for idx in 0..8 {
            let mut plus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = x0.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let analytic = g.as_slice().unwrap()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "trial {trial} idx {idx}: rel err {rel}");
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "runtime {elapsed:?} exceeds 1 s");
    println!(
        "[criterion 1] PASS - contrastive loss formula exact to 1e-9; max FD rel err {worst:.2e}; {:.0} ms",
        elapsed.as_secs_f64() * 1000.0
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_joint_loss_composition() {
    let started = Instant::now();
    let mut checked = 0usize;
    for trial in 0..1000u64 {
        let parts = normal_init(trial, "parts", &[6], 3.0);
        let p: Vec<f64> = parts.iter().map(|v| v.abs()).collect();
        for &alpha in &[0.0, 0.01, 0.05, 0.1, 0.2, 0.5] {
            for &beta in &[0.0, 0.01, 0.05, 0.08, 0.1] {
                let b = total_loss(p[0], p[1], p[2], p[3], p[4], p[5], alpha, beta);
                let expected = p[0] + p[1] + p[2] + p[3] + alpha * p[4] + beta * p[5];
                assert!(
                    (b.total - expected).abs() < 1e-9,
                    "alpha {alpha} beta {beta}: {} vs {expected}",
                    b.total
                );
                checked += 1;
            }
        }
    }
    // the published defaults on unit parts
    let b = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.05);
    assert!((b.total - 4.15).abs() < 1e-9);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0);
    println!(
        "[criterion 2] PASS - {checked} compositions exact to 1e-9 incl. (0.1, 0.05); {:.0} ms",
        elapsed.as_secs_f64() * 1000.0
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_structural_invariants() {
    let started = Instant::now();
    let model = ModelConfig {
        block_channels: [4, 8, 16, 16],
        pyramid_channels: 16,
        hidden_dim: 32,
        pool_size: 3,
        embed_dim: 16,
        num_classes: 6,
        ..Default::default()
    };
    let det = Detector::new(model.clone(), AblationSwitches::all_on());
    let params = det.init_params(3);

    // TSS: disjoint namespaces and disjoint parameter sets
    let loc_names: Vec<String> = params.names_under("loc.").map(String::from).collect();
    let cls_names: Vec<String> = params.names_under("cls.").map(String::from).collect();
    assert!(!loc_names.is_empty() && !cls_names.is_empty());
    assert!(loc_names.iter().all(|n| !cls_names.contains(n)));

    // gradient isolation both ways
    let probe = |only_loc: bool| -> Vec<String> {
        let tape = Tape::new();
        let binder = ParamBinder::new(&tape, &params);
        let roi = tape.leaf(normal_init(9, "roi", &[2, model.roi_feature_len()], 1.0));
        let loss = if only_loc {
            let (deltas, obj) = det.loc_forward(&tape, &binder, roi);
            tape.add(tape.mean_all(deltas), tape.mean_all(obj))
        } else {
            let logits = det.incls_forward(&tape, &binder, roi);
            tape.softmax_ce_mean(logits, &[1, 2])
        };
        let grads = tape.backward(loss);
        binder.grads_by_name(&grads).keys().cloned().collect()
    };
    let loc_touched = probe(true);
    assert!(loc_touched.iter().all(|n| !n.starts_with("cls.")));
    assert!(loc_touched.iter().any(|n| n.starts_with("loc.")));
    let cls_touched = probe(false);
    assert!(cls_touched.iter().all(|n| !n.starts_with("loc.")));
    assert!(cls_touched.iter().any(|n| n.starts_with("cls.")));

    // SS: bit-identical logits through both classifier paths
    let tape = Tape::new();
    let binder = ParamBinder::new(&tape, &params);
    let probe_roi = tape.leaf(normal_init(11, "probe", &[4, model.roi_feature_len()], 1.0));
    let a = tape.value(det.incls_forward(&tape, &binder, probe_roi));
    let feats = det.trunk_forward(&tape, &binder, det.imcls_trunk(), probe_roi);
    let b = tape.value(tape.add_row_bias(
        tape.matmul(feats, binder.var(&format!("{}.weight", det.imcls_logits_name()))),
        binder.var(&format!("{}.bias", det.imcls_logits_name())),
    ));
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }

    // momentum EMA exactness at m in {0, 0.999, 1}
    for m in [0.0, 0.999, 1.0] {
        let mut store = ParamStore::new();
        store.insert("online", normal_init(5, "online", &[16], 1.0));
        store.insert("shadow", normal_init(6, "shadow", &[16], 1.0));
        let before_online = store.get("online").clone();
        let before_shadow = store.get("shadow").clone();
        MomentumBranch::new(vec![("online".into(), "shadow".into())], m)
            .update(&mut store)
            .unwrap();
        for i in 0..16 {
            let expected = m * before_shadow.as_slice().unwrap()[i]
                + (1.0 - m) * before_online.as_slice().unwrap()[i];
            let got = store.get("shadow").as_slice().unwrap()[i];
            assert_eq!(got.to_bits(), expected.to_bits(), "m={m} i={i}");
        }
    }

    // queue behavior over 10^4 randomized operations vs a naive model
    let mut rng_state = 0x3c6ef372fe94f82au64;
    let mut next = move || {
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        rng_state
    };
    let capacity = 37;
    let mut q = FeatureQueue::new(capacity);
    let mut model_q: Vec<Array1<f64>> = Vec::new();
    let mut ops = 0usize;
    while ops < 10_000 {
        let batch = (next() % 5 + 1) as usize;
        let entries: Vec<Array1<f64>> = (0..batch)
            .map(|_| unit(vec![(next() % 1000) as f64 + 1.0, (next() % 7) as f64 + 0.5]))
            .collect();
        ops += batch;
        model_q.extend(entries.iter().cloned());
        enqueue(&mut q, entries);
        assert!(q.len() <= capacity);
        let tail_start = model_q.len().saturating_sub(capacity);
        for (got, want) in q.iter().zip(&model_q[tail_start..]) {
            assert_eq!(got, want, "FIFO order violated");
            assert!((got.dot(got).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0);
    println!(
        "[criterion 3] PASS - TSS isolation, SS bit-identity, EMA exactness, {ops} queue ops FIFO; {:.0} ms",
        elapsed.as_secs_f64() * 1000.0
    );
}

// ---------------------------------------------------------------- criterion 4

/// Literal matching oracle: enumerate every injective partial assignment and
/// keep the one consistent with the greedy rule (each detection in score
/// order takes the highest-IoU available ground-truth box above threshold,
/// ties to the lowest index). Exactly one assignment survives.
fn oracle_greedy_match(dets: &[BoxCxcywh], gts: &[BoxCxcywh], thr: f64) -> Vec<bool> {
    fn enumerate(
        i: usize,
        dets: &[BoxCxcywh],
        gts: &[BoxCxcywh],
        current: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if i == dets.len() {
            out.push(current.clone());
            return;
        }
        current.push(None);
        enumerate(i + 1, dets, gts, current, out);
        current.pop();
        for g in 0..gts.len() {
            if current.iter().any(|&a| a == Some(g)) {
                continue;
            }
            current.push(Some(g));
            enumerate(i + 1, dets, gts, current, out);
            current.pop();
        }
    }
    let mut all = Vec::new();
    enumerate(0, dets, gts, &mut Vec::new(), &mut all);

    let consistent: Vec<&Vec<Option<usize>>> = all
        .iter()
        .filter(|a| {
            for i in 0..dets.len() {
                let used: Vec<usize> = a[..i].iter().flatten().copied().collect();
                let mut best: Option<(usize, f64)> = None;
                for g in 0..gts.len() {
                    if used.contains(&g) {
                        continue;
                    }
                    let v = iou(&dets[i], &gts[g]);
                    if v >= thr {
                        let better = match best {
                            None => true,
                            Some((bg, bv)) => v > bv || (v == bv && g < bg),
                        };
                        if better {
                            best = Some((g, v));
                        }
                    }
                }
                if a[i] != best.map(|(g, _)| g) {
                    return false;
                }
            }
            true
        })
        .collect();
    assert_eq!(consistent.len(), 1, "greedy assignment must be unique");
    consistent[0].iter().map(|a| a.is_some()).collect()
}

/// Literal 101-point AP: for each recall level scan every prefix.
fn oracle_ap(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let mut best = 0.0f64;
        let mut tp = 0usize;
        for (k, &f) in flags.iter().enumerate() {
            if f {
                tp += 1;
            }
            let recall = tp as f64 / num_gt as f64;
            let precision = tp as f64 / (k + 1) as f64;
            if recall >= r {
                best = best.max(precision);
            }
        }
        total += best;
    }
    total / 101.0
}

fn single_category_ap(dets: &[(BoxCxcywh, f64)], gts: &[BoxCxcywh]) -> f64 {
    let image = DetectionImage {
        image_id: 1,
        pixels: ImageData::filled(8, 8, [0; 3]),
        annotations: gts
            .iter()
            .map(|b| InstanceAnnotation {
                bbox: *b,
                category: 0,
            })
            .collect(),
    };
    let groups = FrequencyGroups {
        group: [(0usize, FrequencyGroup::Rare)].into_iter().collect(),
        image_count: [(0usize, 1)].into_iter().collect(),
    };
    let detections: Vec<Detection> = dets
        .iter()
        .map(|(b, s)| Detection {
            image_id: 1,
            category: 0,
            bbox: *b,
            score: *s,
        })
        .collect();
    evaluate_ap(&detections, &[image], &groups).ap
}

#[test]
fn criterion_4_evaluator_matches_bruteforce_oracle() {
    let started = Instant::now();

    // box vocabulary with overlap structure spanning the IoU thresholds,
    // including the configuration where the greedy rule and the optimal
    // assignment disagree
    let vocab = [
        BoxCxcywh::from_corners(0.0, 0.0, 10.0, 10.0),
        BoxCxcywh::from_corners(2.0, 0.0, 12.0, 10.0),
        BoxCxcywh::from_corners(5.0, 5.0, 15.0, 15.0),
        BoxCxcywh::from_corners(0.0, 0.0, 12.0, 12.0),
        BoxCxcywh::from_corners(20.0, 20.0, 30.0, 30.0),
    ];
    let scores = [0.9, 0.7, 0.7, 0.4]; // includes a tie
    let thresholds = clis_core::evalkit::IOU_THRESHOLDS;

    let mut cases = 0usize;
    // all GT subsets of size 0..=3 and detection subsets of size 0..=4
    for gt_mask in 0u32..32 {
        let gts: Vec<BoxCxcywh> = (0..5).filter(|i| gt_mask >> i & 1 == 1).map(|i| vocab[i]).collect();
        if gts.len() > 3 || gts.is_empty() {
            continue;
        }
        for det_mask in 0u32..32 {
            let det_boxes: Vec<BoxCxcywh> =
                (0..5).filter(|i| det_mask >> i & 1 == 1).map(|i| vocab[i]).collect();
            if det_boxes.len() > 4 {
                continue;
            }
            let dets: Vec<(BoxCxcywh, f64)> = det_boxes
                .iter()
                .enumerate()
                .map(|(k, b)| (*b, scores[k]))
                .collect();

            // oracle: literal matching + literal AP, averaged over thresholds
            let mut oracle_mean = 0.0;
            for &thr in &thresholds {
                // detections ordered by score (already descending here)
                let boxes: Vec<BoxCxcywh> = dets.iter().map(|(b, _)| *b).collect();
                let flags = oracle_greedy_match(&boxes, &gts, thr);
                oracle_mean += oracle_ap(&flags, gts.len());
            }
            let oracle_value = 100.0 * oracle_mean / thresholds.len() as f64;

            let impl_value = single_category_ap(&dets, &gts);
            assert_eq!(
                impl_value.to_bits(),
                oracle_value.to_bits(),
                "case gt={gt_mask:05b} det={det_mask:05b}: impl {impl_value} vs oracle {oracle_value}"
            );
            cases += 1;
        }
    }

    // the single-pair IoU = 0.6 case scores exactly 30 of 100
    let gt = BoxCxcywh::from_corners(0.0, 0.0, 10.0, 10.0);
    let det = BoxCxcywh::from_corners(2.5, 0.0, 12.5, 10.0);
    assert!((iou(&gt, &det) - 0.6).abs() < 1e-12);
    let ap = single_category_ap(&[(det, 0.8)], &[gt]);
    assert!((ap - 30.0).abs() < 1e-9, "IoU 0.6 case: {ap}");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0);
    println!(
        "[criterion 4] PASS - {cases} oracle cases x 10 thresholds agree exactly; IoU 0.6 -> AP 30; {:.0} ms",
        elapsed.as_secs_f64() * 1000.0
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_category_rank_first_rule() {
    let started = Instant::now();
    let eagle = 3usize;
    let dog = 7usize;
    let eagle_box = BoxCxcywh::new(20.0, 20.0, 12.0, 10.0);
    let dog_box = BoxCxcywh::new(44.0, 40.0, 16.0, 14.0);
    let preds = vec![
        ScoredBox {
            bbox: eagle_box,
            category: eagle,
            score: 0.3,
        },
        ScoredBox {
            bbox: dog_box,
            category: dog,
            score: 0.9,
        },
    ];
    // the image is labeled eagle: pick the highest-scoring eagle box
    let (chosen, fallback) = category_rank_first(&preds, eagle, 64.0, 64.0);
    assert_eq!(chosen, eagle_box);
    assert!(!fallback);

    // regression: the global argmax diverges on this input
    let global = preds
        .iter()
        .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
        .unwrap()
        .bbox;
    assert_ne!(global, chosen, "global argmax must diverge on this corpus");

    // within-category argmax and the flagged whole-image fallback
    let two_eagles = vec![
        ScoredBox {
            bbox: eagle_box,
            category: eagle,
            score: 0.7,
        },
        ScoredBox {
            bbox: dog_box,
            category: eagle,
            score: 0.4,
        },
    ];
    let (chosen, _) = category_rank_first(&two_eagles, eagle, 64.0, 64.0);
    assert_eq!(chosen, eagle_box);
    let (whole, fallback) = category_rank_first(&preds, 12, 64.0, 48.0);
    assert!(fallback);
    assert_eq!(whole, BoxCxcywh::from_corners(0.0, 0.0, 64.0, 48.0));

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0);
    println!(
        "[criterion 5] PASS - category-rank-first picks within the label and diverges from global argmax; {:.2} ms",
        elapsed.as_secs_f64() * 1000.0
    );
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_inference_contract() {
    let started = Instant::now();

    // composed score: sigmoid(obj) x softmax(cls)[category]
    let obj_logit = 0.0;
    let cls_prob = 0.8;
    assert!((sigmoid(obj_logit) * cls_prob - 0.4).abs() < 1e-12);

    // constructed prediction set: 400 boxes above the floor -> top 300 kept
    let mk = |score: f64, i: usize| Detection {
        image_id: 1,
        category: 0,
        bbox: BoxCxcywh::new(5.0 + i as f64, 9.0, 4.0, 4.0),
        score,
    };
    let mut dets: Vec<Detection> = (0..400).map(|i| mk(2e-4 + i as f64 * 1e-7, i)).collect();
    dets.push(mk(5e-5, 400)); // below the floor
    dets.push(mk(1e-4, 401)); // exactly at the floor: excluded (strict)
    let kept = select_final_detections(dets, &InferOptions::default());
    assert_eq!(kept.len(), 300);
    assert!(kept.iter().all(|d| d.score > 1e-4));
    // they are exactly the 300 highest-scoring survivors
    let min_kept = kept.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
    assert!(min_kept >= 2e-4 + 99.0 * 1e-7 - 1e-15);

    // a real forward pass composes scores per the contract
    let model = ModelConfig {
        block_channels: [4, 8, 16, 16],
        pyramid_channels: 16,
        hidden_dim: 32,
        pool_size: 3,
        embed_dim: 16,
        num_classes: 4,
        ..Default::default()
    };
    let det = Detector::new(model, AblationSwitches::all_off());
    let params = det.init_params(2);
    let image = DetectionImage {
        image_id: 9,
        pixels: ImageData::filled(64, 64, [120, 60, 200]),
        annotations: vec![InstanceAnnotation {
            bbox: BoxCxcywh::new(32.0, 32.0, 16.0, 16.0),
            category: 0,
        }],
    };
    let out = evalkit::infer(&det, &params, &image, &InferOptions::default()).unwrap();
    assert!(out.len() <= 300);
    assert!(out.iter().all(|d| d.score > 1e-4 && d.score <= 1.0));

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0);
    println!(
        "[criterion 6] PASS - composed scores, strict 1e-4 floor, top-300 cap; {:.0} ms",
        elapsed.as_secs_f64() * 1000.0
    );
}

// ------------------------------------------------------- criteria 7 and 8

fn acceptance_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-runs");
    std::fs::create_dir_all(&dir).expect("create acceptance run dir");
    dir
}

static ABLATION: OnceLock<AblationTable> = OnceLock::new();

fn desk_ablation() -> &'static AblationTable {
    ABLATION.get_or_init(|| {
        let mut cfg = ExperimentConfig::desk();
        cfg.name = "acceptance-ablation".into();
        cfg.output_dir = acceptance_dir();
        harness::run_ablation(&cfg, &[7, 11, 13], true).expect("ablation run")
    })
}

fn row<'a>(table: &'a AblationTable, label: &str) -> &'a harness::AblationRow {
    table
        .rows
        .iter()
        .find(|r| r.label == label)
        .unwrap_or_else(|| panic!("missing row {label}"))
}

#[test]
fn criterion_7_directional_improvement_over_no_ils() {
    let started = Instant::now();
    let table = desk_ablation();
    let clis = row(table, "CLIS");
    let wo_ils = row(table, "w/o (ILS)");

    let delta_rare = clis.mean.ap_rare - wo_ils.mean.ap_rare;
    let delta_ap = clis.mean.ap - wo_ils.mean.ap;
    println!(
        "[criterion 7] seeds {:?}: CLIS AP {:.2} / AP_r {:.2} vs w/o-ILS AP {:.2} / AP_r {:.2}",
        table.seeds, clis.mean.ap, clis.mean.ap_rare, wo_ils.mean.ap, wo_ils.mean.ap_rare
    );
    for (c, w) in clis.per_seed.iter().zip(&wo_ils.per_seed) {
        println!(
            "[criterion 7]   seed {}: CLIS AP {:.2} / AP_r {:.2}; w/o-ILS AP {:.2} / AP_r {:.2}",
            c.seed, c.summary.ap, c.summary.ap_rare, w.summary.ap, w.summary.ap_rare
        );
    }
    assert!(
        delta_rare >= 2.0,
        "mean AP_r improvement {delta_rare:.2} below the 2.0-point gate"
    );
    assert!(delta_ap >= 0.0, "overall AP degraded by {delta_ap:.2}");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 7200.0, "outside the CPU runtime target");
    println!(
        "[criterion 7] PASS - seed-mean AP_r +{delta_rare:.2} (gate 2.0), AP {delta_ap:+.2} (gate 0.0); {:.0} s total",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_8_ablation_direction_report() {
    let table = desk_ablation();
    let clis = row(table, "CLIS");
    let wo_clr = row(table, "w/o (CLR)");
    let wo_ss = row(table, "w/o (SS)");
    let wo_tss = row(table, "w/o (TSS)");

    println!("[criterion 8] seed-mean AP_r: CLIS {:.2}, w/o CLR {:.2}, w/o SS {:.2}, w/o TSS {:.2}",
        clis.mean.ap_rare, wo_clr.mean.ap_rare, wo_ss.mean.ap_rare, wo_tss.mean.ap_rare);
    for r in &table.rows {
        let per_seed: Vec<String> = r
            .per_seed
            .iter()
            .map(|s| format!("seed{} AP_r {:.2}", s.seed, s.summary.ap_rare))
            .collect();
        println!("[criterion 8]   {}: {}", r.label, per_seed.join(", "));
    }
    let clr_ok = clis.mean.ap_rare >= wo_clr.mean.ap_rare;
    let ss_ok = clis.mean.ap_rare >= wo_ss.mean.ap_rare;
    // soft criterion: reported, not gated
    println!(
        "[criterion 8] PASS (reported) - CLIS >= w/o-CLR on AP_r: {clr_ok}; CLIS >= w/o-SS on AP_r: {ss_ok}"
    );
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_desk_determinism_over_100_steps() {
    let started = Instant::now();
    let base_dir = acceptance_dir();
    let run = |tag: &str| -> (String, String) {
        let mut cfg = ExperimentConfig::desk();
        cfg.name = format!("determinism-{tag}");
        cfg.output_dir = base_dir.clone();
        cfg.train.iterations = 100;
        // fresh every time: no resume
        let dir = cfg.run_dir();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        harness::run_pipeline(&cfg, false).unwrap();
        let baseline = std::fs::read_to_string(dir.join("baseline/metrics.jsonl")).unwrap();
        let clis = std::fs::read_to_string(dir.join("clis/metrics.jsonl")).unwrap();
        (baseline, clis)
    };
    let (base_a, clis_a) = run("a");
    let (base_b, clis_b) = run("b");
    assert_eq!(base_a.lines().count(), 100);
    assert_eq!(clis_a.lines().count(), 100);
    assert_eq!(base_a, base_b, "baseline metrics diverged between runs");
    assert_eq!(clis_a, clis_b, "joint-training metrics diverged between runs");
    println!(
        "[criterion 9] PASS - two seed-7 desk runs produced identical metrics.jsonl for 100 steps; {:.1} s",
        started.elapsed().as_secs_f64()
    );
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_nan_rows_are_recorded_not_fatal() {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::desk();
    cfg.name = "acceptance-nan-sweep".into();
    cfg.output_dir = acceptance_dir();
    // shrink the run: the criterion is about the behavior class, not scale
    cfg.benchmark.detection_images = 120;
    cfg.benchmark.weak_multiplier = 1.0;
    cfg.benchmark.val_images = 16;
    cfg.model.block_channels = [4, 8, 16, 16];
    cfg.model.pyramid_channels = 16;
    cfg.model.hidden_dim = 32;
    cfg.model.embed_dim = 16;
    cfg.train.iterations = 60;

    // include the published beta values plus one that provably destabilizes
    let values = [0.05, 0.1, 1e12];
    let table = harness::sweep(&cfg, SweepParameter::Beta, &values, true).unwrap();
    assert_eq!(table.rows.len(), 3);
    let nan_rows: Vec<f64> = table
        .rows
        .iter()
        .filter(|r| r.ap.is_none())
        .map(|r| r.value)
        .collect();
    assert!(
        !nan_rows.is_empty(),
        "the destabilizing beta must produce a NaN row"
    );
    assert!(
        table.rows.iter().any(|r| r.ap.is_some()),
        "stable values must still complete"
    );
    let csv =
        std::fs::read_to_string(cfg.run_dir().join("sweep_beta.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains("NaN")));

    // the specific unstable beta at this scale is reported, not asserted
    println!(
        "[criterion 10] unstable beta values at this scale: {nan_rows:?} (sweep completed {} rows)",
        table.rows.len()
    );
    println!(
        "[criterion 10] PASS - NaN rows recorded in sweep_beta.csv without crashing the sweep; {:.1} s",
        started.elapsed().as_secs_f64()
    );
}
