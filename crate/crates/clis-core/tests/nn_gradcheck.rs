//! Finite-difference checks for every differentiable op: analytic gradients
//! from the tape must match central differences on random inputs.

use clis_core::geometry::BoxCxcywh;
use clis_core::nn::{normal_init, Tape, Var};
use ndarray::{ArrayD, Axis, IxDyn};

/// Central-difference gradient of `f` w.r.t. one input array, element by
/// element, compared against the analytic gradient.
fn check_grad<F>(input: &ArrayD<f64>, f: F, tol: f64)
where
    F: Fn(&Tape, Var) -> Var,
{
    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let loss = f(&tape, x);
    assert_eq!(tape.shape(loss), Vec::<usize>::new(), "loss must be scalar");
    let grads = tape.backward(loss);
    let analytic = grads.get(x).expect("input must receive gradient").clone();

    let h = 1e-6;
    for idx in 0..input.len() {
        let mut plus = input.clone();
        let mut minus = input.clone();
        plus.as_slice_mut().unwrap()[idx] += h;
        minus.as_slice_mut().unwrap()[idx] -= h;
        let fp = {
            let t = Tape::new();
            let v = t.leaf(plus);
            t.scalar_value(f(&t, v))
        };
        let fm = {
            let t = Tape::new();
            let v = t.leaf(minus);
            t.scalar_value(f(&t, v))
        };
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        assert!(
            (a - numeric).abs() / denom < tol,
            "grad mismatch at {idx}: analytic {a} vs numeric {numeric}"
        );
    }
}

fn rand_arr(seed: u64, shape: &[usize]) -> ArrayD<f64> {
    normal_init(seed, &format!("gradcheck{seed}"), shape, 1.0)
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let x = rand_arr(1, &[3, 4]);
    check_grad(&x, |t, v| t.mean_all(t.relu(v)), 1e-5);
    check_grad(
        &x,
        |t, v| {
            let y = t.leaf(rand_arr(2, &[3, 4]));
            t.sum_all(t.mul(t.add(v, y), t.sub(v, y)))
        },
        1e-5,
    );
    check_grad(&x, |t, v| t.scale(t.sum_all(v), 0.37), 1e-5);
}

#[test]
fn gradcheck_matmul_bias() {
    let x = rand_arr(3, &[4, 5]);
    check_grad(
        &x,
        |t, v| {
            let w = t.leaf(rand_arr(4, &[5, 3]));
            let b = t.leaf(rand_arr(5, &[3]));
            t.mean_all(t.relu(t.add_row_bias(t.matmul(v, w), b)))
        },
        1e-5,
    );
    // and w.r.t. the weight
    let w = rand_arr(6, &[5, 3]);
    check_grad(
        &w,
        |t, v| {
            let x = t.leaf(rand_arr(7, &[4, 5]));
            t.mean_all(t.matmul(x, v))
        },
        1e-5,
    );
}

#[test]
fn gradcheck_losses() {
    let logits = rand_arr(8, &[5, 4]);
    check_grad(&logits, |t, v| t.softmax_ce_mean(v, &[0, 3, 1, 2, 0]), 1e-5);

    let bl = rand_arr(9, &[6]);
    check_grad(
        &bl,
        |t, v| t.bce_with_logits_mean(v, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
        1e-5,
    );

    let pred = rand_arr(10, &[3, 4]);
    let target = rand_arr(11, &[3, 4])
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    // keep away from the |d| = 1 kink where central differences straddle it
    let target2 = target.mapv(|v| v * 0.1);
    check_grad(
        &pred.mapv(|v| v * 0.1),
        move |t, v| t.smooth_l1_sum(v, target2.clone(), 7.0),
        1e-4,
    );
}

#[test]
fn gradcheck_normalize_dot_logsumexp() {
    let x = rand_arr(12, &[3, 6]);
    check_grad(
        &x,
        |t, v| {
            let (y, flags) = t.l2_normalize_rows(v);
            assert!(flags.iter().all(|&f| !f));
            let other = t.leaf(rand_arr(13, &[3, 6]));
            t.mean_all(t.rows_dot(y, other))
        },
        1e-5,
    );
    check_grad(&x, |t, v| t.mean_all(t.logsumexp_rows(v)), 1e-5);
}

#[test]
fn gradcheck_structural_ops() {
    let x = rand_arr(14, &[4, 3]);
    check_grad(
        &x,
        |t, v| {
            let picked = t.gather0(v, &[2, 0, 2]);
            t.mean_all(picked)
        },
        1e-5,
    );
    check_grad(
        &x,
        |t, v| {
            let y = t.leaf(rand_arr(15, &[2, 3]));
            t.mean_all(t.concat0(&[v, y]))
        },
        1e-5,
    );
    check_grad(&x, |t, v| t.sum_all(t.reshape(v, &[2, 6])), 1e-5);
}

#[test]
fn gradcheck_conv2d() {
    let x = rand_arr(16, &[2, 6, 6]);
    check_grad(
        &x,
        |t, v| {
            let w = t.leaf(rand_arr(17, &[3, 2, 3, 3]));
            let b = t.leaf(rand_arr(18, &[3]));
            t.mean_all(t.relu(t.conv2d(v, w, b, 2, 1)))
        },
        1e-5,
    );
    let w = rand_arr(19, &[3, 2, 3, 3]);
    check_grad(
        &w,
        |t, v| {
            let x = t.leaf(rand_arr(20, &[2, 5, 5]));
            let b = t.leaf(rand_arr(21, &[3]));
            t.sum_all(t.conv2d(x, v, b, 1, 1))
        },
        1e-5,
    );
    let b = rand_arr(22, &[3]);
    check_grad(
        &b,
        |t, v| {
            let x = t.leaf(rand_arr(23, &[2, 5, 5]));
            let w = t.leaf(rand_arr(24, &[3, 2, 3, 3]));
            t.mean_all(t.conv2d(x, w, v, 1, 0))
        },
        1e-5,
    );
}

#[test]
fn gradcheck_roi_align() {
    let feat = rand_arr(25, &[3, 8, 8]);
    let boxes = vec![
        BoxCxcywh::new(20.0, 18.0, 16.0, 12.0),
        BoxCxcywh::new(40.0, 40.0, 30.0, 30.0),
    ];
    check_grad(
        &feat,
        move |t, v| {
            let pooled = t.roi_align(v, &boxes, 8.0, 3);
            t.mean_all(pooled)
        },
        1e-5,
    );
}

#[test]
fn roi_align_constant_features_pool_to_constant() {
    let tape = Tape::new();
    let feat = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 6, 6]), 3.25));
    let boxes = vec![BoxCxcywh::new(24.0, 24.0, 20.0, 14.0)];
    let pooled = tape.roi_align(feat, &boxes, 8.0, 5);
    let v = tape.value(pooled);
    for &x in v.iter() {
        assert!((x - 3.25).abs() < 1e-12);
    }
}

#[test]
fn roi_align_linear_ramp_matches_analytic_bilinear() {
    // features f[c, i, j] = j (a ramp in x): any bilinear sample at feature
    // coordinate u returns u exactly (clamped at the borders).
    let tape = Tape::new();
    let mut arr = ArrayD::zeros(IxDyn(&[1, 8, 8]));
    for i in 0..8 {
        for j in 0..8 {
            arr[[0, i, j]] = j as f64;
        }
    }
    let feat = tape.leaf(arr);
    let stride = 4.0;
    // box corners chosen so all samples are interior
    let b = BoxCxcywh::from_corners(8.0, 8.0, 24.0, 24.0);
    let p = 4;
    let pooled = tape.value(tape.roi_align(feat, &[b], stride, p));
    let (x0, _, x1, _) = b.corners();
    let bin_w = (x1 - x0) / p as f64;
    for px in 0..p {
        let sample_x = x0 + (px as f64 + 0.5) * bin_w;
        let expected_u = sample_x / stride - 0.5;
        for py in 0..p {
            let got = pooled[[0, 0, py, px]];
            assert!(
                (got - expected_u).abs() < 1e-12,
                "bin ({py},{px}): got {got}, expected {expected_u}"
            );
        }
    }
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(rand_arr(30, &[2, 2]));
    let d = tape.detach(tape.scale(x, 2.0));
    let loss = tape.sum_all(d);
    let grads = tape.backward(loss);
    assert!(grads.get(x).is_none());
}

#[test]
fn gather_rows_accumulate_across_repeats() {
    let tape = Tape::new();
    let x = tape.leaf(ArrayD::zeros(IxDyn(&[3, 2])));
    let g = tape.gather0(x, &[1, 1, 0]);
    let loss = tape.sum_all(g);
    let grads = tape.backward(loss);
    let gx = grads.get(x).unwrap();
    assert_eq!(gx.index_axis(Axis(0), 1).sum(), 4.0);
    assert_eq!(gx.index_axis(Axis(0), 0).sum(), 2.0);
    assert_eq!(gx.index_axis(Axis(0), 2).sum(), 0.0);
}

#[test]
fn loss_ops_are_nonnegative_and_finite_over_1000_random_trials() {
    for seed in 0..1000u64 {
        let tape = Tape::new();
        let logits = tape.leaf(normal_init(seed, "nl", &[4, 6], 5.0));
        let ce = tape.scalar_value(tape.softmax_ce_mean(logits, &[0, 5, 2, 3]));
        assert!(ce.is_finite() && ce >= 0.0, "seed {seed}: ce {ce}");

        let bl = tape.leaf(normal_init(seed + 10_000, "nb", &[8], 20.0));
        let bce = tape.scalar_value(tape.bce_with_logits_mean(
            bl,
            &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        ));
        assert!(bce.is_finite() && bce >= 0.0, "seed {seed}: bce {bce}");

        let pred = tape.leaf(normal_init(seed + 20_000, "np", &[3, 4], 3.0));
        let target = normal_init(seed + 30_000, "nt", &[3, 4], 3.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let sl1 = tape.scalar_value(tape.smooth_l1_sum(pred, target, 3.0));
        assert!(sl1.is_finite() && sl1 >= 0.0, "seed {seed}: smooth l1 {sl1}");
    }
}

#[test]
fn cross_entropy_limits_match_the_closed_forms() {
    // uniform logits over k+1 classes -> ln(k+1); spot values 5 and 11
    for k1 in [5usize, 11] {
        let tape = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[1, k1])));
        let ce = tape.scalar_value(tape.softmax_ce_mean(logits, &[0]));
        assert!((ce - (k1 as f64).ln()).abs() < 1e-12);
    }
    // raising the true-class logit drives CE to zero monotonically
    let mut prev = f64::INFINITY;
    for logit in [0.0, 2.0, 5.0, 10.0, 20.0] {
        let tape = Tape::new();
        let mut arr = ArrayD::zeros(IxDyn(&[1, 5]));
        arr[[0, 0]] = logit;
        let v = tape.leaf(arr);
        let ce = tape.scalar_value(tape.softmax_ce_mean(v, &[0]));
        assert!(ce < prev, "CE must decrease as the true logit grows");
        prev = ce;
    }
    assert!(prev < 1e-8, "CE at logit 20 is {prev}");
}
