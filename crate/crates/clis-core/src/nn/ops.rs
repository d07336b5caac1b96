//! Differentiable operations. Each op pushes one node whose backward closure
//! maps the upstream gradient to per-parent gradients.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

use super::tape::{Tape, Var};
use crate::geometry::BoxCxcywh;

impl Tape {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value - &nodes[b.0].value
        };
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, _| vec![g.clone(), -g])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, p| vec![g * p[1], g * p[0]])),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|x| x * k)
        };
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| vec![g.mapv(|x| x * k)])),
        )
    }

    /// Sum a list of same-shape vars.
    pub fn add_n(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
            av.dot(&bv).into_dyn()
        };
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, p| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = p[0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = p[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&bv.t()).into_dyn(), av.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Broadcast-add a `[d]` bias to every row of `[n,d]`.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[bias.0].value.view().into_dimensionality::<Ix1>().unwrap();
            (&xv + &bv).into_dyn()
        };
        self.push(
            out,
            vec![x.0, bias.0],
            Some(Box::new(|g, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.mapv(|v| v.max(0.0))
        };
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|g, p| {
                let mask = p[0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![g * &mask]
            })),
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[x.0]
                .value
                .clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch")
        };
        let orig: Vec<usize> = self.shape(x);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _| {
                vec![g.clone().into_shape_with_order(IxDyn(&orig)).unwrap()]
            })),
        )
    }

    /// Concatenate along axis 0.
    pub fn concat0(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let (out, sizes) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = vars.iter().map(|v| nodes[v.0].value.view()).collect();
            let sizes: Vec<usize> = views.iter().map(|v| v.shape()[0]).collect();
            (
                ndarray::concatenate(Axis(0), &views).expect("concat0: shape mismatch"),
                sizes,
            )
        };
        self.push(
            out,
            vars.iter().map(|v| v.0).collect(),
            Some(Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &s in &sizes {
                    grads.push(
                        g.slice_axis(Axis(0), ndarray::Slice::from(offset..offset + s))
                            .to_owned(),
                    );
                    offset += s;
                }
                grads
            })),
        )
    }

    /// Select rows (axis 0) by index; repeated indices accumulate on backward.
    pub fn gather0(&self, x: Var, indices: &[usize]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.select(Axis(0), indices)
        };
        let idx = indices.to_vec();
        let parent_shape = self.shape(x);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _| {
                let mut grad = ArrayD::zeros(IxDyn(&parent_shape));
                for (row, &i) in idx.iter().enumerate() {
                    let mut dst = grad.index_axis_mut(Axis(0), i);
                    dst += &g.index_axis(Axis(0), row);
                }
                vec![grad]
            })),
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let (out, shape) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            (
                ArrayD::from_elem(IxDyn(&[]), v.sum()),
                v.shape().to_vec(),
            )
        };
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |g, _| {
                let gs = g.iter().next().copied().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gs)]
            })),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.len()
        };
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean softmax cross-entropy of `[n,k]` logits against integer labels.
    /// Computed with the max-shift for stability.
    pub fn softmax_ce_mean(&self, logits: Var, labels: &[usize]) -> Var {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let lv = nodes[logits.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap();
            assert_eq!(lv.nrows(), labels.len());
            let mut probs = Array2::<f64>::zeros(lv.raw_dim());
            let mut total = 0.0;
            for (i, row) in lv.outer_iter().enumerate() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps = row.mapv(|v| (v - m).exp());
                let z = exps.sum();
                total += z.ln() + m - row[labels[i]];
                probs.row_mut(i).assign(&(&exps / z));
            }
            (
                ArrayD::from_elem(IxDyn(&[]), total / labels.len() as f64),
                probs,
            )
        };
        let labels = labels.to_vec();
        self.push(
            out,
            vec![logits.0],
            Some(Box::new(move |g, _| {
                let gs = g.iter().next().copied().unwrap() / labels.len() as f64;
                let mut grad = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    grad[(i, l)] -= 1.0;
                }
                vec![grad.mapv(|v| v * gs).into_dyn()]
            })),
        )
    }

    /// Mean binary cross-entropy over `[n]` logits with 0/1 targets, using
    /// the overflow-safe form `max(x,0) - x t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits_mean(&self, logits: Var, targets: &[f64]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let lv = nodes[logits.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap();
            assert_eq!(lv.len(), targets.len());
            let total: f64 = lv
                .iter()
                .zip(targets)
                .map(|(&x, &t)| x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln())
                .sum();
            ArrayD::from_elem(IxDyn(&[]), total / targets.len() as f64)
        };
        let targets = targets.to_vec();
        self.push(
            out,
            vec![logits.0],
            Some(Box::new(move |g, p| {
                let gs = g.iter().next().copied().unwrap() / targets.len() as f64;
                let lv = p[0].view().into_dimensionality::<Ix1>().unwrap();
                let grad: Array1<f64> = lv
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &t)| (sigmoid(x) - t) * gs)
                    .collect();
                vec![grad.into_dyn()]
            })),
        )
    }

    /// Smooth-L1 over `[n,4]` predictions vs constant targets, summed and
    /// divided by `denom`. Standard beta = 1 kink.
    pub fn smooth_l1_sum(&self, pred: Var, targets: Array2<f64>, denom: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let pv = nodes[pred.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap();
            assert_eq!(pv.raw_dim(), targets.raw_dim());
            let total: f64 = pv
                .iter()
                .zip(targets.iter())
                .map(|(&p, &t)| {
                    let d = (p - t).abs();
                    if d < 1.0 {
                        0.5 * d * d
                    } else {
                        d - 0.5
                    }
                })
                .sum();
            ArrayD::from_elem(IxDyn(&[]), total / denom)
        };
        self.push(
            out,
            vec![pred.0],
            Some(Box::new(move |g, p| {
                let gs = g.iter().next().copied().unwrap() / denom;
                let pv = p[0].view().into_dimensionality::<Ix2>().unwrap();
                let mut grad = Array2::<f64>::zeros(pv.raw_dim());
                for ((i, j), &pval) in pv.indexed_iter() {
                    grad[(i, j)] = (pval - targets[(i, j)]).clamp(-1.0, 1.0) * gs;
                }
                vec![grad.into_dyn()]
            })),
        )
    }

    /// Row-wise L2 normalization of `[n,d]`. Rows with norm below `eps` fall
    /// back to the first basis vector (gradient zero there); the returned
    /// flags mark which rows were degenerate.
    pub fn l2_normalize_rows(&self, x: Var) -> (Var, Vec<bool>) {
        const EPS: f64 = 1e-12;
        let (out, norms, flags) = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Array2::<f64>::zeros(xv.raw_dim());
            let mut norms = Vec::with_capacity(xv.nrows());
            let mut flags = Vec::with_capacity(xv.nrows());
            for (i, row) in xv.outer_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if n < EPS {
                    out[(i, 0)] = 1.0;
                    norms.push(0.0);
                    flags.push(true);
                } else {
                    out.row_mut(i).assign(&(&row / n));
                    norms.push(n);
                    flags.push(false);
                }
            }
            (out, norms, flags)
        };
        let unit = out.clone();
        let var = self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut grad = Array2::<f64>::zeros(g2.raw_dim());
                for i in 0..g2.nrows() {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let y = unit.row(i);
                    let gi = g2.row(i);
                    let dot = y.dot(&gi);
                    let row = (&gi - &(&y * dot)) / norms[i];
                    grad.row_mut(i).assign(&row);
                }
                vec![grad.into_dyn()]
            })),
        );
        (var, flags)
    }

    /// Row-wise dot products of two `[n,d]` tensors -> `[n]`.
    pub fn rows_dot(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let v: Array1<f64> = av
                .outer_iter()
                .zip(bv.outer_iter())
                .map(|(x, y)| x.dot(&y))
                .collect();
            v.into_dyn()
        };
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|g, p| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let av = p[0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = p[1].view().into_dimensionality::<Ix2>().unwrap();
                let mut da = Array2::<f64>::zeros(av.raw_dim());
                let mut db = Array2::<f64>::zeros(bv.raw_dim());
                for i in 0..av.nrows() {
                    da.row_mut(i).assign(&(&bv.row(i) * g1[i]));
                    db.row_mut(i).assign(&(&av.row(i) * g1[i]));
                }
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Row-wise log-sum-exp of `[n,m]` -> `[n]`, max-shifted.
    pub fn logsumexp_rows(&self, x: Var) -> Var {
        let (out, softmax) = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Array1::<f64>::zeros(xv.nrows());
            let mut soft = Array2::<f64>::zeros(xv.raw_dim());
            for (i, row) in xv.outer_iter().enumerate() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps = row.mapv(|v| (v - m).exp());
                let z = exps.sum();
                out[i] = m + z.ln();
                soft.row_mut(i).assign(&(&exps / z));
            }
            (out, soft)
        };
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g, _| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut grad = softmax.clone();
                for (i, mut row) in grad.outer_iter_mut().enumerate() {
                    row *= g1[i];
                }
                vec![grad.into_dyn()]
            })),
        )
    }

    /// 2-D convolution on a single `[c,h,w]` image with `[o,c,k,k]` weights,
    /// `[o]` bias, square stride and padding. im2col + GEMM.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (out, cols, in_shape, out_hw) = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let wv = nodes[weight.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap();
            let bv = nodes[bias.0].value.view().into_dimensionality::<Ix1>().unwrap();
            let (c_in, h, w) = xv.dim();
            let (c_out, wc, k, k2) = wv.dim();
            assert_eq!(c_in, wc, "conv2d: channel mismatch");
            assert_eq!(k, k2);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;

            let cols = im2col(&xv, k, stride, pad, oh, ow);
            let w2 = wv
                .to_shape((c_out, c_in * k * k))
                .expect("conv2d: weight reshape");
            let mut y2 = w2.dot(&cols); // [c_out, oh*ow]
            for (o, mut row) in y2.outer_iter_mut().enumerate() {
                row += bv[o];
            }
            let out = y2
                .into_shape_with_order((c_out, oh, ow))
                .unwrap()
                .into_dyn();
            (out, cols, (c_in, h, w), (oh, ow))
        };
        let (k, s, p) = (self.shape(weight)[2], stride, pad);
        self.push(
            out,
            vec![x.0, weight.0, bias.0],
            Some(Box::new(move |g, pv| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let wv = pv[1].view().into_dimensionality::<Ix4>().unwrap();
                let (c_out, c_in, _, _) = wv.dim();
                let (oh, ow) = out_hw;
                let g2 = g3
                    .to_shape((c_out, oh * ow))
                    .expect("conv2d backward reshape");

                let w2 = wv.to_shape((c_out, c_in * k * k)).unwrap();
                let dcols = w2.t().dot(&g2);
                let dx = col2im(&dcols, in_shape, k, s, p, oh, ow);

                let dw2 = g2.dot(&cols.t());
                let dw = dw2
                    .into_shape_with_order((c_out, c_in, k, k))
                    .unwrap()
                    .into_dyn();

                let db = g2.sum_axis(Axis(1)).into_dyn();
                vec![dx.into_dyn(), dw, db]
            })),
        )
    }

    /// ROI-align `[c,h,w]` features for boxes given in image pixels.
    ///
    /// Interpolation contract: feature cell `(row, col)` samples the image at
    /// `((row + 0.5) * stride, (col + 0.5) * stride)`, so an image point `q`
    /// maps to feature coordinates `q / stride - 0.5`. Each of the `p x p`
    /// output bins takes one bilinear sample at its center; coordinates are
    /// clamped to the feature grid at the borders.
    pub fn roi_align(&self, features: Var, boxes: &[BoxCxcywh], stride: f64, p: usize) -> Var {
        let (out, samples, feat_shape) = {
            let nodes = self.nodes.borrow();
            let fv = nodes[features.0]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap();
            let (c, h, w) = fv.dim();
            let mut out = Array4::<f64>::zeros((boxes.len(), c, p, p));
            // One bilinear footprint per (roi, bin): shared across channels.
            let mut samples = Vec::with_capacity(boxes.len() * p * p);
            for (bi, b) in boxes.iter().enumerate() {
                let (x0, y0, x1, y1) = b.corners();
                let bin_w = (x1 - x0) / p as f64;
                let bin_h = (y1 - y0) / p as f64;
                for py in 0..p {
                    for px in 0..p {
                        let sx = x0 + (px as f64 + 0.5) * bin_w;
                        let sy = y0 + (py as f64 + 0.5) * bin_h;
                        let fp = bilinear_footprint(sx, sy, stride, h, w);
                        for ch in 0..c {
                            let mut v = 0.0;
                            for &(iy, ix, wt) in &fp {
                                v += fv[(ch, iy, ix)] * wt;
                            }
                            out[(bi, ch, py, px)] = v;
                        }
                        samples.push(fp);
                    }
                }
            }
            (out, samples, (c, h, w))
        };
        let p_copy = p;
        self.push(
            out.into_dyn(),
            vec![features.0],
            Some(Box::new(move |g, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (c, h, w) = feat_shape;
                let mut grad = Array3::<f64>::zeros((c, h, w));
                let (n_boxes, _, pp, _) = g4.dim();
                for bi in 0..n_boxes {
                    for py in 0..pp {
                        for px in 0..pp {
                            let fp = &samples[(bi * p_copy + py) * p_copy + px];
                            for ch in 0..c {
                                let gv = g4[(bi, ch, py, px)];
                                for &(iy, ix, wt) in fp {
                                    grad[(ch, iy, ix)] += gv * wt;
                                }
                            }
                        }
                    }
                }
                vec![grad.into_dyn()]
            })),
        )
    }

    /// Prepend a `[n]` column to a `[n,m]` matrix -> `[n, m+1]`.
    pub fn prepend_col(&self, col: Var, mat: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let c = nodes[col.0].value.view().into_dimensionality::<Ix1>().unwrap();
            let m = nodes[mat.0].value.view().into_dimensionality::<Ix2>().unwrap();
            assert_eq!(c.len(), m.nrows());
            let mut out = Array2::<f64>::zeros((m.nrows(), m.ncols() + 1));
            for i in 0..m.nrows() {
                out[(i, 0)] = c[i];
                for j in 0..m.ncols() {
                    out[(i, j + 1)] = m[(i, j)];
                }
            }
            out
        };
        self.push(
            out.into_dyn(),
            vec![col.0, mat.0],
            Some(Box::new(|g, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let dcol = g2.column(0).to_owned();
                let dmat = g2.slice(ndarray::s![.., 1..]).to_owned();
                vec![dcol.into_dyn(), dmat.into_dyn()]
            })),
        )
    }

    /// Copy a node's value onto the tape as a fresh constant: gradients will
    /// not flow past this point.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x);
        self.leaf(v)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear sample footprint at image point `(sx, sy)`: up to 4 feature cells
/// with weights summing to 1. Coordinates are clamped to the grid.
fn bilinear_footprint(sx: f64, sy: f64, stride: f64, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let u = (sx / stride - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (sy / stride - 0.5).clamp(0.0, (h - 1) as f64);
    let j0 = u.floor() as usize;
    let i0 = v.floor() as usize;
    let j1 = (j0 + 1).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    let fu = u - j0 as f64;
    let fv = v - i0 as f64;
    vec![
        (i0, j0, (1.0 - fu) * (1.0 - fv)),
        (i0, j1, fu * (1.0 - fv)),
        (i1, j0, (1.0 - fu) * fv),
        (i1, j1, fu * fv),
    ]
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(ch, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    in_shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let (c, h, w) = in_shape;
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ch, iy as usize, ix as usize)] += dcols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    dx
}
