//! Independent reference implementations used to verify the production
//! kernels. Everything here is written directly from the defining formulas as
//! plain loops in f64, deliberately sharing no code with the checked paths.

use crate::tensor::Tensor;

/// Selective-scan recurrence materializing every hidden state.
///
/// Inputs are the already-projected per-step parameter sequences:
/// A = −exp(a_log[c,n]); Abar[t,c,n] = exp(delta[t,c]·A[c,n]);
/// Bbar[t,c,n] = delta[t,c]·B_seq[t,n];
/// h[t,c,n] = Abar·h[t−1,c,n] + Bbar·x[t,c], h[−1] = 0;
/// y[t,c] = Σ_n C_seq[t,n]·h[t,c,n] + d_skip[c]·x[t,c].
#[allow(clippy::too_many_arguments)]
pub fn scan_reference(
    a_log: &Tensor<f64>,
    d_skip: &Tensor<f64>,
    b_seq: &Tensor<f64>,
    c_seq: &Tensor<f64>,
    delta: &Tensor<f64>,
    x: &Tensor<f64>,
) -> Tensor<f64> {
    let (l, ci) = (x.shape()[0], x.shape()[1]);
    let n = a_log.shape()[1];
    let mut h = vec![0.0f64; ci * n];
    let mut y = Tensor::zeros(&[l, ci]);
    for t in 0..l {
        for c in 0..ci {
            let mut acc = 0.0;
            for s in 0..n {
                let a = -f64::exp(a_log.at(&[c, s]));
                let abar = f64::exp(delta.at(&[t, c]) * a);
                let bbar = delta.at(&[t, c]) * b_seq.at(&[t, s]);
                h[c * n + s] = abar * h[c * n + s] + bbar * x.at(&[t, c]);
                acc += c_seq.at(&[t, s]) * h[c * n + s];
            }
            y.set(&[t, c], acc + d_skip.at(&[c]) * x.at(&[t, c]));
        }
    }
    y
}

/// Six-loop cross-correlation with zero padding 1 for 3×3 kernels.
/// `w` is [kh,kw,Cin,Cout]; 1×1 kernels pass [1,1,Cin,Cout].
pub fn conv2d_reference(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (bn, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin);
    let pad = kh / 2;
    let mut out = Tensor::zeros(&[bn, h, wd, cout]);
    for b in 0..bn {
        for oy in 0..h {
            for ox in 0..wd {
                for co in 0..cout {
                    let mut acc = bias.map_or(0.0, |bt| bt.at(&[co]));
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[b, iy as usize, ix as usize, ci])
                                    * w.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out.set(&[b, oy, ox, co], acc);
                }
            }
        }
    }
    out
}

/// Depthwise variant of [`conv2d_reference`]; `w` is [kh,kw,C].
pub fn conv2d_dw_reference(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (bn, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[0], w.shape()[1]);
    assert_eq!(w.shape()[2], c);
    let pad = kh / 2;
    let mut out = Tensor::zeros(&[bn, h, wd, c]);
    for b in 0..bn {
        for oy in 0..h {
            for ox in 0..wd {
                for ci in 0..c {
                    let mut acc = bias.map_or(0.0, |bt| bt.at(&[ci]));
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.at(&[b, iy as usize, ix as usize, ci]) * w.at(&[ky, kx, ci]);
                        }
                    }
                    out.set(&[b, oy, ox, ci], acc);
                }
            }
        }
    }
    out
}

/// Per-class IoU from raw label maps by explicit set arithmetic.
/// Returns (class, intersection, union) for classes present in either map.
pub fn iou_reference(pred: &[usize], target: &[usize], classes: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for k in 0..classes {
        let mut inter = 0usize;
        let mut uni = 0usize;
        for (&p, &t) in pred.iter().zip(target) {
            let pp = p == k;
            let tt = t == k;
            if pp && tt {
                inter += 1;
            }
            if pp || tt {
                uni += 1;
            }
        }
        if uni > 0 {
            out.push((k, inter, uni));
        }
    }
    out
}

/// One AdamW step on a single scalar, straight from the update equations.
/// Returns (new_param, new_m, new_v). Decay is decoupled: the weight-decay
/// term subtracts lr·wd·p in the same step, separate from the moment update.
#[allow(clippy::too_many_arguments)]
pub fn adamw_scalar_reference(
    p: f64,
    g: f64,
    m: f64,
    v: f64,
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> (f64, f64, f64) {
    let m1 = beta1 * m + (1.0 - beta1) * g;
    let v1 = beta2 * v + (1.0 - beta2) * g * g;
    let mhat = m1 / (1.0 - beta1.powi(step as i32));
    let vhat = v1 / (1.0 - beta2.powi(step as i32));
    let p1 = p - lr * (mhat / (vhat.sqrt() + eps)) - lr * weight_decay * p;
    (p1, m1, v1)
}
