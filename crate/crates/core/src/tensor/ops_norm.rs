//! Layer normalization over the last axis and 2D batch normalization over
//! (B,H,W) per channel with running statistics for eval mode.

use super::ops_linear::accum;
use super::tape::{Op, Sink, Tape, Vals, Var};
use super::{Element, Tensor};
use crate::{Error, Result};

fn ln_stats<E: Element>(row: &[E], eps: E) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mut mean = E::ZERO;
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = E::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    (mean, E::ONE / (var + eps).sqrt())
}

struct LayerNormOp<E> {
    x: usize,
    gamma: usize,
    beta: usize,
    eps: E,
}

impl<E: Element> Op<E> for LayerNormOp<E> {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let gv = vals.get(self.gamma);
        let c = *xv.shape().last().unwrap();
        let n = E::from_f64(c as f64);
        let mut gx = vec![E::ZERO; xv.numel()];
        let mut gg = vec![E::ZERO; c];
        let mut gb = vec![E::ZERO; c];
        for (ri, (row, gyr)) in
            xv.data().chunks_exact(c).zip(gy.data().chunks_exact(c)).enumerate()
        {
            let (mean, rstd) = ln_stats(row, self.eps);
            // dxhat = gy·γ; dx = rstd·(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
            let mut s1 = E::ZERO;
            let mut s2 = E::ZERO;
            for i in 0..c {
                let xhat = (row[i] - mean) * rstd;
                let dxh = gyr[i] * gv.data()[i];
                s1 += dxh;
                s2 += dxh * xhat;
                gg[i] += gyr[i] * xhat;
                gb[i] += gyr[i];
            }
            s1 = s1 / n;
            s2 = s2 / n;
            let gxr = &mut gx[ri * c..][..c];
            for i in 0..c {
                let xhat = (row[i] - mean) * rstd;
                let dxh = gyr[i] * gv.data()[i];
                gxr[i] += rstd * (dxh - s1 - xhat * s2);
            }
        }
        accum(sink.slot(self.x, xv.shape()), &gx);
        accum(sink.slot(self.gamma, &[c]), &gg);
        accum(sink.slot(self.beta, &[c]), &gb);
    }
}

/// Per-channel statistics over (B,H,W): (mean, biased var) in f64.
fn bn_batch_stats<E: Element>(x: &Tensor<E>, c: usize) -> (Vec<f64>, Vec<f64>) {
    let count = x.numel() / c;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.to_f64();
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    for row in x.data().chunks_exact(c) {
        for i in 0..c {
            let d = row[i].to_f64() - mean[i];
            var[i] += d * d;
        }
    }
    for v in &mut var {
        *v /= count as f64;
    }
    (mean, var)
}

struct BatchNormOp<E> {
    x: usize,
    gamma: usize,
    beta: usize,
    /// Normalization statistics actually used in forward: batch stats when
    /// training, running stats when not. Eval mode treats them as constants.
    mean: Vec<E>,
    rstd: Vec<E>,
    train: bool,
}

impl<E: Element> Op<E> for BatchNormOp<E> {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let gv = vals.get(self.gamma);
        let c = self.mean.len();
        let count = E::from_f64((xv.numel() / c) as f64);
        let mut gg = vec![E::ZERO; c];
        let mut gb = vec![E::ZERO; c];
        let mut s1 = vec![E::ZERO; c];
        let mut s2 = vec![E::ZERO; c];
        for (row, gyr) in xv.data().chunks_exact(c).zip(gy.data().chunks_exact(c)) {
            for i in 0..c {
                let xhat = (row[i] - self.mean[i]) * self.rstd[i];
                gg[i] += gyr[i] * xhat;
                gb[i] += gyr[i];
                s1[i] += gyr[i];
                s2[i] += gyr[i] * xhat;
            }
        }
        let mut gx = vec![E::ZERO; xv.numel()];
        for (ri, row) in xv.data().chunks_exact(c).enumerate() {
            let gyr = &gy.data()[ri * c..][..c];
            let gxr = &mut gx[ri * c..][..c];
            for i in 0..c {
                let g = gv.data()[i] * self.rstd[i];
                if self.train {
                    let xhat = (row[i] - self.mean[i]) * self.rstd[i];
                    gxr[i] += g * (gyr[i] - s1[i] / count - xhat * s2[i] / count);
                } else {
                    gxr[i] += g * gyr[i];
                }
            }
        }
        accum(sink.slot(self.x, xv.shape()), &gx);
        accum(sink.slot(self.gamma, &[c]), &gg);
        accum(sink.slot(self.beta, &[c]), &gb);
    }
}

/// Updated running statistics produced by a training-mode batchnorm; the
/// caller writes them back into its parameter store after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate<E: Element> {
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

impl<E: Element> Tape<E> {
    /// Normalizes the last axis per position: γ·(x−μ)/√(σ²+eps) + β.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let c = *xs.last().ok_or_else(|| Error::Shape("layernorm on rank-0".into()))?;
        if self.val(gamma).shape() != [c] || self.val(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "layernorm affine params must be [{c}], got {:?}/{:?}",
                self.val(gamma).shape(),
                self.val(beta).shape()
            )));
        }
        let epe = E::from_f64(eps);
        let mut out = Tensor::zeros(&xs);
        {
            let gd = self.val(gamma).data();
            let bd = self.val(beta).data();
            let xd = self.val(x).data();
            let od = out.data_mut();
            for (ri, row) in xd.chunks_exact(c).enumerate() {
                let (mean, rstd) = ln_stats(row, epe);
                let orow = &mut od[ri * c..][..c];
                for i in 0..c {
                    orow[i] = gd[i] * (row[i] - mean) * rstd + bd[i];
                }
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(LayerNormOp { x: x.id, gamma: gamma.id, beta: beta.id, eps: epe })),
        ))
    }

    /// Batch normalization over (B,H,W) per channel. In training mode the
    /// batch statistics normalize and the returned [`BnUpdate`] carries
    /// running stats advanced with momentum 0.1 (unbiased variance, matching
    /// the usual eval-time convention); in eval mode the provided running
    /// stats normalize and no update is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, Option<BnUpdate<E>>)> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("batchnorm2d wants [B,H,W,C], got {xs:?}")));
        }
        let c = xs[3];
        for (name, t) in [
            ("gamma", self.val(gamma).shape()),
            ("beta", self.val(beta).shape()),
            ("running_mean", running_mean.shape()),
            ("running_var", running_var.shape()),
        ] {
            if t != [c] {
                return Err(Error::Shape(format!("batchnorm {name} must be [{c}], got {t:?}")));
            }
        }
        let count = self.val(x).numel() / c;
        let (mean, rstd, update) = if train {
            let (bm, bv) = bn_batch_stats(self.val(x), c);
            let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
            let mut rm = running_mean.clone();
            let mut rv = running_var.clone();
            for i in 0..c {
                let rmv = rm.data()[i].to_f64() * (1.0 - momentum) + momentum * bm[i];
                let rvv = rv.data()[i].to_f64() * (1.0 - momentum) + momentum * bv[i] * unbias;
                rm.data_mut()[i] = E::from_f64(rmv);
                rv.data_mut()[i] = E::from_f64(rvv);
            }
            let mean: Vec<E> = bm.iter().map(|&m| E::from_f64(m)).collect();
            let rstd: Vec<E> = bv.iter().map(|&v| E::from_f64(1.0 / (v + eps).sqrt())).collect();
            (mean, rstd, Some(BnUpdate { running_mean: rm, running_var: rv }))
        } else {
            let mean: Vec<E> = running_mean.data().to_vec();
            let rstd: Vec<E> = running_var
                .data()
                .iter()
                .map(|&v| E::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
                .collect();
            (mean, rstd, None)
        };
        let mut out = Tensor::zeros(&xs);
        {
            let gd = self.val(gamma).data();
            let bd = self.val(beta).data();
            let od = out.data_mut();
            for (row, orow) in self.val(x).data().chunks_exact(c).zip(od.chunks_exact_mut(c)) {
                for i in 0..c {
                    orow[i] = gd[i] * (row[i] - mean[i]) * rstd[i] + bd[i];
                }
            }
        }
        let var = self.push(
            out,
            Some(Box::new(BatchNormOp {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                rstd,
                train,
            })),
        );
        Ok((var, update))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NORM_EPS: f64 = 1e-5;
    const BN_MOMENTUM: f64 = 0.1;
    use crate::gradcheck::{check_grads, LossFn, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn layernorm_constant_input_gives_beta() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::full(&[2, 3], 4.2));
        let g = tp.leaf(Tensor::full(&[3], 2.0));
        let b = tp.leaf(Tensor::new(&[3], vec![0.5, -0.5, 1.0]).unwrap());
        let y = tp.layernorm(x, g, b, NORM_EPS).unwrap();
        for row in tp.val(y).data().chunks_exact(3) {
            assert!((row[0] - 0.5).abs() < 1e-9);
            assert!((row[1] + 0.5).abs() < 1e-9);
            assert!((row[2] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_standardized_passthrough() {
        // Unit-variance zero-mean rows with γ=1, β=0 come back within eps.
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap());
        let g = tp.leaf(Tensor::full(&[2], 1.0));
        let b = tp.leaf(Tensor::zeros(&[2]));
        let y = tp.layernorm(x, g, b, NORM_EPS).unwrap();
        assert!((tp.val(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((tp.val(y).data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layernorm_gradcheck() {
        let x = rand_t(&[2, 2, 5], 31);
        let g = rand_t(&[5], 32);
        let b = rand_t(&[5], 33);
        let f: LossFn<'_> = &|tp, vs| {
            let y = tp.layernorm(vs[0], vs[1], vs[2], NORM_EPS).unwrap();
            let y2 = tp.mul(y, y).unwrap();
            tp.sum_all(y2)
        };
        for r in check_grads(&["x", "gamma", "beta"], &[x, g, b], f, DEFAULT_EPS) {
            assert!(r.max_rel_err < 1e-6, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(rand_t(&[2, 3, 3, 2], 41));
        let g = tp.leaf(Tensor::full(&[2], 1.0));
        let b = tp.leaf(Tensor::zeros(&[2]));
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::full(&[2], 1.0);
        let (y, upd) =
            tp.batchnorm2d(x, g, b, &rm, &rv, true, BN_MOMENTUM, NORM_EPS).unwrap();
        let upd = upd.unwrap();
        // Output is standardized per channel.
        let c = 2;
        let (m, v) = bn_batch_stats(tp.val(y), c);
        for i in 0..c {
            assert!(m[i].abs() < 1e-9);
            assert!((v[i] - 1.0).abs() < 1e-3);
        }
        // Running stats moved 10% toward the batch stats.
        let (bm, bv) = bn_batch_stats(tp.val(x), c);
        let count = tp.val(x).numel() / c;
        let unbias = count as f64 / (count as f64 - 1.0);
        for i in 0..c {
            assert!((upd.running_mean.data()[i] - 0.1 * bm[i]).abs() < 1e-12);
            assert!((upd.running_var.data()[i] - (0.9 + 0.1 * bv[i] * unbias)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::full(&[1, 2, 2, 1], 3.0));
        let g = tp.leaf(Tensor::full(&[1], 2.0));
        let b = tp.leaf(Tensor::full(&[1], 1.0));
        let rm = Tensor::full(&[1], 1.0);
        let rv = Tensor::full(&[1], 4.0);
        let (y, upd) =
            tp.batchnorm2d(x, g, b, &rm, &rv, false, BN_MOMENTUM, NORM_EPS).unwrap();
        assert!(upd.is_none());
        // (3−1)/2 · 2 + 1 = 3, up to eps in the rsqrt.
        for &v in tp.val(y).data() {
            assert!((v - 3.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_gradcheck_train_and_eval() {
        let x = rand_t(&[2, 2, 2, 3], 51);
        let g = rand_t(&[3], 52);
        let b = rand_t(&[3], 53);
        for train in [true, false] {
            let f: LossFn<'_> = &move |tp, vs| {
                let rm = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
                let rv = Tensor::new(&[3], vec![1.5, 0.7, 1.1]).unwrap();
                let (y, _) =
                    tp.batchnorm2d(vs[0], vs[1], vs[2], &rm, &rv, train, BN_MOMENTUM, NORM_EPS)
                        .unwrap();
                let y2 = tp.mul(y, y).unwrap();
                tp.sum_all(y2)
            };
            for r in check_grads(&["x", "gamma", "beta"], &[x.clone(), g.clone(), b.clone()], f, DEFAULT_EPS)
            {
                assert!(r.max_rel_err < 1e-6, "train={train} {}: {}", r.name, r.max_rel_err);
            }
        }
    }
}
