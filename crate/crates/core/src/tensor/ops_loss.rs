//! Scalar training losses as fused tape ops. Predictions arrive channel-first
//! `[B, K, H, W]` (the model's boundary layout); targets are plain arrays, not
//! tape nodes, so no gradient flows toward them.

use super::ops_linear::accum;
use super::tape::{Op, Sink, Tape, Vals, Var};
use super::{Element, Tensor};
use crate::{Error, Result};

/// Per-pixel log-softmax cross-entropy over the class axis with per-class
/// weights: loss = Σ_p w[k_p]·(lse_p − logit_p[k_p]) / Σ_p w[k_p].
struct CeLossOp<E> {
    logits: usize,
    target: Vec<u32>,
    weights: Vec<E>,
    weight_sum: E,
}

impl<E: Element> CeLossOp<E> {
    /// (max, Σ exp(v − max)) over a logit column.
    fn lse(col: impl Iterator<Item = E> + Clone) -> (E, E) {
        let mut m = E::from_f64(f64::NEG_INFINITY);
        for v in col.clone() {
            m = m.maxv(v);
        }
        let mut s = E::ZERO;
        for v in col {
            s += (v - m).exp();
        }
        (m, s)
    }
}

impl<E: Element> Op<E> for CeLossOp<E> {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let lv = vals.get(self.logits);
        let (bn, k, h, w) = (lv.shape()[0], lv.shape()[1], lv.shape()[2], lv.shape()[3]);
        let hw = h * w;
        let g = gy.data()[0];
        let mut gl = vec![E::ZERO; lv.numel()];
        let ld = lv.data();
        for b in 0..bn {
            for p in 0..hw {
                let tgt = self.target[b * hw + p] as usize;
                let wgt = self.weights[tgt] / self.weight_sum;
                let col = (0..k).map(|c| ld[(b * k + c) * hw + p]);
                let (m, s) = Self::lse(col.clone());
                for (c, v) in col.enumerate() {
                    let soft = (v - m).exp() / s;
                    let ind = if c == tgt { E::ONE } else { E::ZERO };
                    gl[(b * k + c) * hw + p] += g * wgt * (soft - ind);
                }
            }
        }
        accum(sink.slot(self.logits, lv.shape()), &gl);
    }
}

/// Mean absolute error against a fixed target tensor.
struct L1LossOp<E> {
    pred: usize,
    target: Tensor<E>,
}

impl<E: Element> Op<E> for L1LossOp<E> {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let pv = vals.get(self.pred);
        let g = gy.data()[0] / E::from_f64(pv.numel() as f64);
        let slot = sink.slot(self.pred, pv.shape());
        for ((s, &p), &t) in slot.data_mut().iter_mut().zip(pv.data()).zip(self.target.data()) {
            let d = p - t;
            let sign = if d > E::ZERO {
                E::ONE
            } else if d < E::ZERO {
                -E::ONE
            } else {
                E::ZERO
            };
            *s += g * sign;
        }
    }
}

impl<E: Element> Tape<E> {
    /// Weighted-mean cross-entropy. `logits` is [B,K,H,W], `target` holds one
    /// class index per pixel in row-major (B,H,W) order, `class_weights` (len
    /// K) defaults to all-ones. Numerically stable via max subtraction.
    pub fn ce_loss(
        &mut self,
        logits: Var,
        target: &[u32],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let ls = self.val(logits).shape().to_vec();
        if ls.len() != 4 {
            return Err(Error::Shape(format!("ce_loss wants [B,K,H,W], got {ls:?}")));
        }
        let (bn, k, h, w) = (ls[0], ls[1], ls[2], ls[3]);
        let hw = h * w;
        if target.len() != bn * hw {
            return Err(Error::Shape(format!(
                "ce_loss target length {} != B·H·W = {}",
                target.len(),
                bn * hw
            )));
        }
        let weights: Vec<E> = match class_weights {
            Some(ws) => {
                if ws.len() != k {
                    return Err(Error::Shape(format!(
                        "ce_loss class_weights length {} != K = {k}",
                        ws.len()
                    )));
                }
                ws.iter().map(|&v| E::from_f64(v)).collect()
            }
            None => vec![E::ONE; k],
        };
        for &t in target {
            if t as usize >= k {
                return Err(Error::Invalid(format!("class index {t} out of range 0..{k}")));
            }
        }
        let ld = self.val(logits).data();
        let mut num = E::ZERO;
        let mut den = E::ZERO;
        for b in 0..bn {
            for p in 0..hw {
                let tgt = target[b * hw + p] as usize;
                let col = (0..k).map(|c| ld[(b * k + c) * hw + p]);
                let (m, s) = CeLossOp::lse(col);
                let nll = m + s.ln() - ld[(b * k + tgt) * hw + p];
                num += weights[tgt] * nll;
                den += weights[tgt];
            }
        }
        let value = Tensor::scalar(num / den);
        Ok(self.push(
            value,
            Some(Box::new(CeLossOp {
                logits: logits.id,
                target: target.to_vec(),
                weights,
                weight_sum: den,
            })),
        ))
    }

    /// Mean |pred − target| over all entries.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<E>) -> Result<Var> {
        if self.val(pred).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "l1_loss shapes differ: {:?} vs {:?}",
                self.val(pred).shape(),
                target.shape()
            )));
        }
        let mut acc = E::ZERO;
        for (&p, &t) in self.val(pred).data().iter().zip(target.data()) {
            acc += (p - t).abs();
        }
        let n = E::from_f64(self.val(pred).numel() as f64);
        let value = Tensor::scalar(acc / n);
        Ok(self.push(value, Some(Box::new(L1LossOp { pred: pred.id, target: target.clone() }))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grads, LossFn, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        let mut tp = Tape::<f64>::new();
        let k = 5;
        let logits = tp.leaf(Tensor::zeros(&[1, k, 2, 2]));
        let target = vec![3u32, 0, 1, 4];
        let loss = tp.ce_loss(logits, &target, None).unwrap();
        assert!((tp.val(loss).data()[0] - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_logits_near_zero() {
        let mut tp = Tape::<f64>::new();
        // One-hot logits scaled by 1e3 at the target class.
        let mut t = Tensor::zeros(&[1, 3, 1, 2]);
        t.set(&[0, 2, 0, 0], 1e3);
        t.set(&[0, 1, 0, 1], 1e3);
        let logits = tp.leaf(t);
        let loss = tp.ce_loss(logits, &[2, 1], None).unwrap();
        assert!(tp.val(loss).data()[0] < 1e-3);
    }

    #[test]
    fn ce_rejects_out_of_range_class() {
        let mut tp = Tape::<f64>::new();
        let logits = tp.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(tp.ce_loss(logits, &[2], None).is_err());
    }

    #[test]
    fn ce_class_weights_reweight_pixels() {
        // Two pixels, classes 0 and 1; weight class 1 by 0.95 and class 0 by
        // 0.05: the loss is the weighted mean of the two pixel NLLs.
        let mut tp = Tape::<f64>::new();
        let mut t = Tensor::zeros(&[1, 2, 1, 2]);
        t.set(&[0, 0, 0, 0], 2.0);
        t.set(&[0, 1, 0, 1], -1.0);
        let logits = tp.leaf(t.clone());
        let loss_w = tp.ce_loss(logits, &[0, 1], Some(&[0.05, 0.95])).unwrap();
        let nll = |l0: f64, l1: f64, tgt: usize| {
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            lse - if tgt == 0 { l0 } else { l1 }
        };
        let want = (0.05 * nll(2.0, 0.0, 0) + 0.95 * nll(0.0, -1.0, 1)) / (0.05 + 0.95);
        assert!((tp.val(loss_w).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn l1_zero_at_equality_and_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let t = Tensor::from_fn(&[1, 2, 2, 2], |_| rng.gen_range(-1.0..1.0));
        {
            let mut tp = Tape::<f64>::new();
            let p = tp.leaf(t.clone());
            let loss = tp.l1_loss(p, &t).unwrap();
            assert_eq!(tp.val(loss).data()[0], 0.0);
        }
        // Perturb prediction away from kinks before the finite-difference run.
        let pred = Tensor::from_fn(&[1, 2, 2, 2], |i| t.data()[i] + 0.3 + 0.05 * i as f64);
        let target = t.clone();
        let f: LossFn<'_> = &move |tp, vs| tp.l1_loss(vs[0], &target).unwrap();
        for r in check_grads(&["pred"], &[pred], f, DEFAULT_EPS) {
            assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
        }
    }

    #[test]
    fn ce_gradcheck_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let logits = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let target: Vec<u32> = (0..8).map(|_| rng.gen_range(0..3u32)).collect();
        let f: LossFn<'_> = &move |tp, vs| {
            tp.ce_loss(vs[0], &target, Some(&[0.2, 0.5, 0.3])).unwrap()
        };
        for r in check_grads(&["logits"], &[logits], f, DEFAULT_EPS) {
            assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
        }
    }
}
