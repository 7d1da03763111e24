//! Linear projection over the last axis and last-axis concatenation.

use super::tape::{Op, Sink, Tape, Vals, Var};
use super::{Element, Tensor};
use crate::{Error, Result};

/// y[p,:] += x_pi · w[i,:], the vectorizable inner step shared by the
/// projection kernels.
#[inline]
pub(crate) fn axpy<E: Element>(acc: &mut [E], x: E, w: &[E]) {
    for (a, &wv) in acc.iter_mut().zip(w) {
        *a += x * wv;
    }
}

#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut s = E::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// y = x·W (+ bias) over flattened leading axes. Pure kernel shared by the
/// tape op, the convolution 1×1 path, and eval-mode code.
pub(crate) fn linear_fwd<E: Element>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    positions: usize,
    cin: usize,
    cout: usize,
) -> Vec<E> {
    let mut y = vec![E::ZERO; positions * cout];
    for p in 0..positions {
        let xr = &x[p * cin..][..cin];
        let yr = &mut y[p * cout..][..cout];
        if let Some(b) = bias {
            yr.copy_from_slice(b);
        }
        for (i, &xv) in xr.iter().enumerate() {
            axpy(yr, xv, &w[i * cout..][..cout]);
        }
    }
    y
}

pub(crate) fn linear_bwd<E: Element>(
    x: &[E],
    w: &[E],
    gy: &[E],
    positions: usize,
    cin: usize,
    cout: usize,
    gx: &mut [E],
    gw: &mut [E],
    mut gb: Option<&mut [E]>,
) {
    for p in 0..positions {
        let gyr = &gy[p * cout..][..cout];
        let xr = &x[p * cin..][..cin];
        let gxr = &mut gx[p * cin..][..cin];
        for i in 0..cin {
            gxr[i] += dot(gyr, &w[i * cout..][..cout]);
            axpy(&mut gw[i * cout..][..cout], xr[i], gyr);
        }
        if let Some(gb) = gb.as_deref_mut() {
            for (g, &v) in gb.iter_mut().zip(gyr) {
                *g += v;
            }
        }
    }
}

struct LinearOp {
    x: usize,
    w: usize,
    bias: Option<usize>,
    positions: usize,
    cin: usize,
    cout: usize,
}

impl<E: Element> Op<E> for LinearOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let wv = vals.get(self.w);
        let mut gx = vec![E::ZERO; xv.numel()];
        let mut gw = vec![E::ZERO; wv.numel()];
        let mut gb = self.bias.map(|_| vec![E::ZERO; self.cout]);
        linear_bwd(
            xv.data(),
            wv.data(),
            gy.data(),
            self.positions,
            self.cin,
            self.cout,
            &mut gx,
            &mut gw,
            gb.as_deref_mut(),
        );
        accum(sink.slot(self.x, xv.shape()), &gx);
        accum(sink.slot(self.w, wv.shape()), &gw);
        if let (Some(bid), Some(gb)) = (self.bias, gb) {
            accum(sink.slot(bid, &[self.cout]), &gb);
        }
    }
}

pub(crate) fn accum<E: Element>(slot: &mut Tensor<E>, src: &[E]) {
    for (s, &v) in slot.data_mut().iter_mut().zip(src) {
        *s += v;
    }
}

struct ConcatLastOp {
    inputs: Vec<usize>,
    outer: usize,
    widths: Vec<usize>,
}

impl<E: Element> Op<E> for ConcatLastOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        for (k, &id) in self.inputs.iter().enumerate() {
            let wk = self.widths[k];
            let shape = vals.get(id).shape().to_vec();
            let slot = sink.slot(id, &shape);
            let sd = slot.data_mut();
            for p in 0..self.outer {
                let src = &gy.data()[p * total + offset..][..wk];
                for (s, &v) in sd[p * wk..][..wk].iter_mut().zip(src) {
                    *s += v;
                }
            }
            offset += wk;
        }
    }
}

impl<E: Element> Tape<E> {
    /// y[..., j] = Σ_i x[..., i]·W[i, j] (+ bias[j]).
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        if ws.len() != 2 {
            return Err(Error::Shape(format!("linear weight must be 2-D, got {ws:?}")));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if xs.is_empty() || *xs.last().unwrap() != cin {
            return Err(Error::Shape(format!(
                "linear: input last axis {xs:?} does not match weight Cin {cin}"
            )));
        }
        if let Some(b) = bias {
            let bs = self.val(b).shape();
            if bs != [cout] {
                return Err(Error::Shape(format!("linear bias shape {bs:?}, want [{cout}]")));
            }
        }
        let positions: usize = xs[..xs.len() - 1].iter().product();
        let y = linear_fwd(
            self.val(x).data(),
            self.val(w).data(),
            bias.map(|b| self.val(b).data()),
            positions,
            cin,
            cout,
        );
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = cout;
        let value = Tensor::new(&out_shape, y)?;
        Ok(self.push(
            value,
            Some(Box::new(LinearOp {
                x: x.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                positions,
                cin,
                cout,
            })),
        ))
    }

    /// Concatenates along the last axis; all other axes must match.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Invalid("concat_last of zero tensors".into()));
        }
        let first = self.val(inputs[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.val(v).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat_last leading axes differ: {first:?} vs {s:?}"
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let outer: usize = lead.iter().product();
        let mut data = vec![E::ZERO; outer * total];
        let mut offset = 0;
        for (k, &v) in inputs.iter().enumerate() {
            let wk = widths[k];
            let src = self.val(v).data();
            for p in 0..outer {
                data[p * total + offset..][..wk].copy_from_slice(&src[p * wk..][..wk]);
            }
            offset += wk;
        }
        let mut out_shape = first;
        *out_shape.last_mut().unwrap() = total;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Some(Box::new(ConcatLastOp {
                inputs: inputs.iter().map(|v| v.id).collect(),
                outer,
                widths,
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grads, LossFn, DEFAULT_EPS, DEFAULT_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_passes_through() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let w = tp.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tp.linear(x, w, None).unwrap();
        assert_eq!(tp.val(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn bias_and_reduction() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tp.leaf(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = tp.leaf(Tensor::new(&[1], vec![1.0]).unwrap());
        let y = tp.linear(x, w, Some(b)).unwrap();
        assert_eq!(tp.val(y).data(), &[4.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::zeros(&[1, 3]));
        let w = tp.leaf(Tensor::zeros(&[2, 2]));
        assert!(tp.linear(x, w, None).is_err());
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
        let f: LossFn<'_> = &|tp, vs| {
            let y = tp.linear(vs[0], vs[1], Some(vs[2])).unwrap();
            let y2 = tp.mul(y, y).unwrap();
            tp.sum_all(y2)
        };
        for r in check_grads(&["x", "w", "b"], &[x, w, b], f, DEFAULT_EPS) {
            assert!(r.max_rel_err < 1e-6, "{}: {}", r.name, r.max_rel_err);
        }
        let _ = DEFAULT_TOL;
    }

    #[test]
    fn concat_last_roundtrip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
        let f: LossFn<'_> = &|tp, vs| {
            let c = tp.concat_last(&[vs[0], vs[1]]).unwrap();
            let c2 = tp.mul(c, c).unwrap();
            tp.sum_all(c2)
        };
        for r in check_grads(&["a", "b"], &[a.clone(), b.clone()], f, DEFAULT_EPS) {
            assert!(r.passes(DEFAULT_TOL), "{}: {}", r.name, r.max_rel_err);
        }
        let mut tp = Tape::<f64>::new();
        let av = tp.leaf(a.clone());
        let bv = tp.leaf(b.clone());
        let c = tp.concat_last(&[av, bv]).unwrap();
        assert_eq!(tp.val(c).shape(), &[2, 5]);
        assert_eq!(tp.val(c).at(&[1, 0]), a.at(&[1, 0]));
        assert_eq!(tp.val(c).at(&[1, 2]), b.at(&[1, 0]));
    }
}
