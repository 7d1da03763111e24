//! 2D convolutions on channel-last maps: 1×1, full 3×3, and depthwise 3×3.
//! 3×3 variants use zero padding 1, so spatial extents are preserved.

use super::ops_linear::{accum, axpy, linear_bwd, linear_fwd};
use super::tape::{Op, Sink, Tape, Vals, Var};
use super::{Element, Tensor};
use crate::{Error, Result};

/// Kernel variants. Weight layouts: `K1` is [Cin,Cout]; `K3` is
/// [3,3,Cin,Cout]; `Dw3` is [3,3,C] with Cout == Cin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    K1,
    K3,
    Dw3,
}

#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut s = E::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Valid output-column range for tap kx with pad 1: ox + kx − 1 ∈ [0, w).
#[inline]
fn col_range(kx: usize, w: usize) -> (usize, usize) {
    (1usize.saturating_sub(kx), (w + 1).saturating_sub(kx).min(w))
}

fn k3_fwd<E: Element>(x: &Tensor<E>, w: &Tensor<E>, bias: Option<&[E]>) -> Tensor<E> {
    let (bn, h, wd, cin) = shape4(x);
    let cout = w.shape()[3];
    let mut out = Tensor::zeros(&[bn, h, wd, cout]);
    let od = out.data_mut();
    if let Some(b) = bias {
        for chunk in od.chunks_exact_mut(cout) {
            chunk.copy_from_slice(b);
        }
    }
    let xd = x.data();
    let wdta = w.data();
    for b in 0..bn {
        for oy in 0..h {
            let out_row = &mut od[((b * h + oy) * wd) * cout..][..wd * cout];
            for ky in 0..3usize {
                let iy = oy + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                let in_row = &xd[((b * h + (iy - 1)) * wd) * cin..][..wd * cin];
                for kx in 0..3usize {
                    let (lo, hi) = col_range(kx, wd);
                    let wk = &wdta[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for ox in lo..hi {
                        let xr = &in_row[(ox + kx - 1) * cin..][..cin];
                        let yr = &mut out_row[ox * cout..][..cout];
                        for (ci, &xv) in xr.iter().enumerate() {
                            axpy(yr, xv, &wk[ci * cout..][..cout]);
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn k3_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gy: &Tensor<E>,
    gx: &mut [E],
    gw: &mut [E],
    gb: Option<&mut [E]>,
) {
    let (bn, h, wd, cin) = shape4(x);
    let cout = w.shape()[3];
    let xd = x.data();
    let wdta = w.data();
    let gyd = gy.data();
    for b in 0..bn {
        for oy in 0..h {
            let gy_row = &gyd[((b * h + oy) * wd) * cout..][..wd * cout];
            for ky in 0..3usize {
                let iy = oy + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                let in_row = &xd[((b * h + (iy - 1)) * wd) * cin..][..wd * cin];
                let gx_row = &mut gx[((b * h + (iy - 1)) * wd) * cin..][..wd * cin];
                for kx in 0..3usize {
                    let (lo, hi) = col_range(kx, wd);
                    let wk = &wdta[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    let gwk = &mut gw[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for ox in lo..hi {
                        let gyr = &gy_row[ox * cout..][..cout];
                        let ix = ox + kx - 1;
                        let xr = &in_row[ix * cin..][..cin];
                        let gxr = &mut gx_row[ix * cin..][..cin];
                        for ci in 0..cin {
                            gxr[ci] += dot(gyr, &wk[ci * cout..][..cout]);
                            axpy(&mut gwk[ci * cout..][..cout], xr[ci], gyr);
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for chunk in gyd.chunks_exact(cout) {
            for (g, &v) in gb.iter_mut().zip(chunk) {
                *g += v;
            }
        }
    }
}

fn dw3_fwd<E: Element>(x: &Tensor<E>, w: &Tensor<E>, bias: Option<&[E]>) -> Tensor<E> {
    let (bn, h, wd, c) = shape4(x);
    let mut out = Tensor::zeros(&[bn, h, wd, c]);
    let od = out.data_mut();
    if let Some(b) = bias {
        for chunk in od.chunks_exact_mut(c) {
            chunk.copy_from_slice(b);
        }
    }
    let xd = x.data();
    let wdta = w.data();
    for b in 0..bn {
        for oy in 0..h {
            let out_row = &mut od[((b * h + oy) * wd) * c..][..wd * c];
            for ky in 0..3usize {
                let iy = oy + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                let in_row = &xd[((b * h + (iy - 1)) * wd) * c..][..wd * c];
                for kx in 0..3usize {
                    let (lo, hi) = col_range(kx, wd);
                    let wk = &wdta[(ky * 3 + kx) * c..][..c];
                    for ox in lo..hi {
                        let xr = &in_row[(ox + kx - 1) * c..][..c];
                        let yr = &mut out_row[ox * c..][..c];
                        for ci in 0..c {
                            yr[ci] += xr[ci] * wk[ci];
                        }
                    }
                }
            }
        }
    }
    out
}

fn dw3_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gy: &Tensor<E>,
    gx: &mut [E],
    gw: &mut [E],
    gb: Option<&mut [E]>,
) {
    let (bn, h, wd, c) = shape4(x);
    let xd = x.data();
    let wdta = w.data();
    let gyd = gy.data();
    for b in 0..bn {
        for oy in 0..h {
            let gy_row = &gyd[((b * h + oy) * wd) * c..][..wd * c];
            for ky in 0..3usize {
                let iy = oy + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                let in_row = &xd[((b * h + (iy - 1)) * wd) * c..][..wd * c];
                let gx_row = &mut gx[((b * h + (iy - 1)) * wd) * c..][..wd * c];
                for kx in 0..3usize {
                    let (lo, hi) = col_range(kx, wd);
                    let wk = &wdta[(ky * 3 + kx) * c..][..c];
                    let gwk = &mut gw[(ky * 3 + kx) * c..][..c];
                    for ox in lo..hi {
                        let gyr = &gy_row[ox * c..][..c];
                        let ix = ox + kx - 1;
                        let xr = &in_row[ix * c..][..c];
                        let gxr = &mut gx_row[ix * c..][..c];
                        for ci in 0..c {
                            gxr[ci] += gyr[ci] * wk[ci];
                            gwk[ci] += gyr[ci] * xr[ci];
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for chunk in gyd.chunks_exact(c) {
            for (g, &v) in gb.iter_mut().zip(chunk) {
                *g += v;
            }
        }
    }
}

fn shape4<E: Element>(t: &Tensor<E>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

struct ConvOp {
    x: usize,
    w: usize,
    bias: Option<usize>,
    kind: ConvKind,
}

impl<E: Element> Op<E> for ConvOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let wv = vals.get(self.w);
        let mut gx = vec![E::ZERO; xv.numel()];
        let mut gw = vec![E::ZERO; wv.numel()];
        let cout = *wv.shape().last().unwrap();
        let mut gb = self.bias.map(|_| match self.kind {
            ConvKind::Dw3 => vec![E::ZERO; wv.shape()[2]],
            _ => vec![E::ZERO; cout],
        });
        match self.kind {
            ConvKind::K1 => {
                let (bn, h, wd, cin) = shape4(xv);
                linear_bwd(
                    xv.data(),
                    wv.data(),
                    gy.data(),
                    bn * h * wd,
                    cin,
                    cout,
                    &mut gx,
                    &mut gw,
                    gb.as_deref_mut(),
                );
            }
            ConvKind::K3 => k3_bwd(xv, wv, gy, &mut gx, &mut gw, gb.as_deref_mut()),
            ConvKind::Dw3 => dw3_bwd(xv, wv, gy, &mut gx, &mut gw, gb.as_deref_mut()),
        }
        accum(sink.slot(self.x, xv.shape()), &gx);
        accum(sink.slot(self.w, wv.shape()), &gw);
        if let (Some(bid), Some(gb)) = (self.bias, gb) {
            let blen = gb.len();
            accum(sink.slot(bid, &[blen]), &gb);
        }
    }
}

impl<E: Element> Tape<E> {
    /// Cross-correlation preserving spatial extents. See [`ConvKind`] for
    /// weight layouts; depthwise requires Cout == Cin by construction.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, kind: ConvKind) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("conv2d wants [B,H,W,Cin], got {xs:?}")));
        }
        let cin = xs[3];
        let ws = self.val(w).shape().to_vec();
        let cout = match (kind, ws.as_slice()) {
            (ConvKind::K1, [wc_in, c_out]) if *wc_in == cin => *c_out,
            (ConvKind::K3, [3, 3, wc_in, c_out]) if *wc_in == cin => *c_out,
            (ConvKind::Dw3, [3, 3, wc]) if *wc == cin => cin,
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d {kind:?}: weight {ws:?} incompatible with Cin {cin}"
                )))
            }
        };
        if let Some(b) = bias {
            let bs = self.val(b).shape();
            if bs != [cout] {
                return Err(Error::Shape(format!("conv bias shape {bs:?}, want [{cout}]")));
            }
        }
        let value = match kind {
            ConvKind::K1 => {
                let (bn, h, wd, _) = shape4(self.val(x));
                let y = linear_fwd(
                    self.val(x).data(),
                    self.val(w).data(),
                    bias.map(|b| self.val(b).data()),
                    bn * h * wd,
                    cin,
                    cout,
                );
                Tensor::new(&[bn, h, wd, cout], y)?
            }
            ConvKind::K3 => k3_fwd(self.val(x), self.val(w), bias.map(|b| self.val(b).data())),
            ConvKind::Dw3 => dw3_fwd(self.val(x), self.val(w), bias.map(|b| self.val(b).data())),
        };
        Ok(self.push(
            value,
            Some(Box::new(ConvOp { x: x.id, w: w.id, bias: bias.map(|b| b.id), kind })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grads, LossFn, DEFAULT_EPS};
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv1x1_identity() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(rand_t(&[1, 3, 3, 2], 1));
        let w = tp.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tp.conv2d(x, w, None, ConvKind::K1).unwrap();
        assert_eq!(tp.val(y).data(), tp.val(x).data());
    }

    #[test]
    fn conv3x3_ones_on_single_pixel() {
        // 1×1 spatial input: the eight padded taps contribute zero.
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap());
        let w = tp.leaf(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = tp.conv2d(x, w, None, ConvKind::K3).unwrap();
        assert_eq!(tp.val(y).data(), &[2.5]);
    }

    #[test]
    fn conv3x3_matches_reference() {
        let x = rand_t(&[2, 4, 5, 3], 2);
        let w = rand_t(&[3, 3, 3, 4], 3);
        let b = rand_t(&[4], 4);
        let mut tp = Tape::<f64>::new();
        let xv = tp.leaf(x.clone());
        let wv = tp.leaf(w.clone());
        let bv = tp.leaf(b.clone());
        let y = tp.conv2d(xv, wv, Some(bv), ConvKind::K3).unwrap();
        let want = oracle::conv2d_reference(&x, &w, Some(&b));
        assert!(tp.val(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn conv1x1_matches_reference() {
        let x = rand_t(&[1, 3, 4, 5], 7);
        let w2 = rand_t(&[5, 2], 8);
        let w4 = Tensor::new(&[1, 1, 5, 2], w2.data().to_vec()).unwrap();
        let mut tp = Tape::<f64>::new();
        let xv = tp.leaf(x.clone());
        let wv = tp.leaf(w2.clone());
        let y = tp.conv2d(xv, wv, None, ConvKind::K1).unwrap();
        let want = oracle::conv2d_reference(&x, &w4, None);
        assert!(tp.val(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn depthwise_matches_reference_and_requires_same_channels() {
        let x = rand_t(&[1, 4, 4, 3], 5);
        let w = rand_t(&[3, 3, 3], 6);
        let mut tp = Tape::<f64>::new();
        let xv = tp.leaf(x.clone());
        let wv = tp.leaf(w.clone());
        let y = tp.conv2d(xv, wv, None, ConvKind::Dw3).unwrap();
        let want = oracle::conv2d_dw_reference(&x, &w, None);
        assert!(tp.val(y).max_abs_diff(&want) < 1e-12);

        let bad = tp.leaf(rand_t(&[3, 3, 2], 9));
        assert!(tp.conv2d(xv, bad, None, ConvKind::Dw3).is_err());
    }

    #[test]
    fn conv_gradcheck_all_kinds() {
        for (kind, wshape) in [
            (ConvKind::K1, vec![3usize, 2]),
            (ConvKind::K3, vec![3, 3, 3, 2]),
            (ConvKind::Dw3, vec![3, 3, 3]),
        ] {
            let x = rand_t(&[1, 3, 3, 3], 21);
            let w = rand_t(&wshape, 22);
            let blen = if kind == ConvKind::Dw3 { 3 } else { 2 };
            let b = rand_t(&[blen], 23);
            let f: LossFn<'_> = &move |tp, vs| {
                let y = tp.conv2d(vs[0], vs[1], Some(vs[2]), kind).unwrap();
                let y2 = tp.mul(y, y).unwrap();
                tp.sum_all(y2)
            };
            for r in check_grads(&["x", "w", "b"], &[x, w, b], f, DEFAULT_EPS) {
                assert!(r.max_rel_err < 1e-6, "{kind:?} {}: {}", r.name, r.max_rel_err);
            }
        }
    }
}
