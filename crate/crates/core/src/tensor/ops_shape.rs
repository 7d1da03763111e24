//! Layout ops on channel-last maps: block rearrange (patch expand/reduce),
//! channel-first permute for head outputs, and bilinear upsampling.

use super::tape::{Op, Sink, Tape, Vals, Var};
use super::{Element, Tensor};
use crate::{Error, Result};

/// out[b, r·h+dy, r·w+dx, c] = in[b, h, w, (dy·r+dx)·C + c]: channel groups of
/// size C fill each r×r block in row-major block order.
fn expand_fwd<E: Element>(x: &Tensor<E>, r: usize) -> Tensor<E> {
    let (bn, h, w, cr2) = dims4(x.shape());
    let c = cr2 / (r * r);
    let mut out = Tensor::zeros(&[bn, h * r, w * r, c]);
    let od = out.data_mut();
    let xd = x.data();
    let ow = w * r;
    for b in 0..bn {
        for y in 0..h {
            for xw in 0..w {
                let src = &xd[((b * h + y) * w + xw) * cr2..][..cr2];
                for dy in 0..r {
                    for dx in 0..r {
                        let g = dy * r + dx;
                        let oy = y * r + dy;
                        let ox = xw * r + dx;
                        let dst = &mut od[((b * h * r + oy) * ow + ox) * c..][..c];
                        dst.copy_from_slice(&src[g * c..][..c]);
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of `expand_fwd`.
fn reduce_fwd<E: Element>(x: &Tensor<E>, r: usize) -> Tensor<E> {
    let (bn, h, w, c) = dims4(x.shape());
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros(&[bn, oh, ow, c * r * r]);
    let od = out.data_mut();
    let xd = x.data();
    for b in 0..bn {
        for y in 0..oh {
            for xw in 0..ow {
                let dst = &mut od[((b * oh + y) * ow + xw) * c * r * r..][..c * r * r];
                for dy in 0..r {
                    for dx in 0..r {
                        let g = dy * r + dx;
                        let iy = y * r + dy;
                        let ix = xw * r + dx;
                        let src = &xd[((b * h + iy) * w + ix) * c..][..c];
                        dst[g * c..][..c].copy_from_slice(src);
                    }
                }
            }
        }
    }
    out
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

fn check4(s: &[usize], what: &str) -> Result<()> {
    if s.len() != 4 {
        return Err(Error::Shape(format!("{what} wants [B,H,W,C], got {s:?}")));
    }
    Ok(())
}

struct ExpandOp {
    x: usize,
    r: usize,
}

impl<E: Element> Op<E> for ExpandOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let g = reduce_fwd(gy, self.r);
        super::ops_linear::accum(sink.slot(self.x, xv.shape()), g.data());
    }
}

struct ReduceOp {
    x: usize,
    r: usize,
}

impl<E: Element> Op<E> for ReduceOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let g = expand_fwd(gy, self.r);
        super::ops_linear::accum(sink.slot(self.x, xv.shape()), g.data());
    }
}

fn to_cf_fwd<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (bn, h, w, c) = dims4(x.shape());
    let mut out = Tensor::zeros(&[bn, c, h, w]);
    let od = out.data_mut();
    let xd = x.data();
    for b in 0..bn {
        for y in 0..h {
            for xw in 0..w {
                let src = &xd[((b * h + y) * w + xw) * c..][..c];
                for (ci, &v) in src.iter().enumerate() {
                    od[((b * c + ci) * h + y) * w + xw] = v;
                }
            }
        }
    }
    out
}

struct ToChannelFirstOp {
    x: usize,
}

impl<E: Element> Op<E> for ToChannelFirstOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let (bn, h, w, c) = dims4(xv.shape());
        let slot = sink.slot(self.x, xv.shape());
        let sd = slot.data_mut();
        let gd = gy.data();
        for b in 0..bn {
            for y in 0..h {
                for xw in 0..w {
                    let dst = &mut sd[((b * h + y) * w + xw) * c..][..c];
                    for (ci, s) in dst.iter_mut().enumerate() {
                        *s += gd[((b * c + ci) * h + y) * w + xw];
                    }
                }
            }
        }
    }
}

/// Source coordinate and lerp weights for one output index under the
/// half-pixel convention sy = (i + 0.5)/s − 0.5, clamped at the borders.
#[inline]
pub(crate) fn bilerp_axis(i: usize, scale: usize, extent: usize) -> (usize, usize, f64) {
    let s = (i as f64 + 0.5) / scale as f64 - 0.5;
    let s = s.max(0.0).min(extent as f64 - 1.0);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, s - lo as f64)
}

fn bilinear_fwd<E: Element>(x: &Tensor<E>, scale: usize) -> Tensor<E> {
    let (bn, h, w, c) = dims4(x.shape());
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(&[bn, oh, ow, c]);
    let od = out.data_mut();
    let xd = x.data();
    for b in 0..bn {
        for oy in 0..oh {
            let (y0, y1, wy) = bilerp_axis(oy, scale, h);
            for ox in 0..ow {
                let (x0, x1, wx) = bilerp_axis(ox, scale, w);
                let dst = &mut od[((b * oh + oy) * ow + ox) * c..][..c];
                let r00 = &xd[((b * h + y0) * w + x0) * c..][..c];
                let r01 = &xd[((b * h + y0) * w + x1) * c..][..c];
                let r10 = &xd[((b * h + y1) * w + x0) * c..][..c];
                let r11 = &xd[((b * h + y1) * w + x1) * c..][..c];
                let w00 = E::from_f64((1.0 - wy) * (1.0 - wx));
                let w01 = E::from_f64((1.0 - wy) * wx);
                let w10 = E::from_f64(wy * (1.0 - wx));
                let w11 = E::from_f64(wy * wx);
                for ci in 0..c {
                    dst[ci] = w00 * r00[ci] + w01 * r01[ci] + w10 * r10[ci] + w11 * r11[ci];
                }
            }
        }
    }
    out
}

struct BilinearOp {
    x: usize,
    scale: usize,
}

impl<E: Element> Op<E> for BilinearOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let xv = vals.get(self.x);
        let (bn, h, w, c) = dims4(xv.shape());
        let (oh, ow) = (h * self.scale, w * self.scale);
        let slot = sink.slot(self.x, xv.shape());
        let sd = slot.data_mut();
        let gd = gy.data();
        for b in 0..bn {
            for oy in 0..oh {
                let (y0, y1, wy) = bilerp_axis(oy, self.scale, h);
                for ox in 0..ow {
                    let (x0, x1, wx) = bilerp_axis(ox, self.scale, w);
                    let g = &gd[((b * oh + oy) * ow + ox) * c..][..c];
                    let ws = [
                        (y0, x0, (1.0 - wy) * (1.0 - wx)),
                        (y0, x1, (1.0 - wy) * wx),
                        (y1, x0, wy * (1.0 - wx)),
                        (y1, x1, wy * wx),
                    ];
                    for (sy, sx, wgt) in ws {
                        let wgt = E::from_f64(wgt);
                        let dst = &mut sd[((b * h + sy) * w + sx) * c..][..c];
                        for ci in 0..c {
                            dst[ci] += wgt * g[ci];
                        }
                    }
                }
            }
        }
    }
}

impl<E: Element> Tape<E> {
    /// [B,H,W,C·r²] → [B,rH,rW,C]; channel groups fill r×r blocks row-major.
    pub fn rearrange_expand(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        check4(&s, "rearrange_expand")?;
        if r == 0 || s[3] % (r * r) != 0 {
            return Err(Error::Shape(format!(
                "rearrange_expand: channels {} not divisible by r²={}",
                s[3],
                r * r
            )));
        }
        let v = expand_fwd(self.val(x), r);
        Ok(self.push(v, Some(Box::new(ExpandOp { x: x.id, r }))))
    }

    /// [B,H,W,C] → [B,H/r,W/r,C·r²]; exact inverse of `rearrange_expand`.
    pub fn rearrange_reduce(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        check4(&s, "rearrange_reduce")?;
        if r == 0 || s[1] % r != 0 || s[2] % r != 0 {
            return Err(Error::Shape(format!(
                "rearrange_reduce: spatial {}×{} not divisible by r={r}",
                s[1], s[2]
            )));
        }
        let v = reduce_fwd(self.val(x), r);
        Ok(self.push(v, Some(Box::new(ReduceOp { x: x.id, r }))))
    }

    /// [B,H,W,C] → [B,C,H,W]; the boundary layout for head outputs.
    pub fn to_channel_first(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        check4(&s, "to_channel_first")?;
        let v = to_cf_fwd(self.val(x));
        Ok(self.push(v, Some(Box::new(ToChannelFirstOp { x: x.id }))))
    }

    /// Half-pixel bilinear upsampling by an integer factor ≥ 1.
    pub fn interpolate_bilinear(&mut self, x: Var, scale: usize) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        check4(&s, "interpolate_bilinear")?;
        if scale < 1 {
            return Err(Error::Invalid("interpolate_bilinear: scale must be ≥ 1".into()));
        }
        let v = bilinear_fwd(self.val(x), scale);
        Ok(self.push(v, Some(Box::new(BilinearOp { x: x.id, scale }))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grads, LossFn, DEFAULT_EPS, DEFAULT_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expand_definitional_order() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tp.rearrange_expand(x, 2).unwrap();
        assert_eq!(tp.val(y).shape(), &[1, 2, 2, 1]);
        assert_eq!(tp.val(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn expand_r1_is_identity() {
        let mut tp = Tape::<f64>::new();
        let t = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let x = tp.leaf(t.clone());
        let y = tp.rearrange_expand(x, 1).unwrap();
        assert_eq!(tp.val(y).data(), t.data());
    }

    #[test]
    fn rearrange_roundtrip_all_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in [1usize, 2, 4] {
            let t = Tensor::from_fn(&[2, 2, 3, 2 * r * r], |_| rng.gen_range(-1.0..1.0));
            let mut tp = Tape::<f64>::new();
            let x = tp.leaf(t.clone());
            let e = tp.rearrange_expand(x, r).unwrap();
            let back = tp.rearrange_reduce(e, r).unwrap();
            assert_eq!(tp.val(back).data(), t.data(), "r={r}");
        }
    }

    #[test]
    fn rearrange_divisibility_error() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::zeros(&[1, 1, 1, 3]));
        assert!(tp.rearrange_expand(x, 2).is_err());
    }

    #[test]
    fn bilinear_scale1_identity_and_const() {
        let mut tp = Tape::<f64>::new();
        let t = Tensor::from_fn(&[1, 2, 3, 2], |i| i as f64);
        let x = tp.leaf(t.clone());
        let y = tp.interpolate_bilinear(x, 1).unwrap();
        assert_eq!(tp.val(y).data(), t.data());

        let one = tp.leaf(Tensor::full(&[1, 1, 1, 1], 7.5));
        let up = tp.interpolate_bilinear(one, 4).unwrap();
        assert!(tp.val(up).data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn bilinear_matches_pointwise_formula() {
        // 2×2 input upscaled ×2, checked against the scalar convention
        // directly: src = (i+0.5)/s − 0.5 with border clamp.
        let t = Tensor::new(&[1, 2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(t.clone());
        let y = tp.interpolate_bilinear(x, 2).unwrap();
        for oy in 0..4usize {
            for ox in 0..4usize {
                let (y0, y1, wy) = bilerp_axis(oy, 2, 2);
                let (x0, x1, wx) = bilerp_axis(ox, 2, 2);
                let want = t.at(&[0, y0, x0, 0]) * (1.0 - wy) * (1.0 - wx)
                    + t.at(&[0, y0, x1, 0]) * (1.0 - wy) * wx
                    + t.at(&[0, y1, x0, 0]) * wy * (1.0 - wx)
                    + t.at(&[0, y1, x1, 0]) * wy * wx;
                assert!((tp.val(y).at(&[0, oy, ox, 0]) - want).abs() < 1e-12);
            }
        }
        // Interior sample positions under the convention: out[0,1,1,0] mixes
        // all four corners at weight 0.25 each when s=2 maps to sy=sx=0.25.
        assert!((tp.val(y).at(&[0, 1, 1, 0]) - (0.75 * 0.75 * 0.0 + 0.75 * 0.25 + 0.25 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn shape_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[1, 2, 2, 4], |_| rng.gen_range(-1.0..1.0));
        let f: LossFn<'_> = &|tp, vs| {
            let e = tp.rearrange_expand(vs[0], 2).unwrap();
            let u = tp.interpolate_bilinear(e, 2).unwrap();
            let cf = tp.to_channel_first(u).unwrap();
            let sq = tp.mul(cf, cf).unwrap();
            tp.sum_all(sq)
        };
        for r in check_grads(&["x"], &[x], f, DEFAULT_EPS) {
            assert!(r.passes(DEFAULT_TOL), "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn channel_first_layout() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64));
        let y = tp.to_channel_first(x).unwrap();
        assert_eq!(tp.val(y).shape(), &[1, 3, 2, 2]);
        assert_eq!(tp.val(y).at(&[0, 2, 1, 0]), tp.val(x).at(&[0, 1, 0, 2]));
    }
}
