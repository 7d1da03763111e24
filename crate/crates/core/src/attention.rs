//! Windowed multi-head attention, the quadratic-complexity stand-in for the
//! 2D scans.
//!
//! Maps are cut into `window`×`window` tiles (edge tiles shrink to the map
//! boundary, which is equivalent to padding plus masking: absent cells get
//! zero weight either way). Each tile runs softmax attention per head, query
//! rows normalized over the tile's real cells. Self attention is the cross
//! form with both maps equal. Cost per tile is quadratic in its cell count,
//! which is what the scaling benchmark measures against the linear scan.

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::tape::{Op, Sink, Tape, Vals, Var};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use rand::Rng;

/// Query/key/value/output projections, all [C, C] and bias-free.
#[derive(Debug, Clone)]
pub struct AttnParams<E: Element> {
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
}

impl<E: Element> AttnParams<E> {
    pub fn init<R: Rng>(rng: &mut R, c: usize) -> Self {
        Self {
            w_q: crate::params::kaiming(rng, &[c, c], c),
            w_k: crate::params::kaiming(rng, &[c, c], c),
            w_v: crate::params::kaiming(rng, &[c, c], c),
            w_o: crate::params::kaiming(rng, &[c, c], c),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> AttnParamIds {
        AttnParamIds {
            w_q: store.add(format!("{prefix}.w_q"), self.w_q, true),
            w_k: store.add(format!("{prefix}.w_k"), self.w_k, true),
            w_v: store.add(format!("{prefix}.w_v"), self.w_v, true),
            w_o: store.add(format!("{prefix}.w_o"), self.w_o, true),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnParamIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl AttnParamIds {
    pub fn vars(&self, b: &Bound) -> AttnVars {
        AttnVars {
            w_q: b.var(self.w_q),
            w_k: b.var(self.w_k),
            w_v: b.var(self.w_v),
            w_o: b.var(self.w_o),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

fn check_attn_args<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    window: usize,
    heads: usize,
) -> Result<(usize, usize, usize, usize)> {
    let s = q.shape();
    if s.len() != 4 || s.contains(&0) {
        return Err(Error::Shape(format!(
            "attention maps must be [B,H,W,C] with no zero dim, got {s:?}"
        )));
    }
    if k.shape() != s || v.shape() != s {
        return Err(Error::Shape(format!(
            "attention q/k/v shapes differ: {s:?} vs {:?} vs {:?}",
            k.shape(),
            v.shape()
        )));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if window == 0 {
        return Err(Error::Invalid("attention window must be >= 1".into()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Invalid(format!(
            "channels {c} must split evenly over heads {heads}"
        )));
    }
    Ok((b, h, w, c))
}

/// Cells of window (wr, wc) as flat row-major positions of one batch row.
fn window_cells(wr: usize, wc: usize, window: usize, h: usize, w: usize) -> Vec<usize> {
    let (r0, r1) = (wr * window, ((wr + 1) * window).min(h));
    let (c0, c1) = (wc * window, ((wc + 1) * window).min(w));
    let mut cells = Vec::with_capacity((r1 - r0) * (c1 - c0));
    for r in r0..r1 {
        for c in c0..c1 {
            cells.push(r * w + c);
        }
    }
    cells
}

/// One stable softmax-attention pass for a tile and head. `probs` receives
/// the normalized weights of each query row when requested.
#[allow(clippy::too_many_arguments)]
fn tile_head_forward<E: Element>(
    q: &[E],
    k: &[E],
    v: &[E],
    cells: &[usize],
    c: usize,
    off: usize,
    d: usize,
    scale: E,
    out: &mut [E],
    mut probs: Option<&mut [E]>,
) {
    let m = cells.len();
    let mut scores = vec![E::ZERO; m];
    for (i, &qi) in cells.iter().enumerate() {
        let qrow = &q[qi * c + off..][..d];
        let mut maxv = E::from_f64(f64::NEG_INFINITY);
        for (j, &kj) in cells.iter().enumerate() {
            let krow = &k[kj * c + off..][..d];
            let mut acc = E::ZERO;
            for (a, b) in qrow.iter().zip(krow) {
                acc += *a * *b;
            }
            let s = acc * scale;
            scores[j] = s;
            maxv = maxv.maxv(s);
        }
        let mut z = E::ZERO;
        for s in scores.iter_mut() {
            *s = (*s - maxv).exp();
            z += *s;
        }
        let inv_z = E::ONE / z;
        let orow = &mut out[qi * c + off..][..d];
        for (j, &vj) in cells.iter().enumerate() {
            let p = scores[j] * inv_z;
            if let Some(pr) = probs.as_deref_mut() {
                pr[i * m + j] = p;
            }
            let vrow = &v[vj * c + off..][..d];
            for (o, &x) in orow.iter_mut().zip(vrow) {
                *o += p * x;
            }
        }
    }
}

fn attention_forward<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    window: usize,
    heads: usize,
    mut weight_dump: Option<&mut Vec<AttnWeights<E>>>,
) -> Result<Tensor<E>> {
    let (b, h, w, c) = check_attn_args(q, k, v, window, heads)?;
    let d = c / heads;
    let scale = E::from_f64(1.0 / (d as f64).sqrt());
    let row = h * w * c;
    let mut out = Tensor::zeros(&[b, h, w, c]);
    for bi in 0..b {
        let qr = &q.data()[bi * row..][..row];
        let kr = &k.data()[bi * row..][..row];
        let vr = &v.data()[bi * row..][..row];
        let or = &mut out.data_mut()[bi * row..][..row];
        for wr in 0..h.div_ceil(window) {
            for wc in 0..w.div_ceil(window) {
                let cells = window_cells(wr, wc, window, h, w);
                let m = cells.len();
                for hd in 0..heads {
                    let probs_buf = weight_dump
                        .as_ref()
                        .map(|_| Tensor::<E>::zeros(&[m, m]));
                    let mut probs_buf = probs_buf;
                    tile_head_forward(
                        qr,
                        kr,
                        vr,
                        &cells,
                        c,
                        hd * d,
                        d,
                        scale,
                        or,
                        probs_buf.as_mut().map(|t| t.data_mut()),
                    );
                    if let (Some(dump), Some(pb)) = (weight_dump.as_deref_mut(), probs_buf) {
                        dump.push(AttnWeights {
                            batch: bi,
                            window_row: wr,
                            window_col: wc,
                            head: hd,
                            probs: pb,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Normalized weights of one (batch, tile, head); `probs` is [M, M] with M
/// the tile's cell count, each row summing to 1.
#[derive(Debug, Clone)]
pub struct AttnWeights<E: Element> {
    pub batch: usize,
    pub window_row: usize,
    pub window_col: usize,
    pub head: usize,
    pub probs: Tensor<E>,
}

/// Windowed attention over already-projected q/k/v maps.
pub fn window_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    window: usize,
    heads: usize,
) -> Result<Tensor<E>> {
    attention_forward(q, k, v, window, heads, None)
}

/// Same forward, also returning every tile's weight matrix for inspection.
pub fn window_attention_with_weights<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    window: usize,
    heads: usize,
) -> Result<(Tensor<E>, Vec<AttnWeights<E>>)> {
    let mut dump = Vec::new();
    let out = attention_forward(q, k, v, window, heads, Some(&mut dump))?;
    Ok((out, dump))
}

struct WindowAttnOp {
    q: usize,
    k: usize,
    v: usize,
    window: usize,
    heads: usize,
}

impl<E: Element> Op<E> for WindowAttnOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let qt = vals.get(self.q);
        let kt = vals.get(self.k);
        let vt = vals.get(self.v);
        let s = qt.shape().to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let d = c / self.heads;
        let scale = E::from_f64(1.0 / (d as f64).sqrt());
        let row = h * w * c;
        let mut gq = vec![E::ZERO; b * row];
        let mut gk = vec![E::ZERO; b * row];
        let mut gv = vec![E::ZERO; b * row];
        for bi in 0..b {
            let qr = &qt.data()[bi * row..][..row];
            let kr = &kt.data()[bi * row..][..row];
            let vr = &vt.data()[bi * row..][..row];
            let gr = &gy.data()[bi * row..][..row];
            for wr in 0..h.div_ceil(self.window) {
                for wc in 0..w.div_ceil(self.window) {
                    let cells = window_cells(wr, wc, self.window, h, w);
                    let m = cells.len();
                    let mut probs = vec![E::ZERO; m];
                    let mut dp = vec![E::ZERO; m];
                    for hd in 0..self.heads {
                        let off = hd * d;
                        for &qi in cells.iter() {
                            let qrow = &qr[qi * c + off..][..d];
                            // Recompute this row's probabilities.
                            let mut maxv = E::from_f64(f64::NEG_INFINITY);
                            for (j, &kj) in cells.iter().enumerate() {
                                let krow = &kr[kj * c + off..][..d];
                                let mut acc = E::ZERO;
                                for (a, b2) in qrow.iter().zip(krow) {
                                    acc += *a * *b2;
                                }
                                let sc = acc * scale;
                                probs[j] = sc;
                                maxv = maxv.maxv(sc);
                            }
                            let mut z = E::ZERO;
                            for p in probs.iter_mut() {
                                *p = (*p - maxv).exp();
                                z += *p;
                            }
                            let inv_z = E::ONE / z;
                            for p in probs.iter_mut() {
                                *p *= inv_z;
                            }
                            // dL/dp_j = gy_i · v_j; softmax pullback
                            // ds_j = p_j (dp_j − Σ_k p_k dp_k).
                            let gyrow = &gr[qi * c + off..][..d];
                            let mut dot = E::ZERO;
                            for (j, &vj) in cells.iter().enumerate() {
                                let vrow = &vr[vj * c + off..][..d];
                                let mut acc = E::ZERO;
                                for (g, &x) in gyrow.iter().zip(vrow) {
                                    acc += *g * x;
                                }
                                dp[j] = acc;
                                dot += probs[j] * acc;
                                let gvrow = &mut gv[bi * row + vj * c + off..][..d];
                                for (gvx, &g) in gvrow.iter_mut().zip(gyrow) {
                                    *gvx += probs[j] * g;
                                }
                            }
                            let gqrow_base = bi * row + qi * c + off;
                            for (j, &kj) in cells.iter().enumerate() {
                                let ds = probs[j] * (dp[j] - dot) * scale;
                                let krow = &kr[kj * c + off..][..d];
                                for (gqx, &kx) in
                                    gq[gqrow_base..][..d].iter_mut().zip(krow)
                                {
                                    *gqx += ds * kx;
                                }
                                let gkrow = &mut gk[bi * row + kj * c + off..][..d];
                                for (gkx, &qx) in gkrow.iter_mut().zip(qrow) {
                                    *gkx += ds * qx;
                                }
                            }
                        }
                    }
                }
            }
        }
        use crate::tensor::ops_linear::accum;
        accum(sink.slot(self.q, &s), &gq);
        accum(sink.slot(self.k, &s), &gk);
        accum(sink.slot(self.v, &s), &gv);
    }
}

impl<E: Element> Tape<E> {
    /// Differentiable windowed attention core over projected q/k/v maps.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        heads: usize,
    ) -> Result<Var> {
        let out = attention_forward(
            self.val(q),
            self.val(k),
            self.val(v),
            window,
            heads,
            None,
        )?;
        Ok(self.push(
            out,
            Some(Box::new(WindowAttnOp {
                q: q.id(),
                k: k.id(),
                v: v.id(),
                window,
                heads,
            })),
        ))
    }

    /// Full windowed multi-head block: project `query`/`kv`, run the core,
    /// project the result. `kv == query` is plain self attention.
    pub fn windowed_mhsa(
        &mut self,
        p: &AttnVars,
        query: Var,
        kv: Var,
        window: usize,
        heads: usize,
    ) -> Result<Var> {
        let q = self.linear(query, p.w_q, None)?;
        let k = self.linear(kv, p.w_k, None)?;
        let v = self.linear(kv, p.w_v, None)?;
        let core = self.window_attention(q, k, v, window, heads)?;
        self.linear(core, p.w_o, None)
    }
}
