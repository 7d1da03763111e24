//! Four-direction 2D selective scans over [B,H,W,C] maps.
//!
//! A map is unfolded into 1D sequences along four traversals (row-major,
//! column-major, and their exact reverses), each sequence runs through its
//! own 1D selective scan, and the results are folded back onto the grid and
//! summed in fixed D1+D2+D3+D4 order. The cross variant drives every
//! directional recurrence with a query map while B/C/Δ are generated from a
//! second map; with both maps equal it degenerates to the plain self scan
//! bit-identically because it is the same code path.

use crate::params::{Bound, ParamStore};
use crate::ssm::{
    fan_out, seq_backward, seq_forward, ParamGradBufs, SsmNodeIds, SsmParamIds, SsmParams,
    SsmVars, SsmView,
};
use crate::tensor::tape::{Op, Sink, Tape, Vals, Var};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// One traversal order of the grid. D1 is row-major (left→right, then
/// top→bottom), D2 column-major (top→bottom, then left→right), D3 and D4
/// their exact reverses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanDirection {
    D1,
    D2,
    D3,
    D4,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::D1,
        ScanDirection::D2,
        ScanDirection::D3,
        ScanDirection::D4,
    ];

    pub fn index(self) -> usize {
        match self {
            ScanDirection::D1 => 0,
            ScanDirection::D2 => 1,
            ScanDirection::D3 => 2,
            ScanDirection::D4 => 3,
        }
    }

    /// Sequence position of grid cell (r, c); a bijection for every direction.
    pub fn seq_index(self, r: usize, c: usize, h: usize, w: usize) -> usize {
        match self {
            ScanDirection::D1 => r * w + c,
            ScanDirection::D2 => c * h + r,
            ScanDirection::D3 => h * w - 1 - (r * w + c),
            ScanDirection::D4 => h * w - 1 - (c * h + r),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ScanDirection::D1 => "d1",
            ScanDirection::D2 => "d2",
            ScanDirection::D3 => "d3",
            ScanDirection::D4 => "d4",
        }
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScanDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d1" => Ok(ScanDirection::D1),
            "d2" => Ok(ScanDirection::D2),
            "d3" => Ok(ScanDirection::D3),
            "d4" => Ok(ScanDirection::D4),
            other => Err(Error::Invalid(format!(
                "unknown scan direction {other:?}, expected d1..d4"
            ))),
        }
    }
}

fn map_dims<E: Element>(x: &Tensor<E>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s.contains(&0) {
        return Err(Error::Shape(format!(
            "{what} must be [B,H,W,C] with no zero dim, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Writes one batch element's [H·W, C] sequence in traversal order.
fn unfold_row<E: Element>(x: &[E], h: usize, w: usize, ch: usize, d: ScanDirection, out: &mut [E]) {
    for r in 0..h {
        for c in 0..w {
            let k = d.seq_index(r, c, h, w);
            out[k * ch..][..ch].copy_from_slice(&x[(r * w + c) * ch..][..ch]);
        }
    }
}

/// Adds one [H·W, C] sequence back onto the grid it was unfolded from.
fn fold_add_row<E: Element>(
    seq: &[E],
    h: usize,
    w: usize,
    ch: usize,
    d: ScanDirection,
    out: &mut [E],
) {
    for r in 0..h {
        for c in 0..w {
            let k = d.seq_index(r, c, h, w);
            for (o, &s) in out[(r * w + c) * ch..][..ch].iter_mut().zip(&seq[k * ch..][..ch]) {
                *o += s;
            }
        }
    }
}

/// Linearizes [B,H,W,C] to [B,H·W,C] in the direction's traversal order.
pub fn unfold<E: Element>(x: &Tensor<E>, d: ScanDirection) -> Result<Tensor<E>> {
    let (b, h, w, ch) = map_dims(x, "unfold input")?;
    let row = h * w * ch;
    let mut out = Tensor::zeros(&[b, h * w, ch]);
    for bi in 0..b {
        unfold_row(
            &x.data()[bi * row..][..row],
            h,
            w,
            ch,
            d,
            &mut out.data_mut()[bi * row..][..row],
        );
    }
    Ok(out)
}

/// Inverse of [`unfold`]: scatters [B,H·W,C] sequences back onto the grid.
/// `fold(unfold(x, d), d, h, w) == x` exactly for every direction.
pub fn fold<E: Element>(seq: &Tensor<E>, d: ScanDirection, h: usize, w: usize) -> Result<Tensor<E>> {
    let s = seq.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Shape(format!(
            "fold input must be [B,{},C], got {s:?}",
            h * w
        )));
    }
    let (b, ch) = (s[0], s[2]);
    let row = h * w * ch;
    let mut out = Tensor::zeros(&[b, h, w, ch]);
    for bi in 0..b {
        fold_add_row(
            &seq.data()[bi * row..][..row],
            h,
            w,
            ch,
            d,
            &mut out.data_mut()[bi * row..][..row],
        );
    }
    Ok(out)
}

/// Four per-direction 1D scans sharing Cinner and N. With `tied` every
/// direction reuses one parameter set (registered once, gradients summed
/// over directions); untied directions are independent draws.
#[derive(Debug, Clone)]
pub struct Ss2dParams<E: Element> {
    pub dirs: [SsmParams<E>; 4],
    pub tied: bool,
}

impl<E: Element> Ss2dParams<E> {
    pub fn init<R: Rng>(rng: &mut R, cinner: usize, n: usize, tied: bool) -> Self {
        let dirs = if tied {
            let one = SsmParams::init(rng, cinner, n);
            [one.clone(), one.clone(), one.clone(), one]
        } else {
            [(); 4].map(|()| SsmParams::init(rng, cinner, n))
        };
        Self { dirs, tied }
    }

    pub fn cinner(&self) -> usize {
        self.dirs[0].cinner()
    }

    pub fn state_size(&self) -> usize {
        self.dirs[0].state_size()
    }

    /// Tied parameters register once under `prefix.dall` and alias across
    /// directions; untied ones register under `prefix.d1`..`prefix.d4`.
    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> Ss2dParamIds {
        if self.tied {
            let [one, _, _, _] = self.dirs;
            let ids = one.register(store, &format!("{prefix}.dall"));
            Ss2dParamIds { dirs: [ids; 4] }
        } else {
            let [d1, d2, d3, d4] = self.dirs;
            Ss2dParamIds {
                dirs: [
                    d1.register(store, &format!("{prefix}.d1")),
                    d2.register(store, &format!("{prefix}.d2")),
                    d3.register(store, &format!("{prefix}.d3")),
                    d4.register(store, &format!("{prefix}.d4")),
                ],
            }
        }
    }
}

/// Store ids of the four directional parameter sets (aliased when tied).
#[derive(Debug, Clone, Copy)]
pub struct Ss2dParamIds {
    pub dirs: [SsmParamIds; 4],
}

impl Ss2dParamIds {
    pub fn vars(&self, b: &Bound) -> Ss2dVars {
        Ss2dVars {
            dirs: [
                self.dirs[0].vars(b),
                self.dirs[1].vars(b),
                self.dirs[2].vars(b),
                self.dirs[3].vars(b),
            ],
        }
    }
}

/// Tape handles for the four directional parameter sets.
#[derive(Debug, Clone, Copy)]
pub struct Ss2dVars {
    pub dirs: [SsmVars; 4],
}

/// Deduplicating membership mask; rejects an empty active set.
fn active_mask(active: &[ScanDirection]) -> Result<[bool; 4]> {
    let mut mask = [false; 4];
    for d in active {
        mask[d.index()] = true;
    }
    if mask == [false; 4] {
        return Err(Error::Invalid("scan2d: active direction set is empty".into()));
    }
    Ok(mask)
}

/// All four direction views must agree on (Cinner, N, R).
fn validate_dirs<E: Element>(views: &[SsmView<'_, E>; 4]) -> Result<(usize, usize, usize)> {
    let dims = views[0].validate()?;
    for v in &views[1..] {
        if v.validate()? != dims {
            return Err(Error::Shape(
                "scan2d: directions disagree on (Cinner, N, R)".into(),
            ));
        }
    }
    Ok(dims)
}

/// (direction, batch) job list in direction-major order; every later merge
/// walks this order, so the thread count never changes any result.
fn job_descs(mask: [bool; 4], b: usize) -> Vec<(usize, usize)> {
    (0..4)
        .filter(|&di| mask[di])
        .flat_map(|di| (0..b).map(move |bi| (di, bi)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn css2d_forward<E: Element>(
    views: &[SsmView<'_, E>; 4],
    mask: [bool; 4],
    q: &[E],
    s: &[E],
    b: usize,
    h: usize,
    w: usize,
    ch: usize,
    n: usize,
    r: usize,
    threads: usize,
    out: &mut [E],
) {
    let l = h * w;
    let row = l * ch;
    let descs = job_descs(mask, b);
    let mut ys = vec![E::ZERO; descs.len() * row];
    {
        let jobs: Vec<((usize, usize), &mut [E])> =
            descs.iter().copied().zip(ys.chunks_mut(row)).collect();
        fan_out(jobs, threads, |((di, bi), y_j)| {
            let dir = ScanDirection::ALL[di];
            let mut xq = vec![E::ZERO; row];
            let mut xs = vec![E::ZERO; row];
            unfold_row(&q[bi * row..][..row], h, w, ch, dir, &mut xq);
            unfold_row(&s[bi * row..][..row], h, w, ch, dir, &mut xs);
            seq_forward(&views[di], &xq, &xs, l, ch, n, r, y_j);
        });
    }
    for ((di, bi), y_j) in descs.iter().copied().zip(ys.chunks(row)) {
        fold_add_row(y_j, h, w, ch, ScanDirection::ALL[di], &mut out[bi * row..][..row]);
    }
}

/// Returns per-direction parameter gradients (in active order) plus the
/// gradients w.r.t. the query and shared maps.
#[allow(clippy::too_many_arguments)]
fn css2d_backward<E: Element>(
    views: &[SsmView<'_, E>; 4],
    mask: [bool; 4],
    q: &[E],
    s: &[E],
    gy: &[E],
    b: usize,
    h: usize,
    w: usize,
    ch: usize,
    n: usize,
    r: usize,
    threads: usize,
) -> (Vec<(usize, ParamGradBufs<E>)>, Vec<E>, Vec<E>) {
    let l = h * w;
    let row = l * ch;
    let descs = job_descs(mask, b);
    let nj = descs.len();
    let mut gxq = vec![E::ZERO; nj * row];
    let mut gxs = vec![E::ZERO; nj * row];
    let mut bufs: Vec<ParamGradBufs<E>> = (0..nj).map(|_| ParamGradBufs::zeros(ch, n, r)).collect();
    {
        let jobs: Vec<((usize, usize), (&mut [E], &mut [E], &mut ParamGradBufs<E>))> = descs
            .iter()
            .copied()
            .zip(
                gxq.chunks_mut(row)
                    .zip(gxs.chunks_mut(row).zip(bufs.iter_mut()))
                    .map(|(a, (b2, c))| (a, b2, c)),
            )
            .collect();
        fan_out(jobs, threads, |((di, bi), (gxq_j, gxs_j, buf))| {
            let dir = ScanDirection::ALL[di];
            let mut xq = vec![E::ZERO; row];
            let mut xs = vec![E::ZERO; row];
            let mut gyd = vec![E::ZERO; row];
            unfold_row(&q[bi * row..][..row], h, w, ch, dir, &mut xq);
            unfold_row(&s[bi * row..][..row], h, w, ch, dir, &mut xs);
            unfold_row(&gy[bi * row..][..row], h, w, ch, dir, &mut gyd);
            seq_backward(&views[di], &xq, &xs, l, ch, n, r, &gyd, &mut buf.sink(), gxq_j, gxs_j);
        });
    }
    // Fixed-order merges: map gradients direction-major, parameter buffers
    // per direction over ascending batch index.
    let mut gq = vec![E::ZERO; b * row];
    let mut gs = vec![E::ZERO; b * row];
    for (j, &(di, bi)) in descs.iter().enumerate() {
        let dir = ScanDirection::ALL[di];
        fold_add_row(&gxq[j * row..][..row], h, w, ch, dir, &mut gq[bi * row..][..row]);
        fold_add_row(&gxs[j * row..][..row], h, w, ch, dir, &mut gs[bi * row..][..row]);
    }
    let mut per_dir: Vec<(usize, ParamGradBufs<E>)> = Vec::new();
    for ((di, _), buf) in descs.iter().copied().zip(bufs) {
        match per_dir.last_mut() {
            Some((d, acc)) if *d == di => acc.add_from(&buf),
            _ => per_dir.push((di, buf)),
        }
    }
    (per_dir, gq, gs)
}

/// Four-direction cross scan: `query` drives each directional recurrence
/// while B/C/Δ are generated from `shared`. Folded outputs are summed in
/// D1..D4 order over the `active` set (duplicates collapse).
pub fn css2d<E: Element>(
    p: &Ss2dParams<E>,
    query: &Tensor<E>,
    shared: &Tensor<E>,
    active: &[ScanDirection],
) -> Result<Tensor<E>> {
    let mask = active_mask(active)?;
    let views = [
        p.dirs[0].view(),
        p.dirs[1].view(),
        p.dirs[2].view(),
        p.dirs[3].view(),
    ];
    let (ci, n, r) = validate_dirs(&views)?;
    let (b, h, w, ch) = map_dims(query, "query")?;
    if shared.shape() != query.shape() {
        return Err(Error::Shape(format!(
            "shared shape {:?} != query shape {:?}",
            shared.shape(),
            query.shape()
        )));
    }
    if ch != ci {
        return Err(Error::Shape(format!(
            "map has {ch} channels, scan expects {ci}"
        )));
    }
    let mut out = Tensor::zeros(&[b, h, w, ch]);
    css2d_forward(
        &views,
        mask,
        query.data(),
        shared.data(),
        b,
        h,
        w,
        ch,
        n,
        r,
        crate::max_threads(),
        out.data_mut(),
    );
    Ok(out)
}

/// Plain four-direction self scan; exactly [`css2d`] with `shared == query`.
pub fn ss2d<E: Element>(
    p: &Ss2dParams<E>,
    x: &Tensor<E>,
    active: &[ScanDirection],
) -> Result<Tensor<E>> {
    css2d(p, x, x, active)
}

struct Css2dOp {
    ids: [SsmNodeIds; 4],
    mask: [bool; 4],
    query: usize,
    shared: usize,
}

impl<E: Element> Op<E> for Css2dOp {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>) {
        let qv = vals.get(self.query);
        let sv = vals.get(self.shared);
        let shape = qv.shape().to_vec();
        let (b, h, w, ch) = (shape[0], shape[1], shape[2], shape[3]);
        let views = [
            self.ids[0].view(vals),
            self.ids[1].view(vals),
            self.ids[2].view(vals),
            self.ids[3].view(vals),
        ];
        let (_, n, r) = validate_dirs(&views).expect("validated at forward");
        let (per_dir, gq, gs) = css2d_backward(
            &views,
            self.mask,
            qv.data(),
            sv.data(),
            gy.data(),
            b,
            h,
            w,
            ch,
            n,
            r,
            crate::max_threads(),
        );
        for (di, bufs) in &per_dir {
            bufs.drain_into(sink, &self.ids[*di], ch, n, r);
        }
        use crate::tensor::ops_linear::accum;
        accum(sink.slot(self.query, &shape), &gq);
        accum(sink.slot(self.shared, &shape), &gs);
    }
}

impl<E: Element> Tape<E> {
    /// Differentiable four-direction cross scan on [B,H,W,C] maps. Gradients
    /// flow to both maps and to every active direction's parameters; tied
    /// directions alias the same nodes, so their contributions sum there.
    pub fn css2d(
        &mut self,
        p: &Ss2dVars,
        query: Var,
        shared: Var,
        active: &[ScanDirection],
    ) -> Result<Var> {
        let mask = active_mask(active)?;
        let views = [
            p.dirs[0].view_on(self),
            p.dirs[1].view_on(self),
            p.dirs[2].view_on(self),
            p.dirs[3].view_on(self),
        ];
        let (ci, n, r) = validate_dirs(&views)?;
        let (b, h, w, ch) = map_dims(self.val(query), "query")?;
        if self.val(shared).shape() != self.val(query).shape() {
            return Err(Error::Shape(format!(
                "shared shape {:?} != query shape {:?}",
                self.val(shared).shape(),
                self.val(query).shape()
            )));
        }
        if ch != ci {
            return Err(Error::Shape(format!(
                "map has {ch} channels, scan expects {ci}"
            )));
        }
        let mut out = Tensor::zeros(&[b, h, w, ch]);
        css2d_forward(
            &views,
            mask,
            self.val(query).data(),
            self.val(shared).data(),
            b,
            h,
            w,
            ch,
            n,
            r,
            crate::max_threads(),
            out.data_mut(),
        );
        let ids = [
            SsmNodeIds::of(&p.dirs[0]),
            SsmNodeIds::of(&p.dirs[1]),
            SsmNodeIds::of(&p.dirs[2]),
            SsmNodeIds::of(&p.dirs[3]),
        ];
        Ok(self.push(
            out,
            Some(Box::new(Css2dOp {
                ids,
                mask,
                query: query.id(),
                shared: shared.id(),
            })),
        ))
    }

    /// Plain self scan; exactly [`Tape::css2d`] with `shared == query`.
    pub fn ss2d(&mut self, p: &Ss2dVars, x: Var, active: &[ScanDirection]) -> Result<Var> {
        self.css2d(p, x, x, active)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grads, LossFn, DEFAULT_EPS, DEFAULT_TOL};
    use crate::oracle::scan_reference;
    use crate::ssm::s6_project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn params(rng: &mut ChaCha8Rng, ci: usize, n: usize, tied: bool) -> Ss2dParams<f64> {
        Ss2dParams::init(rng, ci, n, tied)
    }

    fn cast32(p: &Ss2dParams<f64>) -> Ss2dParams<f32> {
        Ss2dParams {
            dirs: [0, 1, 2, 3].map(|i| {
                let d = &p.dirs[i];
                SsmParams {
                    a_log: d.a_log.cast(),
                    d_skip: d.d_skip.cast(),
                    w_b: d.w_b.cast(),
                    w_c: d.w_c.cast(),
                    w_dt: d.w_dt.cast(),
                    w_dt_up: d.w_dt_up.cast(),
                    dt_bias: d.dt_bias.cast(),
                }
            }),
            tied: p.tied,
        }
    }

    /// Composes the 2D scan by hand: per direction, build the sequence via
    /// `seq_index`, project with `s6_project`, run the double-loop reference
    /// recurrence, and scatter-add back. Shares no code with the fused path
    /// beyond the definitional index bijection.
    fn oracle_css2d(
        p: &Ss2dParams<f64>,
        q: &Tensor<f64>,
        s: &Tensor<f64>,
        active: &[ScanDirection],
    ) -> Tensor<f64> {
        let (b, h, w, ch) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        let l = h * w;
        let mut total = Tensor::zeros(q.shape());
        for &d in active {
            let pd = &p.dirs[d.index()];
            for bi in 0..b {
                let mut xq = vec![0.0; l * ch];
                let mut xs = vec![0.0; l * ch];
                for r in 0..h {
                    for c in 0..w {
                        let k = d.seq_index(r, c, h, w);
                        let src = ((bi * h + r) * w + c) * ch;
                        xq[k * ch..][..ch].copy_from_slice(&q.data()[src..src + ch]);
                        xs[k * ch..][..ch].copy_from_slice(&s.data()[src..src + ch]);
                    }
                }
                let xq = Tensor::new(&[l, ch], xq).unwrap();
                let xs = Tensor::new(&[l, ch], xs).unwrap();
                let (bs, cs, dl) = s6_project(pd, &xs).unwrap();
                let y = scan_reference(&pd.a_log, &pd.d_skip, &bs, &cs, &dl, &xq);
                for r in 0..h {
                    for c in 0..w {
                        let k = d.seq_index(r, c, h, w);
                        let dst = ((bi * h + r) * w + c) * ch;
                        for cc in 0..ch {
                            total.data_mut()[dst + cc] += y.data()[k * ch + cc];
                        }
                    }
                }
            }
        }
        total
    }

    #[test]
    fn direction_orders_on_2x2() {
        let x = Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cases = [
            (ScanDirection::D1, [1.0, 2.0, 3.0, 4.0]),
            (ScanDirection::D2, [1.0, 3.0, 2.0, 4.0]),
            (ScanDirection::D3, [4.0, 3.0, 2.0, 1.0]),
            (ScanDirection::D4, [4.0, 2.0, 3.0, 1.0]),
        ];
        for (d, want) in cases {
            assert_eq!(unfold(&x, d).unwrap().data(), &want, "{d}");
        }
    }

    #[test]
    fn single_cell_unfolds_identically_in_every_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_map(&mut rng, &[2, 1, 1, 3]);
        for d in ScanDirection::ALL {
            let seq = unfold(&x, d).unwrap();
            assert_eq!(seq.shape(), &[2, 1, 3]);
            assert_eq!(seq.data(), x.data(), "{d}");
        }
    }

    #[test]
    fn fold_unfold_roundtrips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, &[2, 5, 7, 3]);
        for d in ScanDirection::ALL {
            let seq = unfold(&x, d).unwrap();
            let back = fold(&seq, d, 5, 7).unwrap();
            assert_eq!(back.shape(), x.shape());
            assert_eq!(back.data(), x.data(), "fold∘unfold, {d}");
            let again = unfold(&back, d).unwrap();
            assert_eq!(again.data(), seq.data(), "unfold∘fold, {d}");
        }
    }

    #[test]
    fn direction_labels_parse_and_display() {
        for d in ScanDirection::ALL {
            assert_eq!(d.label().parse::<ScanDirection>().unwrap(), d);
        }
        assert_eq!(ScanDirection::D3.to_string(), "d3");
        assert_eq!("D2".parse::<ScanDirection>().unwrap(), ScanDirection::D2);
        assert!("diag".parse::<ScanDirection>().is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(&mut rng, 3, 4, false);
        let zero = Tensor::zeros(&[2, 3, 5, 3]);
        let y = ss2d(&p, &zero, &ScanDirection::ALL).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        // A zero query also silences the cross scan regardless of shared.
        let shared = rand_map(&mut rng, &[2, 3, 5, 3]);
        let y = css2d(&p, &zero, &shared, &ScanDirection::ALL).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_scan_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(&mut rng, 3, 4, false);
        let x = rand_map(&mut rng, &[2, 4, 4, 3]);
        let got = ss2d(&p, &x, &ScanDirection::ALL).unwrap();
        let want = oracle_css2d(&p, &x, &x, &ScanDirection::ALL);
        assert!(got.max_abs_diff(&want) < 1e-12, "diff {}", got.max_abs_diff(&want));
    }

    #[test]
    fn cross_scan_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(&mut rng, 4, 3, false);
        let q = rand_map(&mut rng, &[2, 3, 5, 4]);
        let s = rand_map(&mut rng, &[2, 3, 5, 4]);
        let got = css2d(&p, &q, &s, &ScanDirection::ALL).unwrap();
        let want = oracle_css2d(&p, &q, &s, &ScanDirection::ALL);
        assert!(got.max_abs_diff(&want) < 1e-12, "diff {}", got.max_abs_diff(&want));
    }

    #[test]
    fn dropping_any_direction_is_well_defined_and_differs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(&mut rng, 3, 2, false);
        let x = rand_map(&mut rng, &[1, 3, 4, 3]);
        let full = ss2d(&p, &x, &ScanDirection::ALL).unwrap();
        for d in ScanDirection::ALL {
            let rest: Vec<ScanDirection> = ScanDirection::ALL
                .iter()
                .copied()
                .filter(|&o| o != d)
                .collect();
            let got = ss2d(&p, &x, &rest).unwrap();
            let want = oracle_css2d(&p, &x, &x, &rest);
            assert!(got.max_abs_diff(&want) < 1e-12);
            assert!(
                got.max_abs_diff(&full) > 1e-6,
                "dropping {d} should change a generic output"
            );
        }
    }

    #[test]
    fn duplicate_active_entries_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(&mut rng, 2, 2, false);
        let x = rand_map(&mut rng, &[1, 2, 3, 2]);
        let once = ss2d(&p, &x, &[ScanDirection::D2]).unwrap();
        let twice = ss2d(&p, &x, &[ScanDirection::D2, ScanDirection::D2]).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn cross_scan_on_same_maps_matches_self_scan_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (ci, n, h, w) in [(2, 2, 3, 3), (3, 4, 2, 5), (4, 2, 4, 1)] {
            let p = params(&mut rng, ci, n, false);
            let x = rand_map(&mut rng, &[2, h, w, ci]);
            let a = ss2d(&p, &x, &ScanDirection::ALL).unwrap();
            let b = css2d(&p, &x, &x, &ScanDirection::ALL).unwrap();
            assert_eq!(a.data(), b.data());
            let p32 = cast32(&p);
            let x32: Tensor<f32> = x.cast();
            let a32 = ss2d(&p32, &x32, &ScanDirection::ALL).unwrap();
            let b32 = css2d(&p32, &x32, &x32, &ScanDirection::ALL).unwrap();
            assert_eq!(a32.data(), b32.data());
        }
    }

    #[test]
    fn tied_params_single_cell_is_four_times_one_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = params(&mut rng, 4, 3, true);
        let x = rand_map(&mut rng, &[2, 1, 1, 4]);
        let four = ss2d(&p, &x, &ScanDirection::ALL).unwrap();
        let one = ss2d(&p, &x, &[ScanDirection::D1]).unwrap();
        for (f, o) in four.data().iter().zip(one.data()) {
            // Four equal summands accumulated one by one round at most in the
            // last couple of bits, so compare against 4·o with a tiny slack.
            assert!((f - 4.0 * o).abs() <= 1e-14 * o.abs().max(1e-300));
        }
    }

    #[test]
    fn tied_directions_on_constant_input_emit_equal_sequences() {
        // A spatially constant map unfolds to the same sequence under every
        // direction, and tied parameters make the four scans the same
        // computation, so the per-direction output sequences are identical.
        // Their folded sum is symmetric under 180° rotation of the grid but
        // NOT spatially constant: scan outputs drift along the sequence as
        // state accumulates, and folding redistributes that drift.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = params(&mut rng, 3, 4, true);
        let chan = [0.3, 0.5, 0.7];
        let (h, w) = (3, 4);
        let x = Tensor::from_fn(&[1, h, w, 3], |i| chan[i % 3]);
        let base = unfold(&ss2d(&p, &x, &[ScanDirection::D1]).unwrap(), ScanDirection::D1).unwrap();
        for d in [ScanDirection::D2, ScanDirection::D3, ScanDirection::D4] {
            let yd = unfold(&ss2d(&p, &x, &[d]).unwrap(), d).unwrap();
            assert_eq!(yd.data(), base.data(), "{d}");
        }
        let full = ss2d(&p, &x, &ScanDirection::ALL).unwrap();
        for r in 0..h {
            for c in 0..w {
                for cc in 0..3 {
                    let a = full.at(&[0, r, c, cc]);
                    let b = full.at(&[0, h - 1 - r, w - 1 - c, cc]);
                    assert!((a - b).abs() < 1e-12, "rotation symmetry at ({r},{c},{cc})");
                }
            }
        }
        let first = full.at(&[0, 0, 0, 0]);
        let spread = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| (full.at(&[0, r, c, 0]) - first).abs())
            .fold(0.0f64, f64::max);
        assert!(spread > 1e-9, "output should vary over space, spread {spread}");
    }

    #[test]
    fn rejects_bad_shapes_and_empty_active() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = params(&mut rng, 3, 2, false);
        let x = rand_map(&mut rng, &[1, 2, 2, 3]);
        assert!(ss2d(&p, &x, &[]).is_err());
        let bad_shared = rand_map(&mut rng, &[1, 2, 3, 3]);
        assert!(css2d(&p, &x, &bad_shared, &ScanDirection::ALL).is_err());
        let wrong_ch = rand_map(&mut rng, &[1, 2, 2, 4]);
        assert!(ss2d(&p, &wrong_ch, &ScanDirection::ALL).is_err());
        let rank3 = Tensor::<f64>::zeros(&[2, 2, 3]);
        assert!(ss2d(&p, &rank3, &ScanDirection::ALL).is_err());
        let mut mixed = params(&mut rng, 3, 2, false);
        mixed.dirs[2] = SsmParams::init(&mut rng, 3, 5);
        assert!(ss2d(&mixed, &x, &ScanDirection::ALL).is_err());
        let seq = Tensor::<f64>::zeros(&[1, 5, 3]);
        assert!(fold(&seq, ScanDirection::D1, 2, 2).is_err());
    }

    #[test]
    fn register_tied_aliases_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let ids = params(&mut rng, 2, 2, true).register(&mut store, "ctm");
        assert_eq!(store.len(), 7);
        assert!(store.lookup("ctm.dall.a_log").is_some());
        assert_eq!(ids.dirs[0].a_log, ids.dirs[3].a_log);
        let mut store2 = ParamStore::new();
        let ids2 = params(&mut rng, 2, 2, false).register(&mut store2, "ctm");
        assert_eq!(store2.len(), 28);
        assert!(store2.lookup("ctm.d3.w_dt").is_some());
        assert_ne!(ids2.dirs[0].a_log, ids2.dirs[1].a_log);
    }

    #[test]
    fn tape_forward_matches_pure_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = params(&mut rng, 3, 2, false);
        let q = rand_map(&mut rng, &[2, 3, 4, 3]);
        let s = rand_map(&mut rng, &[2, 3, 4, 3]);
        let want = css2d(&p, &q, &s, &ScanDirection::ALL).unwrap();
        let mut store = ParamStore::new();
        let ids = p.register(&mut store, "blk");
        let mut tp = Tape::<f64>::new();
        let bound = store.bind(&mut tp);
        let vars = ids.vars(&bound);
        let qv = tp.leaf(q);
        let sv = tp.leaf(s);
        let out = tp.css2d(&vars, qv, sv, &ScanDirection::ALL).unwrap();
        assert_eq!(tp.val(out).shape(), want.shape());
        assert_eq!(tp.val(out).data(), want.data());
        assert!(tp.css2d(&vars, qv, sv, &[]).is_err());
        let bad = tp.leaf(Tensor::zeros(&[2, 3, 5, 3]));
        assert!(tp.css2d(&vars, qv, bad, &ScanDirection::ALL).is_err());
    }

    #[test]
    fn fanout_thread_count_does_not_change_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = params(&mut rng, 2, 3, false);
        let (b, h, w, ch) = (3, 2, 4, 2);
        let q = rand_map(&mut rng, &[b, h, w, ch]);
        let s = rand_map(&mut rng, &[b, h, w, ch]);
        let gy = rand_map(&mut rng, &[b, h, w, ch]);
        let views = [
            p.dirs[0].view(),
            p.dirs[1].view(),
            p.dirs[2].view(),
            p.dirs[3].view(),
        ];
        let (ci, n, r) = validate_dirs(&views).unwrap();
        assert_eq!(ci, ch);
        let run = |threads: usize| {
            let mut out = vec![0.0f64; b * h * w * ch];
            css2d_forward(
                &views, [true; 4], q.data(), s.data(), b, h, w, ch, n, r, threads, &mut out,
            );
            let (per_dir, gq, gs) = css2d_backward(
                &views, [true; 4], q.data(), s.data(), gy.data(), b, h, w, ch, n, r, threads,
            );
            let mut flat = Vec::new();
            for (di, bufs) in &per_dir {
                flat.push(*di as f64);
                for part in bufs.parts() {
                    flat.extend_from_slice(part);
                }
            }
            (out, flat, gq, gs)
        };
        let base = run(1);
        for threads in [2, 3, 8] {
            let got = run(threads);
            assert_eq!(got.0, base.0, "forward, {threads} threads");
            assert_eq!(got.1, base.1, "param grads, {threads} threads");
            assert_eq!(got.2, base.2, "query grad, {threads} threads");
            assert_eq!(got.3, base.3, "shared grad, {threads} threads");
        }
    }

    fn ssm_vars(vs: &[Var]) -> SsmVars {
        SsmVars {
            a_log: vs[0],
            d_skip: vs[1],
            w_b: vs[2],
            w_c: vs[3],
            w_dt: vs[4],
            w_dt_up: vs[5],
            dt_bias: vs[6],
        }
    }

    fn push_params(p: &SsmParams<f64>, tag: &str, inputs: &mut Vec<Tensor<f64>>, names: &mut Vec<String>) {
        let fields: [(&str, &Tensor<f64>); 7] = [
            ("a_log", &p.a_log),
            ("d_skip", &p.d_skip),
            ("w_b", &p.w_b),
            ("w_c", &p.w_c),
            ("w_dt", &p.w_dt),
            ("w_dt_up", &p.w_dt_up),
            ("dt_bias", &p.dt_bias),
        ];
        for (nm, t) in fields {
            inputs.push(t.clone());
            names.push(format!("{tag}.{nm}"));
        }
    }

    #[test]
    fn gradcheck_cross_scan_all_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = params(&mut rng, 3, 2, false);
        let mut inputs = vec![rand_map(&mut rng, &[1, 2, 3, 3]), rand_map(&mut rng, &[1, 2, 3, 3])];
        let mut names = vec!["query".to_string(), "shared".to_string()];
        for (di, d) in p.dirs.iter().enumerate() {
            push_params(d, &format!("d{}", di + 1), &mut inputs, &mut names);
        }
        let f = |tp: &mut Tape<f64>, vs: &[Var]| -> Var {
            let vars = Ss2dVars {
                dirs: [
                    ssm_vars(&vs[2..9]),
                    ssm_vars(&vs[9..16]),
                    ssm_vars(&vs[16..23]),
                    ssm_vars(&vs[23..30]),
                ],
            };
            let y = tp.css2d(&vars, vs[0], vs[1], &ScanDirection::ALL).unwrap();
            let y2 = tp.mul(y, y).unwrap();
            tp.sum_all(y2)
        };
        let lf: LossFn<'_> = &f;
        let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        for r in check_grads(&name_refs, &inputs, lf, DEFAULT_EPS) {
            assert!(r.passes(DEFAULT_TOL), "{}: rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn gradcheck_tied_directions_sum_their_contributions() {
        // One parameter set drives all four scans, so each analytic gradient
        // is the sum over directions; finite differences see the same total.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let one = SsmParams::<f64>::init(&mut rng, 2, 2);
        let mut inputs = vec![rand_map(&mut rng, &[1, 3, 2, 2])];
        let mut names = vec!["x".to_string()];
        push_params(&one, "tied", &mut inputs, &mut names);
        let f = |tp: &mut Tape<f64>, vs: &[Var]| -> Var {
            let v = ssm_vars(&vs[1..8]);
            let vars = Ss2dVars { dirs: [v; 4] };
            let y = tp.ss2d(&vars, vs[0], &ScanDirection::ALL).unwrap();
            let y2 = tp.mul(y, y).unwrap();
            tp.sum_all(y2)
        };
        let lf: LossFn<'_> = &f;
        let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        for r in check_grads(&name_refs, &inputs, lf, DEFAULT_EPS) {
            assert!(r.passes(DEFAULT_TOL), "{}: rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn gradcheck_active_subset_self_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = params(&mut rng, 2, 2, false);
        let mut inputs = vec![rand_map(&mut rng, &[1, 3, 2, 2])];
        let mut names = vec!["x".to_string()];
        push_params(&p.dirs[1], "d2", &mut inputs, &mut names);
        push_params(&p.dirs[2], "d3", &mut inputs, &mut names);
        let inactive = (p.dirs[0].clone(), p.dirs[3].clone());
        let f = move |tp: &mut Tape<f64>, vs: &[Var]| -> Var {
            let frozen = |tp: &mut Tape<f64>, d: &SsmParams<f64>| SsmVars {
                a_log: tp.leaf(d.a_log.clone()),
                d_skip: tp.leaf(d.d_skip.clone()),
                w_b: tp.leaf(d.w_b.clone()),
                w_c: tp.leaf(d.w_c.clone()),
                w_dt: tp.leaf(d.w_dt.clone()),
                w_dt_up: tp.leaf(d.w_dt_up.clone()),
                dt_bias: tp.leaf(d.dt_bias.clone()),
            };
            let d1 = frozen(tp, &inactive.0);
            let d4 = frozen(tp, &inactive.1);
            let vars = Ss2dVars {
                dirs: [d1, ssm_vars(&vs[1..8]), ssm_vars(&vs[8..15]), d4],
            };
            let y = tp
                .ss2d(&vars, vs[0], &[ScanDirection::D2, ScanDirection::D3])
                .unwrap();
            let y2 = tp.mul(y, y).unwrap();
            tp.sum_all(y2)
        };
        let lf: LossFn<'_> = &f;
        let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        for r in check_grads(&name_refs, &inputs, lf, DEFAULT_EPS) {
            assert!(r.passes(DEFAULT_TOL), "{}: rel err {}", r.name, r.max_rel_err);
        }
    }
}
