//! Decoder block zoo: ECR upsampling, the scan-gated task block (STM), the
//! two cross-task exchange blocks (F-CTM, S-CTM), and the two prediction
//! heads. Every block is a pure function of tape vars, so the same code path
//! serves init, training, and the finite-difference checks.
//!
//! Residual blocks zero-initialize their output projections, making each one
//! an exact identity at init; training moves them off the identity smoothly.
//! The sequence mixer inside STM/CTM bodies is pluggable: the linear-cost
//! four-direction scan, or windowed attention with the same interface, so a
//! model can swap mixers without touching any surrounding parameter.

use crate::attention::{AttnParamIds, AttnParams, AttnVars};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scan2d::{ScanDirection, Ss2dParamIds, Ss2dParams, Ss2dVars};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{BnUpdate, ConvKind, Element, Tensor};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which cross-task exchange block a decoder stage ends with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtmVariant {
    F,
    S,
}

/// Which prediction head sits on each task branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dense,
    Lite,
}

/// Shared sizing knobs for one decoder stage's blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub c: usize,
    pub alpha: usize,
    pub n: usize,
    pub t: usize,
    pub ctm_variant: CtmVariant,
    pub head: HeadKind,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.alpha == 0 || self.n == 0 || self.t == 0 {
            return Err(Error::Invalid(format!(
                "block config needs c, alpha, n, t all >= 1, got c={} alpha={} n={} t={}",
                self.c, self.alpha, self.n, self.t
            )));
        }
        Ok(())
    }
}

/// Sequence-mixer choice for the STM/CTM bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    Scan { tied: bool },
    Attn { window: usize, heads: usize },
}

#[derive(Debug, Clone)]
pub enum MixerParams<E: Element> {
    Scan(Ss2dParams<E>),
    Attn { p: AttnParams<E>, window: usize, heads: usize },
}

impl<E: Element> MixerParams<E> {
    pub fn init<R: Rng>(rng: &mut R, kind: MixerKind, cinner: usize, n: usize) -> Self {
        match kind {
            MixerKind::Scan { tied } => Self::Scan(Ss2dParams::init(rng, cinner, n, tied)),
            MixerKind::Attn { window, heads } => {
                Self::Attn { p: AttnParams::init(rng, cinner), window, heads }
            }
        }
    }

    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> MixerIds {
        match self {
            Self::Scan(p) => MixerIds::Scan(p.register(store, &format!("{prefix}.scan"))),
            Self::Attn { p, window, heads } => MixerIds::Attn {
                p: p.register(store, &format!("{prefix}.attn")),
                window,
                heads,
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum MixerIds {
    Scan(Ss2dParamIds),
    Attn { p: AttnParamIds, window: usize, heads: usize },
}

impl MixerIds {
    pub fn vars(&self, b: &Bound) -> MixerVars {
        match self {
            Self::Scan(ids) => MixerVars::Scan(ids.vars(b)),
            Self::Attn { p, window, heads } => {
                MixerVars::Attn { p: p.vars(b), window: *window, heads: *heads }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum MixerVars {
    Scan(Ss2dVars),
    Attn { p: AttnVars, window: usize, heads: usize },
}

impl<E: Element> Tape<E> {
    /// Runs the configured mixer: scan recurrence driven by `query` with
    /// B/C/Δ generated from `shared`, or windowed attention with queries
    /// from `query` and keys/values from `shared`. `query == shared` is the
    /// self-mix used by STM and F-CTM.
    pub fn mix(
        &mut self,
        m: &MixerVars,
        query: Var,
        shared: Var,
        active: &[ScanDirection],
    ) -> Result<Var> {
        match m {
            MixerVars::Scan(p) => self.css2d(p, query, shared, active),
            MixerVars::Attn { p, window, heads } => {
                self.windowed_mhsa(p, query, shared, *window, *heads)
            }
        }
    }
}

/// Task block weights: pre-norm, expansion to α·C, depthwise conv, mixer,
/// post-mix norm, gate branch, zero-initialized output projection.
#[derive(Debug, Clone)]
pub struct StmParams<E: Element> {
    pub ln_g: Tensor<E>,
    pub ln_b: Tensor<E>,
    pub w_in: Tensor<E>,
    pub b_in: Tensor<E>,
    pub w_dw: Tensor<E>,
    pub b_dw: Tensor<E>,
    pub mixer: MixerParams<E>,
    pub ln_y_g: Tensor<E>,
    pub ln_y_b: Tensor<E>,
    pub w_gate: Tensor<E>,
    pub b_gate: Tensor<E>,
    pub w_out: Tensor<E>,
    pub b_out: Tensor<E>,
}

impl<E: Element> StmParams<E> {
    pub fn init<R: Rng>(rng: &mut R, c: usize, alpha: usize, n: usize, kind: MixerKind) -> Self {
        let ac = alpha * c;
        Self {
            ln_g: Tensor::full(&[c], E::ONE),
            ln_b: Tensor::zeros(&[c]),
            w_in: crate::params::kaiming(rng, &[c, ac], c),
            b_in: Tensor::zeros(&[ac]),
            w_dw: crate::params::kaiming(rng, &[3, 3, ac], 9),
            b_dw: Tensor::zeros(&[ac]),
            mixer: MixerParams::init(rng, kind, ac, n),
            ln_y_g: Tensor::full(&[ac], E::ONE),
            ln_y_b: Tensor::zeros(&[ac]),
            w_gate: crate::params::kaiming(rng, &[c, ac], c),
            b_gate: Tensor::zeros(&[ac]),
            w_out: Tensor::zeros(&[ac, c]),
            b_out: Tensor::zeros(&[c]),
        }
    }

    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> StmParamIds {
        StmParamIds {
            ln_g: store.add(format!("{prefix}.ln_g"), self.ln_g, true),
            ln_b: store.add(format!("{prefix}.ln_b"), self.ln_b, true),
            w_in: store.add(format!("{prefix}.w_in"), self.w_in, true),
            b_in: store.add(format!("{prefix}.b_in"), self.b_in, true),
            w_dw: store.add(format!("{prefix}.w_dw"), self.w_dw, true),
            b_dw: store.add(format!("{prefix}.b_dw"), self.b_dw, true),
            mixer: self.mixer.register(store, &format!("{prefix}.mix")),
            ln_y_g: store.add(format!("{prefix}.ln_y_g"), self.ln_y_g, true),
            ln_y_b: store.add(format!("{prefix}.ln_y_b"), self.ln_y_b, true),
            w_gate: store.add(format!("{prefix}.w_gate"), self.w_gate, true),
            b_gate: store.add(format!("{prefix}.b_gate"), self.b_gate, true),
            w_out: store.add(format!("{prefix}.w_out"), self.w_out, true),
            b_out: store.add(format!("{prefix}.b_out"), self.b_out, true),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StmParamIds {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_dw: ParamId,
    pub b_dw: ParamId,
    pub mixer: MixerIds,
    pub ln_y_g: ParamId,
    pub ln_y_b: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl StmParamIds {
    pub fn vars(&self, b: &Bound) -> StmVars {
        StmVars {
            ln_g: b.var(self.ln_g),
            ln_b: b.var(self.ln_b),
            w_in: b.var(self.w_in),
            b_in: b.var(self.b_in),
            w_dw: b.var(self.w_dw),
            b_dw: b.var(self.b_dw),
            mixer: self.mixer.vars(b),
            ln_y_g: b.var(self.ln_y_g),
            ln_y_b: b.var(self.ln_y_b),
            w_gate: b.var(self.w_gate),
            b_gate: b.var(self.b_gate),
            w_out: b.var(self.w_out),
            b_out: b.var(self.b_out),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StmVars {
    pub ln_g: Var,
    pub ln_b: Var,
    pub w_in: Var,
    pub b_in: Var,
    pub w_dw: Var,
    pub b_dw: Var,
    pub mixer: MixerVars,
    pub ln_y_g: Var,
    pub ln_y_b: Var,
    pub w_gate: Var,
    pub b_gate: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// STM body. `shared = None` self-mixes the expanded feature; `Some(s)`
/// cross-mixes against `s`, which is the S-CTM task branch.
fn stm_core<E: Element>(
    tp: &mut Tape<E>,
    p: &StmVars,
    x: Var,
    shared: Option<Var>,
    active: &[ScanDirection],
) -> Result<Var> {
    let a = tp.layernorm(x, p.ln_g, p.ln_b, LN_EPS)?;
    let pre = tp.linear(a, p.w_in, Some(p.b_in))?;
    let loc = tp.conv2d(pre, p.w_dw, Some(p.b_dw), ConvKind::Dw3)?;
    let main = tp.silu(loc);
    let y = tp.mix(&p.mixer, main, shared.unwrap_or(main), active)?;
    let yn = tp.layernorm(y, p.ln_y_g, p.ln_y_b, LN_EPS)?;
    let gate_pre = tp.linear(a, p.w_gate, Some(p.b_gate))?;
    let gate = tp.silu(gate_pre);
    let agg = tp.mul(yn, gate)?;
    let proj = tp.linear(agg, p.w_out, Some(p.b_out))?;
    tp.add(x, proj)
}

impl<E: Element> Tape<E> {
    /// Single-task block: residual scan-gated channel mixing, [B,H,W,C] →
    /// [B,H,W,C].
    pub fn stm(&mut self, p: &StmVars, x: Var, active: &[ScanDirection]) -> Result<Var> {
        stm_core(self, p, x, None, active)
    }
}

/// Flat exchange block: a fused all-task path and per-task paths, blended by
/// per-task sigmoid gates. No normalization layers anywhere in this block.
#[derive(Debug, Clone)]
pub struct FctmParams<E: Element> {
    pub w_fuse: Tensor<E>,
    pub b_fuse: Tensor<E>,
    pub dw_fuse: Tensor<E>,
    pub db_fuse: Tensor<E>,
    pub mixer_sh: MixerParams<E>,
    pub tasks: Vec<FctmTaskParams<E>>,
}

#[derive(Debug, Clone)]
pub struct FctmTaskParams<E: Element> {
    pub w_in: Tensor<E>,
    pub b_in: Tensor<E>,
    pub w_dw: Tensor<E>,
    pub b_dw: Tensor<E>,
    pub mixer: MixerParams<E>,
    pub w_gate: Tensor<E>,
    pub b_gate: Tensor<E>,
    pub w_out: Tensor<E>,
    pub b_out: Tensor<E>,
}

impl<E: Element> FctmParams<E> {
    pub fn init<R: Rng>(
        rng: &mut R,
        c: usize,
        alpha: usize,
        n: usize,
        t: usize,
        kind: MixerKind,
    ) -> Self {
        let ac = alpha * c;
        Self {
            w_fuse: crate::params::kaiming(rng, &[t * c, ac], t * c),
            b_fuse: Tensor::zeros(&[ac]),
            dw_fuse: crate::params::kaiming(rng, &[3, 3, ac], 9),
            db_fuse: Tensor::zeros(&[ac]),
            mixer_sh: MixerParams::init(rng, kind, ac, n),
            tasks: (0..t)
                .map(|_| FctmTaskParams {
                    w_in: crate::params::kaiming(rng, &[c, ac], c),
                    b_in: Tensor::zeros(&[ac]),
                    w_dw: crate::params::kaiming(rng, &[3, 3, ac], 9),
                    b_dw: Tensor::zeros(&[ac]),
                    mixer: MixerParams::init(rng, kind, ac, n),
                    w_gate: crate::params::kaiming(rng, &[c, ac], c),
                    b_gate: Tensor::zeros(&[ac]),
                    w_out: Tensor::zeros(&[ac, c]),
                    b_out: Tensor::zeros(&[c]),
                })
                .collect(),
        }
    }

    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> FctmParamIds {
        FctmParamIds {
            w_fuse: store.add(format!("{prefix}.fuse.w"), self.w_fuse, true),
            b_fuse: store.add(format!("{prefix}.fuse.b"), self.b_fuse, true),
            dw_fuse: store.add(format!("{prefix}.fuse.dw"), self.dw_fuse, true),
            db_fuse: store.add(format!("{prefix}.fuse.db"), self.db_fuse, true),
            mixer_sh: self.mixer_sh.register(store, &format!("{prefix}.fuse.mix")),
            tasks: self
                .tasks
                .into_iter()
                .enumerate()
                .map(|(i, tpars)| {
                    let tb = format!("{prefix}.t{i}");
                    FctmTaskParamIds {
                        w_in: store.add(format!("{tb}.w_in"), tpars.w_in, true),
                        b_in: store.add(format!("{tb}.b_in"), tpars.b_in, true),
                        w_dw: store.add(format!("{tb}.w_dw"), tpars.w_dw, true),
                        b_dw: store.add(format!("{tb}.b_dw"), tpars.b_dw, true),
                        mixer: tpars.mixer.register(store, &format!("{tb}.mix")),
                        w_gate: store.add(format!("{tb}.w_gate"), tpars.w_gate, true),
                        b_gate: store.add(format!("{tb}.b_gate"), tpars.b_gate, true),
                        w_out: store.add(format!("{tb}.w_out"), tpars.w_out, true),
                        b_out: store.add(format!("{tb}.b_out"), tpars.b_out, true),
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FctmParamIds {
    pub w_fuse: ParamId,
    pub b_fuse: ParamId,
    pub dw_fuse: ParamId,
    pub db_fuse: ParamId,
    pub mixer_sh: MixerIds,
    pub tasks: Vec<FctmTaskParamIds>,
}

#[derive(Debug, Clone, Copy)]
pub struct FctmTaskParamIds {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_dw: ParamId,
    pub b_dw: ParamId,
    pub mixer: MixerIds,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl FctmParamIds {
    pub fn vars(&self, b: &Bound) -> FctmVars {
        FctmVars {
            w_fuse: b.var(self.w_fuse),
            b_fuse: b.var(self.b_fuse),
            dw_fuse: b.var(self.dw_fuse),
            db_fuse: b.var(self.db_fuse),
            mixer_sh: self.mixer_sh.vars(b),
            tasks: self
                .tasks
                .iter()
                .map(|t| FctmTaskVars {
                    w_in: b.var(t.w_in),
                    b_in: b.var(t.b_in),
                    w_dw: b.var(t.w_dw),
                    b_dw: b.var(t.b_dw),
                    mixer: t.mixer.vars(b),
                    w_gate: b.var(t.w_gate),
                    b_gate: b.var(t.b_gate),
                    w_out: b.var(t.w_out),
                    b_out: b.var(t.b_out),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FctmVars {
    pub w_fuse: Var,
    pub b_fuse: Var,
    pub dw_fuse: Var,
    pub db_fuse: Var,
    pub mixer_sh: MixerVars,
    pub tasks: Vec<FctmTaskVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct FctmTaskVars {
    pub w_in: Var,
    pub b_in: Var,
    pub w_dw: Var,
    pub b_dw: Var,
    pub mixer: MixerVars,
    pub w_gate: Var,
    pub b_gate: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl<E: Element> Tape<E> {
    /// Flat cross-task exchange. Each task's output blends its own mixed
    /// feature with the all-task fused one through a per-element convex
    /// gate, then projects back and adds the residual.
    pub fn f_ctm(
        &mut self,
        p: &FctmVars,
        xs: &[Var],
        active: &[ScanDirection],
    ) -> Result<Vec<Var>> {
        if xs.len() != p.tasks.len() || xs.is_empty() {
            return Err(Error::Invalid(format!(
                "f_ctm got {} inputs for {} task parameter sets",
                xs.len(),
                p.tasks.len()
            )));
        }
        let cat = self.concat_last(xs)?;
        let fuse_lin = self.linear(cat, p.w_fuse, Some(p.b_fuse))?;
        let fuse_loc = self.conv2d(fuse_lin, p.dw_fuse, Some(p.db_fuse), ConvKind::Dw3)?;
        let fuse_act = self.silu(fuse_loc);
        let z_sh = self.mix(&p.mixer_sh, fuse_act, fuse_act, active)?;
        let mut outs = Vec::with_capacity(xs.len());
        for (&x, t) in xs.iter().zip(&p.tasks) {
            let lin = self.linear(x, t.w_in, Some(t.b_in))?;
            let loc = self.conv2d(lin, t.w_dw, Some(t.b_dw), ConvKind::Dw3)?;
            let act = self.silu(loc);
            let z_t = self.mix(&t.mixer, act, act, active)?;
            let gate_pre = self.linear(x, t.w_gate, Some(t.b_gate))?;
            let g = self.sigmoid(gate_pre);
            let own = self.mul(g, z_t)?;
            let g_inv = self.affine(g, E::from_f64(-1.0), E::ONE);
            let other = self.mul(g_inv, z_sh)?;
            let blend = self.add(own, other)?;
            let proj = self.linear(blend, t.w_out, Some(t.b_out))?;
            outs.push(self.add(x, proj)?);
        }
        Ok(outs)
    }
}

/// Scan exchange block: two full convolutions fuse all tasks into one shared
/// map, and each task branch is an STM whose mixer cross-reads that map.
#[derive(Debug, Clone)]
pub struct SctmParams<E: Element> {
    pub w_f1: Tensor<E>,
    pub b_f1: Tensor<E>,
    pub w_f2: Tensor<E>,
    pub b_f2: Tensor<E>,
    pub tasks: Vec<StmParams<E>>,
}

impl<E: Element> SctmParams<E> {
    pub fn init<R: Rng>(
        rng: &mut R,
        c: usize,
        alpha: usize,
        n: usize,
        t: usize,
        kind: MixerKind,
    ) -> Self {
        let ac = alpha * c;
        Self {
            w_f1: crate::params::kaiming(rng, &[3, 3, t * c, ac], 9 * t * c),
            b_f1: Tensor::zeros(&[ac]),
            w_f2: crate::params::kaiming(rng, &[3, 3, ac, ac], 9 * ac),
            b_f2: Tensor::zeros(&[ac]),
            tasks: (0..t).map(|_| StmParams::init(rng, c, alpha, n, kind)).collect(),
        }
    }

    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> SctmParamIds {
        SctmParamIds {
            w_f1: store.add(format!("{prefix}.fuse.w1"), self.w_f1, true),
            b_f1: store.add(format!("{prefix}.fuse.b1"), self.b_f1, true),
            w_f2: store.add(format!("{prefix}.fuse.w2"), self.w_f2, true),
            b_f2: store.add(format!("{prefix}.fuse.b2"), self.b_f2, true),
            tasks: self
                .tasks
                .into_iter()
                .enumerate()
                .map(|(i, t)| t.register(store, &format!("{prefix}.t{i}")))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SctmParamIds {
    pub w_f1: ParamId,
    pub b_f1: ParamId,
    pub w_f2: ParamId,
    pub b_f2: ParamId,
    pub tasks: Vec<StmParamIds>,
}

impl SctmParamIds {
    pub fn vars(&self, b: &Bound) -> SctmVars {
        SctmVars {
            w_f1: b.var(self.w_f1),
            b_f1: b.var(self.b_f1),
            w_f2: b.var(self.w_f2),
            b_f2: b.var(self.b_f2),
            tasks: self.tasks.iter().map(|t| t.vars(b)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SctmVars {
    pub w_f1: Var,
    pub b_f1: Var,
    pub w_f2: Var,
    pub b_f2: Var,
    pub tasks: Vec<StmVars>,
}

impl<E: Element> Tape<E> {
    /// Cross-scan exchange. The fused map feeds every task branch's mixer as
    /// its shared side, so each output carries a derivative with respect to
    /// every input.
    pub fn s_ctm(
        &mut self,
        p: &SctmVars,
        xs: &[Var],
        active: &[ScanDirection],
    ) -> Result<Vec<Var>> {
        if xs.len() != p.tasks.len() || xs.is_empty() {
            return Err(Error::Invalid(format!(
                "s_ctm got {} inputs for {} task parameter sets",
                xs.len(),
                p.tasks.len()
            )));
        }
        let cat = self.concat_last(xs)?;
        let f1 = self.conv2d(cat, p.w_f1, Some(p.b_f1), ConvKind::K3)?;
        let f1a = self.silu(f1);
        let shared = self.conv2d(f1a, p.w_f2, Some(p.b_f2), ConvKind::K3)?;
        let mut outs = Vec::with_capacity(xs.len());
        for (&x, t) in xs.iter().zip(&p.tasks) {
            outs.push(stm_core(self, t, x, Some(shared), active)?);
        }
        Ok(outs)
    }
}

/// Upsampling fusion: double the resolution by moving channels into space,
/// concatenate the encoder skip, reduce channels by half.
#[derive(Debug, Clone)]
pub struct EcrParams<E: Element> {
    pub w_ex: Tensor<E>,
    pub b_ex: Tensor<E>,
    pub w_red: Tensor<E>,
    pub b_red: Tensor<E>,
}

impl<E: Element> EcrParams<E> {
    pub fn init<R: Rng>(rng: &mut R, cin: usize) -> Self {
        Self {
            w_ex: crate::params::kaiming(rng, &[cin, 2 * cin], cin),
            b_ex: Tensor::zeros(&[2 * cin]),
            w_red: crate::params::kaiming(rng, &[cin, cin / 2], cin),
            b_red: Tensor::zeros(&[cin / 2]),
        }
    }

    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> EcrParamIds {
        EcrParamIds {
            w_ex: store.add(format!("{prefix}.w_ex"), self.w_ex, true),
            b_ex: store.add(format!("{prefix}.b_ex"), self.b_ex, true),
            w_red: store.add(format!("{prefix}.w_red"), self.w_red, true),
            b_red: store.add(format!("{prefix}.b_red"), self.b_red, true),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EcrParamIds {
    pub w_ex: ParamId,
    pub b_ex: ParamId,
    pub w_red: ParamId,
    pub b_red: ParamId,
}

impl EcrParamIds {
    pub fn vars(&self, b: &Bound) -> EcrVars {
        EcrVars {
            w_ex: b.var(self.w_ex),
            b_ex: b.var(self.b_ex),
            w_red: b.var(self.w_red),
            b_red: b.var(self.b_red),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EcrVars {
    pub w_ex: Var,
    pub b_ex: Var,
    pub w_red: Var,
    pub b_red: Var,
}

impl<E: Element> Tape<E> {
    /// [B,H,W,Cin] + skip [B,2H,2W,Cin/2] → [B,2H,2W,Cin/2]. Cin must be
    /// even and the skip exactly double the spatial extents.
    pub fn ecr(&mut self, p: &EcrVars, x: Var, skip: Var) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let ss = self.val(skip).shape().to_vec();
        if xs.len() != 4 || ss.len() != 4 {
            return Err(Error::Shape(format!(
                "ecr wants rank-4 maps, got {xs:?} and {ss:?}"
            )));
        }
        let cin = xs[3];
        if cin % 2 != 0 {
            return Err(Error::Shape(format!("ecr needs even input channels, got {cin}")));
        }
        if ss != [xs[0], 2 * xs[1], 2 * xs[2], cin / 2] {
            return Err(Error::Shape(format!(
                "ecr skip must be [B,2H,2W,Cin/2] = [{},{},{},{}], got {ss:?}",
                xs[0],
                2 * xs[1],
                2 * xs[2],
                cin / 2
            )));
        }
        let e = self.linear(x, p.w_ex, Some(p.b_ex))?;
        let up = self.rearrange_expand(e, 2)?;
        let cat = self.concat_last(&[up, skip])?;
        self.conv2d(cat, p.w_red, Some(p.b_red), ConvKind::K1)
    }
}

/// All-linear head: one 4× patch expansion then a per-pixel projection.
#[derive(Debug, Clone)]
pub struct DenseHeadParams<E: Element> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

impl<E: Element> DenseHeadParams<E> {
    pub fn init<R: Rng>(rng: &mut R, c: usize, out_dim: usize) -> Self {
        Self {
            w1: crate::params::kaiming(rng, &[c, 16 * c], c),
            b1: Tensor::zeros(&[16 * c]),
            w2: crate::params::kaiming(rng, &[c, out_dim], c),
            b2: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> DenseHeadParamIds {
        DenseHeadParamIds {
            w1: store.add(format!("{prefix}.w1"), self.w1, true),
            b1: store.add(format!("{prefix}.b1"), self.b1, true),
            w2: store.add(format!("{prefix}.w2"), self.w2, true),
            b2: store.add(format!("{prefix}.b2"), self.b2, true),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseHeadParamIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl DenseHeadParamIds {
    pub fn vars(&self, b: &Bound) -> DenseHeadVars {
        DenseHeadVars {
            w1: b.var(self.w1),
            b1: b.var(self.b1),
            w2: b.var(self.w2),
            b2: b.var(self.b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<E: Element> Tape<E> {
    /// [B,h,w,C] → [B,4h,4w,out_dim] via C→16C expansion.
    pub fn dense_head(&mut self, p: &DenseHeadVars, x: Var) -> Result<Var> {
        let e = self.linear(x, p.w1, Some(p.b1))?;
        let up = self.rearrange_expand(e, 4)?;
        self.linear(up, p.w2, Some(p.b2))
    }
}

/// Conv head: conv, batchnorm, ReLU, projection, bilinear ×4. Cheaper than
/// the dense head because the upsampling carries no weights.
#[derive(Debug, Clone)]
pub struct LiteHeadParams<E: Element> {
    pub w_c: Tensor<E>,
    pub b_c: Tensor<E>,
    pub bn_g: Tensor<E>,
    pub bn_b: Tensor<E>,
    pub bn_rm: Tensor<E>,
    pub bn_rv: Tensor<E>,
    pub w_l: Tensor<E>,
    pub b_l: Tensor<E>,
}

impl<E: Element> LiteHeadParams<E> {
    pub fn init<R: Rng>(rng: &mut R, c: usize, out_dim: usize) -> Self {
        Self {
            w_c: crate::params::kaiming(rng, &[3, 3, c, c], 9 * c),
            b_c: Tensor::zeros(&[c]),
            bn_g: Tensor::full(&[c], E::ONE),
            bn_b: Tensor::zeros(&[c]),
            bn_rm: Tensor::zeros(&[c]),
            bn_rv: Tensor::full(&[c], E::ONE),
            w_l: crate::params::kaiming(rng, &[c, out_dim], c),
            b_l: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn register(self, store: &mut ParamStore<E>, prefix: &str) -> LiteHeadParamIds {
        LiteHeadParamIds {
            w_c: store.add(format!("{prefix}.w_c"), self.w_c, true),
            b_c: store.add(format!("{prefix}.b_c"), self.b_c, true),
            bn_g: store.add(format!("{prefix}.bn_g"), self.bn_g, true),
            bn_b: store.add(format!("{prefix}.bn_b"), self.bn_b, true),
            bn_rm: store.add(format!("{prefix}.bn_rm"), self.bn_rm, false),
            bn_rv: store.add(format!("{prefix}.bn_rv"), self.bn_rv, false),
            w_l: store.add(format!("{prefix}.w_l"), self.w_l, true),
            b_l: store.add(format!("{prefix}.b_l"), self.b_l, true),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LiteHeadParamIds {
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub bn_g: ParamId,
    pub bn_b: ParamId,
    pub bn_rm: ParamId,
    pub bn_rv: ParamId,
    pub w_l: ParamId,
    pub b_l: ParamId,
}

impl LiteHeadParamIds {
    pub fn vars(&self, b: &Bound) -> LiteHeadVars {
        LiteHeadVars {
            w_c: b.var(self.w_c),
            b_c: b.var(self.b_c),
            bn_g: b.var(self.bn_g),
            bn_b: b.var(self.bn_b),
            bn_rm: b.var(self.bn_rm),
            bn_rv: b.var(self.bn_rv),
            w_l: b.var(self.w_l),
            b_l: b.var(self.b_l),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LiteHeadVars {
    pub w_c: Var,
    pub b_c: Var,
    pub bn_g: Var,
    pub bn_b: Var,
    pub bn_rm: Var,
    pub bn_rv: Var,
    pub w_l: Var,
    pub b_l: Var,
}

impl<E: Element> Tape<E> {
    /// [B,h,w,C] → [B,4h,4w,out_dim]. In training mode the returned update
    /// carries the advanced batchnorm running stats; the caller writes them
    /// back into its store.
    pub fn lite_head(
        &mut self,
        p: &LiteHeadVars,
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BnUpdate<E>>)> {
        let c1 = self.conv2d(x, p.w_c, Some(p.b_c), ConvKind::K3)?;
        let rm = self.val(p.bn_rm).clone();
        let rv = self.val(p.bn_rv).clone();
        let (bn, upd) =
            self.batchnorm2d(c1, p.bn_g, p.bn_b, &rm, &rv, train, BN_MOMENTUM, BN_EPS)?;
        let r = self.relu(bn);
        let l = self.linear(r, p.w_l, Some(p.b_l))?;
        let out = self.interpolate_bilinear(l, 4)?;
        Ok((out, upd))
    }
}
