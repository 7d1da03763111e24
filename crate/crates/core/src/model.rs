//! Full model assembly: toy convolutional encoder, three-stage multi-task
//! decoder over the block zoo, per-task prediction heads, the
//! attention-swapped variant, and analytic parameter/FLOP counters.
//!
//! Channel plan for base width C: the encoder emits four scales
//! [H/4·C, H/8·2C, H/16·4C, H/32·8C]; decoder stage s consumes 8C/2^(s−1)
//! channels and emits half, so after three stages every task branch sits at
//! [B, H/4, W/4, C]. Truncated decoders (stages_enabled < 3) reach H/4 by
//! parameter-free bilinear upsampling and keep their wider channel count;
//! heads are sized for whichever width reaches them.

use crate::blocks::{
    DenseHeadParamIds, DenseHeadParams, DenseHeadVars, EcrParamIds, EcrParams,
    EcrVars, FctmParamIds, FctmParams, FctmVars, HeadKind, LiteHeadParamIds, LiteHeadParams,
    LiteHeadVars, MixerKind, MixerVars, SctmParamIds, SctmParams, SctmVars, StmParamIds,
    StmParams, StmVars, LN_EPS,
};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scan2d::ScanDirection;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{BnUpdate, ConvKind, Element, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-task loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    L1,
}

/// Per-task evaluation metric selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Miou,
    Rmse,
    MeanAngularError,
    BoundaryF1,
}

impl MetricKind {
    /// The serialized name, for log records and CLI output.
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Miou => "miou",
            MetricKind::Rmse => "rmse",
            MetricKind::MeanAngularError => "mean-angular-error",
            MetricKind::BoundaryF1 => "boundary-f1",
        }
    }
}

/// One prediction task: head width, loss, and how its metric is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub out_dim: usize,
    pub loss: LossKind,
    pub metric: MetricKind,
    pub higher_better: bool,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(format!("task {:?}: {msg}", self.name)));
        if self.out_dim == 0 {
            return fail("out_dim must be >= 1".into());
        }
        if self.loss == LossKind::CrossEntropy && self.out_dim < 2 {
            return fail("cross-entropy needs out_dim >= 2".into());
        }
        match self.metric {
            MetricKind::Miou | MetricKind::BoundaryF1 if self.loss != LossKind::CrossEntropy => {
                fail(format!("{:?} requires the cross-entropy loss", self.metric))
            }
            MetricKind::Rmse | MetricKind::MeanAngularError if self.loss != LossKind::L1 => {
                fail(format!("{:?} requires the l1 loss", self.metric))
            }
            MetricKind::Rmse if self.out_dim != 1 => {
                fail("rmse reads 1-channel regression maps".into())
            }
            MetricKind::MeanAngularError if self.out_dim != 3 => {
                fail("angular error reads 3-channel normal maps".into())
            }
            MetricKind::BoundaryF1 if self.out_dim != 2 => {
                fail("boundary f1 reads 2-class logits".into())
            }
            _ => Ok(()),
        }
    }
}

/// Cross-task block choice per stage; `none` replaces the exchange with a
/// third per-task block so depth stays comparable in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtmChoice {
    F,
    S,
    None,
}

fn default_c() -> usize {
    32
}
fn default_stages() -> usize {
    3
}
fn default_ctm() -> CtmChoice {
    CtmChoice::S
}
fn default_head() -> HeadKind {
    HeadKind::Dense
}
fn default_n() -> usize {
    8
}
fn default_alpha() -> usize {
    2
}
fn default_window() -> usize {
    4
}
fn default_heads() -> usize {
    2
}
fn default_dirs() -> Vec<ScanDirection> {
    ScanDirection::ALL.to_vec()
}

/// The four synthetic dense-prediction tasks at toy scale: 5-class
/// segmentation, scalar depth, unit normals, and 2-class boundaries.
pub fn standard_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "semseg".into(),
            out_dim: 5,
            loss: LossKind::CrossEntropy,
            metric: MetricKind::Miou,
            higher_better: true,
        },
        TaskSpec {
            name: "depth".into(),
            out_dim: 1,
            loss: LossKind::L1,
            metric: MetricKind::Rmse,
            higher_better: false,
        },
        TaskSpec {
            name: "normal".into(),
            out_dim: 3,
            loss: LossKind::L1,
            metric: MetricKind::MeanAngularError,
            higher_better: false,
        },
        TaskSpec {
            name: "boundary".into(),
            out_dim: 2,
            loss: LossKind::CrossEntropy,
            metric: MetricKind::BoundaryF1,
            higher_better: true,
        },
    ]
}

/// Everything needed to build the model deterministically. Serialized as a
/// JSON object; unknown fields are rejected, absent ones take the toy
/// defaults (C=32, three stages, S exchange, dense heads, N=8, α=2,
/// window 4, heads 2, all four scan directions, the four standard tasks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_c")]
    pub c: usize,
    #[serde(default = "default_stages")]
    pub stages_enabled: usize,
    #[serde(default = "default_ctm")]
    pub ctm_variant: CtmChoice,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    #[serde(default = "standard_tasks")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_alpha")]
    pub alpha: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub tied_dirs: bool,
    #[serde(default = "default_dirs")]
    pub directions: Vec<ScanDirection>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config must parse to defaults")
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.n == 0 || self.alpha == 0 {
            return Err(Error::Invalid(format!(
                "c, n, alpha must be >= 1, got c={} n={} alpha={}",
                self.c, self.n, self.alpha
            )));
        }
        if !(1..=3).contains(&self.stages_enabled) {
            return Err(Error::Invalid(format!(
                "stages_enabled must be 1, 2, or 3, got {}",
                self.stages_enabled
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Invalid("at least one task is required".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        if self.window == 0 || self.heads == 0 {
            return Err(Error::Invalid("window and heads must be >= 1".into()));
        }
        if (self.alpha * self.c) % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "heads {} must divide the narrowest mixer width alpha*c = {}",
                self.heads,
                self.alpha * self.c
            )));
        }
        if self.directions.is_empty() {
            return Err(Error::Invalid("at least one scan direction is required".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Channel width of the features entering the heads. Three enabled
    /// stages land at C; each missing stage leaves them twice as wide.
    pub fn head_width(&self) -> usize {
        self.c << (3 - self.stages_enabled)
    }

    /// Decoder working width of stage `s` (1-based) after its ECR.
    pub fn stage_width(&self, s: usize) -> usize {
        (8 * self.c) >> s
    }
}

/// One conv + layernorm + SiLU encoder unit's parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncUnitIds {
    pub w: ParamId,
    pub b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncStageIds {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub units: [EncUnitIds; 2],
}

#[derive(Debug, Clone, Copy)]
pub struct EncIds {
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub stages: [EncStageIds; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct EncUnitVars {
    pub w: Var,
    pub b: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EncStageVars {
    pub down_w: Var,
    pub down_b: Var,
    pub units: [EncUnitVars; 2],
}

#[derive(Debug, Clone, Copy)]
pub struct EncVars {
    pub stem_w: Var,
    pub stem_b: Var,
    pub stages: [EncStageVars; 3],
}

impl EncIds {
    pub fn vars(&self, b: &Bound) -> EncVars {
        let unit = |u: &EncUnitIds| EncUnitVars {
            w: b.var(u.w),
            b: b.var(u.b),
            ln_g: b.var(u.ln_g),
            ln_b: b.var(u.ln_b),
        };
        EncVars {
            stem_w: b.var(self.stem_w),
            stem_b: b.var(self.stem_b),
            stages: self.stages.map(|s| EncStageVars {
                down_w: b.var(s.down_w),
                down_b: b.var(s.down_b),
                units: [unit(&s.units[0]), unit(&s.units[1])],
            }),
        }
    }
}

pub(crate) fn init_encoder<E: Element, R: Rng>(
    rng: &mut R,
    store: &mut ParamStore<E>,
    c: usize,
) -> EncIds {
    // Stem: a 4×4 stride-4 convolution expressed exactly as space-to-depth
    // followed by a linear map over the 48 gathered input values.
    let stem_w = store.add("enc.stem.w", crate::params::kaiming(rng, &[48, c], 48), true);
    let stem_b = store.add("enc.stem.b", Tensor::zeros(&[c]), true);
    let mut stages = Vec::with_capacity(3);
    for k in 0..3 {
        let cin = c << k;
        let cout = c << (k + 1);
        let down_w = store.add(
            format!("enc.s{}.down.w", k + 1),
            crate::params::kaiming(rng, &[4 * cin, cout], 4 * cin),
            true,
        );
        let down_b = store.add(format!("enc.s{}.down.b", k + 1), Tensor::zeros(&[cout]), true);
        let mut units = Vec::with_capacity(2);
        for u in 0..2 {
            let base = format!("enc.s{}.u{u}", k + 1);
            units.push(EncUnitIds {
                w: store.add(
                    format!("{base}.w"),
                    crate::params::kaiming(rng, &[3, 3, cout, cout], 9 * cout),
                    true,
                ),
                b: store.add(format!("{base}.b"), Tensor::zeros(&[cout]), true),
                ln_g: store.add(format!("{base}.ln_g"), Tensor::full(&[cout], E::ONE), true),
                ln_b: store.add(format!("{base}.ln_b"), Tensor::zeros(&[cout]), true),
            });
        }
        stages.push(EncStageIds { down_w, down_b, units: [units[0], units[1]] });
    }
    EncIds { stem_w, stem_b, stages: [stages[0], stages[1], stages[2]] }
}

impl<E: Element> Tape<E> {
    /// [B,H,W,3] → four scales [H/4·C, H/8·2C, H/16·4C, H/32·8C]. H and W
    /// must be divisible by 32.
    pub fn toy_encoder(&mut self, p: &EncVars, img: Var) -> Result<[Var; 4]> {
        let s = self.val(img).shape().to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Shape(format!("encoder wants [B,H,W,3], got {s:?}")));
        }
        if s[1] % 32 != 0 || s[2] % 32 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!(
                "encoder extents must be positive multiples of 32, got {}×{}",
                s[1], s[2]
            )));
        }
        let patches = self.rearrange_reduce(img, 4)?;
        let e1 = self.linear(patches, p.stem_w, Some(p.stem_b))?;
        let mut scales = [e1; 4];
        let mut x = e1;
        for (k, st) in p.stages.iter().enumerate() {
            let d = self.rearrange_reduce(x, 2)?;
            x = self.linear(d, st.down_w, Some(st.down_b))?;
            for u in &st.units {
                let cv = self.conv2d(x, u.w, Some(u.b), ConvKind::K3)?;
                let nv = self.layernorm(cv, u.ln_g, u.ln_b, LN_EPS)?;
                x = self.silu(nv);
            }
            scales[k + 1] = x;
        }
        Ok(scales)
    }
}

#[derive(Debug, Clone)]
pub enum CtmIds {
    F(FctmParamIds),
    S(SctmParamIds),
    Stm(Vec<StmParamIds>),
}

#[derive(Debug, Clone)]
pub enum CtmVars {
    F(FctmVars),
    S(SctmVars),
    Stm(Vec<StmVars>),
}

#[derive(Debug, Clone)]
pub struct StageIds {
    pub ecrs: Vec<EcrParamIds>,
    pub stms: Vec<[StmParamIds; 2]>,
    pub ctm: CtmIds,
}

#[derive(Debug, Clone)]
pub struct StageVars {
    pub ecrs: Vec<EcrVars>,
    pub stms: Vec<[StmVars; 2]>,
    pub ctm: CtmVars,
}

#[derive(Debug, Clone)]
pub struct DecIds {
    pub stages: Vec<StageIds>,
}

#[derive(Debug, Clone)]
pub struct DecVars {
    pub stages: Vec<StageVars>,
}

impl DecIds {
    pub fn vars(&self, b: &Bound) -> DecVars {
        DecVars {
            stages: self
                .stages
                .iter()
                .map(|s| StageVars {
                    ecrs: s.ecrs.iter().map(|e| e.vars(b)).collect(),
                    stms: s.stms.iter().map(|pair| [pair[0].vars(b), pair[1].vars(b)]).collect(),
                    ctm: match &s.ctm {
                        CtmIds::F(f) => CtmVars::F(f.vars(b)),
                        CtmIds::S(sc) => CtmVars::S(sc.vars(b)),
                        CtmIds::Stm(v) => CtmVars::Stm(v.iter().map(|t| t.vars(b)).collect()),
                    },
                })
                .collect(),
        }
    }
}

fn init_decoder<E: Element, R: Rng>(
    rng: &mut R,
    store: &mut ParamStore<E>,
    cfg: &ModelConfig,
    mixer: MixerKind,
) -> DecIds {
    let t = cfg.tasks.len();
    let mut stages = Vec::with_capacity(cfg.stages_enabled);
    for s in 1..=cfg.stages_enabled {
        let cin = 8 * cfg.c >> (s - 1);
        let width = cfg.stage_width(s);
        let mut ecrs = Vec::with_capacity(t);
        let mut stms = Vec::with_capacity(t);
        for ti in 0..t {
            let base = format!("dec.s{s}.t{ti}");
            ecrs.push(
                EcrParams::init(rng, cin).register(store, &format!("{base}.ecr")),
            );
            let s0 = StmParams::init(rng, width, cfg.alpha, cfg.n, mixer)
                .register(store, &format!("{base}.stm0"));
            let s1 = StmParams::init(rng, width, cfg.alpha, cfg.n, mixer)
                .register(store, &format!("{base}.stm1"));
            stms.push([s0, s1]);
        }
        let ctm = match cfg.ctm_variant {
            CtmChoice::F => CtmIds::F(
                FctmParams::init(rng, width, cfg.alpha, cfg.n, t, mixer)
                    .register(store, &format!("dec.s{s}.ctm")),
            ),
            CtmChoice::S => CtmIds::S(
                SctmParams::init(rng, width, cfg.alpha, cfg.n, t, mixer)
                    .register(store, &format!("dec.s{s}.ctm")),
            ),
            CtmChoice::None => CtmIds::Stm(
                (0..t)
                    .map(|ti| {
                        StmParams::init(rng, width, cfg.alpha, cfg.n, mixer)
                            .register(store, &format!("dec.s{s}.t{ti}.stm2"))
                    })
                    .collect(),
            ),
        };
        stages.push(StageIds { ecrs, stms, ctm });
    }
    DecIds { stages }
}

impl<E: Element> Tape<E> {
    /// Runs the enabled decoder stages over the four encoder scales and
    /// returns one feature map per task. Stage s upsamples with its ECR
    /// against skip E(4−s), refines with two per-task blocks, then exchanges
    /// across tasks; truncated decoders finish with parameter-free bilinear
    /// upsampling to the H/4 head resolution.
    pub fn decoder_forward(
        &mut self,
        p: &DecVars,
        enc: &[Var; 4],
        active: &[ScanDirection],
    ) -> Result<Vec<Var>> {
        let stages = p.stages.len();
        if !(1..=3).contains(&stages) {
            return Err(Error::Invalid(format!("decoder has {stages} stages, expected 1..=3")));
        }
        let t = p.stages[0].ecrs.len();
        let mut feats = vec![enc[3]; t];
        for (si, st) in p.stages.iter().enumerate() {
            if st.ecrs.len() != t || st.stms.len() != t {
                return Err(Error::Invalid(format!(
                    "stage {} has inconsistent task arity",
                    si + 1
                )));
            }
            let skip = enc[2 - si];
            for ti in 0..t {
                let up = self.ecr(&st.ecrs[ti], feats[ti], skip)?;
                let a = self.stm(&st.stms[ti][0], up, active)?;
                feats[ti] = self.stm(&st.stms[ti][1], a, active)?;
            }
            feats = match &st.ctm {
                CtmVars::F(f) => self.f_ctm(f, &feats, active)?,
                CtmVars::S(sc) => self.s_ctm(sc, &feats, active)?,
                CtmVars::Stm(blocks) => {
                    if blocks.len() != t {
                        return Err(Error::Invalid("stm-exchange arity mismatch".into()));
                    }
                    let mut outs = Vec::with_capacity(t);
                    for (x, bl) in feats.iter().zip(blocks) {
                        outs.push(self.stm(bl, *x, active)?);
                    }
                    outs
                }
            };
        }
        if stages < 3 {
            let scale = 1 << (3 - stages);
            for f in feats.iter_mut() {
                *f = self.interpolate_bilinear(*f, scale)?;
            }
        }
        Ok(feats)
    }

    /// The swapped variant: identical topology with every mixer replaced by
    /// windowed attention. Edge tiles shrink to the map, which matches the
    /// pad-and-mask reading exactly. Scan-direction selection does not apply.
    pub fn attention_swap_forward(
        &mut self,
        p: &DecVars,
        enc: &[Var; 4],
    ) -> Result<Vec<Var>> {
        fn is_attn(m: &MixerVars) -> bool {
            matches!(m, MixerVars::Attn { .. })
        }
        let ok = p.stages.iter().all(|st| {
            st.stms.iter().all(|pair| pair.iter().all(|s| is_attn(&s.mixer)))
                && match &st.ctm {
                    CtmVars::F(f) => {
                        is_attn(&f.mixer_sh) && f.tasks.iter().all(|t| is_attn(&t.mixer))
                    }
                    CtmVars::S(s) => s.tasks.iter().all(|t| is_attn(&t.mixer)),
                    CtmVars::Stm(v) => v.iter().all(|t| is_attn(&t.mixer)),
                }
        });
        if !ok {
            return Err(Error::Invalid(
                "attention_swap_forward needs a model built with attention mixers".into(),
            ));
        }
        self.decoder_forward(p, enc, &ScanDirection::ALL)
    }
}

#[derive(Debug, Clone)]
pub enum HeadIds {
    Dense(DenseHeadParamIds),
    Lite(LiteHeadParamIds),
}

#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Dense(DenseHeadVars),
    Lite(LiteHeadVars),
}

impl HeadIds {
    pub fn vars(&self, b: &Bound) -> HeadVars {
        match self {
            HeadIds::Dense(d) => HeadVars::Dense(d.vars(b)),
            HeadIds::Lite(l) => HeadVars::Lite(l.vars(b)),
        }
    }
}

impl<E: Element> Tape<E> {
    pub fn head_forward(
        &mut self,
        p: &HeadVars,
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BnUpdate<E>>)> {
        match p {
            HeadVars::Dense(d) => Ok((self.dense_head(d, x)?, None)),
            HeadVars::Lite(l) => self.lite_head(l, x, train),
        }
    }
}

/// A built model: config, mixer choice, parameter store, and the id tree
/// mirroring the registration order.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    pub mixer: MixerKind,
    pub store: ParamStore<E>,
    pub enc: EncIds,
    pub dec: DecIds,
    pub heads: Vec<HeadIds>,
}

/// One forward pass: per-task channel-first predictions plus any batchnorm
/// running-stat updates to write back after the optimizer step.
pub struct ModelOutput<E: Element> {
    pub preds: Vec<Var>,
    pub task_feats: Vec<Var>,
    pub bn_updates: Vec<(LiteHeadParamIds, BnUpdate<E>)>,
    pub bound: Bound,
}

impl<E: Element> Model<E> {
    /// Scan-mixer model, deterministic in `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, MixerKind::Scan { tied: cfg.tied_dirs })
    }

    /// Attention-mixer variant with identical topology and naming apart
    /// from the mixer leaves.
    pub fn new_attention(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, MixerKind::Attn { window: cfg.window, heads: cfg.heads })
    }

    pub fn build(cfg: &ModelConfig, mixer: MixerKind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let enc = init_encoder(&mut rng, &mut store, cfg.c);
        let dec = init_decoder(&mut rng, &mut store, cfg, mixer);
        let cw = cfg.head_width();
        let heads = cfg
            .tasks
            .iter()
            .enumerate()
            .map(|(ti, task)| {
                let prefix = format!("head.t{ti}");
                match cfg.head {
                    HeadKind::Dense => HeadIds::Dense(
                        DenseHeadParams::init(&mut rng, cw, task.out_dim)
                            .register(&mut store, &prefix),
                    ),
                    HeadKind::Lite => HeadIds::Lite(
                        LiteHeadParams::init(&mut rng, cw, task.out_dim)
                            .register(&mut store, &prefix),
                    ),
                }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), mixer, store, enc, dec, heads })
    }

    /// Full forward: encoder, decoder (scan or attention mixers, whichever
    /// the model was built with), heads, channel-first conversion.
    pub fn forward(
        &self,
        tp: &mut Tape<E>,
        img: &Tensor<E>,
        train: bool,
    ) -> Result<ModelOutput<E>> {
        let bound = self.store.bind(tp);
        self.forward_bound(tp, bound, img, train)
    }

    /// Forward with a caller-built binding, e.g. spliced finite-difference
    /// leaves standing in for the stored weights.
    pub fn forward_bound(
        &self,
        tp: &mut Tape<E>,
        bound: Bound,
        img: &Tensor<E>,
        train: bool,
    ) -> Result<ModelOutput<E>> {
        let enc_vars = self.enc.vars(&bound);
        let dec_vars = self.dec.vars(&bound);
        let img_v = tp.leaf(img.clone());
        let scales = tp.toy_encoder(&enc_vars, img_v)?;
        let feats = tp.decoder_forward(&dec_vars, &scales, &self.cfg.directions)?;
        let mut preds = Vec::with_capacity(feats.len());
        let mut bn_updates = Vec::new();
        for (ti, &f) in feats.iter().enumerate() {
            let hv = self.heads[ti].vars(&bound);
            let (y, upd) = tp.head_forward(&hv, f, train)?;
            if let (Some(u), HeadIds::Lite(ids)) = (upd, &self.heads[ti]) {
                bn_updates.push((*ids, u));
            }
            preds.push(tp.to_channel_first(y)?);
        }
        Ok(ModelOutput { preds, task_feats: feats, bn_updates, bound })
    }

    /// Writes advanced batchnorm running stats back after a training step.
    pub fn apply_bn_updates(&mut self, updates: Vec<(LiteHeadParamIds, BnUpdate<E>)>) {
        for (ids, u) in updates {
            self.store.set(ids.bn_rm, u.running_mean);
            self.store.set(ids.bn_rv, u.running_var);
        }
    }
}

/// Analytic cost model. FLOPs count one multiply and one add as two
/// operations; data movement (reshape, unfold, concat, channel order) is
/// free. Formulas:
///
/// - linear: 2·Cin·Cout per position (+Cout bias adds, absorbed in the 2×)
/// - full k×k conv: 2·k²·Cin·Cout per position; depthwise divides by Cin
/// - scan, per direction and position-channel: `SCAN_STATE_FLOPS`·N covers
///   generating B and C (2+2), discretization (3), the recurrence (4), and
///   the readout (2); the Δ projections add 4·R per position-channel
/// - windowed attention core, per tile of M cells and head of width d:
///   M²·(4d+3) for scores, softmax, and mixing; projections count as linears
/// - pointwise: activations 4, layernorm 8, batchnorm 4, add/mul 1,
///   bilinear taps 8 per output element
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
}

pub const SCAN_STATE_FLOPS: u64 = 13;

/// Accumulates the cost of each primitive; the model walk below mirrors the
/// forward pass layer for layer.
#[derive(Debug, Default)]
pub struct FlopCounter {
    pub report: CostReport,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn linear(&mut self, cin: usize, cout: usize, positions: usize) {
        self.report.params += (cin * cout + cout) as u64;
        self.report.flops += 2 * (cin * cout * positions) as u64;
    }

    pub fn linear_nobias(&mut self, cin: usize, cout: usize, positions: usize) {
        self.report.params += (cin * cout) as u64;
        self.report.flops += 2 * (cin * cout * positions) as u64;
    }

    pub fn conv(&mut self, k: usize, cin: usize, cout: usize, positions: usize) {
        self.report.params += (k * k * cin * cout + cout) as u64;
        self.report.flops += 2 * (k * k * cin * cout * positions) as u64;
    }

    pub fn dwconv3(&mut self, c: usize, positions: usize) {
        self.report.params += (9 * c + c) as u64;
        self.report.flops += 2 * (9 * c * positions) as u64;
    }

    pub fn layernorm(&mut self, c: usize, positions: usize) {
        self.report.params += 2 * c as u64;
        self.report.flops += 8 * (c * positions) as u64;
    }

    pub fn batchnorm(&mut self, c: usize, positions: usize) {
        self.report.params += 2 * c as u64;
        self.report.flops += 4 * (c * positions) as u64;
    }

    pub fn act(&mut self, elems: usize) {
        self.report.flops += 4 * elems as u64;
    }

    pub fn pointwise(&mut self, elems: usize) {
        self.report.flops += elems as u64;
    }

    pub fn bilinear(&mut self, out_elems: usize) {
        self.report.flops += 8 * out_elems as u64;
    }

    /// Four-direction selective scan over L cells of Ci channels. Parameters
    /// follow the tying choice; FLOPs follow the active direction count.
    pub fn scan(&mut self, l: usize, ci: usize, n: usize, ndirs: usize, tied: bool) {
        let r = (ci / 16).max(1);
        let per_dir_params = (3 * ci * n + 2 * ci + 2 * ci * r) as u64;
        self.report.params += per_dir_params * if tied { 1 } else { 4 };
        let per_dir_flops = (l * ci) as u64 * (SCAN_STATE_FLOPS * n as u64 + 4 * r as u64);
        self.report.flops += per_dir_flops * ndirs as u64;
    }

    /// Windowed attention core over an h×w map (projections counted by the
    /// caller as linears). Tiles at the edges shrink exactly as the kernel's.
    pub fn attention_core(&mut self, h: usize, w: usize, c: usize, window: usize, heads: usize) {
        let mut flops = 0u64;
        for wr in 0..h.div_ceil(window) {
            for wc in 0..w.div_ceil(window) {
                let th = (h - wr * window).min(window);
                let tw = (w - wc * window).min(window);
                let m = (th * tw) as u64;
                flops += m * m * (4 * c as u64 + 3 * heads as u64);
            }
        }
        self.report.flops += flops;
    }

    fn mixer(&mut self, kind: MixerKind, h: usize, w: usize, ci: usize, n: usize, ndirs: usize) {
        match kind {
            MixerKind::Scan { tied } => self.scan(h * w, ci, n, ndirs, tied),
            MixerKind::Attn { window, heads } => {
                for _ in 0..4 {
                    self.linear_nobias(ci, ci, h * w);
                }
                self.attention_core(h, w, ci, window, heads);
            }
        }
    }

    fn stm(&mut self, c: usize, alpha: usize, n: usize, h: usize, w: usize, kind: MixerKind, ndirs: usize) {
        let (p, ac) = (h * w, alpha * c);
        self.layernorm(c, p);
        self.linear(c, ac, p);
        self.dwconv3(ac, p);
        self.act(ac * p);
        self.mixer(kind, h, w, ac, n, ndirs);
        self.layernorm(ac, p);
        self.linear(c, ac, p);
        self.act(ac * p);
        self.pointwise(ac * p);
        self.linear(ac, c, p);
        self.pointwise(c * p);
    }

    fn f_ctm(&mut self, c: usize, alpha: usize, n: usize, t: usize, h: usize, w: usize, kind: MixerKind, ndirs: usize) {
        let (p, ac) = (h * w, alpha * c);
        self.linear(t * c, ac, p);
        self.dwconv3(ac, p);
        self.act(ac * p);
        self.mixer(kind, h, w, ac, n, ndirs);
        for _ in 0..t {
            self.linear(c, ac, p);
            self.dwconv3(ac, p);
            self.act(ac * p);
            self.mixer(kind, h, w, ac, n, ndirs);
            self.linear(c, ac, p);
            self.act(ac * p);
            // gate blend: g·z_t, (1−g), (1−g)·z_sh, sum
            self.pointwise(4 * ac * p);
            self.linear(ac, c, p);
            self.pointwise(c * p);
        }
    }

    fn s_ctm(&mut self, c: usize, alpha: usize, n: usize, t: usize, h: usize, w: usize, kind: MixerKind, ndirs: usize) {
        let (p, ac) = (h * w, alpha * c);
        self.conv(3, t * c, ac, p);
        self.act(ac * p);
        self.conv(3, ac, ac, p);
        for _ in 0..t {
            self.stm(c, alpha, n, h, w, kind, ndirs);
        }
    }

    fn ecr(&mut self, cin: usize, h: usize, w: usize) {
        self.linear(cin, 2 * cin, h * w);
        self.conv(1, cin, cin / 2, 4 * h * w);
    }

    fn head(&mut self, kind: HeadKind, c: usize, out_dim: usize, h: usize, w: usize) {
        let p = h * w;
        match kind {
            HeadKind::Dense => {
                self.linear(c, 16 * c, p);
                self.linear(c, out_dim, 16 * p);
            }
            HeadKind::Lite => {
                self.conv(3, c, c, p);
                self.batchnorm(c, p);
                self.pointwise(c * p);
                self.linear(c, out_dim, p);
                self.bilinear(16 * p * out_dim);
            }
        }
    }

    fn encoder(&mut self, c: usize, h: usize, w: usize) {
        self.linear(48, c, (h / 4) * (w / 4));
        for k in 0..3usize {
            let cin = c << k;
            let cout = c << (k + 1);
            let (sh, sw) = (h >> (k + 3), w >> (k + 3));
            self.linear(4 * cin, cout, sh * sw);
            for _ in 0..2 {
                self.conv(3, cout, cout, sh * sw);
                self.layernorm(cout, sh * sw);
                self.act(cout * sh * sw);
            }
        }
    }
}

/// Deterministic parameter and per-forward FLOP counts for a batch-1 pass
/// at the given image extents, for either mixer variant.
pub fn count_params_flops(
    cfg: &ModelConfig,
    h: usize,
    w: usize,
    mixer: MixerKind,
) -> Result<CostReport> {
    cfg.validate()?;
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "extents must be positive multiples of 32, got {h}×{w}"
        )));
    }
    let ndirs = {
        let mut seen = [false; 4];
        for d in &cfg.directions {
            seen[d.index()] = true;
        }
        seen.iter().filter(|&&b| b).count()
    };
    let mut fc = FlopCounter::new();
    fc.encoder(cfg.c, h, w);
    let t = cfg.tasks.len();
    for s in 1..=cfg.stages_enabled {
        let cin = (8 * cfg.c) >> (s - 1);
        let width = cfg.stage_width(s);
        let (sh, sw) = (h >> (5 - s), w >> (5 - s));
        for _ in 0..t {
            fc.ecr(cin, sh / 2, sw / 2);
            fc.stm(width, cfg.alpha, cfg.n, sh, sw, mixer, ndirs);
            fc.stm(width, cfg.alpha, cfg.n, sh, sw, mixer, ndirs);
        }
        match cfg.ctm_variant {
            CtmChoice::F => fc.f_ctm(width, cfg.alpha, cfg.n, t, sh, sw, mixer, ndirs),
            CtmChoice::S => fc.s_ctm(width, cfg.alpha, cfg.n, t, sh, sw, mixer, ndirs),
            CtmChoice::None => {
                for _ in 0..t {
                    fc.stm(width, cfg.alpha, cfg.n, sh, sw, mixer, ndirs);
                }
            }
        }
    }
    let cw = cfg.head_width();
    let (fh, fw) = (h / 4, w / 4);
    for task in &cfg.tasks {
        if cfg.stages_enabled < 3 {
            let scale = 1usize << (3 - cfg.stages_enabled);
            // parameter-free bilinear from the truncated resolution
            fc.bilinear((fh / scale) * (fw / scale) * scale * scale * cw);
        }
        fc.head(cfg.head, cw, task.out_dim, fh, fw);
    }
    Ok(fc.report)
}
