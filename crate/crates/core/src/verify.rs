//! Verification batteries shared by the command-line tool and the
//! conformance tests: oracle equivalence for the scan kernels and
//! finite-difference gradient sweeps at kernel, block, and model
//! granularity. Each battery returns structured results so callers can
//! render reports and decide pass/fail against their own tolerances.

use crate::blocks::{
    DenseHeadParams, EcrParams, EcrVars, FctmParams, LiteHeadParams, MixerKind, SctmParams,
    StmParams,
};
use crate::gradcheck::{check_grads, check_grads_sampled, CheckResult, LossFn};
use crate::model::{self, LossKind, MetricKind, Model, ModelConfig, TaskSpec};
use crate::oracle::scan_reference;
use crate::params::{Bound, ParamStore};
use crate::scan2d::{css2d, ss2d, ScanDirection, Ss2dParams, Ss2dVars};
use crate::ssm::{cross_scan, selective_scan_chunked, selective_scan_seq, SsmParams, SsmVars};
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One oracle-equivalence check: worst absolute error over `cases` random
/// instances against an allowed tolerance. Bit-identity checks use tol 0
/// with the count of mismatching instances as the error.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub max_err: f64,
    pub tol: f64,
    pub cases: usize,
}

impl OracleCheck {
    pub fn passes(&self) -> bool {
        self.max_err.is_finite() && self.max_err <= self.tol
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random scan parameters: the structured init plus noise on every field so
/// no instance sits on the special identity-like starting point.
fn rand_params(rng: &mut ChaCha8Rng, ci: usize, n: usize) -> SsmParams<f64> {
    let mut p = SsmParams::init(rng, ci, n);
    for t in [
        &mut p.a_log,
        &mut p.d_skip,
        &mut p.w_b,
        &mut p.w_c,
        &mut p.w_dt,
        &mut p.w_dt_up,
        &mut p.dt_bias,
    ] {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    p
}

fn softplus_ref(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Projection written straight from the definitions as plain loops, sharing
/// no code with the production path: B_t and C_t are the channel means of
/// the per-channel projections of the parameter source; Δ is the softplus
/// of the low-rank map plus bias.
fn project_reference(
    p: &SsmParams<f64>,
    ps: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (l, ci) = (ps.shape()[0], ps.shape()[1]);
    let n = p.a_log.shape()[1];
    let r = p.w_dt.shape()[1];
    let mut b_seq = Tensor::zeros(&[l, n]);
    let mut c_seq = Tensor::zeros(&[l, n]);
    let mut delta = Tensor::zeros(&[l, ci]);
    for t in 0..l {
        for s in 0..n {
            let mut bsum = 0.0;
            let mut csum = 0.0;
            for c in 0..ci {
                bsum += ps.at(&[t, c]) * p.w_b.at(&[c, s]);
                csum += ps.at(&[t, c]) * p.w_c.at(&[c, s]);
            }
            b_seq.set(&[t, s], bsum / ci as f64);
            c_seq.set(&[t, s], csum / ci as f64);
        }
        let mut u = vec![0.0f64; r];
        for (j, uv) in u.iter_mut().enumerate() {
            for c in 0..ci {
                *uv += ps.at(&[t, c]) * p.w_dt.at(&[c, j]);
            }
        }
        for c in 0..ci {
            let mut pre = p.dt_bias.at(&[c]);
            for (j, uv) in u.iter().enumerate() {
                pre += uv * p.w_dt_up.at(&[j, c]);
            }
            delta.set(&[t, c], softplus_ref(pre));
        }
    }
    (b_seq, c_seq, delta)
}

/// Full-pipeline reference: independent projection feeding the double-loop
/// recurrence oracle.
fn scan_oracle(p: &SsmParams<f64>, x: &Tensor<f64>, ps: &Tensor<f64>) -> Tensor<f64> {
    let (b_seq, c_seq, delta) = project_reference(p, ps);
    scan_reference(&p.a_log, &p.d_skip, &b_seq, &c_seq, &delta, x)
}

fn cast_params(p: &SsmParams<f64>) -> SsmParams<f32> {
    SsmParams {
        a_log: p.a_log.cast(),
        d_skip: p.d_skip.cast(),
        w_b: p.w_b.cast(),
        w_c: p.w_c.cast(),
        w_dt: p.w_dt.cast(),
        w_dt_up: p.w_dt_up.cast(),
        dt_bias: p.dt_bias.cast(),
    }
}

/// Oracle-equivalence battery over the scan kernels:
/// production sequential scan vs the independent brute-force pipeline,
/// chunked vs sequential across chunk sizes {1, 2, 7, L}, and the
/// degeneracy identities (cross scan and the four-direction lifting on a
/// shared input reproduce the plain self scans bit for bit, in f64 and f32).
pub fn oracle_battery(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for i in 0..100 {
        let ci = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let l = rng.gen_range(1..=32);
        let p = rand_params(&mut rng, ci, n);
        let x = rand_tensor(&mut rng, &[l, ci]);
        let ps = if i % 2 == 0 { x.clone() } else { rand_tensor(&mut rng, &[l, ci]) };
        let got = selective_scan_seq(&p, &x, &ps)?;
        worst = worst.max(got.max_abs_diff(&scan_oracle(&p, &x, &ps)));
    }
    checks.push(OracleCheck { name: "seq-scan-vs-bruteforce", max_err: worst, tol: 1e-12, cases: 100 });

    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..25 {
        let ci = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let l = rng.gen_range(8..=32);
        let p = rand_params(&mut rng, ci, n);
        let x = rand_tensor(&mut rng, &[l, ci]);
        let ps = rand_tensor(&mut rng, &[l, ci]);
        let want = selective_scan_seq(&p, &x, &ps)?;
        for chunk in [1usize, 2, 7, l] {
            let got = selective_scan_chunked(&p, &x, &ps, chunk)?;
            worst = worst.max(got.max_abs_diff(&want));
            cases += 1;
        }
    }
    checks.push(OracleCheck { name: "chunked-vs-sequential", max_err: worst, tol: 1e-10, cases });

    let mut mismatch = 0usize;
    for _ in 0..20 {
        let ci = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let l = rng.gen_range(1..=32);
        let p = rand_params(&mut rng, ci, n);
        let x = rand_tensor(&mut rng, &[l, ci]);
        if cross_scan(&p, &x, &x)?.data() != selective_scan_seq(&p, &x, &x)?.data() {
            mismatch += 1;
        }
        let pf = cast_params(&p);
        let xf: Tensor<f32> = x.cast();
        if cross_scan(&pf, &xf, &xf)?.data() != selective_scan_seq(&pf, &xf, &xf)?.data() {
            mismatch += 1;
        }
    }
    checks.push(OracleCheck {
        name: "cross-scan-self-bit-identical",
        max_err: mismatch as f64,
        tol: 0.0,
        cases: 40,
    });

    let mut mismatch = 0usize;
    for i in 0..20 {
        let ci = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=6);
        let w = rng.gen_range(1..=6);
        let tied = i % 3 == 0;
        let p = Ss2dParams::<f64>::init(&mut rng, ci, n, tied);
        let x = rand_tensor(&mut rng, &[1, h, w, ci]);
        let active: &[ScanDirection] = match i % 4 {
            0 => &ScanDirection::ALL,
            1 => &ScanDirection::ALL[..2],
            2 => &ScanDirection::ALL[1..3],
            _ => &ScanDirection::ALL[3..],
        };
        if css2d(&p, &x, &x, active)?.data() != ss2d(&p, &x, active)?.data() {
            mismatch += 1;
        }
    }
    checks.push(OracleCheck {
        name: "css2d-self-bit-identical",
        max_err: mismatch as f64,
        tol: 0.0,
        cases: 20,
    });

    Ok(checks)
}

/// Gives seeded generic values to every all-zero trainable tensor. The
/// output projections start at zero so blocks are identities at init, which
/// would silence every upstream gradient a sweep wants to measure.
pub fn randomize_zero_trainables(seed: u64, store: &mut ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a7a_7a7a);
    for id in 0..store.len() {
        let e = &store.entries()[id];
        if e.trainable && e.value.data().iter().all(|&v| v == 0.0) {
            let t = Tensor::from_fn(e.value.shape(), |_| rng.gen_range(-0.3..0.3));
            store.set(id, t);
        }
    }
}

/// Finite-difference sweep over every trainable entry of a store plus extra
/// data tensors. The closure sees a binding whose trainable leaves are owned
/// by the checker, so perturbations reach the real forward path.
fn sweep_store(
    store: &ParamStore<f64>,
    data: &[(&str, Tensor<f64>)],
    build: &dyn Fn(&mut Tape<f64>, &Bound, &[Var]) -> Var,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Vec<CheckResult> {
    let trainable: Vec<_> = store.entries().iter().filter(|e| e.trainable).collect();
    let nt = trainable.len();
    let mut names: Vec<&str> = trainable.iter().map(|e| e.name.as_str()).collect();
    let mut inputs: Vec<Tensor<f64>> = trainable.iter().map(|e| e.value.clone()).collect();
    for (n, t) in data {
        names.push(n);
        inputs.push(t.clone());
    }
    let f = |tp: &mut Tape<f64>, vs: &[Var]| -> Var {
        let bound = store.bind_spliced(tp, &vs[..nt]).expect("spliced bind");
        build(tp, &bound, &vs[nt..])
    };
    let lf: LossFn<'_> = &f;
    check_grads_sampled(&names, &inputs, lf, eps, samples, seed)
}

fn sum_squares(tp: &mut Tape<f64>, ys: &[Var]) -> Var {
    let parts: Vec<Var> = ys
        .iter()
        .map(|&y| {
            let sq = tp.mul(y, y).unwrap();
            tp.sum_all(sq)
        })
        .collect();
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tp.add(acc, p).unwrap();
    }
    acc
}

/// Gradient checks on the raw kernels: the selective scan against all of
/// its parameters and both sequence inputs, the four-direction lifting with
/// decoupled query/shared maps, and the windowed attention block on a
/// ragged map. Every entry is perturbed (no sampling).
pub fn kernel_gradcheck(seed: u64, eps: f64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let p = rand_params(&mut rng, 3, 2);
        let inputs = vec![
            p.a_log.clone(),
            p.d_skip.clone(),
            p.w_b.clone(),
            p.w_c.clone(),
            p.w_dt.clone(),
            p.w_dt_up.clone(),
            p.dt_bias.clone(),
            rand_tensor(&mut rng, &[5, 3]),
            rand_tensor(&mut rng, &[5, 3]),
        ];
        let names = [
            "scan.a_log",
            "scan.d_skip",
            "scan.w_b",
            "scan.w_c",
            "scan.w_dt",
            "scan.w_dt_up",
            "scan.dt_bias",
            "scan.x",
            "scan.param_source",
        ];
        let f = |tp: &mut Tape<f64>, vs: &[Var]| -> Var {
            let vars = SsmVars {
                a_log: vs[0],
                d_skip: vs[1],
                w_b: vs[2],
                w_c: vs[3],
                w_dt: vs[4],
                w_dt_up: vs[5],
                dt_bias: vs[6],
            };
            let y = tp.selective_scan(&vars, vs[7], vs[8]).unwrap();
            sum_squares(tp, &[y])
        };
        let lf: LossFn<'_> = &f;
        out.extend(check_grads(&names, &inputs, lf, eps));
    }

    {
        let mut store = ParamStore::new();
        let ids = Ss2dParams::<f64>::init(&mut rng, 2, 2, false).register(&mut store, "css2d");
        let query = rand_tensor(&mut rng, &[1, 3, 4, 2]);
        let shared = rand_tensor(&mut rng, &[1, 3, 4, 2]);
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars: Ss2dVars = ids.vars(b);
            let y = tp.css2d(&vars, dv[0], dv[1], &ScanDirection::ALL).unwrap();
            sum_squares(tp, &[y])
        };
        out.extend(sweep_store(
            &store,
            &[("css2d.query", query), ("css2d.shared", shared)],
            &build,
            eps,
            usize::MAX,
            seed,
        ));
    }

    {
        let mut store = ParamStore::new();
        let ids = crate::attention::AttnParams::<f64>::init(&mut rng, 4).register(&mut store, "attn");
        let x = rand_tensor(&mut rng, &[1, 3, 5, 4]);
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars = ids.vars(b);
            let y = tp.windowed_mhsa(&vars, dv[0], dv[0], 2, 2).unwrap();
            sum_squares(tp, &[y])
        };
        out.extend(sweep_store(&store, &[("attn.x", x)], &build, eps, usize::MAX, seed));
    }

    out
}

const BLOCK_C: usize = 8;
const BLOCK_T: usize = 2;

/// Gradient checks on every decoder block at width 8 with two tasks on 8×8
/// feature maps: ECR, STM with both mixers, both exchange blocks, and both
/// heads. Large tensors are sampled (`samples` entries each) and a joint
/// directional derivative covers everything at once.
pub fn block_gradcheck(seed: u64, eps: f64, samples: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let scan = MixerKind::Scan { tied: true };
    let attn = MixerKind::Attn { window: 4, heads: 2 };

    {
        let mut store = ParamStore::new();
        let ids = EcrParams::<f64>::init(&mut rng, BLOCK_C).register(&mut store, "ecr");
        randomize_zero_trainables(seed, &mut store);
        let x = rand_tensor(&mut rng, &[1, 4, 4, BLOCK_C]);
        let skip = rand_tensor(&mut rng, &[1, 8, 8, BLOCK_C / 2]);
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars: EcrVars = ids.vars(b);
            let y = tp.ecr(&vars, dv[0], dv[1]).unwrap();
            sum_squares(tp, &[y])
        };
        out.extend(sweep_store(
            &store,
            &[("ecr.x", x), ("ecr.skip", skip)],
            &build,
            eps,
            samples,
            seed,
        ));
    }

    for (tag, kind) in [("stm", scan), ("stm-attn", attn)] {
        let mut store = ParamStore::new();
        let ids = StmParams::<f64>::init(&mut rng, BLOCK_C, 2, 2, kind).register(&mut store, tag);
        randomize_zero_trainables(seed, &mut store);
        let x = rand_tensor(&mut rng, &[1, 8, 8, BLOCK_C]);
        let name = format!("{tag}.x");
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars = ids.vars(b);
            let y = tp.stm(&vars, dv[0], &ScanDirection::ALL).unwrap();
            sum_squares(tp, &[y])
        };
        out.extend(sweep_store(&store, &[(&name, x)], &build, eps, samples, seed));
    }

    {
        let mut store = ParamStore::new();
        let ids = FctmParams::<f64>::init(&mut rng, BLOCK_C, 2, 2, BLOCK_T, scan)
            .register(&mut store, "fctm");
        randomize_zero_trainables(seed, &mut store);
        let x0 = rand_tensor(&mut rng, &[1, 8, 8, BLOCK_C]);
        let x1 = rand_tensor(&mut rng, &[1, 8, 8, BLOCK_C]);
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars = ids.vars(b);
            let ys = tp.f_ctm(&vars, dv, &ScanDirection::ALL).unwrap();
            sum_squares(tp, &ys)
        };
        out.extend(sweep_store(
            &store,
            &[("fctm.x0", x0), ("fctm.x1", x1)],
            &build,
            eps,
            samples,
            seed,
        ));
    }

    {
        let mut store = ParamStore::new();
        let ids = SctmParams::<f64>::init(&mut rng, BLOCK_C, 2, 2, BLOCK_T, scan)
            .register(&mut store, "sctm");
        randomize_zero_trainables(seed, &mut store);
        let x0 = rand_tensor(&mut rng, &[1, 8, 8, BLOCK_C]);
        let x1 = rand_tensor(&mut rng, &[1, 8, 8, BLOCK_C]);
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars = ids.vars(b);
            let ys = tp.s_ctm(&vars, dv, &ScanDirection::ALL).unwrap();
            sum_squares(tp, &ys)
        };
        out.extend(sweep_store(
            &store,
            &[("sctm.x0", x0), ("sctm.x1", x1)],
            &build,
            eps,
            samples,
            seed,
        ));
    }

    {
        let mut store = ParamStore::new();
        let ids = DenseHeadParams::<f64>::init(&mut rng, BLOCK_C, 3).register(&mut store, "dense-head");
        randomize_zero_trainables(seed, &mut store);
        let x = rand_tensor(&mut rng, &[1, 8, 8, BLOCK_C]);
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars = ids.vars(b);
            let y = tp.dense_head(&vars, dv[0]).unwrap();
            sum_squares(tp, &[y])
        };
        out.extend(sweep_store(&store, &[("dense-head.x", x)], &build, eps, samples, seed));
    }

    {
        let mut store = ParamStore::new();
        let ids = LiteHeadParams::<f64>::init(&mut rng, BLOCK_C, 3).register(&mut store, "lite-head");
        randomize_zero_trainables(seed, &mut store);
        let x = rand_tensor(&mut rng, &[1, 8, 8, BLOCK_C]);
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars = ids.vars(b);
            let (y, _) = tp.lite_head(&vars, dv[0], true).unwrap();
            sum_squares(tp, &[y])
        };
        out.extend(sweep_store(&store, &[("lite-head.x", x)], &build, eps, samples, seed));
    }

    out
}

/// Negative control proving the sweep flags wrong gradients: the analytic
/// gradient of sum(x²) is held against finite differences of 3·sum(x²), a
/// deliberate factor-3 corruption that must come back as a failure.
pub fn corrupted_gradient_fixture(eps: f64) -> CheckResult {
    let x = Tensor::from_fn(&[6], |i| 0.3 + 0.2 * i as f64);
    let analytic = {
        let mut tp = Tape::new();
        let v = tp.leaf(x.clone());
        let y = tp.mul(v, v).unwrap();
        let loss = tp.sum_all(y);
        let g = tp.backward(loss).expect("scalar loss");
        g.get(v).expect("leaf gradient").clone()
    };
    let scaled = |t: &Tensor<f64>| -> f64 {
        let mut tp = Tape::<f64>::new();
        let v = tp.leaf(t.clone());
        let y = tp.mul(v, v).unwrap();
        let s = tp.sum_all(y);
        let out = tp.affine(s, 3.0, 0.0);
        tp.val(out).data()[0]
    };
    let mut work = x.clone();
    let mut worst = 0.0f64;
    for j in 0..work.numel() {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + eps;
        let fp = scaled(&work);
        work.data_mut()[j] = orig - eps;
        let fm = scaled(&work);
        work.data_mut()[j] = orig;
        let gfd = (fp - fm) / (2.0 * eps);
        worst = worst.max(crate::gradcheck::rel_err(analytic.data()[j], gfd));
    }
    CheckResult { name: "negative-control.scaled-loss".into(), max_rel_err: worst, checked_entries: x.numel() }
}

/// Two-task config used by the whole-model sweeps: a 3-class segmentation
/// head and a single-channel regression head over a narrow trunk.
pub fn gradcheck_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        c: 8,
        n: 2,
        alpha: 2,
        tied_dirs: true,
        heads: 2,
        window: 4,
        seed,
        tasks: vec![
            TaskSpec {
                name: "seg".into(),
                out_dim: 3,
                loss: LossKind::CrossEntropy,
                metric: MetricKind::Miou,
                higher_better: true,
            },
            TaskSpec {
                name: "reg".into(),
                out_dim: 1,
                loss: LossKind::L1,
                metric: MetricKind::Rmse,
                higher_better: false,
            },
        ],
        ..ModelConfig::default()
    }
}

/// Gradient checks at model granularity: the toy encoder alone, then the
/// full three-stage two-task model at width 8 on a 32×32 image (8×8 feature
/// maps after the stem) through its real cross-entropy + ℓ1 objective.
/// Every trainable tensor is sampled; the joint directional derivative
/// touches all entries at once.
pub fn model_gradcheck(seed: u64, eps: f64, samples: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let ids = model::init_encoder(&mut rng, &mut store, 2);
        let img = rand_tensor(&mut rng, &[1, 32, 32, 3]);
        let build = |tp: &mut Tape<f64>, b: &Bound, dv: &[Var]| -> Var {
            let vars = ids.vars(b);
            let scales = tp.toy_encoder(&vars, dv[0]).unwrap();
            sum_squares(tp, &scales)
        };
        out.extend(sweep_store(&store, &[("enc.img", img)], &build, eps, samples, seed));
    }

    {
        let cfg = gradcheck_model_config(seed);
        let mut m = Model::<f64>::new(&cfg)?;
        randomize_zero_trainables(seed, &mut m.store);
        let img = rand_tensor(&mut rng, &[1, 32, 32, 3]);
        let classes: Vec<u32> = (0..32 * 32).map(|_| rng.gen_range(0..3)).collect();
        let depth = rand_tensor(&mut rng, &[1, 1, 32, 32]);
        let build = |tp: &mut Tape<f64>, b: &Bound, _dv: &[Var]| -> Var {
            let outp = m.forward_bound(tp, b.clone(), &img, false).unwrap();
            let ce = tp.ce_loss(outp.preds[0], &classes, None).unwrap();
            let l1 = tp.l1_loss(outp.preds[1], &depth).unwrap();
            tp.add(ce, l1).unwrap()
        };
        out.extend(sweep_store(&m.store, &[], &build, eps, samples, seed));
    }

    Ok(out)
}
