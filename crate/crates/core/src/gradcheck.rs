//! Finite-difference gradient checking.
//!
//! The checker is implementation-agnostic: it evaluates a user closure as a
//! black-box scalar function of its input tensors and compares analytic tape
//! gradients against central differences (f(x+ε) − f(x−ε)) / 2ε with the
//! relative-error measure |g_a − g_fd| / max(1, |g_fd|).
//!
//! Checks run in f64. `check_grads` perturbs every entry of every input;
//! `check_grads_sampled` perturbs a seeded subset per input plus a random
//! directional derivative across all inputs jointly, which keeps full-model
//! checks tractable while still covering every parameter.

use crate::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of checking one named input tensor.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_entries: usize,
}

impl CheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

/// Builds the scalar loss for a given set of input tensors. Must be a pure,
/// deterministic function of the inputs.
pub type LossFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn eval_loss(f: LossFn<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.val(loss).data()[0]
}

fn analytic_grads(f: LossFn<'_>, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

pub fn rel_err(ga: f64, gfd: f64) -> f64 {
    (ga - gfd).abs() / gfd.abs().max(1.0)
}

fn check_entries(
    names: &[&str],
    inputs: &[Tensor<f64>],
    f: LossFn<'_>,
    eps: f64,
    mut pick: impl FnMut(usize, usize) -> Vec<usize>,
) -> Vec<CheckResult> {
    let analytic = analytic_grads(f, inputs);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut results = Vec::new();
    for i in 0..inputs.len() {
        let entries = pick(i, inputs[i].numel());
        let mut worst = 0.0f64;
        for &j in &entries {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval_loss(f, &work);
            work[i].data_mut()[j] = orig - eps;
            let fm = eval_loss(f, &work);
            work[i].data_mut()[j] = orig;
            let gfd = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[i].data()[j], gfd));
        }
        results.push(CheckResult {
            name: names[i].to_string(),
            max_rel_err: worst,
            checked_entries: entries.len(),
        });
    }
    results
}

/// Checks every entry of every input.
pub fn check_grads(
    names: &[&str],
    inputs: &[Tensor<f64>],
    f: LossFn<'_>,
    eps: f64,
) -> Vec<CheckResult> {
    check_entries(names, inputs, f, eps, |_, n| (0..n).collect())
}

/// Checks a seeded sample of at most `per_input` entries per input, plus one
/// joint directional derivative over all inputs (reported as "~direction").
pub fn check_grads_sampled(
    names: &[&str],
    inputs: &[Tensor<f64>],
    f: LossFn<'_>,
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut results = check_entries(names, inputs, f, eps, |_, n| {
        if n <= per_input {
            (0..n).collect()
        } else {
            // Sample without replacement; order does not matter.
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < per_input {
                picked.insert(rng.gen_range(0..n));
            }
            picked.into_iter().collect()
        }
    });
    results.push(directional_check(names, inputs, f, eps, seed));
    results
}

/// Compares ⟨g, d⟩ against the central difference of the loss along one random
/// unit direction d spanning all inputs. Validates every parameter jointly.
pub fn directional_check(
    _names: &[&str],
    inputs: &[Tensor<f64>],
    f: LossFn<'_>,
    eps: f64,
    seed: u64,
) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd14e_c710);
    let dirs: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let norm: f64 = dirs
        .iter()
        .flat_map(|d| d.data().iter().map(|v| v * v))
        .sum::<f64>()
        .sqrt()
        .max(1e-12);

    let analytic = analytic_grads(f, inputs);
    let ga: f64 = analytic
        .iter()
        .zip(&dirs)
        .flat_map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b))
        .sum::<f64>()
        / norm;

    let shift = |sign: f64| -> Vec<Tensor<f64>> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let mut c = t.clone();
                for (v, dv) in c.data_mut().iter_mut().zip(d.data()) {
                    *v += sign * eps * dv / norm;
                }
                c
            })
            .collect()
    };
    let fp = eval_loss(f, &shift(1.0));
    let fm = eval_loss(f, &shift(-1.0));
    let gfd = (fp - fm) / (2.0 * eps);
    CheckResult {
        name: "~direction".to_string(),
        max_rel_err: rel_err(ga, gfd),
        checked_entries: 1,
    }
}
