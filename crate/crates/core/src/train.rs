//! AdamW with a polynomial learning-rate schedule, the multi-task training
//! loop (unweighted sum of task losses), and fixed-order evaluation.
//!
//! Divergence handling: parameters are scanned before each step and the loss
//! after each forward; a non-finite value aborts with a diagnostic error
//! instead of continuing. (Debug builds additionally assert finiteness after
//! every tape op, which panics closer to the source.)

use crate::data::Dataset;
use crate::metrics::{
    argmax_classes, AngularAccum, F1Accum, MetricReport, MiouAccum, RmseAccum, TaskMetric,
};
use crate::model::{LossKind, MetricKind, Model, TaskSpec};
use crate::params::ParamStore;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Positive-class weight for the two-class boundary loss; the background
/// class gets the complement.
pub const BOUNDARY_POS_WEIGHT: f64 = 0.95;

/// base · (1 − iter/max_iter)^power, clamped to zero at and past max_iter.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// Decoupled-decay Adam. Moment buffers are indexed by parameter id; only
/// trainable entries with a gradient move.
#[derive(Debug)]
pub struct AdamW<E: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(store: &ParamStore<E>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<E>> =
            store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update at learning rate `lr`. `grads` is indexed by parameter id;
    /// missing slots (parameters the loss never reached) are left alone.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Option<Tensor<E>>],
        lr: f64,
    ) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
        let (ob1, ob2) = (E::from_f64(1.0 - self.beta1), E::from_f64(1.0 - self.beta2));
        let decay = E::from_f64(1.0 - lr * self.weight_decay);
        let lr_e = E::from_f64(lr);
        let eps = E::from_f64(self.eps);
        let (c1, c2) = (E::from_f64(bc1), E::from_f64(bc2));
        for id in 0..store.len() {
            if !store.entries()[id].trainable {
                continue;
            }
            let Some(g) = grads.get(id).and_then(|o| o.as_ref()) else { continue };
            let mut p = store.get(id).clone();
            let (md, vd) = (self.m[id].data_mut(), self.v[id].data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *pv *= decay;
                md[i] = b1 * md[i] + ob1 * gv;
                vd[i] = b2 * vd[i] + ob2 * gv * gv;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                *pv -= lr_e * m_hat / (v_hat.sqrt() + eps);
            }
            store.set(id, p);
        }
    }
}

/// Knobs for [`train_model`]. `eval_every = 0` evaluates only after the
/// final step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub eval_every: usize,
    pub sample_seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            batch: 4,
            lr,
            weight_decay: 1e-6,
            power: 0.9,
            eval_every: 0,
            sample_seed: 0,
        }
    }
}

/// One evaluation record, written as a JSON line by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub step: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Total (summed over tasks) training loss at every step.
    pub losses: Vec<f64>,
    /// Evaluation records at each eval point, final step included.
    pub metric_lines: Vec<MetricLine>,
    pub final_report: MetricReport,
}

/// The unweighted sum of per-task losses for one batch of predictions.
fn batch_loss<E: Element>(
    tp: &mut Tape<E>,
    preds: &[Var],
    tasks: &[TaskSpec],
    data: &Dataset<E>,
    idxs: &[usize],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (ti, task) in tasks.iter().enumerate() {
        let term = match task.loss {
            LossKind::CrossEntropy => {
                let boundary = task.metric == MetricKind::BoundaryF1;
                let targets = data.class_targets(idxs, boundary);
                let weights =
                    boundary.then(|| vec![1.0 - BOUNDARY_POS_WEIGHT, BOUNDARY_POS_WEIGHT]);
                tp.ce_loss(preds[ti], &targets, weights.as_deref())?
            }
            LossKind::L1 => {
                let target = match task.metric {
                    MetricKind::MeanAngularError => data.normal_targets(idxs),
                    _ => data.depth_targets(idxs),
                };
                tp.l1_loss(preds[ti], &target)?
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => tp.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::Invalid("model has no tasks".into()))
}

fn check_store_finite<E: Element>(store: &ParamStore<E>, step: usize) -> Result<()> {
    for e in store.entries() {
        if !e.value.all_finite() {
            return Err(Error::Diverged(format!(
                "parameter {} became non-finite before step {step}",
                e.name
            )));
        }
    }
    Ok(())
}

/// Trains in place: AdamW over the unweighted task-loss sum with the poly
/// schedule, deterministic batch sampling from `cfg.sample_seed`, batchnorm
/// running stats written back after each step, and evaluation on
/// `eval_data` at the configured cadence plus once after the last step.
pub fn train_model<E: Element>(
    model: &mut Model<E>,
    train_data: &Dataset<E>,
    eval_data: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Err(Error::Invalid("training needs at least one step".into()));
    }
    if cfg.batch == 0 || train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Invalid("empty batch or dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut metric_lines = Vec::new();
    let mut last_eval = None;
    for step in 0..cfg.steps {
        check_store_finite(&model.store, step)?;
        let idxs: Vec<usize> =
            (0..cfg.batch).map(|_| rng.gen_range(0..train_data.len())).collect();
        let images = train_data.batch_images(&idxs);
        let mut tp = Tape::new();
        let out = model.forward(&mut tp, &images, true)?;
        let total = batch_loss(&mut tp, &out.preds, &model.cfg.tasks, train_data, &idxs)?;
        let loss_val = tp.val(total).data()[0].to_f64();
        if !loss_val.is_finite() {
            return Err(Error::Diverged(format!("loss {loss_val} at step {step}")));
        }
        losses.push(loss_val);
        let mut grads = tp.backward(total)?;
        let slots: Vec<Option<Tensor<E>>> =
            (0..model.store.len()).map(|id| grads.take(out.bound.var(id))).collect();
        let lr_now = poly_lr(cfg.lr, step, cfg.steps, cfg.power);
        opt.step(&mut model.store, &slots, lr_now);
        model.apply_bn_updates(out.bn_updates);

        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps {
            let report = eval_model(model, eval_data, cfg.batch)?;
            push_lines(&mut metric_lines, done, &model.cfg.tasks, &report);
            last_eval = Some(report);
        }
    }
    let final_report = eval_model(model, eval_data, cfg.batch)?;
    push_lines(&mut metric_lines, cfg.steps, &model.cfg.tasks, &final_report);
    let _ = last_eval;
    Ok(TrainOutcome { losses, metric_lines, final_report })
}

fn push_lines(
    lines: &mut Vec<MetricLine>,
    step: usize,
    tasks: &[TaskSpec],
    report: &MetricReport,
) {
    for (task, tm) in tasks.iter().zip(&report.tasks) {
        lines.push(MetricLine {
            step,
            task: tm.name.clone(),
            metric: task.metric.name().into(),
            value: tm.value,
        });
    }
}

enum Accum {
    Miou(MiouAccum),
    Rmse(RmseAccum),
    Ang(AngularAccum),
    F1(F1Accum),
}

/// Evaluates every scene in index order with global (not per-batch-averaged)
/// metric accumulation, in eval mode.
pub fn eval_model<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    batch: usize,
) -> Result<MetricReport> {
    if batch == 0 || data.is_empty() {
        return Err(Error::Invalid("empty batch or dataset".into()));
    }
    let tasks = &model.cfg.tasks;
    let mut accums: Vec<Accum> = tasks
        .iter()
        .map(|t| match t.metric {
            MetricKind::Miou => Accum::Miou(MiouAccum::new(t.out_dim)),
            MetricKind::Rmse => Accum::Rmse(RmseAccum::default()),
            MetricKind::MeanAngularError => Accum::Ang(AngularAccum::default()),
            MetricKind::BoundaryF1 => Accum::F1(F1Accum::default()),
        })
        .collect();
    let mut lo = 0usize;
    while lo < data.len() {
        let hi = (lo + batch).min(data.len());
        let idxs: Vec<usize> = (lo..hi).collect();
        let images = data.batch_images(&idxs);
        let mut tp = Tape::new();
        let out = model.forward(&mut tp, &images, false)?;
        for (ti, acc) in accums.iter_mut().enumerate() {
            let pred = tp.val(out.preds[ti]);
            match acc {
                Accum::Miou(a) => a.update(&argmax_classes(pred), &data.class_targets(&idxs, false)),
                Accum::Rmse(a) => a.update(pred, &data.depth_targets(&idxs)),
                Accum::Ang(a) => a.update(pred, &data.normal_targets(&idxs)),
                Accum::F1(a) => a.update(&argmax_classes(pred), &data.class_targets(&idxs, true)),
            }
        }
        lo = hi;
    }
    let report = MetricReport {
        tasks: tasks
            .iter()
            .zip(&accums)
            .map(|(t, acc)| TaskMetric {
                name: t.name.clone(),
                value: match acc {
                    Accum::Miou(a) => a.value(),
                    Accum::Rmse(a) => a.value(),
                    Accum::Ang(a) => a.value(),
                    Accum::F1(a) => a.value(),
                },
                higher_better: t.higher_better,
            })
            .collect(),
    };
    report.validate()?;
    Ok(report)
}

/// Mean total (summed over tasks) loss across the dataset in eval mode;
/// fixed batch order, no parameter movement.
pub fn eval_total_loss<E: Element>(
    model: &Model<E>,
    data: &Dataset<E>,
    batch: usize,
) -> Result<f64> {
    if batch == 0 || data.is_empty() {
        return Err(Error::Invalid("empty batch or dataset".into()));
    }
    let mut sum = 0.0;
    let mut batches = 0usize;
    let mut lo = 0usize;
    while lo < data.len() {
        let hi = (lo + batch).min(data.len());
        let idxs: Vec<usize> = (lo..hi).collect();
        let images = data.batch_images(&idxs);
        let mut tp = Tape::new();
        let out = model.forward(&mut tp, &images, false)?;
        let total = batch_loss(&mut tp, &out.preds, &model.cfg.tasks, data, &idxs)?;
        sum += tp.val(total).data()[0].to_f64();
        batches += 1;
        lo = hi;
    }
    Ok(sum / batches as f64)
}
