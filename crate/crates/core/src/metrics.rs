//! Evaluation metrics (mIoU, RMSE, mean angular error, boundary F1) and the
//! signed multi-task improvement score Δ_m.
//!
//! Every metric has a streaming accumulator so dataset-level values come from
//! one fixed-order pass over global counts (not averages of per-batch
//! values), plus a one-shot convenience wrapper. Accumulators and Δ_m work in
//! f64 regardless of the model element type.

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// One task's evaluated score and its improvement direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub name: String,
    pub value: f64,
    pub higher_better: bool,
}

/// Per-task scores for one model; the input to [`delta_m`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub tasks: Vec<TaskMetric>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for t in &self.tasks {
            if !t.value.is_finite() {
                return Err(Error::NonFinite(format!("metric {} = {}", t.name, t.value)));
            }
        }
        Ok(())
    }
}

/// Average relative improvement of `mtl` over `stl` in percent, where each
/// task contributes (M_mtl − M_stl)/M_stl with the sign flipped for
/// lower-is-better metrics. Task lists must match by name and direction, and
/// no baseline value may be zero.
pub fn delta_m(mtl: &MetricReport, stl: &MetricReport) -> Result<f64> {
    if mtl.tasks.len() != stl.tasks.len() {
        return Err(Error::Invalid(format!(
            "task count mismatch: {} vs {}",
            mtl.tasks.len(),
            stl.tasks.len()
        )));
    }
    let mut acc = 0.0f64;
    for (m, s) in mtl.tasks.iter().zip(&stl.tasks) {
        if m.name != s.name || m.higher_better != s.higher_better {
            return Err(Error::Invalid(format!(
                "task mismatch: ({}, {}) vs ({}, {})",
                m.name, m.higher_better, s.name, s.higher_better
            )));
        }
        if s.value == 0.0 {
            return Err(Error::Invalid(format!("baseline metric {} is zero", s.name)));
        }
        let sign = if m.higher_better { 1.0 } else { -1.0 };
        acc += sign * (m.value - s.value) / s.value;
    }
    Ok(100.0 * acc / mtl.tasks.len() as f64)
}

/// Signed percent with two decimals, truncated toward zero rather than
/// rounded so values reproduced from published tables match their source
/// rendering (e.g. 2.6389 prints as +2.63).
pub fn format_percent(v: f64) -> String {
    let t = (v * 100.0).trunc() / 100.0;
    format!("{t:+.2}")
}

/// Per-class intersection/union counts; the score averages IoU over classes
/// that appear in the targets.
#[derive(Debug, Clone)]
pub struct MiouAccum {
    inter: Vec<u64>,
    union: Vec<u64>,
    present: Vec<bool>,
}

impl MiouAccum {
    pub fn new(num_classes: usize) -> Self {
        Self { inter: vec![0; num_classes], union: vec![0; num_classes], present: vec![false; num_classes] }
    }

    pub fn update(&mut self, pred: &[u32], target: &[u32]) {
        assert_eq!(pred.len(), target.len());
        for (&p, &t) in pred.iter().zip(target) {
            let (p, t) = (p as usize, t as usize);
            self.present[t] = true;
            if p == t {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
    }

    pub fn value(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.inter.len() {
            if self.present[c] {
                sum += self.inter[c] as f64 / self.union[c] as f64;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub fn miou(pred: &[u32], target: &[u32], num_classes: usize) -> f64 {
    let mut a = MiouAccum::new(num_classes);
    a.update(pred, target);
    a.value()
}

#[derive(Debug, Clone, Default)]
pub struct RmseAccum {
    sq_sum: f64,
    n: u64,
}

impl RmseAccum {
    pub fn update<E: Element>(&mut self, pred: &Tensor<E>, target: &Tensor<E>) {
        assert_eq!(pred.shape(), target.shape());
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            let d = p.to_f64() - t.to_f64();
            self.sq_sum += d * d;
            self.n += 1;
        }
    }

    pub fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.sq_sum / self.n as f64).sqrt()
        }
    }
}

pub fn rmse<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> f64 {
    let mut a = RmseAccum::default();
    a.update(pred, target);
    a.value()
}

/// Mean angle in degrees between per-pixel 3-vectors, both normalized first;
/// a zero-length prediction counts as orthogonal (90°). Inputs are
/// channel-first [B,3,H,W].
#[derive(Debug, Clone, Default)]
pub struct AngularAccum {
    deg_sum: f64,
    n: u64,
}

impl AngularAccum {
    pub fn update<E: Element>(&mut self, pred: &Tensor<E>, target: &Tensor<E>) {
        assert_eq!(pred.shape(), target.shape());
        let s = pred.shape();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1], 3, "angular error reads [B,3,H,W]");
        let hw = s[2] * s[3];
        let (pd, td) = (pred.data(), target.data());
        for b in 0..s[0] {
            for p in 0..hw {
                let at = |d: &[E], ch: usize| d[(b * 3 + ch) * hw + p].to_f64();
                let unit = |d: &[E]| -> Option<[f64; 3]> {
                    let v = [at(d, 0), at(d, 1), at(d, 2)];
                    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    (norm >= 1e-12).then(|| [v[0] / norm, v[1] / norm, v[2] / norm])
                };
                let dot = match (unit(pd), unit(td)) {
                    (Some(a), Some(b)) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2],
                    _ => 0.0,
                };
                self.deg_sum += dot.clamp(-1.0, 1.0).acos().to_degrees();
                self.n += 1;
            }
        }
    }

    pub fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.deg_sum / self.n as f64
        }
    }
}

pub fn mean_angular_error_deg<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> f64 {
    let mut a = AngularAccum::default();
    a.update(pred, target);
    a.value()
}

/// Exact-pixel F1 over the positive class. Empty prediction against empty
/// target scores 1 (nothing to find, nothing found).
#[derive(Debug, Clone, Default)]
pub struct F1Accum {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl F1Accum {
    pub fn update(&mut self, pred: &[u32], target: &[u32]) {
        assert_eq!(pred.len(), target.len());
        for (&p, &t) in pred.iter().zip(target) {
            match (p != 0, t != 0) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    pub fn value(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn boundary_f1(pred: &[u32], target: &[u32]) -> f64 {
    let mut a = F1Accum::default();
    a.update(pred, target);
    a.value()
}

/// Per-pixel argmax over the class axis of channel-first logits [B,K,H,W];
/// the positive class wins a two-class tie at exactly probability 0.5 only
/// when its logit is strictly larger, i.e. this is thresholding at 0.5.
pub fn argmax_classes<E: Element>(logits: &Tensor<E>) -> Vec<u32> {
    let s = logits.shape();
    assert_eq!(s.len(), 4, "argmax_classes reads [B,K,H,W]");
    let (bn, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(bn * hw);
    for b in 0..bn {
        for p in 0..hw {
            let mut best = 0usize;
            let mut bv = d[b * k * hw + p].to_f64();
            for c in 1..k {
                let v = d[(b * k + c) * hw + p].to_f64();
                if v > bv {
                    bv = v;
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn report(vals: [f64; 4]) -> MetricReport {
        let names = ["semseg", "depth", "normal", "boundary"];
        let higher = [true, false, false, true];
        MetricReport {
            tasks: names
                .iter()
                .zip(vals)
                .zip(higher)
                .map(|((n, v), hb)| TaskMetric {
                    name: (*n).into(),
                    value: v,
                    higher_better: hb,
                })
                .collect(),
        }
    }

    #[test]
    fn delta_m_reproduces_published_rows() {
        let stl = report([54.32, 0.5166, 19.21, 77.30]);
        let mtl = report([57.01, 0.4818, 18.27, 79.40]);
        let d = delta_m(&mtl, &stl).unwrap();
        assert!((d - 4.82).abs() <= 0.01, "got {d}");
        assert_eq!(format_percent(d), "+4.82");

        let attn = report([55.15, 0.4945, 18.72, 79.00]);
        let d2 = delta_m(&attn, &stl).unwrap();
        assert!((d2 - 2.63).abs() <= 0.01, "got {d2}");
        assert_eq!(format_percent(d2), "+2.63");
    }

    #[test]
    fn delta_m_is_zero_at_equality_and_locally_antisymmetric() {
        let a = report([50.0, 0.5, 20.0, 75.0]);
        assert_eq!(delta_m(&a, &a).unwrap(), 0.0);
        assert_eq!(format_percent(0.0), "+0.00");

        // First-order antisymmetry: swapping roles negates up to O(ε²).
        let b = report([50.05, 0.5005, 19.98, 75.03]);
        let fwd = delta_m(&b, &a).unwrap();
        let bwd = delta_m(&a, &b).unwrap();
        assert!(fwd > 0.0);
        assert!((fwd + bwd).abs() < 1e-4 * fwd.abs().max(1.0));
    }

    #[test]
    fn delta_m_sign_follows_the_direction_flag() {
        let mk = |hb: bool, base: f64, new: f64| {
            (
                MetricReport {
                    tasks: vec![TaskMetric { name: "t".into(), value: new, higher_better: hb }],
                },
                MetricReport {
                    tasks: vec![TaskMetric { name: "t".into(), value: base, higher_better: hb }],
                },
            )
        };
        // Metric went up: improvement if higher is better, regression if not.
        let (m, s) = mk(true, 10.0, 11.0);
        assert!(delta_m(&m, &s).unwrap() > 0.0);
        let (m, s) = mk(false, 10.0, 11.0);
        assert!(delta_m(&m, &s).unwrap() < 0.0);
    }

    #[test]
    fn delta_m_rejects_mismatches_and_zero_baselines() {
        let a = report([50.0, 0.5, 20.0, 75.0]);
        let mut renamed = a.clone();
        renamed.tasks[1].name = "disp".into();
        assert!(delta_m(&renamed, &a).is_err());

        let mut flipped = a.clone();
        flipped.tasks[0].higher_better = false;
        assert!(delta_m(&flipped, &a).is_err());

        let mut short = a.clone();
        short.tasks.pop();
        assert!(delta_m(&short, &a).is_err());

        let zero = report([0.0, 0.5, 20.0, 75.0]);
        assert!(delta_m(&a, &zero).is_err());
    }

    #[test]
    fn perfect_predictions_hit_the_fixed_points() {
        let target = vec![0u32, 1, 2, 1, 0, 2];
        assert_eq!(miou(&target, &target, 3), 1.0);

        let t = Tensor::<f64>::from_fn(&[1, 1, 2, 3], |i| i as f64 * 0.1);
        assert_eq!(rmse(&t, &t), 0.0);

        let mut n = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        for p in 0..4 {
            n.data_mut()[2 * 4 + p] = 1.0;
        }
        assert_eq!(mean_angular_error_deg(&n, &n), 0.0);

        let b = vec![0u32, 1, 1, 0];
        assert_eq!(boundary_f1(&b, &b), 1.0);
        // All-negative agreement also counts as perfect.
        assert_eq!(boundary_f1(&[0, 0], &[0, 0]), 1.0);
    }

    #[test]
    fn orthogonal_constant_normals_read_ninety_degrees() {
        let mut a = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let mut b = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        for p in 0..4 {
            a.data_mut()[p] = 1.0; // +x
            b.data_mut()[2 * 4 + p] = 1.0; // +z
        }
        assert!((mean_angular_error_deg(&a, &b) - 90.0).abs() < 1e-12);
        // Unnormalized predictions read the same angle.
        for v in a.data_mut().iter_mut() {
            *v *= 7.5;
        }
        assert!((mean_angular_error_deg(&a, &b) - 90.0).abs() < 1e-12);
        // Zero-length predictions count as orthogonal.
        let z = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!((mean_angular_error_deg(&z, &b) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn miou_matches_set_arithmetic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = 40;
            let k = 4usize;
            let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
            let target: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
            let mut expect = 0.0;
            let mut classes = 0usize;
            for c in 0..k as u32 {
                let ps: HashSet<usize> =
                    pred.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect();
                let ts: HashSet<usize> =
                    target.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect();
                if ts.is_empty() {
                    continue;
                }
                classes += 1;
                expect += ps.intersection(&ts).count() as f64 / ps.union(&ts).count() as f64;
            }
            expect /= classes as f64;
            assert!((miou(&pred, &target, k) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_accumulators_match_one_shot_on_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a: Vec<u32> = (0..30).map(|_| rng.gen_range(0..3)).collect();
        let b: Vec<u32> = (0..50).map(|_| rng.gen_range(0..3)).collect();
        let ta: Vec<u32> = (0..30).map(|_| rng.gen_range(0..3)).collect();
        let tb: Vec<u32> = (0..50).map(|_| rng.gen_range(0..3)).collect();
        let mut acc = MiouAccum::new(3);
        acc.update(&a, &ta);
        acc.update(&b, &tb);
        let joined_p: Vec<u32> = a.iter().chain(&b).copied().collect();
        let joined_t: Vec<u32> = ta.iter().chain(&tb).copied().collect();
        assert_eq!(acc.value(), miou(&joined_p, &joined_t, 3));

        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let y = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let x2 = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let y2 = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let mut r = RmseAccum::default();
        r.update(&x, &y);
        r.update(&x2, &y2);
        let cat = |p: &Tensor<f64>, q: &Tensor<f64>| {
            Tensor::<f64>::new(
                &[2, 1, 4, 4],
                p.data().iter().chain(q.data()).copied().collect(),
            )
            .unwrap()
        };
        assert!((r.value() - rmse(&cat(&x, &x2), &cat(&y, &y2))).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_toward_the_lower_class() {
        let mut t = Tensor::<f64>::zeros(&[1, 2, 1, 2]);
        // Pixel 0: tie (0,0) → class 0, i.e. probability exactly 0.5 is not
        // "over the threshold". Pixel 1: class 1 strictly ahead.
        t.set(&[0, 1, 0, 1], 0.1);
        assert_eq!(argmax_classes(&t), vec![0, 1]);
    }

    #[test]
    fn f1_counts_match_hand_example() {
        // pred positives {1,2}, target positives {2,3}: tp=1, fp=1, fn=1.
        let pred = vec![0u32, 1, 1, 0];
        let tgt = vec![0u32, 0, 1, 1];
        assert!((boundary_f1(&pred, &tgt) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = report([54.32, 0.5166, 19.21, 77.30]);
        let s = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
        r.validate().unwrap();
        let bad = report([f64::NAN, 1.0, 1.0, 1.0]);
        assert!(bad.validate().is_err());
    }
}
