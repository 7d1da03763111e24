//! Sequence-length scaling measurements: wall-clock the 1D selective scan
//! (sequential or chunked) against the attention core at matched sizes, and
//! fit a log-log slope to expose the complexity exponent.
//!
//! The scan runs at Cinner = 16, N = 8; attention runs the same channel
//! width as one head over a window covering the whole sequence, so its cost
//! is the full quadratic core with no projections. Inputs are built once per
//! length; every timed run sees identical data.

use crate::attention::window_attention;
use crate::ssm::{selective_scan_chunked, selective_scan_seq, SsmParams};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use std::time::Instant;

pub const BENCH_CINNER: usize = 16;
pub const BENCH_STATE: usize = 8;
pub const BENCH_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchImpl {
    Seq,
    Chunked,
    Attention,
}

impl BenchImpl {
    pub fn name(self) -> &'static str {
        match self {
            BenchImpl::Seq => "seq",
            BenchImpl::Chunked => "chunked",
            BenchImpl::Attention => "attention",
        }
    }
}

impl std::str::FromStr for BenchImpl {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(BenchImpl::Seq),
            "chunked" => Ok(BenchImpl::Chunked),
            "attention" => Ok(BenchImpl::Attention),
            other => Err(Error::Invalid(format!(
                "unknown impl {other:?}, expected seq|chunked|attention"
            ))),
        }
    }
}

/// One measured point: mean and population standard deviation over the
/// timed repeats (a single repeat therefore reports exactly zero spread).
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub impl_name: &'static str,
    pub l: usize,
    pub mean_ns: f64,
    pub stddev_ns: f64,
}

fn time_runs<F: FnMut()>(mut f: F, repeats: usize) -> (f64, f64) {
    // One untimed warmup settles allocator and cache state.
    f();
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f();
        samples.push(t0.elapsed().as_nanos() as f64);
    }
    let mean = samples.iter().sum::<f64>() / repeats as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / repeats as f64;
    (mean, var.sqrt())
}

/// Times `imp` in f32 at each length. Lengths must be strictly ascending and
/// positive; `repeats` ≥ 1 timed runs follow one warmup per length.
pub fn run_scan_bench(
    imp: BenchImpl,
    lengths: &[usize],
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if lengths.is_empty() {
        return Err(Error::Invalid("need at least one length".into()));
    }
    if !lengths.windows(2).all(|w| w[0] < w[1]) || lengths[0] == 0 {
        return Err(Error::Invalid(format!("lengths must ascend from 1, got {lengths:?}")));
    }
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let params = SsmParams::<f32>::init(&mut rng, BENCH_CINNER, BENCH_STATE);
    let mut rows = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let seq = Tensor::<f32>::from_fn(&[l, BENCH_CINNER], |_| rng.gen_range(-1.0..1.0));
        let (mean_ns, stddev_ns) = match imp {
            BenchImpl::Seq => {
                time_runs(|| { black_box(selective_scan_seq(&params, &seq, &seq).unwrap()); }, repeats)
            }
            BenchImpl::Chunked => time_runs(
                || {
                    black_box(
                        selective_scan_chunked(&params, &seq, &seq, BENCH_CHUNK).unwrap(),
                    );
                },
                repeats,
            ),
            BenchImpl::Attention => {
                // The whole sequence as one [1,1,L,C] map under a window of
                // L cells: global attention, exercising the quadratic core.
                let map = Tensor::<f32>::new(&[1, 1, l, BENCH_CINNER], seq.data().to_vec())?;
                time_runs(
                    || {
                        black_box(window_attention(&map, &map, &map, l, 1).unwrap());
                    },
                    repeats,
                )
            }
        };
        rows.push(BenchRow { impl_name: imp.name(), l, mean_ns, stddev_ns });
    }
    Ok(rows)
}

/// Least-squares slope of ln(mean_ns) against ln(L); the scaling exponent.
pub fn loglog_slope(rows: &[BenchRow]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Invalid("slope fit needs at least two lengths".into()));
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().map(|r| ((r.l as f64).ln(), r.mean_ns.max(1.0).ln())).collect();
    let n = pts.len() as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - xm) * (p.0 - xm)).sum();
    if den == 0.0 {
        return Err(Error::Invalid("slope fit needs distinct lengths".into()));
    }
    Ok(num / den)
}
