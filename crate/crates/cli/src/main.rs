//! Command-line front end: verification, benchmarking, training, evaluation,
//! and reporting over the library. Exit codes follow one contract everywhere:
//! 0 success, 1 a verification or training failure, 2 usage/config/schema
//! errors. Failures print a single machine-readable JSON line to stderr.

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtk_core::bench::{loglog_slope, run_scan_bench, BenchImpl, BenchRow};
use mtk_core::data::Dataset;
use mtk_core::gradcheck::CheckResult;
use mtk_core::metrics::{delta_m, format_percent, MetricReport};
use mtk_core::model::{count_params_flops, MetricKind, Model, ModelConfig};
use mtk_core::tensor::checkpoint::{read_checkpoint_file, write_checkpoint_file};
use mtk_core::train::{train_model, MetricLine, TrainConfig};
use mtk_core::{verify, Error};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mtk",
    version,
    about = "Selective-scan multi-task toolkit: verify kernels, benchmark scaling, train and evaluate the synthetic-scene model"
)]
struct Cli {
    /// Cap worker threads (equivalent to setting MTK_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference gradient verification at a chosen granularity.
    Gradcheck(GradcheckArgs),
    /// Scan kernels against brute-force oracles and degeneracy identities.
    Oracle(OracleArgs),
    /// Wall-clock scaling of scan kernels vs the attention baseline.
    ScanBench(ScanBenchArgs),
    /// Train the multi-task model on synthetic scenes.
    Train(TrainArgs),
    /// Evaluate a checkpoint and emit a metric report.
    Eval(EvalArgs),
    /// Signed multi-task delta between two metric reports.
    Dm(DmArgs),
    /// Parameter and FLOP counts for the scan and attention variants.
    Count(CountArgs),
    /// Print the default model configuration as JSON.
    DumpConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Kernels,
    Blocks,
    Model,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Granularity: raw kernels, decoder blocks, or encoder + full model.
    #[arg(long, value_enum)]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Max allowed relative error per parameter.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Entries sampled per tensor for block/model scopes (kernels check
    /// every entry regardless). Defaults: 16 for blocks, 2 for model.
    #[arg(long)]
    samples: Option<usize>,
    /// Append a deliberately corrupted gradient that must FAIL, proving the
    /// checker detects mismatches.
    #[arg(long)]
    negative_control: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImplArg {
    Seq,
    Chunked,
    Attention,
}

impl ImplArg {
    fn to_bench(self) -> BenchImpl {
        match self {
            ImplArg::Seq => BenchImpl::Seq,
            ImplArg::Chunked => BenchImpl::Chunked,
            ImplArg::Attention => BenchImpl::Attention,
        }
    }
}

#[derive(Args)]
struct ScanBenchArgs {
    /// Strictly ascending sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,8192")]
    lengths: Vec<usize>,
    /// Implementations to time; repeat the flag to select several.
    /// Defaults to all three.
    #[arg(long = "impl", value_enum)]
    impls: Vec<ImplArg>,
    /// Timed runs per length after one warmup.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Allow the chunked kernel to fan out; by default the benchmark pins
    /// itself to one worker for stable timings.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory (created if missing); all emitted paths live here.
    #[arg(long)]
    out: PathBuf,
    /// Model configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Overrides the config's init seed and derives the data seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-6)]
    weight_decay: f64,
    /// Evaluate every N steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Training scenes to generate.
    #[arg(long, default_value_t = 24)]
    train_n: usize,
    /// Held-out scenes to generate.
    #[arg(long, default_value_t = 8)]
    eval_n: usize,
    /// Square scene extent; must be a multiple of 32.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Swap every mixer for windowed attention.
    #[arg(long)]
    attention: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model configuration JSON; must match the checkpoint's shapes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Must match the seed the training run used for its held-out data.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    eval_n: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long)]
    attention: bool,
    /// Also write report.json into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DmArgs {
    /// Multi-task metric report (JSON).
    #[arg(long)]
    mtl: PathBuf,
    /// Single-task baseline report with the same task list.
    #[arg(long)]
    stl: PathBuf,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

/// Failure modes mapped onto the exit-code contract.
enum Failure {
    /// Bad flags, unreadable/invalid files, schema violations → exit 2.
    Usage(String),
    /// The command ran but verification or training failed → exit 1.
    Check(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 1,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged(_) => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("io error: {e}"))
    }
}

type CmdResult = Result<i32, Failure>;

fn main() {
    let cli = Cli::parse();
    // The worker cap is read once by the library, so it must be decided
    // before any parallel region runs: benchmarks pin to one worker unless
    // asked otherwise, everything else honors --threads.
    match &cli.cmd {
        Cmd::ScanBench(a) if !a.parallel => std::env::set_var("MTK_THREADS", "1"),
        _ => {
            if let Some(t) = cli.threads {
                std::env::set_var("MTK_THREADS", t.to_string());
            }
        }
    }
    let code = match run(cli.cmd) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", serde_json::json!({ "error": f.message() }));
            f.code()
        }
    };
    std::process::exit(code);
}

fn run(cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Oracle(a) => cmd_oracle(a),
        Cmd::ScanBench(a) => cmd_scan_bench(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Dm(a) => cmd_dm(a),
        Cmd::Count(a) => cmd_count(a),
        Cmd::DumpConfig => {
            println!("{}", ModelConfig::default().to_json());
            Ok(0)
        }
    }
}

fn report_checks(results: &[CheckResult], tol: f64) -> usize {
    let mut failed = 0;
    for r in results {
        let ok = r.passes(tol);
        if !ok {
            failed += 1;
        }
        println!("{} {} {:.3e}", if ok { "PASS" } else { "FAIL" }, r.name, r.max_rel_err);
    }
    failed
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut results = match a.scope {
        Scope::Kernels => verify::kernel_gradcheck(a.seed, a.eps),
        Scope::Blocks => verify::block_gradcheck(a.seed, a.eps, a.samples.unwrap_or(16)),
        Scope::Model => verify::model_gradcheck(a.seed, a.eps, a.samples.unwrap_or(2))?,
    };
    if a.negative_control {
        results.push(verify::corrupted_gradient_fixture(a.eps));
    }
    let failed = report_checks(&results, a.tol);
    eprintln!(
        "gradcheck scope={} checked={} failed={failed} tol={:.1e}",
        match a.scope {
            Scope::Kernels => "kernels",
            Scope::Blocks => "blocks",
            Scope::Model => "model",
        },
        results.len(),
        a.tol
    );
    Ok(if failed == 0 { 0 } else { 1 })
}

fn cmd_oracle(a: OracleArgs) -> CmdResult {
    let checks = verify::oracle_battery(a.seed)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.passes();
        if !ok {
            failed += 1;
        }
        println!(
            "{} {} max_err={:.3e} tol={:.1e} cases={}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.max_err,
            c.tol,
            c.cases
        );
    }
    eprintln!("oracle checks={} failed={failed}", checks.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn cmd_scan_bench(a: ScanBenchArgs) -> CmdResult {
    let impls: Vec<BenchImpl> = if a.impls.is_empty() {
        vec![BenchImpl::Seq, BenchImpl::Chunked, BenchImpl::Attention]
    } else {
        a.impls.iter().map(|i| i.to_bench()).collect()
    };
    let emit = |imp: BenchImpl, rows: &[BenchRow]| -> Result<(), Failure> {
        for r in rows {
            println!("{},{},{:.1},{:.1}", r.impl_name, r.l, r.mean_ns, r.stddev_ns);
        }
        if rows.len() >= 2 {
            eprintln!("slope({}) = {:.3}", imp.name(), loglog_slope(rows)?);
        }
        Ok(())
    };
    // The first run validates lengths and repeats before any CSV is emitted.
    let first: Vec<BenchRow> = run_scan_bench(impls[0], &a.lengths, a.repeats)?;
    println!("impl,L,mean_ns,stddev");
    emit(impls[0], &first)?;
    for &imp in &impls[1..] {
        let rows = run_scan_bench(imp, &a.lengths, a.repeats)?;
        emit(imp, &rows)?;
    }
    Ok(0)
}

/// Scene class count implied by the config: the segmentation head covers
/// background plus K shape classes, so K is its width minus one. Configs
/// without a segmentation task keep the generator default.
fn scene_classes(cfg: &ModelConfig) -> usize {
    cfg.tasks
        .iter()
        .find(|t| matches!(t.metric, MetricKind::Miou))
        .map(|t| t.out_dim.saturating_sub(1).max(1))
        .unwrap_or(4)
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig, Failure> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            Ok(ModelConfig::from_json(&text)?)
        }
    }
}

fn build_model(cfg: &ModelConfig, attention: bool) -> Result<Model<f64>, Failure> {
    Ok(if attention { Model::new_attention(cfg)? } else { Model::new(cfg)? })
}

/// Held-out data must be reproducible from the seed alone so `eval` sees
/// exactly what `train` evaluated against.
fn eval_data_seed(seed: u64) -> u64 {
    seed ^ 0x4556_414c
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let seed = cfg.seed;
    let k = scene_classes(&cfg);
    let mut model = build_model(&cfg, a.attention)?;
    let train_data = Dataset::<f64>::generate(seed, a.train_n, a.image_size, a.image_size, k)?;
    let eval_data =
        Dataset::<f64>::generate(eval_data_seed(seed), a.eval_n, a.image_size, a.image_size, k)?;
    let tcfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        weight_decay: a.weight_decay,
        power: 0.9,
        eval_every: a.eval_every,
        sample_seed: seed ^ 0x5a4d,
    };
    let outcome = train_model(&mut model, &train_data, &eval_data, &tcfg)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), cfg.to_json() + "\n")?;
    let run_meta = serde_json::json!({
        "seed": seed,
        "steps": a.steps,
        "lr": a.lr,
        "batch": a.batch,
        "weight_decay": a.weight_decay,
        "train_n": a.train_n,
        "eval_n": a.eval_n,
        "image_size": a.image_size,
        "classes": k,
        "attention": a.attention,
    });
    fs::write(a.out.join("run.json"), format!("{run_meta:#}\n"))?;
    write_checkpoint_file(&a.out.join("checkpoint.mtkp"), &model.store.to_checkpoint())?;
    let mut jsonl = fs::File::create(a.out.join("metrics.jsonl"))?;
    for line in &outcome.metric_lines {
        writeln!(jsonl, "{}", metric_line_json(line))?;
    }
    fs::write(
        a.out.join("losses.json"),
        serde_json::to_string(&outcome.losses).expect("losses serialize") + "\n",
    )?;

    eprintln!(
        "trained {} steps: loss {:.4} -> {:.4}; wrote {}",
        a.steps,
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    println!("{}", report_json(&outcome.final_report));
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let seed = cfg.seed;
    let mut model = build_model(&cfg, a.attention)?;
    let entries = read_checkpoint_file(&a.checkpoint)?;
    model.store.load_checkpoint(entries)?;
    let k = scene_classes(&cfg);
    let eval_data =
        Dataset::<f64>::generate(eval_data_seed(seed), a.eval_n, a.image_size, a.image_size, k)?;
    let report = mtk_core::train::eval_model(&model, &eval_data, a.batch)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), report_json(&report) + "\n")?;
    }
    println!("{}", report_json(&report));
    Ok(0)
}

fn cmd_dm(a: DmArgs) -> CmdResult {
    let mtl = read_report(&a.mtl)?;
    let stl = read_report(&a.stl)?;
    let dm = delta_m(&mtl, &stl)?;
    println!("{}", format_percent(dm));
    Ok(0)
}

fn cmd_count(a: CountArgs) -> CmdResult {
    let cfg = load_config(&a.config)?;
    let scan = count_params_flops(
        &cfg,
        a.image_size,
        a.image_size,
        mtk_core::blocks::MixerKind::Scan { tied: cfg.tied_dirs },
    )?;
    let attn = count_params_flops(
        &cfg,
        a.image_size,
        a.image_size,
        mtk_core::blocks::MixerKind::Attn { window: cfg.window, heads: cfg.heads },
    )?;
    let out = serde_json::json!({
        "scan": { "params": scan.params, "flops": scan.flops },
        "attention": { "params": attn.params, "flops": attn.flops },
    });
    println!("{out:#}");
    Ok(0)
}

fn read_report(path: &Path) -> Result<MetricReport, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let report: MetricReport = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    report.validate()?;
    Ok(report)
}

fn report_json(r: &MetricReport) -> String {
    serde_json::to_string(r).expect("report serializes")
}

fn metric_line_json(l: &MetricLine) -> String {
    serde_json::to_string(l).expect("metric line serializes")
}
