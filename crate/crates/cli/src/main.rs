//! `hot`: self-tests, training, calibration, error analysis and cost
//! benchmarks for Hadamard-quantized backpropagation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hot_core::backward::TokenAxis;
use hot_core::cost::{CostReport, TABLE6_DIMS};
use hot_core::hadamard::{BasisOrdering, HadamardConfig};
use hot_core::harness::study::standard_study;
use hot_core::harness::train::TrainMode;
use hot_core::harness::RunConfig;
use hot_core::lqs::{calibrate, granularity_name, save_policy, DEFAULT_CALIBRATION_BATCHES, DEFAULT_THRESHOLD};
use hot_core::{selftest, HotError, Rng};

#[derive(Parser, Debug)]
#[command(name = "hot", version, about = "Hadamard-quantized backpropagation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant self-test suite.
    Selftest(Common),
    /// Train a model and write the training record.
    Train(Common),
    /// Calibrate per-layer gradient quantizer granularity and write a policy.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_CALIBRATION_BATCHES)]
        batches: usize,
    },
    /// Layer-wise gradient error study on a random-init chain.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
    },
    /// Evaluate the cost model for a list of (L, O, I) layer shapes.
    Bench(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Layer shapes `L,O,I[;L,O,I…]`.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_parser = ["fp", "hot"])]
    mode: Option<String>,
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Failure(String),
    Usage(String),
    Config(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Failure(m) => ("failure", m),
            CliError::Usage(m) => ("usage", m),
            CliError::Config(m) => ("config", m),
            CliError::Data(m) => ("data", m),
        };
        format!("hot: error[{kind}]: {}", msg.replace('\n', " "))
    }
}

/// Errors from loading or applying configuration.
fn config_err(e: HotError) -> CliError {
    match e {
        HotError::Data(m) => CliError::Data(m),
        other => CliError::Config(other.to_string()),
    }
}

/// Errors raised while running a computation.
fn run_err(e: HotError) -> CliError {
    match e {
        HotError::Data(m) => CliError::Data(m),
        e @ (HotError::Parse { .. } | HotError::InvalidArgument(_) | HotError::Granularity(_)) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Failure(other.to_string()),
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            HotError::Io(io) => CliError::Config(format!("{}: {io}", path.display())),
            other => config_err(other),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(tile) = common.tile {
        cfg.tile = tile;
    }
    if let Some(rank) = common.rank {
        cfg.rank = rank;
    }
    if let Some(mode) = &common.mode {
        cfg.mode = if mode == "fp" { TrainMode::FpOracle } else { TrainMode::Hot };
    }
    if let Some(policy) = &common.policy {
        cfg.policy_path = Some(policy.clone());
    }
    cfg.train_config().map_err(config_err)?;
    Ok(cfg)
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Failure(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_out(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

/// Writes `contents` to `out` or, without a path, to stdout.
fn emit(out: Option<&Path>, contents: &str) -> CliResult<()> {
    match out {
        Some(p) => write_out(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn hadamard_of(cfg: &RunConfig) -> CliResult<HadamardConfig> {
    HadamardConfig::new(cfg.tile, cfg.rank, BasisOrdering::LpL1).map_err(config_err)
}

fn cmd_selftest(common: &Common) -> CliResult<()> {
    let outcomes = selftest::run_all(common.seed.unwrap_or(0));
    let mut report = String::new();
    let mut failed = 0;
    for o in &outcomes {
        match &o.failure {
            None => writeln!(report, "ok   {}", o.name).unwrap(),
            Some(reason) => {
                failed += 1;
                writeln!(report, "FAIL {}: {reason}", o.name).unwrap();
            }
        }
    }
    writeln!(report, "selftest: {} passed, {failed} failed", outcomes.len() - failed).unwrap();
    emit(common.out.as_deref(), &report)?;
    if common.out.is_some() {
        print!("{}", report.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
    }
    if failed > 0 {
        return Err(CliError::Failure(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}

fn cmd_train(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let record = cfg.run().map_err(run_err)?;
    emit(common.out.as_deref(), &to_json(&record)?)?;
    if let Some(out) = &common.out {
        let meta = serde_json::json!({ "wall_clock_s": record.wall_clock_s });
        write_out(&sibling(out, ".meta.json"), &to_json(&meta)?)?;
    }
    eprintln!(
        "train: mode {:?}, {} epochs, final accuracy {:.4}",
        record.mode,
        record.epochs.len(),
        record.final_accuracy
    );
    Ok(())
}

fn cmd_calibrate(common: &Common, threshold: f64, batches: usize) -> CliResult<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("--threshold must lie in [0, 1], got {threshold}")));
    }
    let cfg = load_config(common)?;
    let data = cfg.build_dataset().map_err(|e| match e {
        HotError::Io(io) => CliError::Data(io.to_string()),
        other => config_err(other),
    })?;
    let model = cfg.build_model(&data).map_err(run_err)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(cfg.seed).fork(3).shuffle(&mut order);
    let calib: Vec<_> = data.batches(&order, cfg.batch_size).into_iter().take(batches).collect();
    let (policy, selections) = calibrate(&model, &calib, threshold, cfg.seed, TokenAxis::Contracted).map_err(run_err)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("policy.txt"));
    save_policy(&policy, &out).map_err(|e| CliError::Failure(e.to_string()))?;
    for s in &selections {
        println!(
            "{:<16} e_token {:>12.6e}  e_tensor {:>12.6e}  -> {}",
            s.layer_id,
            s.e_token,
            s.e_tensor,
            granularity_name(s.choice)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    table: &'a hot_core::harness::study::StudyTable,
}

fn cmd_analyze(common: &Common, depth: usize, width: usize, tokens: usize) -> CliResult<()> {
    let cfg = load_config(common)?;
    let hadamard = hadamard_of(&cfg)?;
    if depth < 2 || width == 0 || tokens == 0 {
        return Err(CliError::Usage("analyze needs --depth ≥ 2 and positive --width/--tokens".into()));
    }
    let table = standard_study(cfg.seed, width, depth, tokens, hadamard).map_err(run_err)?;
    let report = AnalyzeReport {
        command: "analyze",
        seed: cfg.seed,
        config: serde_json::json!({
            "tile": hadamard.tile,
            "rank": hadamard.rank,
            "depth": depth,
            "width": width,
            "tokens": tokens,
        }),
        table: &table,
    };
    let json = to_json(&report)?;
    match &common.out {
        Some(out) => {
            write_out(out, &json)?;
            write_out(&sibling(out, ".txt"), &table.to_text())?;
            print!("{}", table.to_text());
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn parse_dims(spec: &str) -> CliResult<Vec<(String, [u64; 3])>> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let parts: Vec<&str> = s.split(',').map(str::trim).collect();
            let nums: Result<Vec<u64>, _> = parts.iter().map(|p| p.parse::<u64>()).collect();
            match nums {
                Ok(n) if n.len() == 3 => Ok((format!("({},{},{})", n[0], n[1], n[2]), [n[0], n[1], n[2]])),
                _ => Err(CliError::Usage(format!("--dims entry {s:?} is not L,O,I"))),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct BenchReport<'a> {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    report: &'a CostReport,
}

fn bench_text(report: &CostReport) -> String {
    let mut s = format!(
        "{:<34} {:>14} {:>12} {:>12} {:>12} {:>9} {:>9} {:>8}\n",
        "layer", "vanilla", "gx_ovh", "gw_ovh", "dequant", "ovh/van", "bops_red", "mem"
    );
    let row = |s: &mut String, name: &str, van: u64, gx: u64, gw: u64, dq: u64, fp: f64, hot: f64, mf: u64, ma: u64| {
        let ratio = if van > 0 { (gx + gw + dq) as f64 / van as f64 } else { 0.0 };
        let red = if fp > 0.0 { 1.0 - hot / fp } else { 0.0 };
        let mem = if mf > 0 { ma as f64 / mf as f64 } else { 0.0 };
        writeln!(s, "{name:<34} {van:>14} {gx:>12} {gw:>12} {dq:>12} {ratio:>9.4} {red:>9.4} {mem:>8.4}").unwrap();
    };
    for c in &report.layers {
        row(
            &mut s,
            &c.name,
            c.vanilla_bp_flops,
            c.gx_overhead_flops,
            c.gw_overhead_flops,
            c.dequant_flops,
            c.fp_bops,
            c.hot_bops,
            c.activation_bytes_fp,
            c.activation_bytes_abc,
        );
    }
    let t = &report.total;
    row(
        &mut s,
        "total",
        t.vanilla_bp_flops,
        t.gx_overhead_flops,
        t.gw_overhead_flops,
        t.dequant_flops,
        t.fp_bops,
        t.hot_bops,
        t.activation_bytes_fp,
        t.activation_bytes_abc,
    );
    s
}

fn cmd_bench(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dims = match &common.dims {
        Some(spec) => parse_dims(spec)?,
        None => TABLE6_DIMS.iter().map(|(m, n, d)| (format!("{m}/{n}"), *d)).collect(),
    };
    if dims.is_empty() {
        return Err(CliError::Usage("--dims is empty".into()));
    }
    let backward = cfg.train_config().map_err(config_err)?.backward;
    let report = CostReport::for_dims(&dims, &backward).map_err(run_err)?;
    let out = BenchReport {
        command: "bench",
        seed: cfg.seed,
        config: serde_json::json!({
            "tile": cfg.tile,
            "rank": cfg.rank,
            "gx_bits": cfg.gx_bits,
            "gw_bits": cfg.gw_bits,
            "dims": dims.iter().map(|(_, d)| d.to_vec()).collect::<Vec<_>>(),
        }),
        report: &report,
    };
    let json = to_json(&out)?;
    match &common.out {
        Some(path) => {
            write_out(path, &json)?;
            print!("{}", bench_text(&report));
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("HOT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("HOT_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failure(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Selftest(c) => cmd_selftest(c),
        Command::Train(c) => cmd_train(c),
        Command::Calibrate {
            common,
            threshold,
            batches,
        } => cmd_calibrate(common, *threshold, *batches),
        Command::Analyze {
            common,
            depth,
            width,
            tokens,
        } => cmd_analyze(common, *depth, *width, *tokens),
        Command::Bench(c) => cmd_bench(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
