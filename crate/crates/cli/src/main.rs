use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use csgmm::benchmark::{
    load_manifest, parse_csr_list, prepare_image, run_benchmark, run_sweep, trace_file_name,
    write_benchmark_csv, write_sweep_csv, write_trace_csv, BenchmarkOptions, operator_order,
};
use csgmm::image::{format_psnr, load_image, save_image, ImageBuffer};
use csgmm::pipeline::{reconstruct_image, Algorithm, ReconstructionConfig};
use csgmm::sensing::{validate_csr, Measurement, SensingOperator};

const THREADS_ENV: &str = "CS_GMM_THREADS";

#[derive(Parser)]
#[command(name = "csgmm", version, about = "Compressive sensing reconstruction with low-rank GMM patch priors")]
struct Cli {
    /// Increase log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure an image with a permuted Hadamard operator.
    Simulate(SimulateArgs),
    /// Reconstruct an image from measurement files.
    Reconstruct(ReconstructArgs),
    /// Run images x compression ratios x algorithms and write a PSNR table.
    Benchmark(BenchmarkArgs),
    /// Reconstruct one image while varying a single config key.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    csr: f64,
    /// Operator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Convert colour input to luma first.
    #[arg(long)]
    gray: bool,
    /// Resize (area average) to HxW before measuring.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Output file; `.txt` writes the text format. Colour images write one file per
    /// channel with `_c0`, `_c1`, `_c2` appended to the stem.
    #[arg(long)]
    out: PathBuf,
}

/// Overrides for individual config keys.
#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    projection: Option<String>,
    #[arg(long, alias = "max_iters")]
    max_iters: Option<String>,
    #[arg(long, alias = "K")]
    k: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    sigma2: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    zeta: Option<String>,
    #[arg(long, alias = "patch_side")]
    patch_side: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    #[arg(long, alias = "em_iters_per_outer")]
    em_iters_per_outer: Option<String>,
    /// EM initialization seed.
    #[arg(long = "seed")]
    seed: Option<String>,
    #[arg(long, alias = "warm_start")]
    warm_start: Option<String>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Measurement file; give three for a colour image.
    #[arg(long = "measurement", required = true)]
    measurements: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Image size HxW; defaults to the reference size, or a square image.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fill timing columns of the trace.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Manifest: one `path` or `name path` per line.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "0.03,0.05,0.07,0.1")]
    csr: String,
    #[arg(long, default_value = "lr-gmm-slope")]
    algorithms: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_parser = parse_size, default_value = "256x256")]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    operator_seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-run trace CSVs.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Fill the wall_seconds and seconds columns.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    csr: f64,
    /// Config key to vary.
    #[arg(long)]
    param: String,
    /// Comma-separated values for the key.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_parser = parse_size, default_value = "256x256")]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    operator_seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timings: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(h), parse(w)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(format!("expected HxW with positive sizes, got '{s}'")),
    }
}

/// Error carrying the process exit code: 2 for usage errors, 1 for runtime failures.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

impl From<csgmm::Error> for Failure {
    fn from(e: csgmm::Error) -> Self {
        match e {
            csgmm::Error::InvalidArgument(_) => usage(e),
            other => runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ReconstructionConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))
                    .map_err(runtime)?;
                ReconstructionConfig::parse(&text)?
            }
            None => ReconstructionConfig::default(),
        };
        let flags = [
            ("algorithm", &self.algorithm),
            ("projection", &self.projection),
            ("max_iters", &self.max_iters),
            ("k", &self.k),
            ("gamma", &self.gamma),
            ("sigma2", &self.sigma2),
            ("beta", &self.beta),
            ("eta", &self.eta),
            ("lambda", &self.lambda),
            ("zeta", &self.zeta),
            ("patch_side", &self.patch_side),
            ("stride", &self.stride),
            ("em_iters_per_outer", &self.em_iters_per_outer),
            ("seed", &self.seed),
            ("warm_start", &self.warm_start),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_header(command: &str, config: &ReconstructionConfig) {
    eprintln!("csgmm {command}");
    for (key, value) in config.key_values() {
        eprintln!("  {key} = {value}");
    }
    eprintln!(
        "  (resolved: projection={} max_iters={} k={} gamma={})",
        config.resolved_projection(),
        config.resolved_max_iters(),
        config.resolved_k(),
        config.resolved_gamma()
    );
    eprintln!("  config_hash = {}", config.hash());
}

fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| usage(anyhow!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn channel_path(out: &Path, channel: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("measurement");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_c{channel}.{ext}"),
        None => format!("{stem}_c{channel}"),
    };
    out.with_file_name(name)
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult {
    validate_csr(args.csr)?;
    let mut image = load_image(&args.image)?;
    if args.gray && image.channels() == 3 {
        image = image.to_luma();
    }
    if let Some((h, w)) = args.size {
        image = image.resize_area(h, w)?;
    }
    let n = image.plane_len();
    let op = SensingOperator::build(operator_order(n), args.csr, args.seed)?.with_signal_len(n)?;
    let measurements = (0..image.channels())
        .map(|c| op.measure(image.channel(c), args.noise_sigma, args.noise_seed.wrapping_add(c as u64)))
        .collect::<csgmm::Result<Vec<_>>>()?;
    let paths: Vec<PathBuf> = if measurements.len() == 1 {
        vec![args.out.clone()]
    } else {
        (0..measurements.len()).map(|c| channel_path(&args.out, c)).collect()
    };
    for (m, path) in measurements.iter().zip(&paths) {
        m.save(path)?;
    }
    eprintln!(
        "csgmm simulate: image {}x{}x{} M={} N={} seed={}",
        image.height(),
        image.width(),
        image.channels(),
        op.num_rows(),
        op.order(),
        op.seed()
    );
    for path in &paths {
        eprintln!("  wrote {}", path.display());
    }
    Ok(())
}

fn infer_size(
    size: Option<(usize, usize)>,
    reference: Option<&ImageBuffer>,
    order: usize,
) -> CliResult<(usize, usize)> {
    if let Some(s) = size {
        return Ok(s);
    }
    if let Some(r) = reference {
        return Ok((r.height(), r.width()));
    }
    let side = (order as f64).sqrt().round() as usize;
    if side * side == order {
        Ok((side, side))
    } else {
        Err(usage(anyhow!("image size unknown; pass --size HxW or --reference")))
    }
}

fn cmd_reconstruct(args: &ReconstructArgs) -> CliResult {
    let config = args.config.resolve()?;
    if args.measurements.len() != 1 && args.measurements.len() != 3 {
        return Err(usage(anyhow!(
            "expected 1 or 3 measurement files, got {}",
            args.measurements.len()
        )));
    }
    print_header("reconstruct", &config);
    let measurements = args
        .measurements
        .iter()
        .map(|p| Measurement::load(p))
        .collect::<csgmm::Result<Vec<_>>>()?;
    let reference = match &args.reference {
        Some(path) => {
            let img = load_image(path)?;
            Some(if measurements.len() == 1 && img.channels() == 3 {
                img.to_luma()
            } else {
                img
            })
        }
        None => None,
    };
    let (h, w) = infer_size(args.size, reference.as_ref(), measurements[0].order)?;
    let result = reconstruct_image(&measurements, h, w, &config, reference.as_ref())?;

    let mut traces = Vec::new();
    if let Some(path) = &args.trace {
        for (c, channel) in result.channels.iter().enumerate() {
            let mut buf = Vec::new();
            write_trace_csv(&channel.trace, &mut buf, args.timings)?;
            let target = if result.channels.len() == 1 {
                path.clone()
            } else {
                channel_path(path, c)
            };
            traces.push((target, buf));
        }
    }
    save_image(&args.out, &result.image)?;
    for (path, bytes) in traces {
        fs::write(&path, bytes)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?;
    }
    let iters = result.channels.first().map_or(0, |c| c.iterations_run);
    eprintln!("  iterations = {iters}");
    eprintln!("  wrote {}", args.out.display());
    if let Some(db) = result.psnr_db {
        eprintln!("  psnr_db = {}", format_psnr(db));
    }
    Ok(())
}

fn parse_algorithms(text: &str) -> CliResult<Vec<Algorithm>> {
    let algs = text
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Algorithm>())
        .collect::<csgmm::Result<Vec<_>>>()?;
    if algs.is_empty() {
        return Err(usage(anyhow!("--algorithms is empty")));
    }
    Ok(algs)
}

fn cmd_benchmark(args: &BenchmarkArgs) -> CliResult {
    let csr = parse_csr_list(&args.csr)?;
    let algorithms = parse_algorithms(&args.algorithms)?;
    let config = args.config.resolve()?;
    for &alg in &algorithms {
        let mut c = config.clone();
        c.algorithm = alg;
        c.validate()?;
    }
    let threads = threads_from_env()?;
    print_header("benchmark", &config);
    let manifest = load_manifest(&args.manifest)?;
    let opts = BenchmarkOptions {
        csr,
        algorithms,
        config,
        height: args.size.0,
        width: args.size.1,
        operator_seed: args.operator_seed,
        threads,
        ..Default::default()
    };
    let rows = run_benchmark(&manifest, &opts)?;
    let mut buf = Vec::new();
    write_benchmark_csv(&rows, &mut buf, args.timings)?;
    fs::write(&args.out, buf)
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(runtime)?;
    if let Some(dir) = &args.trace_dir {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
        for row in rows.iter().filter(|r| r.succeeded()) {
            let mut buf = Vec::new();
            write_trace_csv(&row.trace, &mut buf, args.timings)?;
            let path = dir.join(trace_file_name(row));
            fs::write(&path, buf)
                .with_context(|| format!("writing {}", path.display()))
                .map_err(runtime)?;
        }
    }
    let ok = rows.iter().filter(|r| r.succeeded()).count();
    for row in &rows {
        match (&row.psnr_db, &row.error) {
            (Some(db), _) => eprintln!(
                "  {} csr={} {}: {} dB",
                row.image,
                row.csr,
                row.algorithm,
                format_psnr(*db)
            ),
            (None, Some(e)) => eprintln!("  {} csr={} {}: failed: {e}", row.image, row.csr, row.algorithm),
            _ => {}
        }
    }
    eprintln!("  {ok}/{} runs succeeded; wrote {}", rows.len(), args.out.display());
    if !rows.is_empty() && ok == 0 {
        return Err(runtime(anyhow!("every benchmark run failed")));
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CliResult {
    validate_csr(args.csr)?;
    let config = args.config.resolve()?;
    let values: Vec<String> = args
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(usage(anyhow!("--values is empty")));
    }
    let threads = threads_from_env()?;
    print_header("sweep", &config);
    let image = prepare_image(&load_image(&args.image)?, args.size.0, args.size.1)?;
    let opts = BenchmarkOptions {
        height: args.size.0,
        width: args.size.1,
        operator_seed: args.operator_seed,
        threads,
        ..Default::default()
    };
    let rows = run_sweep(&image, args.csr, &config, &args.param, &values, &opts)?;
    let mut buf = Vec::new();
    write_sweep_csv(&args.param, &rows, &mut buf, args.timings)?;
    fs::write(&args.out, buf)
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(runtime)?;
    for row in &rows {
        match row.psnr_db {
            Some(db) => eprintln!("  {}={}: {} dB", args.param, row.value, format_psnr(db)),
            None => eprintln!(
                "  {}={}: failed: {}",
                args.param,
                row.value,
                row.error.as_deref().unwrap_or("")
            ),
        }
    }
    if rows.iter().all(|r| r.psnr_db.is_none()) {
        return Err(runtime(anyhow!("every sweep run failed")));
    }
    Ok(())
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}
