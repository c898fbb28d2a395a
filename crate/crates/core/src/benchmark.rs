//! Benchmark sweeps over images, compression ratios and algorithms, plus their CSV tables.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{format_psnr, load_image, psnr_slices, ImageBuffer};
use crate::pipeline::{reconstruct, Algorithm, ReconstructionConfig, TraceEntry};
use crate::sensing::{validate_csr, SensingOperator};

pub const BENCHMARK_HEADER: [&str; 7] = [
    "image",
    "csr",
    "algorithm",
    "projection",
    "psnr_db",
    "wall_seconds",
    "config_hash",
];

pub const TRACE_HEADER: [&str; 4] = ["iteration", "data_residual", "psnr_db", "seconds"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
}

/// Parses a manifest: one image per line, either `path` or `name path`.
/// `#` starts a comment; relative paths resolve against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (name, path) = match fields.as_slice() {
            [path] => {
                let stem = Path::new(path)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(path);
                (stem.to_string(), *path)
            }
            [name, path] => (name.to_string(), *path),
            _ => {
                return Err(Error::invalid(format!(
                    "manifest line {}: expected 'path' or 'name path'",
                    lineno + 1
                )))
            }
        };
        let path = Path::new(path);
        let path = if path.is_absolute() {
            path.to_path_buf()
        } else {
            base_dir.join(path)
        };
        entries.push(ManifestEntry { name, path });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Grayscale conversion followed by an area resize, the preprocessing applied to every
/// benchmark image.
pub fn prepare_image(image: &ImageBuffer, height: usize, width: usize) -> Result<ImageBuffer> {
    let gray = if image.channels() == 1 {
        image.clone()
    } else {
        image.to_luma()
    };
    if (gray.height(), gray.width()) == (height, width) {
        Ok(gray)
    } else {
        gray.resize_area(height, width)
    }
}

/// Smallest power of two holding `len` samples.
pub fn operator_order(len: usize) -> usize {
    len.max(1).next_power_of_two()
}

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub csr: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    /// Base configuration; `algorithm` is overridden per row.
    pub config: ReconstructionConfig,
    pub height: usize,
    pub width: usize,
    pub operator_seed: u64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Worker count; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            csr: vec![0.03, 0.05, 0.07, 0.1],
            algorithms: vec![Algorithm::LrGmmSlope],
            config: ReconstructionConfig::default(),
            height: 256,
            width: 256,
            operator_seed: 0,
            noise_sigma: 0.0,
            noise_seed: 0,
            threads: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub image: String,
    pub csr: f64,
    pub algorithm: Algorithm,
    pub projection: String,
    /// `None` when the run failed.
    pub psnr_db: Option<f64>,
    /// PSNR of the clamped `Aᵀ y` image.
    pub baseline_psnr_db: Option<f64>,
    pub wall_seconds: f64,
    pub config_hash: String,
    pub error: Option<String>,
    pub trace: Vec<TraceEntry>,
}

impl BenchmarkRow {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

struct Job<'a> {
    name: &'a str,
    image: &'a std::result::Result<ImageBuffer, String>,
    csr: f64,
    algorithm: Algorithm,
}

fn run_job(job: &Job<'_>, opts: &BenchmarkOptions) -> BenchmarkRow {
    let mut config = opts.config.clone();
    config.algorithm = job.algorithm;
    let mut row = BenchmarkRow {
        image: job.name.to_string(),
        csr: job.csr,
        algorithm: job.algorithm,
        projection: config.resolved_projection().to_string(),
        psnr_db: None,
        baseline_psnr_db: None,
        wall_seconds: 0.0,
        config_hash: config.hash(),
        error: None,
        trace: Vec::new(),
    };
    let start = Instant::now();
    let outcome = job
        .image
        .as_ref()
        .map_err(|e| e.clone())
        .and_then(|img| run_one(img, job.csr, &config, opts).map_err(|e| e.to_string()));
    row.wall_seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((psnr, baseline, trace)) => {
            row.psnr_db = Some(psnr);
            row.baseline_psnr_db = Some(baseline);
            row.trace = trace;
        }
        Err(e) => {
            log::warn!("{} csr={} {}: {e}", job.name, job.csr, job.algorithm);
            row.error = Some(e);
        }
    }
    row
}

fn run_one(
    image: &ImageBuffer,
    csr: f64,
    config: &ReconstructionConfig,
    opts: &BenchmarkOptions,
) -> Result<(f64, f64, Vec<TraceEntry>)> {
    let x = image.pixels();
    let op = SensingOperator::build(operator_order(x.len()), csr, opts.operator_seed)?
        .with_signal_len(x.len())?;
    let m = op.measure(x, opts.noise_sigma, opts.noise_seed)?;
    let adjoint: Vec<f64> = op.adjoint(&m.values)?.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let baseline = psnr_slices(x, &adjoint)?;
    let result = reconstruct(&m, image.height(), image.width(), config, Some(x))?;
    let psnr = psnr_slices(x, &result.image)?;
    Ok((psnr, baseline, result.trace))
}

/// Runs every (image, csr, algorithm) combination. Failures are recorded in their row
/// and do not stop the sweep. Rows come back sorted by (image, csr, algorithm).
pub fn run_benchmark(manifest: &[ManifestEntry], opts: &BenchmarkOptions) -> Result<Vec<BenchmarkRow>> {
    for &csr in &opts.csr {
        validate_csr(csr)?;
    }
    let images: Vec<std::result::Result<ImageBuffer, String>> = manifest
        .iter()
        .map(|e| {
            load_image(&e.path)
                .and_then(|img| prepare_image(&img, opts.height, opts.width))
                .map_err(|err| err.to_string())
        })
        .collect();
    let mut jobs = Vec::new();
    for (entry, image) in manifest.iter().zip(&images) {
        for &csr in &opts.csr {
            for &algorithm in &opts.algorithms {
                jobs.push(Job {
                    name: &entry.name,
                    image,
                    csr,
                    algorithm,
                });
            }
        }
    }
    let run_all = || jobs.par_iter().map(|j| run_job(j, opts)).collect::<Vec<_>>();
    let mut rows = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?
            .install(run_all),
        None => run_all(),
    };
    rows.sort_by(|a, b| {
        a.image
            .cmp(&b.image)
            .then(a.csr.total_cmp(&b.csr))
            .then(a.algorithm.as_str().cmp(b.algorithm.as_str()))
    });
    Ok(rows)
}

fn seconds_field(seconds: f64, timings: bool) -> String {
    if timings {
        format!("{seconds:.3}")
    } else {
        String::new()
    }
}

/// Writes the benchmark table. Wall times are left blank unless `timings` is set, which
/// keeps repeated runs byte-identical.
pub fn write_benchmark_csv<W: Write>(rows: &[BenchmarkRow], out: W, timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCHMARK_HEADER)?;
    for row in rows {
        let psnr = row.psnr_db.map_or_else(|| "failed".to_string(), format_psnr);
        w.write_record([
            row.image.clone(),
            row.csr.to_string(),
            row.algorithm.to_string(),
            row.projection.clone(),
            psnr,
            seconds_field(row.wall_seconds, timings),
            row.config_hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn write_trace_csv<W: Write>(trace: &[TraceEntry], out: W, timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for e in trace {
        w.write_record([
            e.iteration.to_string(),
            format!("{:.6e}", e.data_residual),
            e.psnr_db.map(format_psnr).unwrap_or_default(),
            seconds_field(e.seconds, timings),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// File name used for a row's trace: `{image}_csr{csr}_{algorithm}.csv`.
pub fn trace_file_name(row: &BenchmarkRow) -> String {
    format!("{}_csr{}_{}.csv", row.image, row.csr, row.algorithm)
}

/// Parses a comma-separated list of compression ratios, naming the first bad token.
pub fn parse_csr_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let v: f64 = t
                .parse()
                .map_err(|_| Error::invalid(format!("invalid csr token '{t}'")))?;
            validate_csr(v).map_err(|_| {
                Error::invalid(format!("invalid csr token '{t}': must lie in (0, 1]"))
            })?;
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub psnr_db: Option<f64>,
    pub wall_seconds: f64,
    pub config_hash: String,
    pub error: Option<String>,
}

/// Reconstructs one image at one ratio while varying a single config key.
pub fn run_sweep(
    image: &ImageBuffer,
    csr: f64,
    base: &ReconstructionConfig,
    key: &str,
    values: &[String],
    opts: &BenchmarkOptions,
) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(key, v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let run_all = || {
        configs
            .par_iter()
            .zip(values)
            .map(|(cfg, value)| {
                let start = Instant::now();
                let outcome = run_one(image, csr, cfg, opts);
                let wall_seconds = start.elapsed().as_secs_f64();
                let (psnr_db, error) = match outcome {
                    Ok((p, _, _)) => (Some(p), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                SweepRow {
                    value: value.clone(),
                    psnr_db,
                    wall_seconds,
                    config_hash: cfg.hash(),
                    error,
                }
            })
            .collect::<Vec<_>>()
    };
    Ok(match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?
            .install(run_all),
        None => run_all(),
    })
}

pub fn write_sweep_csv<W: Write>(key: &str, rows: &[SweepRow], out: W, timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([key, "psnr_db", "wall_seconds", "config_hash"])?;
    for row in rows {
        w.write_record([
            row.value.clone(),
            row.psnr_db.map_or_else(|| "failed".to_string(), format_psnr),
            seconds_field(row.wall_seconds, timings),
            row.config_hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_image;

    fn small_opts() -> BenchmarkOptions {
        let mut config = ReconstructionConfig::default();
        config.max_iters = Some(2);
        config.k = Some(2);
        BenchmarkOptions {
            csr: vec![0.5, 0.25],
            height: 16,
            width: 16,
            config,
            threads: Some(2),
            ..Default::default()
        }
    }

    fn gradient_image(dir: &Path) -> PathBuf {
        let px: Vec<f64> = (0..400).map(|i| ((i % 20) as f64 + (i / 20) as f64) / 40.0).collect();
        let path = dir.join("grad.pgm");
        save_image(&path, &ImageBuffer::gray(20, 20, px).unwrap()).unwrap();
        path
    }

    #[test]
    fn manifest_forms() {
        let text = "# images\nbarbara.ppm\nparrot  /abs/kodim23.ppm  # comment\n\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(
            m,
            vec![
                ManifestEntry {
                    name: "barbara".into(),
                    path: "/data/barbara.ppm".into()
                },
                ManifestEntry {
                    name: "parrot".into(),
                    path: "/abs/kodim23.ppm".into()
                },
            ]
        );
        assert!(parse_manifest("a b c", Path::new(".")).is_err());
    }

    #[test]
    fn empty_manifest_gives_header_only() {
        let rows = run_benchmark(&[], &small_opts()).unwrap();
        let mut buf = Vec::new();
        write_benchmark_csv(&rows, &mut buf, false).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "image,csr,algorithm,projection,psnr_db,wall_seconds,config_hash\n"
        );
    }

    #[test]
    fn rows_sorted_and_failures_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let good = gradient_image(dir.path());
        let manifest = vec![
            ManifestEntry {
                name: "zz".into(),
                path: good,
            },
            ManifestEntry {
                name: "missing".into(),
                path: dir.path().join("nope.pgm"),
            },
        ];
        let rows = run_benchmark(&manifest, &small_opts()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].image, "missing");
        assert!(!rows[0].succeeded());
        assert_eq!(rows[2].image, "zz");
        assert!(rows[2].csr < rows[3].csr);
        assert!(rows[2].psnr_db.unwrap() > rows[2].baseline_psnr_db.unwrap() - 5.0);
        let mut buf = Vec::new();
        write_benchmark_csv(&rows, &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("missing,0.25,lr-gmm-slope,acc-gap,failed,,"));
        assert!(lines[3].starts_with("zz,0.25,lr-gmm-slope,acc-gap,"));
    }

    #[test]
    fn csr_list_names_bad_token() {
        assert_eq!(parse_csr_list("0.05, 0.1").unwrap(), vec![0.05, 0.1]);
        let e = parse_csr_list("0.05,abc").unwrap_err().to_string();
        assert!(e.contains("'abc'"), "{e}");
        let e = parse_csr_list("0.05,1.5").unwrap_err().to_string();
        assert!(e.contains("'1.5'"), "{e}");
    }

    #[test]
    fn trace_csv_layout() {
        let trace = vec![TraceEntry {
            iteration: 1,
            data_residual: 0.5,
            psnr_db: Some(20.0),
            seconds: 1.25,
            projection_residual: None,
            objective: None,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf, true).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,data_residual,psnr_db,seconds\n1,5.000000e-1,20.0000,1.250\n"
        );
    }

    #[test]
    fn sweep_one_row_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let img = prepare_image(&load_image(&gradient_image(dir.path())).unwrap(), 16, 16).unwrap();
        let opts = small_opts();
        let values = vec!["1".to_string(), "2".to_string()];
        let rows = run_sweep(&img, 0.5, &opts.config, "k", &values, &opts).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.psnr_db.is_some()));
        assert_ne!(rows[0].config_hash, rows[1].config_hash);
        assert!(run_sweep(&img, 0.5, &opts.config, "bogus", &values, &opts).is_err());
    }
}
