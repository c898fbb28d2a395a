//! Reconstruction loops: measurement-projection steps interleaved with patch-prior updates.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::dct::{solve_z_step, PatchBasis};
use crate::error::{check_len, Error, Result};
use crate::gmm::{em_fit, evt_lowrank, EmOptions, GmmModel, LowRankGmm};
use crate::image::{psnr_slices, ImageBuffer};
use crate::patches::{PatchGrid, PatchSet};
use crate::ple::{ple_estep, ple_lowrank, ple_mstep, PleModel};
use crate::sensing::{Measurement, SensingOperator};
use crate::solvers::{
    acc_gap_step, admm_v_step, admm_w_step, admm_x_step, data_residual, gap_step, ist_step,
    SolverState,
};

/// EM stops early inside an outer iteration once the mean log-likelihood gain drops below this.
pub const EM_TOL: f64 = 1e-6;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::invalid(format!(
                        "unknown {} '{s}'; expected one of: {}",
                        stringify!($name).to_lowercase(),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Algorithm {
    AdmmSlope => "admm-slope",
    LrGmmSlope => "lr-gmm-slope",
    LrPleSlope => "lr-ple-slope",
});

keyword_enum!(Projection {
    Ist => "ist",
    Gap => "gap",
    AccGap => "acc-gap",
    Admm => "admm",
});

keyword_enum!(WarmStart {
    Zero => "zero",
    Adjoint => "adjoint",
});

/// Settings for one reconstruction. `None` fields resolve to defaults that depend on
/// other fields (see the `resolved_*` methods) and are written as `auto`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionConfig {
    pub algorithm: Algorithm,
    pub projection: Option<Projection>,
    pub max_iters: Option<usize>,
    pub k: Option<usize>,
    pub gamma: Option<usize>,
    pub sigma2: f64,
    pub beta: f64,
    pub eta: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub patch_side: usize,
    pub stride: usize,
    pub em_iters_per_outer: usize,
    pub seed: u64,
    pub warm_start: WarmStart,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::LrGmmSlope,
            projection: None,
            max_iters: None,
            k: None,
            gamma: None,
            sigma2: 1e-5,
            beta: 0.5,
            eta: 1.0,
            lambda: 0.05,
            zeta: 1.0,
            patch_side: 8,
            stride: 4,
            em_iters_per_outer: 5,
            seed: 0,
            warm_start: WarmStart::Adjoint,
        }
    }
}

/// Config keys in canonical order.
pub const CONFIG_KEYS: &[&str] = &[
    "algorithm",
    "projection",
    "max_iters",
    "k",
    "gamma",
    "sigma2",
    "beta",
    "eta",
    "lambda",
    "zeta",
    "patch_side",
    "stride",
    "em_iters_per_outer",
    "seed",
    "warm_start",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("invalid value '{value}' for {key}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn show_auto<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl ReconstructionConfig {
    pub fn resolved_projection(&self) -> Projection {
        self.projection.unwrap_or(match self.algorithm {
            Algorithm::AdmmSlope => Projection::Admm,
            _ => Projection::AccGap,
        })
    }

    pub fn resolved_max_iters(&self) -> usize {
        self.max_iters.unwrap_or(match self.warm_start {
            WarmStart::Adjoint => 20,
            WarmStart::Zero => 50,
        })
    }

    pub fn resolved_k(&self) -> usize {
        self.k.unwrap_or(match self.algorithm {
            Algorithm::LrPleSlope => 20,
            _ => 6,
        })
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn resolved_gamma(&self) -> usize {
        self.gamma.unwrap_or((self.patch_dim() / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma2", self.sigma2),
            ("beta", self.beta),
            ("eta", self.eta),
            ("zeta", self.zeta),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.patch_side == 0 || self.stride == 0 || self.em_iters_per_outer == 0 {
            return Err(Error::invalid("patch_side, stride and em_iters_per_outer must be positive"));
        }
        if self.resolved_k() == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let p = self.patch_dim();
        let gamma = self.resolved_gamma();
        if self.algorithm != Algorithm::AdmmSlope && (gamma == 0 || gamma >= p) {
            return Err(Error::invalid(format!("gamma {gamma} outside 1..{p}")));
        }
        if self.algorithm == Algorithm::AdmmSlope && self.resolved_projection() != Projection::Admm {
            return Err(Error::invalid("admm-slope requires projection admm"));
        }
        Ok(())
    }

    /// Sets one key. `K` is accepted as an alias of `k`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "algorithm" => self.algorithm = value.parse()?,
            "projection" => self.projection = if value == "auto" { None } else { Some(value.parse()?) },
            "max_iters" => self.max_iters = parse_auto(key, value)?,
            "k" | "K" => self.k = parse_auto(key, value)?,
            "gamma" => self.gamma = parse_auto(key, value)?,
            "sigma2" => self.sigma2 = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "eta" => self.eta = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "zeta" => self.zeta = parse_num(key, value)?,
            "patch_side" => self.patch_side = parse_num(key, value)?,
            "stride" => self.stride = parse_num(key, value)?,
            "em_iters_per_outer" => self.em_iters_per_outer = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "warm_start" => self.warm_start = value.parse()?,
            other => {
                return Err(Error::invalid(format!(
                    "unknown config key '{other}'; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses flat `key = value` text; `#` starts a comment. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("algorithm", self.algorithm.to_string()),
            ("projection", show_auto(self.projection)),
            ("max_iters", show_auto(self.max_iters)),
            ("k", show_auto(self.k)),
            ("gamma", show_auto(self.gamma)),
            ("sigma2", self.sigma2.to_string()),
            ("beta", self.beta.to_string()),
            ("eta", self.eta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("zeta", self.zeta.to_string()),
            ("patch_side", self.patch_side.to_string()),
            ("stride", self.stride.to_string()),
            ("em_iters_per_outer", self.em_iters_per_outer.to_string()),
            ("seed", self.seed.to_string()),
            ("warm_start", self.warm_start.to_string()),
        ]
    }

    /// One `key=value` line per key, in canonical order.
    pub fn to_text(&self) -> String {
        self.key_values()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    /// 1-based outer iteration.
    pub iteration: usize,
    /// `‖y − A x̂‖` of the iterate's image estimate.
    pub data_residual: f64,
    /// PSNR of the output image at this iteration, when a reference was supplied.
    pub psnr_db: Option<f64>,
    /// Seconds since the run started.
    pub seconds: f64,
    /// Residual of the projected iterate against the vector it was projected onto
    /// (`y`, or the running measurement for accelerated GAP); `None` for ADMM.
    pub projection_residual: Option<f64>,
    /// ADMM-SLOPE objective `½‖y − Ax‖² + λ‖z‖₁ + η/2 Σ‖R_i w − B z_i‖²`.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub height: usize,
    pub width: usize,
    /// Output image in `[0, 1]`, row-major.
    pub image: Vec<f64>,
    pub iterations_run: usize,
    pub trace: Vec<TraceEntry>,
    /// Low-rank mixture used in the last iteration (GMM and PLE runs).
    pub final_model: Option<LowRankGmm>,
    /// Class assignments after each iteration (PLE runs).
    pub assignment_history: Vec<Vec<usize>>,
}

/// Initial iterate: zeros, or `Aᵀ y`.
pub fn warm_start(op: &SensingOperator, y: &[f64], mode: WarmStart) -> Result<Vec<f64>> {
    match mode {
        WarmStart::Zero => Ok(vec![0.0; op.signal_len()]),
        WarmStart::Adjoint => op.adjoint(y),
    }
}

/// Output image: `clamp(x + Aᵀ(y − A x), 0, 1)`. In the noiseless case the projection onto
/// `{A x = y}` and the clamp both move the estimate no farther from the true image.
pub fn finalize_estimate(op: &SensingOperator, y: &[f64], estimate: &[f64]) -> Result<Vec<f64>> {
    let mut out = gap_step(op, y, estimate)?;
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

fn clamp01(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

struct Run<'a> {
    op: SensingOperator,
    y: &'a [f64],
    height: usize,
    width: usize,
    reference: Option<&'a [f64]>,
    start: Instant,
    trace: Vec<TraceEntry>,
}

impl<'a> Run<'a> {
    fn new(
        measurement: &'a Measurement,
        height: usize,
        width: usize,
        config: &ReconstructionConfig,
        reference: Option<&'a [f64]>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(r) = reference {
            check_len("reference image", height * width, r.len())?;
        }
        Ok(Self {
            op: measurement.operator(height * width)?,
            y: &measurement.values,
            height,
            width,
            reference,
            start: Instant::now(),
            trace: Vec::new(),
        })
    }

    fn record(
        &mut self,
        estimate: &[f64],
        projection_residual: Option<f64>,
        objective: Option<f64>,
    ) -> Result<()> {
        let psnr_db = match self.reference {
            Some(r) => Some(psnr_slices(r, &finalize_estimate(&self.op, self.y, estimate)?)?),
            None => None,
        };
        self.trace.push(TraceEntry {
            iteration: self.trace.len() + 1,
            data_residual: data_residual(&self.op, self.y, estimate)?,
            psnr_db,
            seconds: self.start.elapsed().as_secs_f64(),
            projection_residual,
            objective,
        });
        Ok(())
    }

    fn finish(
        self,
        estimate: &[f64],
        final_model: Option<LowRankGmm>,
        assignment_history: Vec<Vec<usize>>,
    ) -> Result<ReconstructionResult> {
        let image = if self.trace.is_empty() {
            clamp01(estimate)
        } else {
            finalize_estimate(&self.op, self.y, estimate)?
        };
        Ok(ReconstructionResult {
            height: self.height,
            width: self.width,
            image,
            iterations_run: self.trace.len(),
            trace: self.trace,
            final_model,
            assignment_history,
        })
    }
}

/// DCT-sparsity reconstruction by ADMM: x-step, w-step towards the shrunk patches, z-step, v-step.
pub fn run_admm_slope(
    measurement: &Measurement,
    height: usize,
    width: usize,
    config: &ReconstructionConfig,
    reference: Option<&[f64]>,
) -> Result<ReconstructionResult> {
    if config.algorithm != Algorithm::AdmmSlope {
        return Err(Error::invalid("run_admm_slope called with a different algorithm"));
    }
    let mut run = Run::new(measurement, height, width, config, reference)?;
    let grid = PatchGrid::new(height, width, config.patch_side, config.stride)?;
    let basis = PatchBasis::dct(config.patch_side)?;
    let x0 = warm_start(&run.op, run.y, config.warm_start)?;
    let mut state = SolverState::new(x0, run.y);
    let mut z = basis.analyze_all(&grid.extract(&state.w)?)?;
    let (beta, eta, lambda) = (config.beta, config.eta, config.lambda);
    for _ in 0..config.resolved_max_iters() {
        state.x = admm_x_step(&run.op, run.y, &state.w, &state.v, beta)?;
        let targets = basis.synthesize_all(&z)?;
        state.w = admm_w_step(&grid, &state.x, &state.v, &targets, beta, eta)?;
        let patches = grid.extract(&state.w)?;
        z = solve_z_step(&basis, &patches, lambda, eta)?;
        state.v = admm_v_step(&state.v, &state.x, &state.w)?;
        state.iteration += 1;

        let fit = data_residual(&run.op, run.y, &state.x)?;
        let coupling = (&patches.data - &basis.synthesize_all(&z)?.data).norm_squared();
        let l1: f64 = z.data.iter().map(|v| v.abs()).sum();
        let objective = 0.5 * fit * fit + lambda * l1 + 0.5 * eta * coupling;
        state.objective_trace.push(objective);
        run.record(&state.w, None, Some(objective))?;
    }
    run.finish(&state.w, None, Vec::new())
}

/// Patch prior refreshed once per outer iteration.
trait PatchPrior {
    fn denoise(&mut self, patches: &PatchSet) -> Result<PatchSet>;
    fn lowrank(&self) -> Option<LowRankGmm>;
}

struct GmmPrior {
    opts: EmOptions,
    gamma: usize,
    sigma2: f64,
    model: Option<GmmModel>,
    lowrank: Option<LowRankGmm>,
}

impl PatchPrior for GmmPrior {
    fn denoise(&mut self, patches: &PatchSet) -> Result<PatchSet> {
        let fit = em_fit(&patches.data, &self.opts, self.model.as_ref())?;
        let lr = evt_lowrank(&fit.model, self.gamma, self.sigma2)?;
        let out = lr.update_all_patches(patches)?;
        self.model = Some(fit.model);
        self.lowrank = Some(lr);
        Ok(out)
    }

    fn lowrank(&self) -> Option<LowRankGmm> {
        self.lowrank.clone()
    }
}

struct PlePrior {
    opts: EmOptions,
    gamma: usize,
    sigma2: f64,
    model: Option<PleModel>,
    history: Vec<Vec<usize>>,
}

impl PatchPrior for PlePrior {
    fn denoise(&mut self, patches: &PatchSet) -> Result<PatchSet> {
        let mut model = match self.model.take() {
            None => PleModel::initialize(patches, &self.opts, self.gamma, self.sigma2)?,
            Some(mut m) => {
                m.full = ple_mstep(patches, &m.assignments, &m.full)?;
                m.lowrank = ple_lowrank(&m.full, self.gamma, self.sigma2)?;
                m
            }
        };
        let est = ple_estep(&model.lowrank, patches)?;
        model.assignments = est.assignments;
        self.history.push(model.assignments.clone());
        self.model = Some(model);
        Ok(est.estimates)
    }

    fn lowrank(&self) -> Option<LowRankGmm> {
        self.model.as_ref().map(|m| m.lowrank.clone())
    }
}

fn run_patch_prior(
    measurement: &Measurement,
    height: usize,
    width: usize,
    config: &ReconstructionConfig,
    reference: Option<&[f64]>,
    prior: &mut dyn PatchPrior,
) -> Result<ReconstructionResult> {
    let mut run = Run::new(measurement, height, width, config, reference)?;
    let grid = PatchGrid::new(height, width, config.patch_side, config.stride)?;
    let projection = config.resolved_projection();
    let x0 = warm_start(&run.op, run.y, config.warm_start)?;
    let mut state = SolverState::new(x0.clone(), run.y);
    let mut estimate = x0;
    for outer in 1..=config.resolved_max_iters() {
        let projection_residual = match projection {
            Projection::Ist => {
                state.x = ist_step(&run.op, run.y, &estimate, config.zeta)?;
                Some(data_residual(&run.op, run.y, &state.x)?)
            }
            Projection::Gap => {
                state.x = gap_step(&run.op, run.y, &estimate)?;
                Some(data_residual(&run.op, run.y, &state.x)?)
            }
            Projection::AccGap => {
                state.x = estimate;
                acc_gap_step(&run.op, run.y, &mut state)?;
                Some(data_residual(&run.op, &state.y_running, &state.x)?)
            }
            Projection::Admm => {
                state.x = admm_x_step(&run.op, run.y, &state.w, &state.v, config.beta)?;
                None
            }
        };
        let patches = grid.extract(&state.x)?;
        let updated = prior.denoise(&patches).map_err(|e| match e {
            Error::ModelFit { detail, .. } => Error::ModelFit {
                iteration: outer,
                detail,
            },
            other => other,
        })?;
        estimate = match projection {
            Projection::Admm => {
                state.w = admm_w_step(&grid, &state.x, &state.v, &updated, config.beta, config.eta)?;
                state.v = admm_v_step(&state.v, &state.x, &state.w)?;
                state.w.clone()
            }
            _ => grid.average(&updated)?,
        };
        run.record(&estimate, projection_residual, None)?;
    }
    let model = prior.lowrank();
    run.finish(&estimate, model, Vec::new())
}

fn em_options(config: &ReconstructionConfig) -> EmOptions {
    EmOptions {
        components: config.resolved_k(),
        max_iters: config.em_iters_per_outer,
        tol: EM_TOL,
        seed: config.seed,
    }
}

/// Low-rank GMM reconstruction: projection, warm-started EM, eigenvalue thresholding,
/// posterior-mean patch update, recomposition.
pub fn run_lr_gmm_slope(
    measurement: &Measurement,
    height: usize,
    width: usize,
    config: &ReconstructionConfig,
    reference: Option<&[f64]>,
) -> Result<ReconstructionResult> {
    if config.algorithm != Algorithm::LrGmmSlope {
        return Err(Error::invalid("run_lr_gmm_slope called with a different algorithm"));
    }
    let mut prior = GmmPrior {
        opts: em_options(config),
        gamma: config.resolved_gamma(),
        sigma2: config.sigma2,
        model: None,
        lowrank: None,
    };
    run_patch_prior(measurement, height, width, config, reference, &mut prior)
}

/// Low-rank piecewise linear reconstruction: same loop with class refresh, thresholding
/// and hard model selection in place of the mixture update.
pub fn run_lr_ple_slope(
    measurement: &Measurement,
    height: usize,
    width: usize,
    config: &ReconstructionConfig,
    reference: Option<&[f64]>,
) -> Result<ReconstructionResult> {
    if config.algorithm != Algorithm::LrPleSlope {
        return Err(Error::invalid("run_lr_ple_slope called with a different algorithm"));
    }
    let mut prior = PlePrior {
        opts: em_options(config),
        gamma: config.resolved_gamma(),
        sigma2: config.sigma2,
        model: None,
        history: Vec::new(),
    };
    let mut result = run_patch_prior(measurement, height, width, config, reference, &mut prior)?;
    result.assignment_history = prior.history;
    Ok(result)
}

/// Dispatches on `config.algorithm`.
pub fn reconstruct(
    measurement: &Measurement,
    height: usize,
    width: usize,
    config: &ReconstructionConfig,
    reference: Option<&[f64]>,
) -> Result<ReconstructionResult> {
    match config.algorithm {
        Algorithm::AdmmSlope => run_admm_slope(measurement, height, width, config, reference),
        Algorithm::LrGmmSlope => run_lr_gmm_slope(measurement, height, width, config, reference),
        Algorithm::LrPleSlope => run_lr_ple_slope(measurement, height, width, config, reference),
    }
}

#[derive(Debug, Clone)]
pub struct ImageReconstruction {
    pub image: ImageBuffer,
    pub channels: Vec<ReconstructionResult>,
    /// PSNR over all channels jointly, when a reference was supplied.
    pub psnr_db: Option<f64>,
}

/// Reconstructs each channel independently from its own measurement.
pub fn reconstruct_image(
    measurements: &[Measurement],
    height: usize,
    width: usize,
    config: &ReconstructionConfig,
    reference: Option<&ImageBuffer>,
) -> Result<ImageReconstruction> {
    if measurements.len() != 1 && measurements.len() != 3 {
        return Err(Error::invalid(format!(
            "{} measurement channels; expected 1 or 3",
            measurements.len()
        )));
    }
    if let Some(r) = reference {
        if (r.height(), r.width(), r.channels()) != (height, width, measurements.len()) {
            return Err(Error::invalid(format!(
                "reference is {}x{}x{}, reconstruction is {height}x{width}x{}",
                r.height(),
                r.width(),
                r.channels(),
                measurements.len()
            )));
        }
    }
    let channels = measurements
        .iter()
        .enumerate()
        .map(|(c, m)| reconstruct(m, height, width, config, reference.map(|r| r.channel(c))))
        .collect::<Result<Vec<_>>>()?;
    let image = ImageBuffer::from_channels(height, width, channels.iter().map(|r| r.image.clone()).collect())?;
    let psnr_db = reference.map(|r| crate::image::psnr(r, &image)).transpose()?;
    Ok(ImageReconstruction {
        image,
        channels,
        psnr_db,
    })
}
