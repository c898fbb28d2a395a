//! Gaussian mixture patch prior: EM training, eigenvalue thresholding (EVT) to a
//! low-rank mixture, and closed-form posterior-mean patch updates.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::patches::PatchSet;

/// Relative covariance floor: `ε = FLOOR_RELATIVE · trace(Σ) / P`.
pub const FLOOR_RELATIVE: f64 = 1e-6;
/// Absolute lower bound on the floor, for flat (zero-variance) data.
pub const FLOOR_ABSOLUTE: f64 = 1e-10;
/// Relative slack when checking that the EM log-likelihood did not decrease.
pub const LL_SLACK: f64 = 1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Adds `ε·I` to a covariance, `ε = max(1e-6·trace/P, 1e-10)`.
pub fn apply_covariance_floor(cov: &mut DMatrix<f64>) {
    let p = cov.nrows();
    let eps = (FLOOR_RELATIVE * cov.trace() / p as f64).max(FLOOR_ABSOLUTE);
    for i in 0..p {
        cov[(i, i)] += eps;
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub(crate) fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let p = m.nrows();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Orthonormal eigenvectors of `covariance`, one per column, matching `eigvals`.
    pub eigvecs: DMatrix<f64>,
    /// Eigenvalues in descending order, clamped at zero.
    pub eigvals: DVector<f64>,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        check_len("component covariance rows", p, covariance.nrows())?;
        check_len("component covariance cols", p, covariance.ncols())?;
        if !(weight >= 0.0) || mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("component parameters must be finite"));
        }
        let (mut eigvals, eigvecs) = sym_eigen_desc(&covariance);
        eigvals.apply(|v| *v = v.max(0.0));
        Ok(Self {
            weight,
            mean,
            covariance,
            eigvecs,
            eigvals,
        })
    }

    fn from_eigen(weight: f64, mean: DVector<f64>, eigvals: DVector<f64>, eigvecs: DMatrix<f64>) -> Self {
        let covariance = &eigvecs * DMatrix::from_diagonal(&eigvals) * eigvecs.transpose();
        Self {
            weight,
            mean,
            covariance,
            eigvecs,
            eigvals,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub components: Vec<GaussianComponent>,
}

impl GmmModel {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::invalid("mixture needs at least one component"));
        };
        let p = first.dim();
        for c in &components {
            check_len("mixture component dimension", p, c.dim())?;
        }
        Ok(Self { components })
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `K × N` matrix of `log π_k + log N(x_i; μ_k, Σ_k)`.
    pub fn log_joint(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("mixture data dimension", self.dim(), data.nrows())?;
        let mut out = DMatrix::zeros(self.num_components(), data.ncols());
        for (k, c) in self.components.iter().enumerate() {
            // Zero eigenvalues only appear for hand-built singular components.
            let variances = c.eigvals.map(|v| v.max(f64::MIN_POSITIVE));
            let log_dens = gaussian_log_density(data, &c.mean, &c.eigvecs, &variances);
            let log_w = c.weight.ln();
            for (i, v) in log_dens.iter().enumerate() {
                out[(k, i)] = log_w + v;
            }
        }
        Ok(out)
    }

    /// Index of the most responsible component for every column (ties to the lowest index).
    pub fn assign(&self, data: &DMatrix<f64>) -> Result<Vec<usize>> {
        let lj = self.log_joint(data)?;
        Ok(lj.column_iter().map(|c| argmax(c.as_slice())).collect())
    }

    /// Mean per-sample log-likelihood.
    pub fn mean_log_likelihood(&self, data: &DMatrix<f64>) -> Result<f64> {
        let lj = self.log_joint(data)?;
        let total: f64 = lj.column_iter().map(|c| log_sum_exp(c.as_slice())).sum();
        Ok(total / data.ncols() as f64)
    }

    pub fn write_snapshot<W: Write>(&self, w: W, noise_variance: f64) -> std::io::Result<()> {
        write_snapshot(
            w,
            noise_variance,
            self.components
                .iter()
                .map(|c| (c.weight, &c.mean, &c.eigvals, &c.eigvecs)),
        )
    }

    /// Reads a snapshot back as a full mixture, returning it with the stored noise variance.
    pub fn read_snapshot<R: Read>(r: R) -> Result<(Self, f64)> {
        let (sigma2, parts) = read_snapshot(r)?;
        let components = parts
            .into_iter()
            .map(|(w, m, vals, vecs)| GaussianComponent::from_eigen(w, m, vals, vecs))
            .collect();
        Ok((Self::new(components)?, sigma2))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-density of every column under `N(mean, U diag(variances) Uᵀ)`; variances must be positive.
fn gaussian_log_density(
    data: &DMatrix<f64>,
    mean: &DVector<f64>,
    eigvecs: &DMatrix<f64>,
    variances: &DVector<f64>,
) -> Vec<f64> {
    let p = data.nrows();
    let mut whiten = eigvecs.transpose();
    for (j, &var) in variances.iter().enumerate() {
        let s = 1.0 / var.sqrt();
        whiten.row_mut(j).scale_mut(s);
    }
    let shift = &whiten * mean;
    let mut z = &whiten * data;
    for mut col in z.column_iter_mut() {
        col -= &shift;
    }
    let log_det: f64 = variances.iter().map(|v| v.ln()).sum();
    let base = -0.5 * (p as f64 * LN_2PI + log_det);
    z.column_iter()
        .map(|c| base - 0.5 * c.norm_squared())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the mean per-sample log-likelihood gain falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            components: 6,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    /// Mean per-sample log-likelihood of the initial model and each accepted update.
    pub log_likelihood: Vec<f64>,
    /// Number of accepted M-steps.
    pub iterations: usize,
    /// True when an update lowered the likelihood and was discarded.
    pub rejected_update: bool,
}

/// Fits a `K`-component mixture to the columns of `data` by EM.
///
/// Without a warm start the model is seeded by k-means++ (weighted by cumulative
/// mass so duplicated data picks the same seeds), one Lloyd step, and a hard-assignment
/// M-step. Every M-step floors the covariances; an update that lowers the likelihood
/// is discarded and fitting stops.
pub fn em_fit(data: &DMatrix<f64>, opts: &EmOptions, warm: Option<&GmmModel>) -> Result<EmFit> {
    let (p, n) = data.shape();
    let k = opts.components;
    if k == 0 {
        return Err(Error::invalid("component count must be at least 1"));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "{n} samples cannot support {k} mixture components"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("EM input contains non-finite values"));
    }
    let mut model = match warm {
        Some(m) => {
            check_len("warm-start component count", k, m.num_components())?;
            check_len("warm-start dimension", p, m.dim())?;
            m.clone()
        }
        None => initial_model(data, k, opts.seed)?,
    };

    let (mut ll, mut resp) = e_step(&model, data)?;
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut rejected_update = false;
    for iter in 0..opts.max_iters {
        let candidate = m_step(data, &resp, &model).map_err(|e| Error::ModelFit {
            iteration: iter + 1,
            detail: e.to_string(),
        })?;
        let (cand_ll, cand_resp) = e_step(&candidate, data)?;
        if !cand_ll.is_finite() {
            return Err(Error::ModelFit {
                iteration: iter + 1,
                detail: "log-likelihood is not finite".into(),
            });
        }
        if cand_ll < ll - LL_SLACK * ll.abs() {
            rejected_update = true;
            break;
        }
        let gain = cand_ll - ll;
        model = candidate;
        ll = cand_ll;
        resp = cand_resp;
        trace.push(ll);
        iterations += 1;
        if gain < opts.tol {
            break;
        }
    }
    Ok(EmFit {
        model,
        log_likelihood: trace,
        iterations,
        rejected_update,
    })
}

/// Returns the mean log-likelihood and the `K × N` responsibilities.
fn e_step(model: &GmmModel, data: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let mut lj = model.log_joint(data)?;
    let mut total = 0.0;
    for mut col in lj.column_iter_mut() {
        let lse = log_sum_exp(col.as_slice());
        total += lse;
        col.apply(|v| *v = (*v - lse).exp());
    }
    Ok((total / data.ncols() as f64, lj))
}

/// Weighted mean and floored covariance for every component. Components with
/// negligible mass keep their previous mean and covariance.
fn m_step(data: &DMatrix<f64>, resp: &DMatrix<f64>, prev: &GmmModel) -> Result<GmmModel> {
    let n = data.ncols();
    let min_mass = 1e-10 * n as f64;
    let mut components = Vec::with_capacity(prev.num_components());
    for (k, old) in prev.components.iter().enumerate() {
        let r = resp.row(k).transpose();
        let mass = r.sum();
        if mass <= min_mass {
            components.push(GaussianComponent {
                weight: mass / n as f64,
                ..old.clone()
            });
            continue;
        }
        let mean = (data * &r) / mass;
        let mut centered = data.clone();
        for (mut col, &ri) in centered.column_iter_mut().zip(r.iter()) {
            col -= &mean;
            col *= ri.sqrt();
        }
        let mut cov = (&centered * centered.transpose()) / mass;
        apply_covariance_floor(&mut cov);
        components.push(GaussianComponent::new(mass / n as f64, mean, cov)?);
    }
    normalize_weights(&mut components);
    GmmModel::new(components)
}

fn normalize_weights(components: &mut [GaussianComponent]) {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for c in components {
        c.weight /= total;
    }
}

/// Picks the first index whose cumulative weight exceeds `u · Σw`.
fn sample_cumulative(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c.as_slice());
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding, one Lloyd step, then a hard-assignment M-step.
fn initial_model(data: &DMatrix<f64>, k: usize, seed: u64) -> Result<GmmModel> {
    let (p, n) = data.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<&[f64]> = (0..n)
        .map(|i| &data.as_slice()[i * p..(i + 1) * p])
        .collect();

    let uniform = vec![1.0; n];
    let first = sample_cumulative(&uniform, rng.random::<f64>());
    let mut centers = vec![DVector::from_column_slice(cols[first])];
    let mut dist: Vec<f64> = cols.iter().map(|c| sq_dist(c, cols[first])).collect();
    while centers.len() < k {
        let u = rng.random::<f64>();
        let idx = if dist.iter().sum::<f64>() > 0.0 {
            sample_cumulative(&dist, u)
        } else {
            sample_cumulative(&uniform, u)
        };
        let c = DVector::from_column_slice(cols[idx]);
        for (d, col) in dist.iter_mut().zip(&cols) {
            *d = d.min(sq_dist(col, c.as_slice()));
        }
        centers.push(c);
    }

    // Lloyd step: assign, then move each center to its cluster mean.
    let mut sums = vec![DVector::zeros(p); k];
    let mut counts = vec![0usize; k];
    for col in &cols {
        let (j, _) = nearest(col, &centers);
        sums[j] += DVector::from_column_slice(col);
        counts[j] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            centers[j] = &sums[j] / counts[j] as f64;
        }
    }

    let mut resp = DMatrix::zeros(k, n);
    for (i, col) in cols.iter().enumerate() {
        resp[(nearest(col, &centers).0, i)] = 1.0;
    }

    let mean = data.column_mean();
    let mut global = data.clone();
    for mut col in global.column_iter_mut() {
        col -= &mean;
    }
    let mut global_cov = (&global * global.transpose()) / n as f64;
    apply_covariance_floor(&mut global_cov);
    let fallback: Vec<GaussianComponent> = centers
        .into_iter()
        .map(|c| GaussianComponent::new(1.0 / k as f64, c, global_cov.clone()))
        .collect::<Result<_>>()?;
    let mut model = m_step(data, &resp, &GmmModel::new(fallback)?)?;
    // An empty initial cluster keeps a token weight so EM can still revive it.
    for c in &mut model.components {
        c.weight = c.weight.max(1.0 / n as f64);
    }
    normalize_weights(&mut model.components);
    Ok(model)
}

/// Eigenvalue thresholding: `λ̃_i = max(λ_i − λ_{γ+1}, 0)` for eigenvalues in descending order.
pub fn threshold_eigenvalues(eigvals: &DVector<f64>, gamma: usize) -> Result<DVector<f64>> {
    let p = eigvals.len();
    if gamma == 0 || gamma >= p {
        return Err(Error::invalid(format!(
            "rank limit {gamma} outside 1..{p}"
        )));
    }
    let tau = eigvals[gamma];
    Ok(eigvals.map(|v| (v - tau).max(0.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
    /// Thresholded eigenvalues, descending; entries past the rank limit are exactly zero.
    pub eigvals: DVector<f64>,
    pub rank_limit: usize,
}

impl LowRankComponent {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.eigvecs * DMatrix::from_diagonal(&self.eigvals) * self.eigvecs.transpose()
    }

    /// Number of strictly positive eigenvalues.
    pub fn rank(&self) -> usize {
        self.eigvals.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Mixture of low-rank Gaussians observed through isotropic noise `E = σ² I`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGmm {
    pub components: Vec<LowRankComponent>,
    pub noise_variance: f64,
}

/// Posterior weights and mean for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorUpdate {
    pub estimate: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Applies EVT to every component with a shared rank limit.
pub fn evt_lowrank(model: &GmmModel, gamma: usize, noise_variance: f64) -> Result<LowRankGmm> {
    evt_lowrank_per_component(model, &vec![gamma; model.num_components()], noise_variance)
}

pub fn evt_lowrank_per_component(
    model: &GmmModel,
    gammas: &[usize],
    noise_variance: f64,
) -> Result<LowRankGmm> {
    check_len("rank limits", model.num_components(), gammas.len())?;
    let components = model
        .components
        .iter()
        .zip(gammas)
        .map(|(c, &g)| {
            Ok(LowRankComponent {
                weight: c.weight,
                mean: c.mean.clone(),
                eigvecs: c.eigvecs.clone(),
                eigvals: threshold_eigenvalues(&c.eigvals, g)?,
                rank_limit: g,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LowRankGmm::new(components, noise_variance)
}

impl LowRankGmm {
    pub fn new(components: Vec<LowRankComponent>, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "noise variance {noise_variance} must be positive"
            )));
        }
        let Some(first) = components.first() else {
            return Err(Error::invalid("mixture needs at least one component"));
        };
        let p = first.mean.len();
        for c in &components {
            check_len("low-rank component dimension", p, c.mean.len())?;
            check_len("low-rank eigenvalue count", p, c.eigvals.len())?;
        }
        Ok(Self {
            components,
            noise_variance,
        })
    }

    /// Builds a mixture from explicit (possibly full-rank) covariances, without thresholding.
    pub fn from_covariances(
        weights: &[f64],
        means: &[DVector<f64>],
        covariances: &[DMatrix<f64>],
        noise_variance: f64,
    ) -> Result<Self> {
        check_len("mixture means", weights.len(), means.len())?;
        check_len("mixture covariances", weights.len(), covariances.len())?;
        let components = weights
            .iter()
            .zip(means)
            .zip(covariances)
            .map(|((&w, m), s)| {
                let c = GaussianComponent::new(w, m.clone(), s.clone())?;
                let p = c.dim();
                Ok(LowRankComponent {
                    weight: w,
                    mean: c.mean,
                    eigvecs: c.eigvecs,
                    eigvals: c.eigvals,
                    rank_limit: p,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(components, noise_variance)
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// `(ν_k, Ω_k)` for a single component: the posterior mean and covariance of the
    /// clean patch under component `k` alone.
    pub fn component_posterior(&self, k: usize, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_len("posterior input", self.dim(), x.len())?;
        let c = self
            .components
            .get(k)
            .ok_or_else(|| Error::invalid(format!("component {k} out of range")))?;
        let s2 = self.noise_variance;
        let gain = c.eigvals.map(|l| l / (l + s2));
        let centered = DVector::from_column_slice(x) - &c.mean;
        let coeffs = c.eigvecs.tr_mul(&centered).component_mul(&gain);
        let nu = &c.eigvecs * coeffs + &c.mean;
        let post_vars = c.eigvals.map(|l| l * s2 / (l + s2));
        let omega = &c.eigvecs * DMatrix::from_diagonal(&post_vars) * c.eigvecs.transpose();
        Ok((nu, omega))
    }

    pub fn posterior_update(&self, x: &[f64]) -> Result<PosteriorUpdate> {
        check_len("posterior input", self.dim(), x.len())?;
        let data = DMatrix::from_column_slice(x.len(), 1, x);
        let (estimate, weights) = self.posterior_batch(&data)?;
        Ok(PosteriorUpdate {
            estimate: estimate.as_slice().to_vec(),
            weights: weights.as_slice().to_vec(),
        })
    }

    /// Posterior-mean update of every patch column independently.
    pub fn update_all_patches(&self, patches: &PatchSet) -> Result<PatchSet> {
        let (estimate, _) = self.posterior_batch(&patches.data)?;
        patches.with_data(estimate)
    }

    /// Returns the `P × N` posterior means and the `K × N` posterior weights.
    pub fn posterior_batch(&self, data: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_len("posterior data dimension", self.dim(), data.nrows())?;
        let (p, n) = data.shape();
        let k = self.num_components();
        let s2 = self.noise_variance;

        // Pass 1: log φ_k up to normalization, using the eigenbasis of E + Σ̃_k.
        let sq_norms: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|c| {
                let mut centered = data.clone();
                for mut col in centered.column_iter_mut() {
                    col -= &c.mean;
                }
                centered.column_iter().map(|col| col.norm_squared()).collect()
            })
            .collect();
        let mut log_w = DMatrix::zeros(k, n);
        for (ki, c) in self.components.iter().enumerate() {
            let r = c.rank();
            let top = self.projected(c, data, r);
            let log_det: f64 =
                c.eigvals.iter().take(r).map(|l| (l + s2).ln()).sum::<f64>() + (p - r) as f64 * s2.ln();
            let base = c.weight.ln() - 0.5 * (p as f64 * LN_2PI + log_det);
            for i in 0..n {
                let col = top.column(i);
                let mut in_span = 0.0;
                let mut mahal = 0.0;
                for j in 0..r {
                    let v = col[j] * col[j];
                    in_span += v;
                    mahal += v / (c.eigvals[j] + s2);
                }
                mahal += (sq_norms[ki][i] - in_span).max(0.0) / s2;
                log_w[(ki, i)] = base - 0.5 * mahal;
            }
        }
        for mut col in log_w.column_iter_mut() {
            let lse = log_sum_exp(col.as_slice());
            col.apply(|v| *v = (*v - lse).exp());
        }

        // Pass 2: Σ_k φ_k ν_k with ν_k = U_r diag(λ̃/(λ̃+σ²)) U_rᵀ (x − μ) + μ.
        let mut out = DMatrix::zeros(p, n);
        for (ki, c) in self.components.iter().enumerate() {
            let r = c.rank();
            let mut top = self.projected(c, data, r);
            for j in 0..r {
                let g = c.eigvals[j] / (c.eigvals[j] + s2);
                top.row_mut(j).scale_mut(g);
            }
            let mut nu = c.eigvecs.columns(0, r) * top;
            for (i, mut col) in nu.column_iter_mut().enumerate() {
                col += &c.mean;
                col *= log_w[(ki, i)];
            }
            out += nu;
        }
        Ok((out, log_w))
    }

    /// `U_rᵀ (X − μ 1ᵀ)` for the leading `r` eigenvectors.
    fn projected(&self, c: &LowRankComponent, data: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
        let basis = c.eigvecs.columns(0, r);
        let mut top = basis.tr_mul(data);
        let shift = basis.tr_mul(&c.mean);
        for mut col in top.column_iter_mut() {
            col -= &shift;
        }
        top
    }

    pub fn write_snapshot<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_snapshot(
            w,
            self.noise_variance,
            self.components
                .iter()
                .map(|c| (c.weight, &c.mean, &c.eigvals, &c.eigvecs)),
        )
    }

    /// Reads a snapshot; each component's rank limit is recovered as its rank.
    pub fn read_snapshot<R: Read>(r: R) -> Result<Self> {
        let (sigma2, parts) = read_snapshot(r)?;
        let components = parts
            .into_iter()
            .map(|(weight, mean, eigvals, eigvecs)| {
                let rank_limit = eigvals.iter().filter(|&&v| v > 0.0).count();
                LowRankComponent {
                    weight,
                    mean,
                    eigvecs,
                    eigvals,
                    rank_limit,
                }
            })
            .collect();
        Self::new(components, sigma2)
    }
}

type SnapshotPart = (f64, DVector<f64>, DVector<f64>, DMatrix<f64>);

/// Layout: `K: u64, P: u64, σ²: f64`, then per component `π, μ[P], eigvals[P],
/// eigvecs[P×P] row-major`, all little-endian.
fn write_snapshot<'a, W: Write>(
    mut w: W,
    noise_variance: f64,
    parts: impl ExactSizeIterator<Item = (f64, &'a DVector<f64>, &'a DVector<f64>, &'a DMatrix<f64>)>,
) -> std::io::Result<()> {
    let mut parts = parts.peekable();
    let k = parts.len() as u64;
    let p = parts.peek().map_or(0, |c| c.1.len()) as u64;
    w.write_all(&k.to_le_bytes())?;
    w.write_all(&p.to_le_bytes())?;
    w.write_all(&noise_variance.to_le_bytes())?;
    for (weight, mean, vals, vecs) in parts {
        w.write_all(&weight.to_le_bytes())?;
        for v in mean.iter().chain(vals.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for row in vecs.row_iter() {
            for v in row.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()
}

fn read_snapshot<R: Read>(mut r: R) -> Result<(f64, Vec<SnapshotPart>)> {
    let mut word = [0u8; 8];
    let mut next = || -> Result<[u8; 8]> {
        r.read_exact(&mut word)
            .map_err(|_| Error::SnapshotFormat("truncated snapshot".into()))?;
        Ok(word)
    };
    let k = u64::from_le_bytes(next()?) as usize;
    let p = u64::from_le_bytes(next()?) as usize;
    if k == 0 || p == 0 || p > 4096 || k > 1 << 16 {
        return Err(Error::SnapshotFormat(format!("implausible header K={k} P={p}")));
    }
    let sigma2 = f64::from_le_bytes(next()?);
    let mut parts = Vec::with_capacity(k);
    for _ in 0..k {
        let weight = f64::from_le_bytes(next()?);
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            (0..len).map(|_| Ok(f64::from_le_bytes(next()?))).collect()
        };
        let mean = DVector::from_vec(read_vec(p)?);
        let vals = DVector::from_vec(read_vec(p)?);
        let vecs = DMatrix::from_row_slice(p, p, &read_vec(p * p)?);
        parts.push((weight, mean, vals, vecs));
    }
    Ok((sigma2, parts))
}
