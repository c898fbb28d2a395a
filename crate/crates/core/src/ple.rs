//! Piecewise linear estimation: hard model selection with per-class Wiener
//! estimates, class-wise ML refresh, and low-rank covariance thresholding.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::gmm::{
    apply_covariance_floor, em_fit, evt_lowrank, EmOptions, GaussianComponent, GmmModel,
    LowRankComponent, LowRankGmm,
};
use crate::patches::PatchSet;

/// Class models plus the current hard assignment of every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PleModel {
    /// Class statistics (component weights hold class fractions and are not used for selection).
    pub full: GmmModel,
    pub lowrank: LowRankGmm,
    pub assignments: Vec<usize>,
    pub noise_variance: f64,
}

impl PleModel {
    /// Seeds classes from a short EM fit and its hard (argmax) assignments, then
    /// refreshes each class from its assigned patches.
    pub fn initialize(
        patches: &PatchSet,
        opts: &EmOptions,
        gamma: usize,
        noise_variance: f64,
    ) -> Result<Self> {
        let fit = em_fit(&patches.data, opts, None)?;
        let assignments = fit.model.assign(&patches.data)?;
        let full = ple_mstep(patches, &assignments, &fit.model)?;
        let lowrank = evt_lowrank(&full, gamma, noise_variance)?;
        Ok(Self {
            full,
            lowrank,
            assignments,
            noise_variance,
        })
    }

    pub fn num_components(&self) -> usize {
        self.full.num_components()
    }
}

/// Result of the selection step.
#[derive(Debug, Clone, PartialEq)]
pub struct PleEstimate {
    pub estimates: PatchSet,
    pub assignments: Vec<usize>,
}

/// Selection criterion for every class and patch (`K × N`):
///
/// `σ⁻²‖x − θ_k‖² + ½ log|Σ̃_k + σ²I| + (θ_k − μ_k)ᵀ(Σ̃_k + σ²I)⁻¹(θ_k − μ_k)`
///
/// where `θ_k` is the class-`k` Wiener estimate of `x`.
pub fn ple_criteria(lr: &LowRankGmm, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_len("selection data dimension", lr.dim(), data.nrows())?;
    let (p, n) = data.shape();
    let s2 = lr.noise_variance;
    let mut out = DMatrix::zeros(lr.num_components(), n);
    for (k, c) in lr.components.iter().enumerate() {
        let r = c.rank();
        let coeffs = centered_coefficients(c, data, r);
        let log_det: f64 = c.eigvals.iter().take(r).map(|l| (l + s2).ln()).sum::<f64>()
            + (p - r) as f64 * s2.ln();
        for i in 0..n {
            let mut col = data.column(i).clone_owned();
            col -= &c.mean;
            let total = col.norm_squared();
            let top = coeffs.column(i);
            let mut in_span = 0.0;
            let mut misfit = 0.0;
            let mut prior = 0.0;
            for j in 0..r {
                let cj2 = top[j] * top[j];
                let l = c.eigvals[j];
                let g = l / (l + s2);
                in_span += cj2;
                misfit += (1.0 - g) * (1.0 - g) * cj2;
                prior += g * g * cj2 / (l + s2);
            }
            misfit += (total - in_span).max(0.0);
            out[(k, i)] = misfit / s2 + 0.5 * log_det + prior;
        }
    }
    Ok(out)
}

/// Picks the class minimizing [`ple_criteria`] for each patch (ties to the lowest index)
/// and returns that class's Wiener estimate `Σ̃(Σ̃ + σ²I)⁻¹(x − μ) + μ`.
pub fn ple_estep(lr: &LowRankGmm, patches: &PatchSet) -> Result<PleEstimate> {
    let crit = ple_criteria(lr, &patches.data)?;
    let assignments: Vec<usize> = crit
        .column_iter()
        .map(|col| {
            let mut best = 0;
            for (k, &v) in col.iter().enumerate() {
                if v < col[best] {
                    best = k;
                }
            }
            best
        })
        .collect();

    let s2 = lr.noise_variance;
    let mut out = DMatrix::zeros(patches.patch_dim(), patches.len());
    for (k, c) in lr.components.iter().enumerate() {
        let members: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == k).collect();
        if members.is_empty() {
            continue;
        }
        let sub = patches.data.select_columns(&members);
        let r = c.rank();
        let mut coeffs = centered_coefficients(c, &sub, r);
        for j in 0..r {
            let g = c.eigvals[j] / (c.eigvals[j] + s2);
            coeffs.row_mut(j).scale_mut(g);
        }
        let est = c.eigvecs.columns(0, r) * coeffs;
        for (col, &i) in est.column_iter().zip(&members) {
            out.set_column(i, &(col + &c.mean));
        }
    }
    Ok(PleEstimate {
        estimates: patches.with_data(out)?,
        assignments,
    })
}

fn centered_coefficients(c: &LowRankComponent, data: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let basis = c.eigvecs.columns(0, r);
    let mut top = basis.tr_mul(data);
    let shift = basis.tr_mul(&c.mean);
    for mut col in top.column_iter_mut() {
        col -= &shift;
    }
    top
}

/// Class mean and biased scatter (plus the covariance floor) of the patches assigned
/// to each class. Empty classes keep the parameters of `previous`.
pub fn ple_mstep(estimates: &PatchSet, assignments: &[usize], previous: &GmmModel) -> Result<GmmModel> {
    check_len("class assignments", estimates.len(), assignments.len())?;
    check_len("class model dimension", estimates.patch_dim(), previous.dim())?;
    let k = previous.num_components();
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::invalid(format!("assignment {bad} outside 0..{k}")));
    }
    let n = assignments.len() as f64;
    let mut components = Vec::with_capacity(k);
    for (class, old) in previous.components.iter().enumerate() {
        let members: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == class).collect();
        if members.is_empty() {
            components.push(GaussianComponent {
                weight: 0.0,
                ..old.clone()
            });
            continue;
        }
        let mut sub = estimates.data.select_columns(&members);
        let count = members.len() as f64;
        let mean: DVector<f64> = sub.column_mean();
        for mut col in sub.column_iter_mut() {
            col -= &mean;
        }
        let mut cov = (&sub * sub.transpose()) / count;
        apply_covariance_floor(&mut cov);
        components.push(GaussianComponent::new(count / n, mean, cov)?);
    }
    GmmModel::new(components)
}

/// Thresholds every class covariance to rank `gamma`; means are unchanged.
pub fn ple_lowrank(full: &GmmModel, gamma: usize, noise_variance: f64) -> Result<LowRankGmm> {
    evt_lowrank(full, gamma, noise_variance)
}
