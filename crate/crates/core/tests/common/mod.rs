//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use csgmm::image::{load_image, ImageBuffer};
use csgmm::sensing::{Measurement, SensingOperator};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/images")
}

/// Luma image resized to `side × side`.
pub fn test_image(file: &str, side: usize) -> ImageBuffer {
    load_image(&data_dir().join(file))
        .unwrap()
        .to_luma()
        .resize_area(side, side)
        .unwrap()
}

/// Centre `crop × crop` window of the 256×256 version of an image.
pub fn test_crop(file: &str, crop: usize) -> ImageBuffer {
    test_image(file, 256).center_crop(crop, crop).unwrap()
}

/// Rectangles on a flat background.
pub fn piecewise_constant(h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let mut v = 0.2;
            if (h / 4..h / 2).contains(&r) && (w / 8..3 * w / 4).contains(&c) {
                v = 0.8;
            }
            if (h / 2..7 * h / 8).contains(&r) && (w / 2..7 * w / 8).contains(&c) {
                v = 0.55;
            }
            v
        })
        .collect()
}

pub fn measure(x: &[f64], csr: f64, seed: u64) -> Measurement {
    let op = SensingOperator::build(x.len().next_power_of_two(), csr, seed)
        .unwrap()
        .with_signal_len(x.len())
        .unwrap();
    op.measure(x, 0.0, 0).unwrap()
}

/// Adjoint-only baseline `clamp(Aᵀ y)`.
pub fn adjoint_baseline(m: &Measurement, len: usize) -> Vec<f64> {
    m.operator(len)
        .unwrap()
        .adjoint(&m.values)
        .unwrap()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

/// Sensing matrix written out entry by entry from the Sylvester sign rule
/// `H[r][c] = (−1)^popcount(r & c)`.
pub fn hadamard_oracle(op: &SensingOperator) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(op.num_rows(), op.signal_len());
    for (i, &col) in op.permutation().iter().enumerate() {
        if col >= op.signal_len() {
            continue;
        }
        for r in 0..op.num_rows() {
            let sign = if (r & i).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            a[(r, col)] = sign * op.scale();
        }
    }
    a
}

pub fn random_psd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose()
}

pub fn random_vec(rng: &mut ChaCha8Rng, p: usize) -> DVector<f64> {
    DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0))
}

/// Singular value thresholding at the `(γ+1)`-th singular value, via SVD.
pub fn svt_oracle(sigma: &DMatrix<f64>, gamma: usize) -> DMatrix<f64> {
    let svd = sigma.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let tau = svd.singular_values[order[gamma]];
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut out = DMatrix::zeros(sigma.nrows(), sigma.ncols());
    for &i in &order {
        let s = (svd.singular_values[i] - tau).max(0.0);
        out += s * u.column(i) * vt.row(i);
    }
    out
}

/// Gaussian log-density through a Cholesky factor.
pub fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance not positive definite");
    let d = x - mean;
    let sol = chol.solve(&d);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (d.dot(&sol) + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Mixture posterior mean in information form:
/// `Ω_k = (Σ_k⁻¹ + I/σ²)⁻¹`, `ν_k = Ω_k (x/σ² + Σ_k⁻¹ μ_k)`, weights from `N(x; μ_k, Σ_k + σ² I)`.
pub fn information_form_posterior(
    weights: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
    s2: f64,
    x: &DVector<f64>,
) -> (DVector<f64>, Vec<f64>) {
    let p = x.len();
    let eye = DMatrix::<f64>::identity(p, p);
    let logs: Vec<f64> = (0..weights.len())
        .map(|k| weights[k].ln() + log_gauss(x, &means[k], &(&covs[k] + &eye * s2)))
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let phi: Vec<f64> = unnorm.iter().map(|u| u / total).collect();
    let mut est = DVector::zeros(p);
    for k in 0..weights.len() {
        let s_inv = covs[k].clone().try_inverse().unwrap();
        let omega = (&s_inv + &eye / s2).try_inverse().unwrap();
        let nu = &omega * (x / s2 + &s_inv * &means[k]);
        est += phi[k] * nu;
    }
    (est, phi)
}

/// Mixture log-likelihood per sample, straight from the densities.
pub fn mean_log_likelihood_oracle(
    weights: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
    data: &DMatrix<f64>,
) -> f64 {
    let n = data.ncols();
    (0..n)
        .map(|j| {
            let x = data.column(j).into_owned();
            let logs: Vec<f64> = (0..weights.len())
                .map(|k| weights[k].ln() + log_gauss(&x, &means[k], &covs[k]))
                .collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
        })
        .sum::<f64>()
        / n as f64
}

/// Data from a few well-separated Gaussian clusters, `p × n`.
pub fn clustered_data(rng: &mut ChaCha8Rng, p: usize, n: usize, clusters: usize) -> DMatrix<f64> {
    let centers: Vec<DVector<f64>> = (0..clusters).map(|_| random_vec(rng, p) * 3.0).collect();
    let mut data = DMatrix::zeros(p, n);
    for j in 0..n {
        let c = &centers[j % clusters];
        for i in 0..p {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data[(i, j)] = c[i] + 0.4 * g;
        }
    }
    data
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
