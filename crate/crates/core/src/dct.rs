//! Orthonormal 2-D DCT patch basis and the soft-shrinkage coefficient step.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::patches::PatchSet;

/// Separable orthonormal DCT-II basis for `side × side` patches vectorized row-major.
/// Column `k·side + l` of [`PatchBasis::matrix`] is the atom with vertical frequency
/// `k` and horizontal frequency `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBasis {
    side: usize,
    basis: DMatrix<f64>,
}

impl PatchBasis {
    pub fn dct(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("patch side must be positive"));
        }
        let n = side as f64;
        let c1 = DMatrix::from_fn(side, side, |k, i| {
            let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            alpha * (PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n)).cos()
        });
        let p = side * side;
        let basis = DMatrix::from_fn(p, p, |pix, atom| {
            let (r, c) = (pix / side, pix % side);
            let (k, l) = (atom / side, atom % side);
            c1[(k, r)] * c1[(l, c)]
        });
        Ok(Self { side, basis })
    }

    pub fn dimension(&self) -> usize {
        self.side * self.side
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `Bᵀ p`.
    pub fn analyze(&self, patch: &[f64]) -> Result<Vec<f64>> {
        check_len("DCT analysis", self.dimension(), patch.len())?;
        let v = self.basis.tr_mul(&DVector::from_column_slice(patch));
        Ok(v.as_slice().to_vec())
    }

    /// `B z`.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        check_len("DCT synthesis", self.dimension(), coeffs.len())?;
        let v = &self.basis * DVector::from_column_slice(coeffs);
        Ok(v.as_slice().to_vec())
    }

    pub fn analyze_all(&self, patches: &PatchSet) -> Result<PatchSet> {
        check_len("DCT analysis", self.dimension(), patches.patch_dim())?;
        patches.with_data(self.basis.tr_mul(&patches.data))
    }

    pub fn synthesize_all(&self, coeffs: &PatchSet) -> Result<PatchSet> {
        check_len("DCT synthesis", self.dimension(), coeffs.patch_dim())?;
        coeffs.with_data(&self.basis * &coeffs.data)
    }
}

#[inline]
fn shrink(v: f64, threshold: f64) -> f64 {
    v.signum() * (v.abs() - threshold).max(0.0)
}

/// Elementwise `sign(z)·max(|z| − τ, 0)`.
pub fn soft_threshold(z: &[f64], threshold: f64) -> Result<Vec<f64>> {
    validate_threshold(threshold)?;
    Ok(z.iter().map(|&v| shrink(v, threshold)).collect())
}

fn validate_threshold(threshold: f64) -> Result<()> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid(format!(
            "shrinkage threshold {threshold} must be nonnegative"
        )));
    }
    Ok(())
}

/// Coefficient update minimizing `λ‖z‖₁ + η Σ_i ‖R_i w − B z_i‖²` given the patches `R_i w`.
///
/// With an orthonormal basis the problem separates per coefficient and the minimizer
/// is `S_{λ/(2η)}(Bᵀ R_i w)`.
pub fn solve_z_step(basis: &PatchBasis, patches: &PatchSet, lambda: f64, eta: f64) -> Result<PatchSet> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("eta {eta} must be positive")));
    }
    let threshold = lambda / (2.0 * eta);
    validate_threshold(threshold)?;
    let mut coeffs = basis.analyze_all(patches)?;
    coeffs.data.apply(|v| *v = shrink(*v, threshold));
    Ok(coeffs)
}
