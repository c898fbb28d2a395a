//! Overlapping patch extraction (`R_i`), aggregation (`Σ R_iᵀ`) and overlap counts.

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};

/// Shape parameters identifying a grid; used to check that a [`PatchSet`] belongs to a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub patch_side: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    shape: GridShape,
    /// Top-left corners `(row, col)` in row-major enumeration order.
    origins: Vec<(usize, usize)>,
    /// Number of patches covering each pixel (diagonal of `Σ R_iᵀ R_i`).
    overlap_counts: Vec<u32>,
}

/// Origins along one axis; the last origin is clamped so the patch fits.
fn axis_origins(len: usize, side: usize, stride: usize) -> Vec<usize> {
    let last = len - side;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_side: usize, stride: usize) -> Result<Self> {
        if patch_side == 0 || stride == 0 {
            return Err(Error::invalid("patch side and stride must be positive"));
        }
        if patch_side > height.min(width) {
            return Err(Error::invalid(format!(
                "patch side {patch_side} exceeds image size {height}x{width}"
            )));
        }
        if stride > patch_side {
            return Err(Error::invalid(format!(
                "stride {stride} exceeds patch side {patch_side}; some pixels would be uncovered"
            )));
        }
        let rows = axis_origins(height, patch_side, stride);
        let cols = axis_origins(width, patch_side, stride);
        let origins: Vec<(usize, usize)> = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        let mut overlap_counts = vec![0u32; height * width];
        for &(r0, c0) in &origins {
            for r in r0..r0 + patch_side {
                for c in c0..c0 + patch_side {
                    overlap_counts[r * width + c] += 1;
                }
            }
        }
        Ok(Self {
            shape: GridShape {
                height,
                width,
                patch_side,
                stride,
            },
            origins,
            overlap_counts,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn num_pixels(&self) -> usize {
        self.shape.height * self.shape.width
    }

    pub fn patch_side(&self) -> usize {
        self.shape.patch_side
    }

    /// Patch dimension `P = side²`.
    pub fn patch_dim(&self) -> usize {
        self.shape.patch_side * self.shape.patch_side
    }

    pub fn patch_count(&self) -> usize {
        self.origins.len()
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    pub fn overlap_counts(&self) -> &[u32] {
        &self.overlap_counts
    }

    /// Column `i` of the result is patch `i`, vectorized row-major.
    pub fn extract(&self, image: &[f64]) -> Result<PatchSet> {
        check_len("patch extraction", self.num_pixels(), image.len())?;
        let side = self.shape.patch_side;
        let width = self.shape.width;
        let mut data = DMatrix::zeros(self.patch_dim(), self.patch_count());
        for (mut col, &(r0, c0)) in data.column_iter_mut().zip(&self.origins) {
            let dst = col.as_mut_slice();
            for dr in 0..side {
                let src = (r0 + dr) * width + c0;
                dst[dr * side..(dr + 1) * side].copy_from_slice(&image[src..src + side]);
            }
        }
        Ok(PatchSet {
            data,
            shape: self.shape,
        })
    }

    /// Scatter-adds every patch into its footprint: `Σ_i R_iᵀ p_i`. No normalization.
    pub fn aggregate(&self, patches: &PatchSet) -> Result<Vec<f64>> {
        if patches.shape != self.shape {
            return Err(Error::invalid("patch set was produced by a different grid"));
        }
        self.aggregate_matrix(&patches.data)
    }

    pub(crate) fn aggregate_matrix(&self, data: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_len("patch aggregation rows", self.patch_dim(), data.nrows())?;
        check_len("patch aggregation columns", self.patch_count(), data.ncols())?;
        let side = self.shape.patch_side;
        let width = self.shape.width;
        let mut image = vec![0.0; self.num_pixels()];
        for (col, &(r0, c0)) in data.column_iter().zip(&self.origins) {
            let src = col.as_slice();
            for dr in 0..side {
                let dst = (r0 + dr) * width + c0;
                for (d, s) in image[dst..dst + side]
                    .iter_mut()
                    .zip(&src[dr * side..(dr + 1) * side])
                {
                    *d += s;
                }
            }
        }
        Ok(image)
    }

    /// Aggregates and divides by the overlap counts (`R̃⁻¹ Σ R_iᵀ p_i`).
    pub fn average(&self, patches: &PatchSet) -> Result<Vec<f64>> {
        let mut image = self.aggregate(patches)?;
        for (v, &c) in image.iter_mut().zip(&self.overlap_counts) {
            *v /= c as f64;
        }
        Ok(image)
    }

    /// Wraps a `P × N_p` matrix as a patch set of this grid.
    pub fn patch_set(&self, data: DMatrix<f64>) -> Result<PatchSet> {
        check_len("patch set rows", self.patch_dim(), data.nrows())?;
        check_len("patch set columns", self.patch_count(), data.ncols())?;
        Ok(PatchSet {
            data,
            shape: self.shape,
        })
    }
}

/// Vectorized patches as columns of a `P × N_p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub data: DMatrix<f64>,
    shape: GridShape,
}

impl PatchSet {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn patch_dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    /// Same grid, new data. Dimensions must match.
    pub fn with_data(&self, data: DMatrix<f64>) -> Result<PatchSet> {
        check_len("patch set rows", self.data.nrows(), data.nrows())?;
        check_len("patch set columns", self.data.ncols(), data.ncols())?;
        Ok(PatchSet {
            data,
            shape: self.shape,
        })
    }
}
