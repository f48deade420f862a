use nalgebra::{DMatrix, SymmetricEigen};

use super::HsiCube;
use crate::error::{Error, Result};

/// Principal-component projection fit on every pixel of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `C x d` projection, row-major: `basis[k * d + j]` is band `k` of component `j`.
    pub basis: Vec<f64>,
    pub source_dim: usize,
    pub target_dim: usize,
    /// All `C` covariance eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues above the numerical-zero cutoff.
    pub rank: usize,
}

impl PcaModel {
    pub fn component(&self, j: usize) -> Vec<f64> {
        (0..self.source_dim)
            .map(|k| self.basis[k * self.target_dim + j])
            .collect()
    }

    pub fn project(&self, spectrum: &[f64]) -> Vec<f64> {
        let d = self.target_dim;
        let mut out = vec![0.0; d];
        for (k, (&x, &mu)) in spectrum.iter().zip(&self.mean).enumerate() {
            let centered = x - mu;
            let row = &self.basis[k * d..(k + 1) * d];
            for (o, &b) in out.iter_mut().zip(row) {
                *o += centered * b;
            }
        }
        out
    }

    /// Maps projected coordinates back to band space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let d = self.target_dim;
        (0..self.source_dim)
            .map(|k| {
                let row = &self.basis[k * d..(k + 1) * d];
                self.mean[k] + row.iter().zip(coords).map(|(b, c)| b * c).sum::<f64>()
            })
            .collect()
    }

    /// Largest absolute deviation of `basis^T basis` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let d = self.target_dim;
        let mut worst: f64 = 0.0;
        for a in 0..d {
            for b in 0..d {
                let dot: f64 = (0..self.source_dim)
                    .map(|k| self.basis[k * d + a] * self.basis[k * d + b])
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Fits PCA on all pixels and projects the cube onto the top `d` components.
///
/// When the pixel covariance has fewer than `d` nonzero eigenvalues the
/// remaining components are kept as orthonormal null-space directions (their
/// projections are numerically zero) and a warning is logged.
pub fn pca_fit_reduce(cube: &HsiCube, d: usize) -> Result<(PcaModel, HsiCube)> {
    let c = cube.channels();
    if d == 0 || d > c {
        return Err(Error::InvalidArgument(format!(
            "PCA target dimension {d} must lie in 1..={c}"
        )));
    }
    let n = cube.pixel_count();
    let mut mean = vec![0.0; c];
    for p in 0..n {
        for (m, &v) in mean.iter_mut().zip(cube.pixel_at(p)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut centered = vec![0.0; c];
    for p in 0..n {
        for ((dst, &v), &mu) in centered.iter_mut().zip(cube.pixel_at(p)).zip(&mean) {
            *dst = v as f64 - mu;
        }
        for a in 0..c {
            let ca = centered[a];
            for b in a..c {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    for a in 0..c {
        for b in a..c {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let top = eigenvalues[0].max(0.0);
    let cutoff = top * 1e-12 * c as f64;
    let rank = eigenvalues.iter().filter(|&&l| l > cutoff && l > 0.0).count();
    if rank < d {
        log::warn!("pixel covariance has rank {rank} < target dimension {d}; trailing components carry no variance");
    }

    let mut basis = vec![0.0; c * d];
    for (j, &src) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(src);
        // Sign convention: the largest-magnitude entry of each component is positive.
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..c {
            basis[k * d + j] = sign * col[k];
        }
    }

    let model = PcaModel {
        mean,
        basis,
        source_dim: c,
        target_dim: d,
        eigenvalues,
        rank,
    };
    let mut values = Vec::with_capacity(n * d);
    let mut spectrum = vec![0.0; c];
    for p in 0..n {
        for (dst, &v) in spectrum.iter_mut().zip(cube.pixel_at(p)) {
            *dst = v as f64;
        }
        values.extend(model.project(&spectrum).into_iter().map(|v| v as f32));
    }
    let projected = HsiCube::new(cube.height(), cube.width(), d.max(2), pad_to_two(values, d, n))?;
    Ok((model, projected))
}

/// Cubes need at least two channels; a one-component projection is padded
/// with a zero band.
fn pad_to_two(values: Vec<f32>, d: usize, n: usize) -> Vec<f32> {
    if d >= 2 {
        return values;
    }
    let mut out = Vec::with_capacity(n * 2);
    for v in values {
        out.push(v);
        out.push(0.0);
    }
    out
}
