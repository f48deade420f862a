//! Coarse background masking and spectral-spatial features.
//!
//! Each pixel is compared with its right-hand neighbour (left-hand neighbour
//! in the last column) by cosine similarity; pixels below the threshold are
//! anomaly candidates. Features concatenate a pixel's spectrum with the mean
//! spectrum of its `w x w` window, replicate-padded at the borders.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hsi_data::HsiCube;

/// Default similarity threshold for the coarse background mask.
pub const DEFAULT_CBM_BETA: f64 = 0.99;
/// Default local window size.
pub const DEFAULT_WINDOW: usize = 3;

/// Coarse background mask: `0` = background candidate, `1` = anomaly candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CbmMask {
    pub height: usize,
    pub width: usize,
    pub flags: Vec<u8>,
    beta_bits: u64,
}

impl CbmMask {
    pub fn beta(&self) -> f64 {
        f64::from_bits(self.beta_bits)
    }

    /// Mask marking every pixel as background, used to disable masking.
    pub fn all_background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            flags: vec![0; height * width],
            beta_bits: 1.0f64.to_bits(),
        }
    }

    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }

    /// Exports the mask in MSK1 layout.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::hsi_data::write_label_grid_pub(self.height, self.width, &self.flags, path.as_ref())
    }
}

/// Per-pixel spectral-spatial feature vectors of length `2C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub window: usize,
    /// Row-major pixels, `dim` values each.
    pub vectors: Vec<f64>,
}

impl FeatureMatrix {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn vector(&self, p: usize) -> &[f64] {
        &self.vectors[p * self.dim..(p + 1) * self.dim]
    }
}

/// A set of feature vectors with their pixel coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub coords: Vec<(usize, usize)>,
}

impl Samples {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            coords: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn push(&mut self, v: &[f64], coord: (usize, usize)) {
        self.vectors.extend_from_slice(v);
        self.coords.push(coord);
    }
}

/// Background set `B` and anomaly-candidate set `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSplit {
    pub background: Samples,
    pub anomaly: Samples,
}

/// Cosine similarity `(u . v) / (|u| |v|)`.
pub fn sam_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "similarity of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

pub fn build_cbm(cube: &HsiCube, beta: f64) -> Result<CbmMask> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!("CBM threshold {beta} outside (0, 1]")));
    }
    let (m, n) = (cube.height(), cube.width());
    let mut flags = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let neighbor = if j + 1 < n { j + 1 } else { j - 1 };
            let sim = sam_similarity(&cube.pixel_f64(i, j), &cube.pixel_f64(i, neighbor));
            flags.push(match sim {
                Ok(s) if s >= beta => 0,
                _ => 1,
            });
        }
    }
    Ok(CbmMask {
        height: m,
        width: n,
        flags,
        beta_bits: beta.to_bits(),
    })
}

fn check_window(cube: &HsiCube, w: usize) -> Result<()> {
    if w % 2 == 0 {
        return Err(Error::EvenWindow(w));
    }
    if w > cube.height().min(cube.width()) {
        return Err(Error::InvalidArgument(format!(
            "window {w} larger than the {}x{} image",
            cube.height(),
            cube.width()
        )));
    }
    Ok(())
}

/// Mean spectrum over each pixel's `w x w` window with replicate padding.
/// Returns `M*N*C` values, row-major by pixel.
pub fn local_mean(cube: &HsiCube, w: usize) -> Result<Vec<f64>> {
    check_window(cube, w)?;
    let (m, n, c) = (cube.height(), cube.width(), cube.channels());
    let half = (w / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let scale = 1.0 / (w * w) as f64;
    let mut out = vec![0.0; m * n * c];
    for i in 0..m {
        for j in 0..n {
            let dst = &mut out[(i * n + j) * c..(i * n + j + 1) * c];
            for di in -half..=half {
                let ii = clamp(i as isize + di, m);
                for dj in -half..=half {
                    let jj = clamp(j as isize + dj, n);
                    for (d, &v) in dst.iter_mut().zip(cube.pixel(ii, jj)) {
                        *d += v as f64;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
    }
    Ok(out)
}

pub fn ss_features(cube: &HsiCube, w: usize) -> Result<FeatureMatrix> {
    let means = local_mean(cube, w)?;
    let c = cube.channels();
    let count = cube.pixel_count();
    let mut vectors = Vec::with_capacity(count * 2 * c);
    for p in 0..count {
        vectors.extend(cube.pixel_at(p).iter().map(|&v| v as f64));
        vectors.extend_from_slice(&means[p * c..(p + 1) * c]);
    }
    Ok(FeatureMatrix {
        height: cube.height(),
        width: cube.width(),
        dim: 2 * c,
        window: w,
        vectors,
    })
}

pub fn split_samples(features: &FeatureMatrix, mask: &CbmMask) -> Result<SampleSplit> {
    if features.height != mask.height || features.width != mask.width {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} vs mask {}x{}",
            features.height, features.width, mask.height, mask.width
        )));
    }
    let mut background = Samples::empty(features.dim);
    let mut anomaly = Samples::empty(features.dim);
    for i in 0..features.height {
        for j in 0..features.width {
            let p = i * features.width + j;
            let target = if mask.flags[p] == 0 {
                &mut background
            } else {
                &mut anomaly
            };
            target.push(features.vector(p), (i, j));
        }
    }
    if background.is_empty() {
        return Err(Error::EmptyBackground);
    }
    Ok(SampleSplit { background, anomaly })
}
