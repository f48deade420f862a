//! Hyperspectral cubes, ground-truth masks, synthetic scenes, band
//! normalization and PCA dimension unification.

mod io;
mod pca;
mod synth;

pub use io::{load_hsi, load_mask, save_hsi, save_mask, HSIB_HEADER_LEN};
pub(crate) use io::write_label_grid as write_label_grid_pub;
pub use pca::{pca_fit_reduce, PcaModel};
pub use synth::{
    generate_synthetic_scene, generate_task_stream, max_blob_area, SceneSpec, SyntheticScene,
};

use crate::error::{Error, Result};

/// An `M x N x C` radiance cube stored band-interleaved-by-pixel: the `C`
/// values of pixel `(i, j)` are contiguous at offset `(i * N + j) * C`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    /// Wavelength coverage in nanometres. Not persisted by the HSIB format.
    pub band_range_nm: Option<(f32, f32)>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height < 2 || width < 2 || channels < 2 {
            return Err(Error::InvalidArgument(format!(
                "cube dimensions {height}x{width}x{channels} must each be at least 2"
            )));
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "cube {height}x{width}x{channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            band_range_nm: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f32] {
        let c = self.channels;
        let off = (i * self.width + j) * c;
        &self.values[off..off + c]
    }

    /// Pixel spectrum by flat row-major index.
    pub fn pixel_at(&self, idx: usize) -> &[f32] {
        let c = self.channels;
        &self.values[idx * c..(idx + 1) * c]
    }

    pub fn pixel_f64(&self, i: usize, j: usize) -> Vec<f64> {
        self.pixel(i, j).iter().map(|&v| v as f64).collect()
    }
}

/// Per-pixel anomaly labels (0 = background, 1 = anomaly).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Malformed(format!("mask label {bad} not in {{0, 1}}")));
        }
        let anomalies = labels.iter().filter(|&&l| l == 1).count();
        if anomalies == labels.len() {
            return Err(Error::InvalidArgument("mask has no background pixel".into()));
        }
        if 2 * anomalies >= labels.len() {
            return Err(Error::InvalidArgument(format!(
                "anomaly fraction {anomalies}/{} must be below one half",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn matches(&self, cube: &HsiCube) -> bool {
        self.height == cube.height && self.width == cube.width
    }
}

/// Rescales the whole cube to `[0, 1]` by its global minimum and maximum.
/// A constant cube maps to all zeros.
pub fn normalize_bands(cube: &HsiCube) -> HsiCube {
    let (lo, hi) = cube
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi as f64 - lo as f64;
    let values = if range > 0.0 {
        cube.values
            .iter()
            .map(|&v| ((v as f64 - lo as f64) / range) as f32)
            .collect()
    } else {
        vec![0.0; cube.values.len()]
    };
    HsiCube {
        values,
        ..cube.clone()
    }
}
