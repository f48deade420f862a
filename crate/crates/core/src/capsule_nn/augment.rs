use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_core::{augment_forward, AugmentDraw};

/// Ranges for the per-vector contrast, brightness and saturation draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Additive shift drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Multiplicative spread about the vector mean.
    pub contrast: (f64, f64),
    /// Interpolation weight toward the band-wise batch mean.
    pub saturation: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            brightness: 0.05,
            contrast: (0.9, 1.1),
            saturation: (0.9, 1.1),
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.brightness >= 0.0
            && self.brightness.is_finite()
            && self.contrast.0 <= self.contrast.1
            && self.saturation.0 <= self.saturation.1
            && [self.contrast.0, self.contrast.1, self.saturation.0, self.saturation.1]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid augmentation ranges {self:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Draws one `(gamma, delta, lambda)` triple per row. Degenerate ranges
    /// consume no randomness.
    pub fn draw<R: Rng>(&self, rows: usize, rng: &mut R) -> AugmentDraw {
        let mut pick = |lo: f64, hi: f64| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let mut draw = AugmentDraw::identity(rows);
        for b in 0..rows {
            draw.gamma[b] = pick(self.contrast.0, self.contrast.1);
            draw.delta[b] = pick(-self.brightness, self.brightness);
            draw.lambda[b] = pick(self.saturation.0, self.saturation.1);
        }
        draw
    }
}

/// Applies a frozen draw to a row-major `rows x cols` batch.
pub fn augment(batch: &[f64], rows: usize, cols: usize, draw: &AugmentDraw) -> Result<Vec<f64>> {
    if batch.len() != rows * cols || draw.gamma.len() != rows || draw.delta.len() != rows || draw.lambda.len() != rows
    {
        return Err(Error::ShapeMismatch(format!(
            "augment of {} values as {rows}x{cols} with {} draws",
            batch.len(),
            draw.gamma.len()
        )));
    }
    Ok(augment_forward(batch, rows, cols, draw))
}
