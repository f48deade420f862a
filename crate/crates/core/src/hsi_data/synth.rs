//! Desk-scale synthetic scenes: smoothly mixed background materials with
//! low-amplitude noise and compact, spectrally distinct anomaly blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GroundTruthMask, HsiCube};
use crate::error::{Error, Result};

/// Layout and material parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_anomalies: usize,
    /// Minimum spectral angle (radians) between any anomaly pixel and every
    /// background signature.
    pub contrast: f64,
    pub min_radius: usize,
    pub max_radius: usize,
    pub n_background: usize,
    /// Noise standard deviation relative to the mean radiance level.
    pub noise: f64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, channels: usize, n_anomalies: usize, contrast: f64) -> Self {
        Self {
            height,
            width,
            channels,
            n_anomalies,
            contrast,
            min_radius: 1,
            max_radius: 3,
            n_background: 4,
            noise: 0.003,
        }
    }
}

/// A generated scene together with the materials used to build it.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cube: HsiCube,
    pub truth: GroundTruthMask,
    pub background_signatures: Vec<Vec<f64>>,
    /// One base signature per blob.
    pub anomaly_signatures: Vec<Vec<f64>>,
}

/// Pixel count of a digital disk of radius `r`.
pub fn max_blob_area(r: usize) -> usize {
    disk_offsets(r).len()
}

fn disk_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut out = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if di * di + dj * dj <= r * r {
                out.push((di, dj));
            }
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).clamp(-1.0, 1.0).acos()
}

fn bump(c: usize, center: f64, width: f64, amp: f64) -> impl Iterator<Item = f64> {
    (0..c).map(move |k| {
        let z = (k as f64 - center) / width;
        amp * (-0.5 * z * z).exp()
    })
}

fn smooth_signature(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let base = rng.random_range(0.15..0.35);
    let mut s = vec![base; c];
    for _ in 0..3 {
        let center = rng.random_range(0.0..c as f64);
        let width = c as f64 * rng.random_range(0.08..0.3);
        let amp = rng.random_range(0.2..0.8);
        for (v, b) in s.iter_mut().zip(bump(c, center, width, amp)) {
            *v += b;
        }
    }
    s
}

fn far_signature(
    rng: &mut ChaCha8Rng,
    c: usize,
    avoid: &[Vec<f64>],
    min_angle: f64,
) -> Result<Vec<f64>> {
    for _ in 0..20_000 {
        let s = smooth_signature(rng, c);
        if avoid.iter().all(|b| angle(&s, b) >= min_angle) {
            return Ok(s);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no signature found at spectral angle >= {min_angle} from the background library"
    )))
}

/// Smooth positive field over the image built from a few broad Gaussians.
fn smooth_field(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<f64> {
    let sigma = m.max(n) as f64 / 3.0;
    let centers: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..m as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let v: f64 = centers
                .iter()
                .map(|&(ci, cj, w)| {
                    let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                    w * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            out.push(0.05 + v);
        }
    }
    out
}

fn validate(spec: &SceneSpec) -> Result<()> {
    if spec.height < 2 || spec.width < 2 || spec.channels < 2 {
        return Err(Error::InvalidArgument("scene dimensions must be at least 2".into()));
    }
    if spec.contrast <= 0.0 {
        return Err(Error::InvalidArgument("contrast must be positive".into()));
    }
    if spec.min_radius > spec.max_radius || spec.n_background == 0 {
        return Err(Error::InvalidArgument("bad radius range or empty background library".into()));
    }
    let budget = 0.05 * (spec.height * spec.width) as f64;
    if (spec.n_anomalies * max_blob_area(spec.max_radius)) as f64 >= budget {
        return Err(Error::InvalidArgument(format!(
            "{} blobs of up to {} pixels exceed 5% of a {}x{} scene",
            spec.n_anomalies,
            max_blob_area(spec.max_radius),
            spec.height,
            spec.width
        )));
    }
    Ok(())
}

impl SceneSpec {
    pub fn generate(&self, seed: u64) -> Result<SyntheticScene> {
        validate(self)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let library: Vec<Vec<f64>> = (0..self.n_background)
            .map(|_| smooth_signature(&mut rng, self.channels))
            .collect();
        let avoid = library.clone();
        self.render(&mut rng, library, &avoid)
    }

    /// Anomaly spectra keep at least `contrast` from every signature in `avoid`.
    fn render(&self, rng: &mut ChaCha8Rng, library: Vec<Vec<f64>>, avoid: &[Vec<f64>]) -> Result<SyntheticScene> {
        let (m, n, c) = (self.height, self.width, self.channels);
        let fields: Vec<Vec<f64>> = library.iter().map(|_| smooth_field(rng, m, n)).collect();
        let illumination = smooth_field(rng, m, n);
        let illum_max = illumination.iter().cloned().fold(0.0, f64::max);
        let level = library.iter().flatten().sum::<f64>() / (library.len() * c) as f64;
        let noise = Normal::new(0.0, self.noise * level).expect("finite noise scale");

        let mut values = vec![0.0f64; m * n * c];
        for p in 0..m * n {
            let total: f64 = fields.iter().map(|f| f[p]).sum();
            let gain = 0.9 + 0.2 * illumination[p] / illum_max;
            let px = &mut values[p * c..(p + 1) * c];
            for (sig, field) in library.iter().zip(&fields) {
                let a = field[p] / total;
                for (v, s) in px.iter_mut().zip(sig) {
                    *v += gain * a * s;
                }
            }
        }

        // Blob placement: fully inside the image, one-pixel gap between blobs.
        let mut blobs: Vec<(usize, usize, usize)> = Vec::new();
        let mut attempts = 0;
        while blobs.len() < self.n_anomalies {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InfeasibleLayout(self.n_anomalies));
            }
            let r = rng.random_range(self.min_radius..=self.max_radius);
            if 2 * r + 1 > m || 2 * r + 1 > n {
                continue;
            }
            let ci = rng.random_range(r..m - r);
            let cj = rng.random_range(r..n - r);
            let clear = blobs.iter().all(|&(bi, bj, br)| {
                let d2 = (bi as f64 - ci as f64).powi(2) + (bj as f64 - cj as f64).powi(2);
                d2.sqrt() > (br + r) as f64 + 1.5
            });
            if clear {
                blobs.push((ci, cj, r));
            }
        }

        let mut labels = vec![0u8; m * n];
        let mut anomaly_signatures = Vec::with_capacity(blobs.len());
        for &(ci, cj, r) in &blobs {
            let base = far_signature(rng, c, avoid, self.contrast)?;
            let peak = base.iter().cloned().fold(0.0, f64::max);
            for (di, dj) in disk_offsets(r) {
                let i = (ci as isize + di) as usize;
                let j = (cj as isize + dj) as usize;
                let p = i * n + j;
                labels[p] = 1;
                // Per-pixel material variation inside the blob.
                let mut spectrum = base.clone();
                for _ in 0..50 {
                    let center = rng.random_range(0.0..c as f64);
                    let width = c as f64 * 0.1;
                    let amp = rng.random_range(0.5..1.0) * peak;
                    let candidate: Vec<f64> = base
                        .iter()
                        .zip(bump(c, center, width, amp))
                        .map(|(b, g)| b + g)
                        .collect();
                    if avoid.iter().all(|s| angle(&candidate, s) >= self.contrast) {
                        spectrum = candidate;
                        break;
                    }
                }
                let gain = 0.9 + 0.2 * illumination[p] / illum_max;
                for (v, s) in values[p * c..(p + 1) * c].iter_mut().zip(&spectrum) {
                    *v = gain * s;
                }
            }
            anomaly_signatures.push(base);
        }

        for v in &mut values {
            *v = (*v + noise.sample(rng)).max(1e-4);
        }
        let cube = HsiCube::new(m, n, c, values.into_iter().map(|v| v as f32).collect())?;
        let truth = GroundTruthMask::new(m, n, labels)?;
        Ok(SyntheticScene {
            cube,
            truth,
            background_signatures: library,
            anomaly_signatures,
        })
    }
}

/// Synthetic scene with default material settings.
pub fn generate_synthetic_scene(
    seed: u64,
    height: usize,
    width: usize,
    channels: usize,
    n_anomalies: usize,
    contrast: f64,
) -> Result<(HsiCube, GroundTruthMask)> {
    let scene = SceneSpec::new(height, width, channels, n_anomalies, contrast).generate(seed)?;
    Ok((scene.cube, scene.truth))
}

/// A sequence of scenes whose background libraries are mutually distinct:
/// every signature of task `t` lies at spectral angle at least
/// `spec.contrast` from every background signature of earlier tasks, and
/// every anomaly is that far from all backgrounds in the stream.
pub fn generate_task_stream(seed: u64, n_tasks: usize, spec: &SceneSpec) -> Result<Vec<SyntheticScene>> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: Vec<Vec<f64>> = Vec::new();
    let mut libraries = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let mut library = Vec::with_capacity(spec.n_background);
        for _ in 0..spec.n_background {
            library.push(far_signature(&mut rng, spec.channels, &seen, spec.contrast)?);
        }
        seen.extend(library.iter().cloned());
        libraries.push(library);
    }
    libraries
        .into_iter()
        .map(|library| spec.render(&mut rng, library, &seen))
        .collect()
}
