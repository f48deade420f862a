use crate::error::{Error, Result};
use crate::hsi_data::{normalize_bands, pca_fit_reduce, GroundTruthMask, HsiCube};
use crate::preprocess::{build_cbm, split_samples, ss_features, CbmMask, FeatureMatrix, Samples};

use super::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamTask {
    pub name: String,
    pub cube: HsiCube,
    pub truth: Option<GroundTruthMask>,
}

/// Ordered scenes trained one after another.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<StreamTask>,
}

impl TaskStream {
    pub fn new(tasks: Vec<StreamTask>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("task stream is empty".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::InvalidArgument(format!("duplicate task name {:?}", t.name)));
            }
            if let Some(truth) = &t.truth {
                if !truth.matches(&t.cube) {
                    return Err(Error::ShapeMismatch(format!(
                        "truth {}x{} does not cover cube {}x{} of task {:?}",
                        truth.height(),
                        truth.width(),
                        t.cube.height(),
                        t.cube.width(),
                        t.name
                    )));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[StreamTask] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Common spectral dimension after unification.
    pub fn unified_channels(&self, pca_dim: usize) -> usize {
        let min_c = self.tasks.iter().map(|t| t.cube.channels()).min().unwrap_or(pca_dim);
        pca_dim.min(min_c)
    }
}

/// A scene after unification, masking and feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTask {
    pub name: String,
    pub source_channels: usize,
    pub features: FeatureMatrix,
    pub cbm: CbmMask,
    pub background: Samples,
    pub truth: Option<GroundTruthMask>,
}

/// Projects to `channels` bands (skipped when the cube already has that
/// many) and rescales to `[0, 1]`.
pub fn unify_cube(cube: &HsiCube, channels: usize) -> Result<HsiCube> {
    let reduced = if cube.channels() == channels {
        cube.clone()
    } else {
        pca_fit_reduce(cube, channels)?.1
    };
    Ok(normalize_bands(&reduced))
}

/// CBM runs on the cube as given; features come from the unified cube.
pub fn prepare_scene(
    name: &str,
    cube: &HsiCube,
    truth: Option<&GroundTruthMask>,
    channels: usize,
    config: &TrainConfig,
) -> Result<PreparedTask> {
    let unified = unify_cube(cube, channels)?;
    let features = ss_features(&unified, config.window)?;
    let cbm = if config.use_cbm {
        build_cbm(cube, config.cbm_beta)?
    } else {
        CbmMask::all_background(cube.height(), cube.width())
    };
    let background = split_samples(&features, &cbm)?.background;
    Ok(PreparedTask {
        name: name.to_string(),
        source_channels: cube.channels(),
        features,
        cbm,
        background,
        truth: truth.cloned(),
    })
}

pub fn prepare_stream(stream: &TaskStream, config: &TrainConfig) -> Result<Vec<PreparedTask>> {
    let channels = stream.unified_channels(config.pca_dim);
    stream
        .tasks()
        .iter()
        .map(|t| prepare_scene(&t.name, &t.cube, t.truth.as_ref(), channels, config))
        .collect()
}
