use serde::{Deserialize, Serialize};

use crate::capsule_nn::{AugmentSpec, CapsuleLayerSpec, CouplingMode, DiscriminatorArch, GeneratorArch};
use crate::error::{Error, Result};

/// Which continual-learning components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Replay mixing plus self-distillation.
    #[default]
    Full,
    /// Sequential training with no memory of earlier tasks.
    FineTune,
    /// Self-distillation on buffered exemplars, no replay mixing.
    DistillOnly,
    /// Replay mixing, no self-distillation.
    ReplayOnly,
    /// A fresh model per stage trained on every task seen so far.
    Joint,
    /// A fresh model per stage trained on that stage's task only.
    Isolated,
}

impl AblationMode {
    pub fn mixes_replay(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::ReplayOnly)
    }

    pub fn distills(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::DistillOnly)
    }

    pub fn keeps_buffer(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::DistillOnly | AblationMode::ReplayOnly)
    }

    pub fn fresh_per_stage(self) -> bool {
        matches!(self, AblationMode::Joint | AblationMode::Isolated)
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::FineTune => "fine_tune",
            AblationMode::DistillOnly => "distill_only",
            AblationMode::ReplayOnly => "replay_only",
            AblationMode::Joint => "joint",
            AblationMode::Isolated => "isolated",
        }
    }
}

/// How a new task's exemplars enter the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    #[default]
    Append,
    /// Re-cluster the union of old exemplars and new data. Not implemented.
    ReselectUnion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub generator_hidden: usize,
    pub decoder_hidden: usize,
    pub generator_groups: usize,
    pub generator_per_group: usize,
    pub capsule_dim: usize,
    pub latent_dim: usize,
    pub discriminator_channels: usize,
    pub discriminator_groups: usize,
    pub discriminator_per_group: usize,
    pub discriminator_out_dim: usize,
    pub routing_iters: usize,
    pub coupling: CouplingMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            generator_hidden: 256,
            decoder_hidden: 256,
            generator_groups: 8,
            generator_per_group: 4,
            capsule_dim: 8,
            latent_dim: 16,
            discriminator_channels: 16,
            discriminator_groups: 8,
            discriminator_per_group: 4,
            discriminator_out_dim: 4,
            routing_iters: 3,
            coupling: CouplingMode::Softmax,
        }
    }
}

impl NetworkConfig {
    pub fn generator_arch(&self, feature_dim: usize) -> Result<GeneratorArch> {
        let arch = GeneratorArch {
            feature_dim,
            hidden: self.generator_hidden,
            decoder_hidden: self.decoder_hidden,
            primary: CapsuleLayerSpec::new(
                self.generator_groups,
                self.generator_per_group,
                self.capsule_dim,
                self.routing_iters,
            )?,
            latent_dim: self.latent_dim,
            coupling: self.coupling,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn discriminator_arch(&self, feature_dim: usize) -> Result<DiscriminatorArch> {
        let mut arch = DiscriminatorArch::with_sizes(
            feature_dim,
            self.discriminator_channels,
            self.discriminator_groups,
            self.discriminator_per_group,
            self.discriminator_out_dim,
            self.routing_iters,
        )?;
        arch.coupling = self.coupling;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub csd_weight: f64,
    pub replay_mix_ratio: f64,
    /// Whether replayed exemplars also enter discriminator batches as real.
    pub replay_as_real: bool,
    pub augment: AugmentSpec,
    pub seed: u64,
    pub mode: AblationMode,
    pub cbm_beta: f64,
    /// When false every pixel is treated as background.
    pub use_cbm: bool,
    pub window: usize,
    pub pca_dim: usize,
    pub exemplars_per_task: usize,
    pub clusters: usize,
    pub kmeans_iters: usize,
    pub n_thresholds: usize,
    pub buffer_policy: BufferPolicy,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            csd_weight: 1.0,
            replay_mix_ratio: 0.25,
            replay_as_real: true,
            augment: AugmentSpec::default(),
            seed: 0,
            mode: AblationMode::Full,
            cbm_beta: crate::preprocess::DEFAULT_CBM_BETA,
            use_cbm: true,
            window: crate::preprocess::DEFAULT_WINDOW,
            pca_dim: 64,
            exemplars_per_task: crate::replay::DEFAULT_EXEMPLARS_PER_TASK,
            clusters: crate::replay::DEFAULT_CLUSTERS,
            kmeans_iters: crate::replay::DEFAULT_KMEANS_ITERS,
            n_thresholds: crate::detect_eval::DEFAULT_THRESHOLDS,
            buffer_policy: BufferPolicy::Append,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment coefficients must lie in [0, 1)".into());
        }
        if !(self.csd_weight >= 0.0 && self.csd_weight.is_finite()) {
            return bad(format!("distillation weight {} must be non-negative", self.csd_weight));
        }
        if !(0.0..=1.0).contains(&self.replay_mix_ratio) {
            return bad(format!("replay mix ratio {} outside [0, 1]", self.replay_mix_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.mode.mixes_replay() && self.replay_mix_ratio > 0.0 && self.batch_size < 2 {
            return bad("replay mixing needs a batch of at least two rows".into());
        }
        if !(self.cbm_beta > 0.0 && self.cbm_beta <= 1.0) {
            return bad(format!("CBM threshold {} outside (0, 1]", self.cbm_beta));
        }
        if self.window % 2 == 0 {
            return Err(Error::EvenWindow(self.window));
        }
        if self.pca_dim < 2 {
            return bad("PCA dimension must be at least 2".into());
        }
        if self.clusters == 0 {
            return bad("cluster count must be at least 1".into());
        }
        if self.n_thresholds < 2 {
            return bad("at least two thresholds are needed".into());
        }
        if self.buffer_policy == BufferPolicy::ReselectUnion {
            return Err(Error::Unsupported(
                "re-selecting exemplars from the union of buffer and new data".into(),
            ));
        }
        self.augment.validate()?;
        self.network.generator_arch(2)?;
        Ok(())
    }

    /// Rows per minibatch drawn from the buffer when mixing is active.
    pub fn replay_rows(&self) -> usize {
        ((self.batch_size as f64 * self.replay_mix_ratio).round() as usize).min(self.batch_size - 1)
    }
}
