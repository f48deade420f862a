//! Loss assembly, the optimizer, single-task adversarial training and the
//! continual loop over a task stream with its ablation modes.

mod config;
mod data;
mod losses;
mod optim;

pub use config::{AblationMode, BufferPolicy, NetworkConfig, TrainConfig};
pub use data::{prepare_scene, prepare_stream, unify_cube, PreparedTask, StreamTask, TaskStream};
pub use losses::{
    adversarial_generator_graph, csd_graph, discriminator_loss_graph, loss_csd, loss_discriminator,
    loss_generator, loss_reconstruction, recon_graph, SCORE_EPS,
};
pub use optim::{Adam, AdamConfig};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::capsule_nn::{
    augment, discriminator_graph, generator_forward, generator_graph, Checkpoint, DiscriminatorParams,
    GeneratorParams, NamedTensor,
};
use crate::detect_eval::{evaluate, score_map, ScoreMap};
use crate::error::{Error, Result};
use crate::grad_core::{AugmentDraw, NodeId, Tape};
use crate::replay::ReplayBuffer;

/// Generator, discriminator and the preprocessing settings they were
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    /// Number of tasks completed.
    pub task_stage: u32,
    pub window: usize,
    /// Spectral bands per pixel after unification; features are twice this.
    pub channels: usize,
}

impl NetworkParams {
    pub fn init(config: &TrainConfig, channels: usize, seed: u64) -> Result<Self> {
        let dim = 2 * channels;
        let generator = GeneratorParams::init(config.network.generator_arch(dim)?, seed)?;
        let discriminator =
            DiscriminatorParams::init(config.network.discriminator_arch(dim)?, seed.wrapping_add(0x5EED))?;
        Ok(Self {
            generator,
            discriminator,
            task_stage: 0,
            window: config.window,
            channels,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.generator.arch.feature_dim
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = vec![NamedTensor::new(
            "preprocess",
            vec![2],
            vec![self.window as f64, self.channels as f64],
        )];
        tensors.extend(self.generator.to_tensors());
        tensors.extend(self.discriminator.to_tensors());
        Checkpoint {
            task: self.task_stage,
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let pre = ckpt.require("preprocess")?;
        if pre.data.len() != 2 {
            return Err(Error::Malformed("preprocess record has wrong length".into()));
        }
        let generator = GeneratorParams::from_checkpoint(ckpt)?;
        let discriminator = DiscriminatorParams::from_checkpoint(ckpt)?;
        let channels = pre.data[1] as usize;
        if generator.arch.feature_dim != 2 * channels || discriminator.arch.feature_dim != 2 * channels {
            return Err(Error::Malformed("network widths disagree with the recorded band count".into()));
        }
        Ok(Self {
            generator,
            discriminator,
            task_stage: ckpt.task,
            window: pre.data[0] as usize,
            channels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One discriminator objective on already-augmented real and fake rows.
pub fn discriminator_step_graph(
    tape: &mut Tape,
    d: &DiscriminatorParams,
    real: &[f64],
    fake: &[f64],
) -> Result<NodeId> {
    let dim = d.arch.feature_dim;
    let rn = tape.constant(vec![real.len() / dim, dim], real.to_vec());
    let fnode = tape.constant(vec![fake.len() / dim, dim], fake.to_vec());
    let sr = discriminator_graph(tape, d, rn, true)?;
    let sf = discriminator_graph(tape, d, fnode, true)?;
    Ok(discriminator_loss_graph(tape, sr, sf))
}

/// Exemplars and the frozen generator's outputs on them.
#[derive(Debug, Clone, Copy)]
pub struct Distill<'a> {
    pub exemplars: &'a [f64],
    pub frozen_outputs: &'a [f64],
    pub weight: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorLossNodes {
    pub total: NodeId,
    pub adversarial: NodeId,
    pub recon: NodeId,
    pub csd: Option<NodeId>,
}

/// Generator reconstruction of `batch` as a trainable graph; returns the
/// input and output nodes.
pub fn generator_pass(tape: &mut Tape, g: &GeneratorParams, batch: &[f64]) -> Result<(NodeId, NodeId)> {
    let dim = g.arch.feature_dim;
    if batch.is_empty() || batch.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!("{} values are not rows of {dim}", batch.len())));
    }
    let x = tape.constant(vec![batch.len() / dim, dim], batch.to_vec());
    let y = generator_graph(tape, g, x, true)?;
    Ok((x, y))
}

/// Completes the generator objective on a tape that already holds the
/// generator pass `(x, y)`.
pub fn generator_objective(
    tape: &mut Tape,
    g: &GeneratorParams,
    d: &DiscriminatorParams,
    (x, y): (NodeId, NodeId),
    draw: AugmentDraw,
    distill: Option<Distill<'_>>,
) -> Result<GeneratorLossNodes> {
    let recon = recon_graph(tape, y, x);
    let aug = tape.augment(y, draw);
    let scores = discriminator_graph(tape, d, aug, false)?;
    let adversarial = adversarial_generator_graph(tape, scores);
    let mut total = tape.add(adversarial, recon);
    let mut csd = None;
    if let Some(dist) = distill {
        let dim = g.arch.feature_dim;
        let rows = dist.exemplars.len() / dim;
        let e = tape.constant(vec![rows, dim], dist.exemplars.to_vec());
        let ge = generator_graph(tape, g, e, true)?;
        let fe = tape.constant(vec![rows, dim], dist.frozen_outputs.to_vec());
        let c = csd_graph(tape, ge, fe);
        let weighted = tape.scale(c, dist.weight);
        total = tape.add(total, weighted);
        csd = Some(c);
    }
    Ok(GeneratorLossNodes {
        total,
        adversarial,
        recon,
        csd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub discriminator: f64,
    pub generator: f64,
    pub reconstruction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distillation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskLog {
    pub task: u32,
    pub train_rows: usize,
    pub steps: usize,
    pub replay_mixed: bool,
    pub distilled: bool,
    pub epochs: Vec<EpochLoss>,
}

fn task_rng(seed: u64, task: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(task) + 1);
    rng
}

fn gather(source: &[f64], dim: usize, rows: impl Iterator<Item = usize>, out: &mut Vec<f64>) {
    for r in rows {
        out.extend_from_slice(&source[r * dim..(r + 1) * dim]);
    }
}

fn check_finite(v: f64, task: u32, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            task: task as usize,
            epoch,
        })
    }
}

/// Adversarial training on one task's background rows. Each minibatch runs
/// one discriminator step and then one generator step.
pub fn train_task(
    params: &mut NetworkParams,
    background: &[f64],
    config: &TrainConfig,
    buffer: &ReplayBuffer,
    frozen: Option<&GeneratorParams>,
    task: u32,
) -> Result<TaskLog> {
    let dim = params.feature_dim();
    if background.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: background.len(),
        });
    }
    let n = background.len() / dim;
    if n == 0 {
        return Err(Error::EmptyBackground);
    }
    let mix = config.mode.mixes_replay() && !buffer.is_empty() && config.replay_rows() > 0;
    let distill = config.mode.distills() && config.csd_weight > 0.0 && !buffer.is_empty() && frozen.is_some();
    if (mix || distill) && buffer.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: buffer.dim(),
        });
    }
    let mut log = TaskLog {
        task,
        train_rows: n,
        steps: 0,
        replay_mixed: mix,
        distilled: distill,
        epochs: Vec::with_capacity(config.epochs),
    };
    if config.epochs == 0 {
        return Ok(log);
    }

    let replay = if mix || distill { buffer.matrix() } else { Vec::new() };
    let frozen_out = match (distill, frozen) {
        (true, Some(f)) => generator_forward(f, &replay, buffer.len())?,
        _ => Vec::new(),
    };
    let replay_rows = if mix { config.replay_rows() } else { 0 };
    let current_rows = config.batch_size - replay_rows;

    let mut rng = task_rng(config.seed, task);
    let mut adam_g = Adam::new(
        AdamConfig::new(config.lr_generator, config.beta1, config.beta2),
        &params.generator.store,
    );
    let mut adam_d = Adam::new(
        AdamConfig::new(config.lr_discriminator, config.beta1, config.beta2),
        &params.discriminator.store,
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(config.batch_size * dim);
    let mut ex = Vec::new();
    let mut ex_out = Vec::new();

    for epoch in 0..config.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(current_rows) {
            batch.clear();
            gather(background, dim, chunk.iter().copied(), &mut batch);
            let own = chunk.len();
            if mix {
                let picks: Vec<usize> = (0..replay_rows).map(|_| rng.random_range(0..buffer.len())).collect();
                gather(&replay, dim, picks.into_iter(), &mut batch);
            }
            let rows = batch.len() / dim;

            let mut gtape = Tape::new();
            let pass = generator_pass(&mut gtape, &params.generator, &batch)?;
            let fake = gtape.value(pass.1).to_vec();

            let real_rows = if config.replay_as_real { rows } else { own };
            let real_draw = config.augment.draw(real_rows, &mut rng);
            let fake_draw = config.augment.draw(rows, &mut rng);
            let real_aug = augment(&batch[..real_rows * dim], real_rows, dim, &real_draw)?;
            let fake_aug = augment(&fake, rows, dim, &fake_draw)?;
            let mut dtape = Tape::new();
            let d_loss = discriminator_step_graph(&mut dtape, &params.discriminator, &real_aug, &fake_aug)?;
            let d_value = check_finite(dtape.scalar_value(d_loss), task, epoch)?;
            dtape.backprop(d_loss)?;
            params.discriminator.store.zero_grad();
            params.discriminator.store.accumulate(&dtape);
            adam_d.optimizer_step(&mut params.discriminator.store)?;

            let g_draw = config.augment.draw(rows, &mut rng);
            let dist = if distill {
                ex.clear();
                ex_out.clear();
                let picks: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..buffer.len())).collect();
                gather(&replay, dim, picks.iter().copied(), &mut ex);
                gather(&frozen_out, dim, picks.into_iter(), &mut ex_out);
                Some(Distill {
                    exemplars: &ex,
                    frozen_outputs: &ex_out,
                    weight: config.csd_weight,
                })
            } else {
                None
            };
            let nodes = generator_objective(
                &mut gtape,
                &params.generator,
                &params.discriminator,
                pass,
                g_draw,
                dist,
            )?;
            let g_value = check_finite(gtape.scalar_value(nodes.total), task, epoch)?;
            gtape.backprop(nodes.total)?;
            params.generator.store.zero_grad();
            params.generator.store.accumulate(&gtape);
            adam_g.optimizer_step(&mut params.generator.store)?;

            sums[0] += d_value;
            sums[1] += g_value;
            sums[2] += gtape.scalar_value(nodes.recon);
            if let Some(c) = nodes.csd {
                sums[3] += gtape.scalar_value(c);
            }
            batches += 1;
        }
        let b = batches as f64;
        log.steps += batches;
        log.epochs.push(EpochLoss {
            epoch,
            discriminator: sums[0] / b,
            generator: sums[1] / b,
            reconstruction: sums[2] / b,
            distillation: distill.then(|| sums[3] / b),
        });
        log::debug!(
            "task {task} epoch {epoch}: D {:.5} G {:.5} recon {:.6}",
            sums[0] / b,
            sums[1] / b,
            sums[2] / b
        );
    }
    Ok(log)
}

/// Detection map of a prepared task under the current generator.
pub fn task_scores(params: &NetworkParams, task: &PreparedTask) -> Result<ScoreMap> {
    score_map(&params.generator, &task.features)
}

/// AUC_(D,F) of a prepared task, or `None` without ground truth.
pub fn task_auc(params: &NetworkParams, task: &PreparedTask, n_thresholds: usize) -> Result<Option<f64>> {
    match &task.truth {
        Some(truth) => Ok(Some(evaluate(&task_scores(params, task)?, truth, n_thresholds)?.auc_df)),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: u32,
    pub name: String,
    pub log: TaskLog,
    /// AUC on tasks `0..=stage`, when every one has ground truth.
    pub auc_row: Option<Vec<f64>>,
    pub buffer_len: usize,
    pub params: NetworkParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    pub final_params: NetworkParams,
    pub stages: Vec<StageRecord>,
    pub buffer: ReplayBuffer,
    pub channels: usize,
}

impl StreamOutcome {
    pub fn auc_matrix(&self) -> Option<Vec<Vec<f64>>> {
        self.stages.iter().map(|s| s.auc_row.clone()).collect()
    }
}

/// State carried across a checkpoint boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub params: NetworkParams,
    pub buffer: ReplayBuffer,
}

fn init_seed(seed: u64, stage: u32) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(u64::from(stage)))
}

fn cluster_seed(seed: u64, stage: u32) -> u64 {
    seed ^ 0xC1A5_7E25u64.wrapping_mul(u64::from(stage) + 1)
}

pub fn train_stream(stream: &TaskStream, config: &TrainConfig) -> Result<StreamOutcome> {
    config.validate()?;
    let tasks = prepare_stream(stream, config)?;
    train_prepared(&tasks, stream.unified_channels(config.pca_dim), config, None)
}

/// Runs stages `resume.params.task_stage..tasks.len()` (all stages when not
/// resuming).
pub fn train_prepared(
    tasks: &[PreparedTask],
    channels: usize,
    config: &TrainConfig,
    resume: Option<ResumeState>,
) -> Result<StreamOutcome> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to train".into()));
    }
    let dim = 2 * channels;
    if let Some(t) = tasks.iter().find(|t| t.features.dim != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: t.features.dim,
        });
    }
    let (mut params, mut buffer) = match resume {
        Some(r) => {
            if r.params.feature_dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.params.feature_dim(),
                });
            }
            (r.params, r.buffer)
        }
        None => (
            NetworkParams::init(config, channels, init_seed(config.seed, 0))?,
            ReplayBuffer::new(config.exemplars_per_task, dim),
        ),
    };
    let start = params.task_stage as usize;
    let mut stages = Vec::new();
    for (r, task) in tasks.iter().enumerate().skip(start) {
        let stage = r as u32;
        let log = if config.mode.fresh_per_stage() {
            params = NetworkParams::init(config, channels, init_seed(config.seed, stage))?;
            let pooled: Vec<f64> = if config.mode == AblationMode::Joint {
                tasks[..=r].iter().flat_map(|t| t.background.vectors.iter().copied()).collect()
            } else {
                task.background.vectors.clone()
            };
            train_task(&mut params, &pooled, config, &buffer, None, stage)?
        } else {
            let frozen = (r > 0 && config.mode.distills()).then(|| params.generator.clone());
            train_task(&mut params, &task.background.vectors, config, &buffer, frozen.as_ref(), stage)?
        };
        params.task_stage = stage + 1;
        if config.mode.keeps_buffer() {
            buffer.select_and_append(
                &task.background.vectors,
                config.clusters,
                cluster_seed(config.seed, stage),
                config.kmeans_iters,
                stage,
            )?;
        }
        let aucs = tasks[..=r]
            .par_iter()
            .map(|t| task_auc(&params, t, config.n_thresholds))
            .collect::<Result<Vec<_>>>()?;
        let row: Option<Vec<f64>> = aucs.into_iter().collect();
        log::info!(
            "stage {stage} ({}) done: buffer {} entries, AUC row {:?}",
            task.name,
            buffer.len(),
            row
        );
        stages.push(StageRecord {
            stage,
            name: task.name.clone(),
            log,
            auc_row: row,
            buffer_len: buffer.len(),
            params: params.clone(),
        });
    }
    Ok(StreamOutcome {
        final_params: params,
        stages,
        buffer,
        channels,
    })
}
