use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{Checkpoint, NamedTensor};
use super::{route_on_tape, CapsuleLayerSpec, CouplingMode};
use crate::error::{Error, Result};
use crate::grad_core::{NodeId, ParamKey, ParamStore, ParamTensor, Tape};

const LEAKY_SLOPE: f64 = 0.2;
/// Rows per tape when running inference over many vectors.
const INFERENCE_CHUNK: usize = 512;

pub const GENERATOR_GROUP: u32 = 0;
pub const DISCRIMINATOR_GROUP: u32 = 1;

/// Anything that maps feature vectors to reconstructions of the same size.
pub trait Reconstructor {
    fn feature_dim(&self) -> usize;
    fn reconstruct(&self, batch: &[f64], rows: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorArch {
    pub feature_dim: usize,
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub primary: CapsuleLayerSpec,
    pub latent_dim: usize,
    pub coupling: CouplingMode,
}

impl GeneratorArch {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden: 256,
            decoder_hidden: 256,
            primary: CapsuleLayerSpec {
                groups: 8,
                per_group: 4,
                capsule_dim: 8,
                routing_iters: 3,
            },
            latent_dim: 16,
            coupling: CouplingMode::Softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.primary.validate()?;
        if self.feature_dim == 0 || self.hidden == 0 || self.decoder_hidden == 0 || self.latent_dim < 2 {
            return Err(Error::InvalidArgument(format!("degenerate generator sizes {self:?}")));
        }
        Ok(())
    }

    fn meta(&self) -> Vec<f64> {
        vec![
            self.feature_dim as f64,
            self.hidden as f64,
            self.decoder_hidden as f64,
            self.primary.groups as f64,
            self.primary.per_group as f64,
            self.primary.capsule_dim as f64,
            self.primary.routing_iters as f64,
            self.latent_dim as f64,
            self.coupling.code(),
        ]
    }

    fn from_meta(m: &[f64]) -> Result<Self> {
        if m.len() != 9 {
            return Err(Error::Malformed("generator architecture record has wrong length".into()));
        }
        let arch = Self {
            feature_dim: m[0] as usize,
            hidden: m[1] as usize,
            decoder_hidden: m[2] as usize,
            primary: CapsuleLayerSpec {
                groups: m[3] as usize,
                per_group: m[4] as usize,
                capsule_dim: m[5] as usize,
                routing_iters: m[6] as usize,
            },
            latent_dim: m[7] as usize,
            coupling: CouplingMode::from_code(m[8])?,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let caps = self.primary.capsule_count();
        vec![
            ("generator.primary.0.weight", vec![self.hidden, self.feature_dim]),
            ("generator.primary.0.bias", vec![self.hidden]),
            ("generator.primary.1.weight", vec![caps * self.primary.capsule_dim, self.hidden]),
            ("generator.primary.1.bias", vec![caps * self.primary.capsule_dim]),
            ("generator.capsule.weight", vec![caps, self.latent_dim, self.primary.capsule_dim]),
            ("generator.decoder.0.weight", vec![self.decoder_hidden, self.latent_dim]),
            ("generator.decoder.0.bias", vec![self.decoder_hidden]),
            ("generator.decoder.1.weight", vec![self.feature_dim, self.decoder_hidden]),
            ("generator.decoder.1.bias", vec![self.feature_dim]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorArch {
    pub feature_dim: usize,
    pub channels: usize,
    pub kernels: [usize; 3],
    /// `capsule_dim` is derived: all conv outputs are split evenly over the
    /// primary capsules.
    pub primary: CapsuleLayerSpec,
    pub out_dim: usize,
    pub coupling: CouplingMode,
}

impl DiscriminatorArch {
    pub fn new(feature_dim: usize) -> Result<Self> {
        Self::with_sizes(feature_dim, 16, 8, 4, 4, 3)
    }

    pub fn with_sizes(
        feature_dim: usize,
        channels: usize,
        groups: usize,
        per_group: usize,
        out_dim: usize,
        routing_iters: usize,
    ) -> Result<Self> {
        let caps = groups * per_group;
        let total = 3 * channels * feature_dim;
        if caps == 0 || total % caps != 0 {
            return Err(Error::InvalidArgument(format!(
                "{total} convolution outputs cannot be split into {caps} capsules"
            )));
        }
        let arch = Self {
            feature_dim,
            channels,
            kernels: [1, 3, 5],
            primary: CapsuleLayerSpec {
                groups,
                per_group,
                capsule_dim: total / caps,
                routing_iters,
            },
            out_dim,
            coupling: CouplingMode::Softmax,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        self.primary.validate()?;
        if self.kernels != [1, 3, 5] {
            return Err(Error::InvalidArgument(format!("kernel widths {:?} must be 1, 3, 5", self.kernels)));
        }
        if self.channels == 0 || self.out_dim < 2 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(format!("degenerate discriminator sizes {self:?}")));
        }
        if 3 * self.channels * self.feature_dim != self.primary.capsule_count() * self.primary.capsule_dim {
            return Err(Error::InvalidArgument("capsule layout does not cover the feature maps".into()));
        }
        Ok(())
    }

    fn meta(&self) -> Vec<f64> {
        vec![
            self.feature_dim as f64,
            self.channels as f64,
            self.primary.groups as f64,
            self.primary.per_group as f64,
            self.out_dim as f64,
            self.primary.routing_iters as f64,
            self.coupling.code(),
        ]
    }

    fn from_meta(m: &[f64]) -> Result<Self> {
        if m.len() != 7 {
            return Err(Error::Malformed("discriminator architecture record has wrong length".into()));
        }
        let mut arch = Self::with_sizes(
            m[0] as usize,
            m[1] as usize,
            m[2] as usize,
            m[3] as usize,
            m[4] as usize,
            m[5] as usize,
        )?;
        arch.coupling = CouplingMode::from_code(m[6])?;
        Ok(arch)
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for k in self.kernels {
            out.push((format!("discriminator.conv{k}.weight"), vec![self.channels, 1, k]));
            out.push((format!("discriminator.conv{k}.bias"), vec![self.channels]));
        }
        out.push((
            "discriminator.capsule.weight".into(),
            vec![self.primary.capsule_count(), self.out_dim, self.primary.capsule_dim],
        ));
        out
    }
}

fn init_tensor(rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, std: f64) -> ParamTensor {
    let n = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| normal.sample(rng)).collect()
    };
    ParamTensor::new(name, shape, data)
}

fn load_store(group: u32, shapes: &[(String, Vec<usize>)], ckpt: &Checkpoint) -> Result<ParamStore> {
    let mut store = ParamStore::new(group);
    for (name, shape) in shapes {
        let t = ckpt.require(name)?;
        if &t.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name} has shape {:?}, architecture expects {shape:?}",
                t.shape
            )));
        }
        store.add(ParamTensor::new(name.clone(), t.shape.clone(), t.data.clone()));
    }
    Ok(store)
}

fn check_batch(batch: &[f64], rows: usize, dim: usize) -> Result<()> {
    if batch.len() != rows * dim {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} values is not {rows} rows of dimension {dim}",
            batch.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub arch: GeneratorArch,
    pub store: ParamStore,
}

impl GeneratorParams {
    pub fn init(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(GENERATOR_GROUP);
        for (name, shape) in arch.shapes() {
            let std = match name {
                n if n.ends_with("bias") => 0.0,
                "generator.primary.0.weight" | "generator.decoder.0.weight" => (2.0 / shape[1] as f64).sqrt(),
                "generator.capsule.weight" => (1.0 / shape[2] as f64).sqrt(),
                _ => (1.0 / shape[1] as f64).sqrt(),
            };
            store.add(init_tensor(&mut rng, name, shape, std));
        }
        Ok(Self { arch, store })
    }

    pub fn key(&self, index: usize) -> ParamKey {
        self.store.key(index)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let meta = self.arch.meta();
        let mut out = vec![NamedTensor::new("generator.arch", vec![meta.len()], meta)];
        out.extend(
            self.store
                .tensors()
                .iter()
                .map(|t| NamedTensor::new(t.name.clone(), t.shape.clone(), t.data.clone())),
        );
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = GeneratorArch::from_meta(&ckpt.require("generator.arch")?.data)?;
        let shapes: Vec<(String, Vec<usize>)> = arch.shapes().into_iter().map(|(n, s)| (n.to_string(), s)).collect();
        let store = load_store(GENERATOR_GROUP, &shapes, ckpt)?;
        Ok(Self { arch, store })
    }
}

/// Builds the generator on `tape` for an input node `[B, F]`; returns the
/// reconstruction node `[B, F]`.
pub fn generator_graph(tape: &mut Tape, params: &GeneratorParams, input: NodeId, trainable: bool) -> Result<NodeId> {
    let a = &params.arch;
    let shape = tape.shape(input).to_vec();
    if shape.len() != 2 || shape[1] != a.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "generator expects [B, {}] input, got {shape:?}",
            a.feature_dim
        )));
    }
    let bsz = shape[0];
    let p: Vec<NodeId> = (0..params.store.tensors().len())
        .map(|i| tape.param(params.key(i), &params.store.tensors()[i], trainable))
        .collect();
    let h = tape.affine(input, p[0], Some(p[1]));
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let prim = tape.affine(h, p[2], Some(p[3]));
    let caps = tape.reshape(prim, vec![bsz, a.primary.capsule_count(), a.primary.capsule_dim]);
    let caps = tape.squash(caps);
    let votes = tape.capsule_votes(caps, p[4]);
    let latent = route_on_tape(tape, votes, a.primary.routing_iters, a.coupling);
    let d = tape.affine(latent, p[5], Some(p[6]));
    let d = tape.leaky_relu(d, LEAKY_SLOPE);
    let out = tape.affine(d, p[7], Some(p[8]));
    Ok(tape.sigmoid(out))
}

pub fn generator_forward(params: &GeneratorParams, batch: &[f64], rows: usize) -> Result<Vec<f64>> {
    let dim = params.arch.feature_dim;
    check_batch(batch, rows, dim)?;
    let mut out = Vec::with_capacity(batch.len());
    for start in (0..rows).step_by(INFERENCE_CHUNK) {
        let n = INFERENCE_CHUNK.min(rows - start);
        let mut tape = Tape::new();
        let x = tape.constant(vec![n, dim], batch[start * dim..(start + n) * dim].to_vec());
        let y = generator_graph(&mut tape, params, x, false)?;
        out.extend_from_slice(tape.value(y));
    }
    Ok(out)
}

impl Reconstructor for GeneratorParams {
    fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    fn reconstruct(&self, batch: &[f64], rows: usize) -> Result<Vec<f64>> {
        generator_forward(self, batch, rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub arch: DiscriminatorArch,
    pub store: ParamStore,
}

impl DiscriminatorParams {
    pub fn init(arch: DiscriminatorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DISCRIMINATOR_GROUP);
        for (name, shape) in arch.shapes() {
            let std = if name.ends_with("bias") {
                0.0
            } else if name.ends_with("capsule.weight") {
                (1.0 / shape[2] as f64).sqrt()
            } else {
                (2.0 / (shape[1] * shape[2]) as f64).sqrt()
            };
            store.add(init_tensor(&mut rng, &name, shape, std));
        }
        Ok(Self { arch, store })
    }

    pub fn key(&self, index: usize) -> ParamKey {
        self.store.key(index)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let meta = self.arch.meta();
        let mut out = vec![NamedTensor::new("discriminator.arch", vec![meta.len()], meta)];
        out.extend(
            self.store
                .tensors()
                .iter()
                .map(|t| NamedTensor::new(t.name.clone(), t.shape.clone(), t.data.clone())),
        );
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = DiscriminatorArch::from_meta(&ckpt.require("discriminator.arch")?.data)?;
        let store = load_store(DISCRIMINATOR_GROUP, &arch.shapes(), ckpt)?;
        Ok(Self { arch, store })
    }
}

/// Builds the discriminator for an input node `[B, F]`; returns the score
/// node `[B]` holding output-capsule lengths.
pub fn discriminator_graph(
    tape: &mut Tape,
    params: &DiscriminatorParams,
    input: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let a = &params.arch;
    let shape = tape.shape(input).to_vec();
    if shape.len() != 2 || shape[1] != a.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "discriminator expects [B, {}] input, got {shape:?}",
            a.feature_dim
        )));
    }
    let bsz = shape[0];
    let p: Vec<NodeId> = (0..params.store.tensors().len())
        .map(|i| tape.param(params.key(i), &params.store.tensors()[i], trainable))
        .collect();
    let x = tape.reshape(input, vec![bsz, 1, a.feature_dim]);
    let mut maps = Vec::with_capacity(3);
    for bank in 0..3 {
        let y = tape.conv1d(x, p[2 * bank], p[2 * bank + 1]);
        maps.push(tape.leaky_relu(y, LEAKY_SLOPE));
    }
    let cat = tape.concat(&maps, 1);
    let caps = tape.reshape(cat, vec![bsz, a.primary.capsule_count(), a.primary.capsule_dim]);
    let caps = tape.squash(caps);
    let votes = tape.capsule_votes(caps, p[6]);
    let out = route_on_tape(tape, votes, a.primary.routing_iters, a.coupling);
    Ok(tape.norm(out))
}

pub fn discriminator_forward(params: &DiscriminatorParams, batch: &[f64], rows: usize) -> Result<Vec<f64>> {
    let dim = params.arch.feature_dim;
    check_batch(batch, rows, dim)?;
    let mut out = Vec::with_capacity(rows);
    for start in (0..rows).step_by(INFERENCE_CHUNK) {
        let n = INFERENCE_CHUNK.min(rows - start);
        let mut tape = Tape::new();
        let x = tape.constant(vec![n, dim], batch[start * dim..(start + n) * dim].to_vec());
        let y = discriminator_graph(&mut tape, params, x, false)?;
        out.extend_from_slice(tape.value(y));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_core::finite_diff_check;
    use rand::Rng;

    fn small_gen(dim: usize) -> GeneratorArch {
        GeneratorArch {
            feature_dim: dim,
            hidden: 12,
            decoder_hidden: 10,
            primary: CapsuleLayerSpec {
                groups: 2,
                per_group: 2,
                capsule_dim: 3,
                routing_iters: 3,
            },
            latent_dim: 4,
            coupling: CouplingMode::Softmax,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f64> {
        (0..rows * dim).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn generator_preserves_shape_and_is_pure() {
        let g = GeneratorParams::init(GeneratorArch::new(16), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut batch = random_batch(&mut rng, 5, 16);
        batch.copy_within(0..16, 16);
        let out = generator_forward(&g, &batch, 5).unwrap();
        assert_eq!(out.len(), batch.len());
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out[..16], out[16..32]);
        assert_eq!(out, generator_forward(&g, &batch, 5).unwrap());
        assert!(matches!(generator_forward(&g, &batch[..10], 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn default_generator_has_expected_parameter_count() {
        let g = GeneratorParams::init(GeneratorArch::new(64), 0).unwrap();
        let expect = (256 * 64 + 256) + (256 * 256 + 256) + 32 * 16 * 8 + (256 * 16 + 256) + (64 * 256 + 64);
        assert_eq!(g.parameter_count(), expect);
    }

    #[test]
    fn discriminator_scores_below_one_and_pure() {
        let d = DiscriminatorParams::init(DiscriminatorArch::new(16).unwrap(), 2).unwrap();
        assert_eq!(d.arch.primary.capsule_dim, 3 * 16 * 16 / 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = random_batch(&mut rng, 6, 16);
        batch.copy_within(0..16, 16);
        batch[80..96].iter_mut().for_each(|v| *v = 1e6);
        let s = discriminator_forward(&d, &batch, 6).unwrap();
        assert!(s.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn untrained_discriminator_scores_are_concentrated() {
        let d = DiscriminatorParams::init(DiscriminatorArch::new(64).unwrap(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(&mut rng, 200, 64);
        let s = discriminator_forward(&d, &batch, 200).unwrap();
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(0.0, f64::max);
        assert!(hi - lo < 0.2, "spread {lo}..{hi}");
    }

    #[test]
    fn discriminator_rejects_unsplittable_layout() {
        assert!(DiscriminatorArch::with_sizes(5, 1, 2, 2, 4, 3).is_err());
        assert!(DiscriminatorArch::with_sizes(4, 16, 8, 4, 4, 3).is_ok());
    }

    #[test]
    fn generator_graph_passes_finite_differences() {
        let g = GeneratorParams::init(small_gen(6), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 4, 6);
        let mut tape = Tape::new();
        let x = tape.constant(vec![4, 6], batch.clone());
        let y = generator_graph(&mut tape, &g, x, true).unwrap();
        let diff = tape.sub(y, x);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean(sq);
        let report = finite_diff_check(&mut tape, loss, 1e-5, 1e-4, 40).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn discriminator_graph_passes_finite_differences() {
        let d = DiscriminatorParams::init(DiscriminatorArch::with_sizes(6, 2, 2, 2, 3, 3).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(&mut rng, 4, 6);
        let mut tape = Tape::new();
        let x = tape.constant(vec![4, 6], batch);
        let s = discriminator_graph(&mut tape, &d, x, true).unwrap();
        let l = tape.mean(s);
        let report = finite_diff_check(&mut tape, l, 1e-5, 1e-4, 40).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn checkpoint_round_trip_restores_networks() {
        let g = GeneratorParams::init(small_gen(6), 7).unwrap();
        let d = DiscriminatorParams::init(DiscriminatorArch::with_sizes(6, 2, 2, 2, 3, 3).unwrap(), 8).unwrap();
        let mut tensors = g.to_tensors();
        tensors.extend(d.to_tensors());
        let ckpt = Checkpoint { task: 1, tensors };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.caps");
        ckpt.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(GeneratorParams::from_checkpoint(&back).unwrap(), g);
        assert_eq!(DiscriminatorParams::from_checkpoint(&back).unwrap(), d);
    }
}
