//! Capsule layers, the capsule generator/discriminator pair and the
//! differentiable color augmentation shared by both adversarial losses.

mod augment;
mod checkpoint;
mod networks;

pub use augment::{augment, AugmentSpec};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use networks::{
    discriminator_forward, discriminator_graph, generator_forward, generator_graph, DiscriminatorArch,
    DiscriminatorParams, GeneratorArch, GeneratorParams, Reconstructor,
};

use crate::error::{Error, Result};
use crate::grad_core::{squash_factor, NodeId, Tape};

/// How routing logits become coupling weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Softmax over input capsules.
    #[default]
    Softmax,
    /// Logits used directly as weights. Since logits start at zero this
    /// collapses to a zero output; kept for comparison only.
    RawLogits,
}

impl CouplingMode {
    pub(crate) fn code(self) -> f64 {
        match self {
            CouplingMode::Softmax => 0.0,
            CouplingMode::RawLogits => 1.0,
        }
    }

    pub(crate) fn from_code(v: f64) -> Result<Self> {
        match v as i64 {
            0 => Ok(CouplingMode::Softmax),
            1 => Ok(CouplingMode::RawLogits),
            _ => Err(Error::Malformed(format!("unknown coupling mode code {v}"))),
        }
    }

    fn weights(self, logits: &[f64]) -> Vec<f64> {
        match self {
            CouplingMode::Softmax => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / total).collect()
            }
            CouplingMode::RawLogits => logits.to_vec(),
        }
    }
}

/// Shape of a primary capsule layer feeding one routed output capsule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsuleLayerSpec {
    pub groups: usize,
    pub per_group: usize,
    pub capsule_dim: usize,
    pub routing_iters: usize,
}

impl CapsuleLayerSpec {
    pub fn new(groups: usize, per_group: usize, capsule_dim: usize, routing_iters: usize) -> Result<Self> {
        let spec = Self {
            groups,
            per_group,
            capsule_dim,
            routing_iters,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups * self.per_group < 1 {
            return Err(Error::InvalidArgument("capsule layer needs at least one capsule".into()));
        }
        if self.capsule_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "capsule dimension {} below 2",
                self.capsule_dim
            )));
        }
        if self.routing_iters < 1 {
            return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
        }
        Ok(())
    }

    pub fn capsule_count(&self) -> usize {
        self.groups * self.per_group
    }
}

/// Squashing nonlinearity; zero maps to zero.
pub fn squash(u: &[f64]) -> Vec<f64> {
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let f = squash_factor(n);
    u.iter().map(|v| v * f).collect()
}

/// Output of value-level routing with the per-iteration coupling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub output: Vec<f64>,
    pub votes: Vec<Vec<f64>>,
    /// `couplings[it][j]` for iteration `it` and input capsule `j`.
    pub couplings: Vec<Vec<f64>>,
    /// Logits at the start of each iteration.
    pub logits: Vec<Vec<f64>>,
}

/// Routes input capsules `inputs[j]` (dim `din`) through matrices
/// `weights[j]` (`dout x din`, row-major) to one output capsule.
pub fn route_capsules(
    inputs: &[Vec<f64>],
    weights: &[Vec<f64>],
    dout: usize,
    iters: usize,
    mode: CouplingMode,
) -> Result<Routed> {
    if iters < 1 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    if inputs.is_empty() || inputs.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} input capsules but {} transformation matrices",
            inputs.len(),
            weights.len()
        )));
    }
    let din = inputs[0].len();
    let mut votes = Vec::with_capacity(inputs.len());
    for (u, w) in inputs.iter().zip(weights) {
        if u.len() != din || w.len() != dout * din {
            return Err(Error::ShapeMismatch(format!(
                "capsule of dim {} against matrix of {} entries (expected {dout}x{din})",
                u.len(),
                w.len()
            )));
        }
        let vote: Vec<f64> = w.chunks_exact(din).map(|row| dot(row, u)).collect();
        votes.push(vote);
    }
    let (output, couplings, logits) = route_votes(&votes, iters, mode);
    Ok(Routed {
        output,
        votes,
        couplings,
        logits,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs the agreement iterations over precomputed votes.
fn route_votes(votes: &[Vec<f64>], iters: usize, mode: CouplingMode) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = votes.len();
    let d = votes[0].len();
    let mut logits = vec![0.0; n];
    let mut couplings = Vec::with_capacity(iters);
    let mut logit_trace = Vec::with_capacity(iters);
    let mut output = vec![0.0; d];
    for it in 0..iters {
        logit_trace.push(logits.clone());
        let c = mode.weights(&logits);
        let mut ws = vec![0.0; d];
        for (cj, vote) in c.iter().zip(votes) {
            for (s, v) in ws.iter_mut().zip(vote) {
                *s += cj * v;
            }
        }
        output = squash(&ws);
        couplings.push(c);
        if it + 1 < iters {
            for (l, vote) in logits.iter_mut().zip(votes) {
                *l += dot(&output, vote);
            }
        }
    }
    (output, couplings, logit_trace)
}

/// Routes a batch of votes `[B, n, d]` already on the tape, unrolling every
/// agreement iteration so gradients flow through the coupling weights.
pub fn route_on_tape(tape: &mut Tape, votes: NodeId, iters: usize, mode: CouplingMode) -> NodeId {
    let shape = tape.shape(votes).to_vec();
    let (bsz, n) = (shape[0], shape[1]);
    let mut logits = tape.constant(vec![bsz, n], vec![0.0; bsz * n]);
    let mut output = None;
    for it in 0..iters.max(1) {
        let coupling = match mode {
            CouplingMode::Softmax => tape.softmax(logits),
            CouplingMode::RawLogits => logits,
        };
        let ws = tape.weighted_sum(votes, coupling);
        let v = tape.squash(ws);
        output = Some(v);
        if it + 1 < iters {
            let a = tape.agreement(votes, v);
            logits = tape.add(logits, a);
        }
    }
    output.expect("at least one iteration")
}
