//! Direct loss formulas and their tape counterparts.

use crate::capsule_nn::{generator_forward, GeneratorParams};
use crate::error::{Error, Result};
use crate::grad_core::{NodeId, Tape};

/// Clamp applied to discriminator scores before any logarithm.
pub const SCORE_EPS: f64 = 1e-7;

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Mean over every coordinate of the squared difference.
pub fn loss_reconstruction(b_hat: &[f64], b: &[f64]) -> Result<f64> {
    if b_hat.len() != b.len() || b.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction of {} values against {} targets",
            b_hat.len(),
            b.len()
        )));
    }
    Ok(b_hat.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / b.len() as f64)
}

/// Saturating generator objective plus the reconstruction term.
pub fn loss_generator(fake_scores: &[f64], recon: f64) -> f64 {
    let adv = fake_scores.iter().map(|&s| (1.0 - clamp_score(s)).ln()).sum::<f64>() / fake_scores.len() as f64;
    adv + recon
}

pub fn loss_discriminator(real_scores: &[f64], fake_scores: &[f64]) -> f64 {
    let real = real_scores.iter().map(|&s| clamp_score(s).ln()).sum::<f64>() / real_scores.len() as f64;
    let fake = fake_scores.iter().map(|&s| (1.0 - clamp_score(s)).ln()).sum::<f64>() / fake_scores.len() as f64;
    -(real + fake)
}

/// Mean over exemplars of the squared distance between the two
/// generators' reconstructions. An empty exemplar set yields zero.
pub fn loss_csd(current: &GeneratorParams, frozen: &GeneratorParams, exemplars: &[f64], rows: usize) -> Result<f64> {
    if rows == 0 {
        log::warn!("self-distillation requested with no exemplars; contributing zero");
        return Ok(0.0);
    }
    let a = generator_forward(current, exemplars, rows)?;
    let b = generator_forward(frozen, exemplars, rows)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / rows as f64)
}

pub fn recon_graph(tape: &mut Tape, output: NodeId, target: NodeId) -> NodeId {
    let d = tape.sub(output, target);
    let sq = tape.mul(d, d);
    tape.mean(sq)
}

fn one_minus(tape: &mut Tape, x: NodeId) -> NodeId {
    let neg = tape.scale(x, -1.0);
    tape.add_scalar(neg, 1.0)
}

/// `mean(log(1 - clamp(scores)))`.
pub fn adversarial_generator_graph(tape: &mut Tape, fake_scores: NodeId) -> NodeId {
    let c = tape.clamp(fake_scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let om = one_minus(tape, c);
    let l = tape.log(om);
    tape.mean(l)
}

pub fn discriminator_loss_graph(tape: &mut Tape, real_scores: NodeId, fake_scores: NodeId) -> NodeId {
    let cr = tape.clamp(real_scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let lr = tape.log(cr);
    let mr = tape.mean(lr);
    let cf = tape.clamp(fake_scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let om = one_minus(tape, cf);
    let lf = tape.log(om);
    let mf = tape.mean(lf);
    let s = tape.add(mr, mf);
    tape.scale(s, -1.0)
}

/// Per-row squared distance averaged over rows, for outputs `[B, F]`.
pub fn csd_graph(tape: &mut Tape, current: NodeId, frozen: NodeId) -> NodeId {
    let dim = *tape.shape(current).last().expect("two-dimensional output") as f64;
    let m = recon_graph(tape, current, frozen);
    tape.scale(m, dim)
}
