//! Training objectives: supervised cross-entropy, the structural-similarity
//! triplet loss and its squared-distance / Gram-matrix / embedding-space
//! relatives, the Gaussian KL regularizer, and the combined objectives that
//! mix them.
//!
//! Contrastive sign convention: for similarity-based losses the printed
//! triplet form `sim(pos) - sim(neg)` would *reduce* similarity to the
//! positive when minimized. [`SignMode::TextIntent`] (the default) therefore
//! minimizes `sim(neg) - sim(pos)`, pulling the transformed input toward
//! positives; [`SignMode::Literal`] keeps the printed orientation for exact
//! reproduction. Distance-based losses ([`triplet_mse`], [`scl_loss`]) have
//! a fixed orientation (minimize distance to the positive) and no mode.

use crate::error::{Error, Result};
use crate::ssim::{ms_ssim, SsimConfig};
use crate::tensor::{Tape, Tensor, Value};

/// Orientation of similarity-based contrastive losses (see module docs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    #[default]
    TextIntent,
    Literal,
}

impl SignMode {
    /// +1 for text-intent, -1 for literal: multiplies the text-intent loss.
    fn factor(self) -> f64 {
        match self {
            SignMode::TextIntent => 1.0,
            SignMode::Literal => -1.0,
        }
    }
}

/// Which terms of the contrastive loss participate (positive-only /
/// negative-only ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConTerms {
    #[default]
    Both,
    PosOnly,
    NegOnly,
}

/// Scalar weights of the combined objectives.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Weight of the KL term.
    pub beta: f64,
    pub sign_mode: SignMode,
}

impl LossWeights {
    pub fn new(lambda: f64, beta: f64, sign_mode: SignMode) -> Result<Self> {
        let w = LossWeights { lambda, beta, sign_mode };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "contrastive weight lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "KL weight beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.0, beta: 0.0, sign_mode: SignMode::TextIntent }
    }
}

/// Mean softmax cross-entropy of `logits` `[N,k]` against integer `labels`.
///
/// Stabilized by subtracting each row's max as a detached constant;
/// cross-entropy is translation-invariant per row, so gradients are exact.
pub fn cross_entropy(tape: &mut Tape, logits: Value, labels: &[usize]) -> Result<Value> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 {
        return Err(Error::shape(format!("cross_entropy expects [N,k] logits, got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::shape(format!(
            "cross_entropy got {} labels for batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::data(format!("label {bad} out of range for {k} classes")));
    }
    let data = tape.value(logits).data();
    let mut row_max = vec![0.0; n];
    let mut onehot = vec![0.0; n * k];
    for i in 0..n {
        row_max[i] = data[i * k..(i + 1) * k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        onehot[i * k + labels[i]] = 1.0;
    }
    let m = tape.constant(Tensor::new(vec![n, 1], row_max)?);
    let oh = tape.constant(Tensor::new(vec![n, k], onehot)?);
    let z = tape.sub(logits, m)?;
    let ez = tape.exp(z);
    let sum_ez = tape.reduce_sum(ez, &[1])?;
    let lse = tape.ln(sum_ez);
    let picked = tape.mul(z, oh)?;
    let correct = tape.reduce_sum(picked, &[1])?;
    let per_row = tape.sub(lse, correct)?;
    tape.mean_all(per_row)
}

/// Structural-similarity triplet loss over image batches: the batch mean of
/// `MS(psi, x_neg) - MS(psi, x_pos)` in text-intent mode (negated in literal
/// mode). All three batches must share one NHWC shape.
pub fn triplet_msssim(
    tape: &mut Tape,
    psi: Value,
    x_pos: Value,
    x_neg: Value,
    cfg: &SsimConfig,
    sign_mode: SignMode,
) -> Result<Value> {
    triplet_msssim_terms(tape, psi, x_pos, x_neg, cfg, sign_mode, ConTerms::Both)
}

/// [`triplet_msssim`] with selectable terms: `PosOnly` keeps only the
/// `-MS(psi, x_pos)` pull toward positives, `NegOnly` only the
/// `+MS(psi, x_neg)` push from negatives (text-intent orientation; literal
/// mode negates whichever terms are present).
pub fn triplet_msssim_terms(
    tape: &mut Tape,
    psi: Value,
    x_pos: Value,
    x_neg: Value,
    cfg: &SsimConfig,
    sign_mode: SignMode,
    terms: ConTerms,
) -> Result<Value> {
    check_triplet_shapes(tape, psi, x_pos, x_neg)?;
    let per_sample = match terms {
        ConTerms::Both => {
            let sim_neg = ms_ssim(tape, psi, x_neg, cfg)?;
            let sim_pos = ms_ssim(tape, psi, x_pos, cfg)?;
            tape.sub(sim_neg, sim_pos)?
        }
        ConTerms::PosOnly => {
            let sim_pos = ms_ssim(tape, psi, x_pos, cfg)?;
            tape.neg(sim_pos)
        }
        ConTerms::NegOnly => ms_ssim(tape, psi, x_neg, cfg)?,
    };
    let mean = tape.mean_all(per_sample)?;
    Ok(scale_by_mode(tape, mean, sign_mode))
}

/// Squared-distance triplet loss: batch mean of
/// `||psi - x_pos||^2 - ||psi - x_neg||^2` (minimizing pulls toward the
/// positive; fixed orientation).
pub fn triplet_mse(tape: &mut Tape, psi: Value, x_pos: Value, x_neg: Value) -> Result<Value> {
    check_triplet_shapes(tape, psi, x_pos, x_neg)?;
    let d_pos = squared_dist_per_sample(tape, psi, x_pos)?;
    let d_neg = squared_dist_per_sample(tape, psi, x_neg)?;
    let diff = tape.sub(d_pos, d_neg)?;
    tape.mean_all(diff)
}

/// Gram-matrix contrastive loss for the representation variant: with each
/// sample flattened to a `C x (H*W)` matrix, forms Gram products
/// `G± = S_flat · X±_flat^T` and takes the batch mean of
/// `mean-entry(G_neg) - mean-entry(G_pos)` (text-intent; literal negates).
///
/// Computed via the identity
/// `mean-entry(G) = (1/C^2) * sum_p (sum_c S[p,c]) * (sum_c X[p,c])`,
/// avoiding materializing C x C matrices on the tape.
pub fn gram_loss(
    tape: &mut Tape,
    s: Value,
    x_pos: Value,
    x_neg: Value,
    sign_mode: SignMode,
) -> Result<Value> {
    check_triplet_shapes(tape, s, x_pos, x_neg)?;
    let c = tape.value(s).shape()[3];
    let g_pos = gram_mean_per_sample(tape, s, x_pos, c)?;
    let g_neg = gram_mean_per_sample(tape, s, x_neg, c)?;
    let diff = tape.sub(g_neg, g_pos)?;
    let mean = tape.mean_all(diff)?;
    Ok(scale_by_mode(tape, mean, sign_mode))
}

/// Embedding-space contrastive loss: batch mean of
/// `||e_x - e_pos||^2 - ||e_x - e_neg||^2` over `[N,D]` embeddings.
pub fn scl_loss(tape: &mut Tape, e_x: Value, e_pos: Value, e_neg: Value) -> Result<Value> {
    let s = tape.value(e_x).shape().to_vec();
    if s.len() != 2
        || tape.value(e_pos).shape() != s.as_slice()
        || tape.value(e_neg).shape() != s.as_slice()
    {
        return Err(Error::shape(format!(
            "embedding triplet needs three equal [N,D] tensors, got {s:?}, {:?}, {:?}",
            tape.value(e_pos).shape(),
            tape.value(e_neg).shape()
        )));
    }
    let d_pos = squared_dist_per_sample(tape, e_x, e_pos)?;
    let d_neg = squared_dist_per_sample(tape, e_x, e_neg)?;
    let diff = tape.sub(d_pos, d_neg)?;
    tape.mean_all(diff)
}

/// KL divergence from `N(mu, diag(exp(logvar)))` to the standard normal,
/// averaged over the batch: `mean_n 0.5 * sum_d(mu^2 + e^logvar - 1 - logvar)`.
pub fn kl_gauss(tape: &mut Tape, mu: Value, logvar: Value) -> Result<Value> {
    let sm = tape.value(mu).shape().to_vec();
    let sv = tape.value(logvar).shape().to_vec();
    if sm.len() != 2 || sm != sv {
        return Err(Error::shape(format!(
            "kl_gauss expects matching [N,Dz] mu and logvar, got {sm:?} and {sv:?}"
        )));
    }
    if !tape.value(mu).data().iter().all(|v| v.is_finite())
        || !tape.value(logvar).data().iter().all(|v| v.is_finite())
    {
        return Err(Error::data("kl_gauss requires finite mu and logvar"));
    }
    let mu2 = tape.square(mu);
    let ev = tape.exp(logvar);
    let a = tape.add(mu2, ev)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0);
    let per_sample = tape.reduce_sum(c, &[1])?;
    let mean = tape.mean_all(per_sample)?;
    Ok(tape.scale(mean, 0.5))
}

/// Combined objective `lambda * loss_con + loss_sup`.
pub fn cim_objective(
    tape: &mut Tape,
    loss_con: Value,
    loss_sup: Value,
    w: &LossWeights,
) -> Result<Value> {
    w.validate()?;
    let scaled = tape.scale(loss_con, w.lambda);
    tape.add(scaled, loss_sup)
}

/// Combined objective `lambda * loss_con + loss_sup + beta * kl`.
pub fn cim_vib_objective(
    tape: &mut Tape,
    loss_con: Value,
    loss_sup: Value,
    kl: Value,
    w: &LossWeights,
) -> Result<Value> {
    let base = cim_objective(tape, loss_con, loss_sup, w)?;
    let scaled_kl = tape.scale(kl, w.beta);
    tape.add(base, scaled_kl)
}

fn scale_by_mode(tape: &mut Tape, v: Value, sign_mode: SignMode) -> Value {
    match sign_mode {
        SignMode::TextIntent => v,
        SignMode::Literal => tape.scale(v, sign_mode.factor()),
    }
}

fn check_triplet_shapes(tape: &mut Tape, a: Value, b: Value, c: Value) -> Result<()> {
    let sa = tape.value(a).shape().to_vec();
    if sa.len() != 4 || tape.value(b).shape() != sa.as_slice() || tape.value(c).shape() != sa.as_slice()
    {
        return Err(Error::shape(format!(
            "triplet needs three equal NHWC batches, got {sa:?}, {:?}, {:?}",
            tape.value(b).shape(),
            tape.value(c).shape()
        )));
    }
    Ok(())
}

/// `||a - b||^2` per sample: sum over all non-batch axes, result `[N]`.
fn squared_dist_per_sample(tape: &mut Tape, a: Value, b: Value) -> Result<Value> {
    let rank = tape.value(a).rank();
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let axes: Vec<usize> = (1..rank).collect();
    tape.reduce_sum(sq, &axes)
}

/// Per-sample mean Gram entry via the channel-sum identity (see [`gram_loss`]).
fn gram_mean_per_sample(tape: &mut Tape, s: Value, x: Value, channels: usize) -> Result<Value> {
    let s_sum = tape.reduce_sum(s, &[3])?;
    let x_sum = tape.reduce_sum(x, &[3])?;
    let prod = tape.mul(s_sum, x_sum)?;
    let per_sample = tape.reduce_sum(prod, &[1, 2])?;
    Ok(tape.scale(per_sample, 1.0 / (channels * channels) as f64))
}
