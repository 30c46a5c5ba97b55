//! Mask selection over patch significance scores and mask-token
//! substitution.
//!
//! The dynamic strategy perturbs the log-softmax of the significance
//! distribution with Gumbel noise and takes the top K, which samples K
//! patches biased toward high significance while still varying draw to
//! draw; the baselines are the deterministic top/bottom-K and a seeded
//! uniform subset.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tensor};
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::seeds;

/// Clamp for the uniform draws feeding the double logarithm.
const EPS_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Gumbel-perturbed top-K over significance (resampled every step).
    DynamicHigh,
    /// Deterministic top-K of significance.
    FixedHigh,
    /// Deterministic bottom-K of significance.
    LowAttention,
    /// Seeded uniform K-subset.
    Random,
    /// No attention-driven masking.
    None,
}

impl MaskStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::DynamicHigh => "dynamic_high",
            MaskStrategy::FixedHigh => "fixed_high",
            MaskStrategy::LowAttention => "low_attention",
            MaskStrategy::Random => "random",
            MaskStrategy::None => "none",
        }
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic_high" => Ok(MaskStrategy::DynamicHigh),
            "fixed_high" => Ok(MaskStrategy::FixedHigh),
            "low_attention" => Ok(MaskStrategy::LowAttention),
            "random" => Ok(MaskStrategy::Random),
            "none" => Ok(MaskStrategy::None),
            other => Err(Error::invalid(format!("unknown mask strategy {other:?}"))),
        }
    }
}

/// One sample's mask selection: the significance it was based on, the
/// perturbed logits (dynamic strategy only), and the chosen patch indices
/// in ascending order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskDecision {
    pub significance: Vec<f64>,
    pub perturbed_logits: Vec<f64>,
    pub masked: Vec<usize>,
    pub strategy: MaskStrategy,
    pub tau_pro: f64,
    pub seed: u64,
}

/// The single learnable embedding substituted at every masked position.
pub struct MaskToken {
    pub embedding: Parameter,
}

impl MaskToken {
    pub fn new(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<MaskToken> {
        let bound = 1.0 / (dim as f64).sqrt();
        let data: Vec<f64> = (0..dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(MaskToken {
            embedding: Parameter::new(name, vec![1, dim], data)?,
        })
    }
}

fn validate_distribution(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid("significance vector is empty"));
    }
    if s.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::invalid("significance entries must be finite and >= 0"));
    }
    let total: f64 = s.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "significance must sum to 1, got {total}"
        )));
    }
    Ok(())
}

fn log_softmax_scaled(s: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = s.iter().map(|&v| v / tau).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    scaled.iter().map(|v| v - lse).collect()
}

/// Gumbel-perturbed log-probabilities with explicit uniform draws
/// (clamped away from 0 and 1); the deterministic core of
/// [`dynamic_logits`], also the test hook for frozen noise.
pub fn dynamic_logits_with_eps(s: &[f64], tau_pro: f64, eps: &[f64]) -> Result<Vec<f64>> {
    validate_distribution(s)?;
    if !(tau_pro > 0.0) {
        return Err(Error::invalid(format!("tau_pro {tau_pro} must be > 0")));
    }
    if eps.len() != s.len() {
        return Err(Error::invalid("one uniform draw per patch required"));
    }
    let base = log_softmax_scaled(s, tau_pro);
    Ok(base
        .iter()
        .zip(eps)
        .map(|(&b, &e)| {
            let e = e.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
            b - (-e.ln()).ln()
        })
        .collect())
}

/// `log softmax(S / tau_pro)` plus independent Gumbel noise per patch,
/// drawn from the seed.
pub fn dynamic_logits(s: &[f64], tau_pro: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = seeds::rng(seed);
    let eps: Vec<f64> = (0..s.len()).map(|_| rng.gen::<f64>()).collect();
    dynamic_logits_with_eps(s, tau_pro, &eps)
}

/// Indices of the K largest entries, largest first, ties broken by lowest
/// index.
pub fn top_k_select(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > logits.len() {
        return Err(Error::invalid(format!(
            "K {k} exceeds {} entries",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// The three non-dynamic strategies from the ablation matrix.
pub fn baseline_mask(s: &[f64], strategy: MaskStrategy, k: usize, seed: u64) -> Result<Vec<usize>> {
    validate_distribution(s)?;
    if k > s.len() {
        return Err(Error::invalid(format!("K {k} exceeds {} patches", s.len())));
    }
    match strategy {
        MaskStrategy::FixedHigh => top_k_select(s, k),
        MaskStrategy::LowAttention => {
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
            order.truncate(k);
            Ok(order)
        }
        MaskStrategy::Random => {
            let mut rng = seeds::rng(seed);
            let mut idx = rand::seq::index::sample(&mut rng, s.len(), k).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
        other => Err(Error::invalid(format!(
            "baseline_mask does not handle strategy {}",
            other.name()
        ))),
    }
}

/// Full mask decision for one sample under any strategy.
pub fn decide(
    s: &[f64],
    strategy: MaskStrategy,
    k: usize,
    tau_pro: f64,
    seed: u64,
) -> Result<MaskDecision> {
    let (perturbed_logits, mut masked) = match strategy {
        MaskStrategy::None => (Vec::new(), Vec::new()),
        MaskStrategy::DynamicHigh => {
            let logits = dynamic_logits(s, tau_pro, seed)?;
            let picked = top_k_select(&logits, k)?;
            (logits, picked)
        }
        _ => (Vec::new(), baseline_mask(s, strategy, k, seed)?),
    };
    masked.sort_unstable();
    Ok(MaskDecision {
        significance: s.to_vec(),
        perturbed_logits,
        masked,
        strategy,
        tau_pro,
        seed,
    })
}

/// Replaces the given point-token rows with the shared mask token, keeping
/// each position's positional term. Row 0 (the global token) is never
/// maskable.
pub fn apply_mask(
    seq: &TokenSequence,
    masked_rows: &[usize],
    mask_token: &MaskToken,
) -> Result<TokenSequence> {
    let rows = seq.n_patches + 1;
    let dim = seq.dim;
    let mut is_masked = vec![false; rows];
    for &r in masked_rows {
        if r == 0 {
            return Err(Error::invalid("the global token cannot be masked"));
        }
        if r >= rows {
            return Err(Error::invalid(format!(
                "mask row {r} out of range 1..={}",
                rows - 1
            )));
        }
        if std::mem::replace(&mut is_masked[r], true) {
            return Err(Error::invalid(format!("mask row {r} listed twice")));
        }
    }
    if masked_rows.is_empty() {
        return Ok(TokenSequence {
            tokens: seq.tokens.clone(),
            pos: seq.pos.clone(),
            n_patches: seq.n_patches,
            dim,
        });
    }

    let mut keep = vec![1.0; rows * dim];
    let mut swap = vec![0.0; rows * dim];
    let mut col = vec![0.0; rows];
    for (r, &m) in is_masked.iter().enumerate() {
        if m {
            keep[r * dim..(r + 1) * dim].fill(0.0);
            swap[r * dim..(r + 1) * dim].fill(1.0);
            col[r] = 1.0;
        }
    }
    let keep = Tensor::constant(vec![rows, dim], keep)?;
    let swap = Tensor::constant(vec![rows, dim], swap)?;
    let col = Tensor::constant(vec![rows, 1], col)?;

    let substituted = col.matmul(&mask_token.embedding.tensor)?;
    let tokens = seq
        .tokens
        .mul(&keep)?
        .add(&seq.pos.mul(&swap)?)?
        .add(&substituted)?;
    Ok(TokenSequence {
        tokens,
        pos: seq.pos.clone(),
        n_patches: seq.n_patches,
        dim,
    })
}
