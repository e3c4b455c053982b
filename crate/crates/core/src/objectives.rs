//! Training objectives: token cross-entropy, router load-balance loss, and
//! inter-adapter orthogonality loss.
//!
//! The total objective is `L = L_ce + alpha1 * L_aux + alpha2 * L_orth`.
//!
//! * `L_ce` is the mean negative log-likelihood over supervised positions.
//! * `L_aux` follows the switch-router recipe: per role and projection,
//!   `E * sum_i f_i * P_i` where `f_i` is the fraction of tokens that
//!   dispatched to expert `i` and `P_i` the mean softmax probability it
//!   received. Roles that saw no tokens contribute zero.
//! * `L_orth` penalises pairwise alignment between routed pairs of the same
//!   role: `sum_{i<j} (|down_i^T down_j|_F^2 + |up_i up_j^T|_F^2)` in the
//!   default rank-gram mode (both Gram matrices are `[r x r]`), or the
//!   transposed-factor variant in `Literal` mode.

use crate::adapter::{RoleAdapterGroup, RouterSelection};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("labels/supervision length {actual} does not match {expected} logit rows")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("label {label} out of vocabulary {vocab} at position {pos}")]
    LabelOutOfRange { pos: usize, label: usize, vocab: usize },
    #[error("no supervised positions in batch")]
    EmptySupervision,
    #[error("selection expert count {actual} does not match E={expected}")]
    ExpertMismatch { expected: usize, actual: usize },
    #[error("non-finite {component} in loss composition")]
    NonFinite { component: &'static str },
}

/// Which factor products the orthogonality penalty measures.
///
/// `RankGram` compares routed pairs through their `[r x r]` Gram matrices
/// (`down_i^T down_j` and `up_i up_j^T`), so cost stays quadratic in the
/// rank. `Literal` instead squares `up_i^T up_j` (a `[d_out x d_out]`
/// matrix) together with `down_i^T down_j`; it is provided as a config
/// switch for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthMode {
    #[default]
    RankGram,
    Literal,
}

/// Router load statistics for one (projection, role) pair, pooled over all
/// tokens the role saw in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    /// Fraction of tokens that dispatched to each expert. Sums to `top_k`
    /// when any token was routed.
    pub f: Vec<f64>,
    /// Mean softmax probability per expert. Sums to one when any token was
    /// routed.
    pub p: Vec<f64>,
    pub token_count: usize,
}

impl LoadStats {
    pub fn degenerate(&self) -> bool {
        self.token_count == 0
    }

    pub fn n_experts(&self) -> usize {
        self.f.len()
    }
}

/// Loss components for one step, with the mixing weights that produced
/// `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub aux: f64,
    pub orth: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub total: f64,
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`, restricted to positions where `supervised` is true.
///
/// Uses the usual max-shifted log-sum-exp so large logits stay finite.
pub fn cross_entropy(
    logits: &ArrayView2<f64>,
    labels: &[usize],
    supervised: &[bool],
) -> Result<f64, ObjectiveError> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(ObjectiveError::LengthMismatch { expected: n, actual: labels.len() });
    }
    if supervised.len() != n {
        return Err(ObjectiveError::LengthMismatch { expected: n, actual: supervised.len() });
    }
    let vocab = logits.ncols();
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..n {
        if !supervised[t] {
            continue;
        }
        let label = labels[t];
        if label >= vocab {
            return Err(ObjectiveError::LabelOutOfRange { pos: t, label, vocab });
        }
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        sum += lse - row[label];
        count += 1;
    }
    if count == 0 {
        return Err(ObjectiveError::EmptySupervision);
    }
    Ok(sum / count as f64)
}

/// Pool routing decisions (possibly from several samples) into per-expert
/// dispatch fractions and mean probabilities.
pub fn compute_load_stats(
    selections: &[&RouterSelection],
    n_experts: usize,
) -> Result<LoadStats, ObjectiveError> {
    let mut counts = vec![0usize; n_experts];
    let mut prob_sums = vec![0.0f64; n_experts];
    let mut n_tokens = 0usize;
    for sel in selections {
        if sel.n_experts() != n_experts {
            return Err(ObjectiveError::ExpertMismatch {
                expected: n_experts,
                actual: sel.n_experts(),
            });
        }
        for t in 0..sel.n_tokens() {
            for &i in &sel.indices[t] {
                counts[i] += 1;
            }
            for i in 0..n_experts {
                prob_sums[i] += sel.probs[(t, i)];
            }
            n_tokens += 1;
        }
    }
    if n_tokens == 0 {
        return Ok(LoadStats { f: vec![0.0; n_experts], p: vec![0.0; n_experts], token_count: 0 });
    }
    let n = n_tokens as f64;
    let f = counts.iter().map(|&c| c as f64 / n).collect();
    let p = prob_sums.iter().map(|&s| s / n).collect();
    Ok(LoadStats { f, p, token_count: n_tokens })
}

/// Switch-style balance penalty `E * sum_i f_i * P_i`. Zero for a role that
/// routed no tokens.
pub fn balance_loss(stats: &LoadStats) -> f64 {
    if stats.degenerate() {
        return 0.0;
    }
    let e = stats.n_experts() as f64;
    let mut dot = 0.0;
    for i in 0..stats.n_experts() {
        dot += stats.f[i] * stats.p[i];
    }
    e * dot
}

/// Pairwise orthogonality penalty across a role's routed pairs.
pub fn orth_loss(group: &RoleAdapterGroup, mode: OrthMode) -> f64 {
    let e = group.routed.len();
    let mut total = 0.0;
    for i in 0..e {
        for j in (i + 1)..e {
            let a = &group.routed[i];
            let b = &group.routed[j];
            let down_gram = a.down.t().dot(&b.down);
            let up_gram = match mode {
                // [r x r] in both factors.
                OrthMode::RankGram => a.up.dot(&b.up.t()),
                // [d_out x d_out] for the up factors.
                OrthMode::Literal => a.up.t().dot(&b.up),
            };
            total += down_gram.iter().map(|v| v * v).sum::<f64>();
            total += up_gram.iter().map(|v| v * v).sum::<f64>();
        }
    }
    total
}

/// Combine the three components, validating that each is finite.
pub fn total_loss(
    ce: f64,
    aux: f64,
    orth: f64,
    alpha1: f64,
    alpha2: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    for (v, name) in [(ce, "ce"), (aux, "aux"), (orth, "orth")] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite { component: name });
        }
    }
    let total = ce + alpha1 * aux + alpha2 * orth;
    if !total.is_finite() {
        return Err(ObjectiveError::NonFinite { component: "total" });
    }
    Ok(LossBreakdown { ce, aux, orth, alpha1, alpha2, total })
}
