//! Configuration types for the toy backbone and the adapter layout.

use crate::backbone::geometry::ModuleKind;
use crate::backbone::tokenizer::VOCAB_SIZE;
use crate::objectives::OrthMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid backbone config: {0}")]
    Backbone(String),
    #[error("invalid adapter config: {0}")]
    Mor(String),
}

/// Frozen decoder-only transformer dimensions. The defaults are the desk
/// geometry every training test runs on; gradient checks shrink them further.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Scale multiplier on the hidden-layer weight init (std `gain/sqrt(d_in)`).
    pub init_gain: f64,
    /// Scale multiplier on the output-head init. Larger values sharpen the
    /// logit response to adapter updates, which is what lets small-step SGD
    /// memorise quickly; kept as data so checkpoints are self-describing.
    pub head_gain: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: VOCAB_SIZE as usize,
            max_seq_len: 512,
            seed: 0,
            init_gain: 1.0,
            head_gain: 8.0,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Backbone(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("all dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < VOCAB_SIZE as usize {
            return err(format!(
                "vocab_size {} below tokenizer minimum {}",
                self.vocab_size, VOCAB_SIZE
            ));
        }
        if self.max_seq_len == 0 {
            return err("max_seq_len must be positive".into());
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0)
            || !(self.head_gain.is_finite() && self.head_gain > 0.0)
        {
            return err("init gains must be positive and finite".into());
        }
        Ok(())
    }
}

fn default_targets() -> BTreeSet<ModuleKind> {
    ModuleKind::ALL.into_iter().collect()
}

/// Adapter layout: per-role pair totals (one shared pair plus routed pairs),
/// per-role top-k, rank, target projections, and loss mixing weights.
///
/// `total_pairs[role]` counts the shared pair, so the routed expert count is
/// `total_pairs[role] - 1`. Note that when `top_k` equals the routed count
/// every expert is always selected, making the dispatch fractions — and with
/// them the balance penalty — constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MorConfig {
    pub rank: usize,
    /// Pairs per role including the shared one, reasoner/executor/summarizer.
    pub total_pairs: [usize; 3],
    /// Routed pairs active per token, per role.
    pub top_k: [usize; 3],
    pub targets: BTreeSet<ModuleKind>,
    /// Weight of the router balance loss.
    pub alpha1: f64,
    /// Weight of the orthogonality loss.
    pub alpha2: f64,
    pub orth_mode: OrthMode,
    /// Uniform half-width for randomising every adapter tensor at
    /// injection. Zero keeps the classic layout (random down projections,
    /// zero up projections and routers), which starts as an exact no-op
    /// but couples into the loss slowly; small-step overfitting runs want
    /// all factors live from the first step.
    pub adapter_init_scale: f64,
}

impl Default for MorConfig {
    fn default() -> Self {
        MorConfig {
            rank: 16,
            total_pairs: [5, 5, 4],
            top_k: [4, 4, 3],
            targets: default_targets(),
            alpha1: 1e-3,
            alpha2: 1e-4,
            orth_mode: OrthMode::RankGram,
            adapter_init_scale: 0.0,
        }
    }
}

impl MorConfig {
    /// Routed expert count for a role index.
    pub fn routed(&self, role: usize) -> usize {
        self.total_pairs[role] - 1
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Mor(m));
        if self.rank == 0 {
            return err("rank must be positive".into());
        }
        for r in 0..3 {
            if self.total_pairs[r] < 2 {
                return err(format!(
                    "total_pairs[{r}] = {} leaves no routed pair",
                    self.total_pairs[r]
                ));
            }
            if self.top_k[r] == 0 || self.top_k[r] > self.routed(r) {
                return err(format!(
                    "top_k[{r}] = {} outside 1..={}",
                    self.top_k[r],
                    self.routed(r)
                ));
            }
        }
        if self.targets.is_empty() {
            return err("no target projections".into());
        }
        if !self.alpha1.is_finite() || !self.alpha2.is_finite() {
            return err("loss weights must be finite".into());
        }
        if !self.adapter_init_scale.is_finite() || self.adapter_init_scale < 0.0 {
            return err(format!(
                "adapter_init_scale {} must be finite and non-negative",
                self.adapter_init_scale
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        BackboneConfig::default().validate().unwrap();
        MorConfig::default().validate().unwrap();
        let m = MorConfig::default();
        assert_eq!([m.routed(0), m.routed(1), m.routed(2)], [4, 4, 3]);
        assert_eq!(m.targets.len(), 7);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut b = BackboneConfig::default();
        b.n_heads = 3;
        assert!(b.validate().is_err());
        let mut b = BackboneConfig::default();
        b.vocab_size = 200;
        assert!(b.validate().is_err());

        let mut m = MorConfig::default();
        m.top_k = [5, 4, 3];
        assert!(m.validate().is_err());
        let mut m = MorConfig::default();
        m.total_pairs = [1, 5, 4];
        assert!(m.validate().is_err());
        let mut m = MorConfig::default();
        m.targets.clear();
        assert!(m.validate().is_err());
    }

    #[test]
    fn configs_round_trip_through_json() {
        let m = MorConfig::default();
        let s = serde_json::to_string(&m).unwrap();
        let back: MorConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        // A partial config picks up defaults for missing fields.
        let partial: MorConfig = serde_json::from_str(r#"{"rank": 4}"#).unwrap();
        assert_eq!(partial.rank, 4);
        assert_eq!(partial.total_pairs, [5, 5, 4]);
    }
}
