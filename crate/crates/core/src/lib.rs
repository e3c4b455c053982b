//! Mixture-of-roles (MoR) parameter-efficient agent tuning, desk scale.
//!
//! The crate is organised bottom-up:
//!
//! ```text
//! adapter      role-gated LoRA groups: shared pair + routed pairs + token router
//! objectives   cross-entropy, router balance loss, inter-LoRA orthogonality loss
//! backbone     byte tokenizer, frozen toy transformer, MoR injection, checkpoints
//! trainer      hand-written reverse-mode gradients, SGD loop, finite-difference check
//! datapipe     trajectory records (JSONL), role segmentation, verification, completion
//! orchestrator three-role agent loop with a deterministic tool environment
//! evalkit      edit-distance / action-match metrics, adapter similarity, task sweeps
//! ```
//!
//! Everything is deterministic given a seed: fixed role iteration order,
//! fixed layer order in loss reductions, and seeded ChaCha streams for
//! every random draw. Numeric work is `f64` end to end.

pub mod adapter;
pub mod backbone;
pub mod datapipe;
pub mod evalkit;
pub mod objectives;
pub mod orchestrator;
pub mod trainer;
