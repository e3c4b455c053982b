//! Projection geometry descriptions and trainable-parameter accounting.
//!
//! A `GeometrySpec` lists every linear projection of a decoder stack by
//! kind and shape, which is all the information the parameter count needs.
//! It can describe the in-crate toy backbone or a production model that is
//! not instantiated here (the built-in 1B-class geometry exists purely for
//! budget arithmetic).

use crate::backbone::config::{BackboneConfig, MorConfig};
use serde::{Deserialize, Serialize};

/// The seven adapter-eligible projection kinds of a decoder block.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Query,
    Key,
    Value,
    Out,
    Gate,
    Up,
    Down,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] = [
        ModuleKind::Query,
        ModuleKind::Key,
        ModuleKind::Value,
        ModuleKind::Out,
        ModuleKind::Gate,
        ModuleKind::Up,
        ModuleKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Query => "query",
            ModuleKind::Key => "key",
            ModuleKind::Value => "value",
            ModuleKind::Out => "out",
            ModuleKind::Gate => "gate",
            ModuleKind::Up => "up",
            ModuleKind::Down => "down",
        }
    }
}

impl std::fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One projection kind's shape, replicated `per_layer * layers` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub kind: ModuleKind,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default = "one")]
    pub per_layer: usize,
    pub layers: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub name: String,
    pub projections: Vec<ProjectionSpec>,
}

impl GeometrySpec {
    /// Geometry of the crate's own toy transformer.
    pub fn from_backbone(cfg: &BackboneConfig) -> GeometrySpec {
        let (d, f, l) = (cfg.d_model, cfg.d_ff, cfg.n_layers);
        let proj = |kind, d_in, d_out| ProjectionSpec { kind, d_in, d_out, per_layer: 1, layers: l };
        GeometrySpec {
            name: "toy".into(),
            projections: vec![
                proj(ModuleKind::Query, d, d),
                proj(ModuleKind::Key, d, d),
                proj(ModuleKind::Value, d, d),
                proj(ModuleKind::Out, d, d),
                proj(ModuleKind::Gate, d, f),
                proj(ModuleKind::Up, d, f),
                proj(ModuleKind::Down, f, d),
            ],
        }
    }

    /// A 1B-class decoder: 16 layers, hidden 2048, grouped-query attention
    /// with 512-wide key/value projections, 8192-wide MLP.
    pub fn llama3_2_1b() -> GeometrySpec {
        let proj = |kind, d_in, d_out| ProjectionSpec { kind, d_in, d_out, per_layer: 1, layers: 16 };
        GeometrySpec {
            name: "llama3.2-1b".into(),
            projections: vec![
                proj(ModuleKind::Query, 2048, 2048),
                proj(ModuleKind::Key, 2048, 512),
                proj(ModuleKind::Value, 2048, 512),
                proj(ModuleKind::Out, 2048, 2048),
                proj(ModuleKind::Gate, 2048, 8192),
                proj(ModuleKind::Up, 2048, 8192),
                proj(ModuleKind::Down, 8192, 2048),
            ],
        }
    }
}

/// Trainable parameters a `MorConfig` adds to a geometry: for every adapted
/// projection, `sum_roles total_pairs * rank * (d_in + d_out)` low-rank
/// factors plus `d_in * routed` router weights per role.
pub fn count_trainable_params(geom: &GeometrySpec, mor: &MorConfig) -> u64 {
    let rank = mor.rank as u64;
    let pair_total: u64 = mor.total_pairs.iter().map(|&t| t as u64).sum();
    let routed_total: u64 = (0..3).map(|r| mor.routed(r) as u64).sum();
    let mut count = 0u64;
    for p in &geom.projections {
        if !mor.targets.contains(&p.kind) {
            continue;
        }
        let instances = (p.per_layer * p.layers) as u64;
        let dims = (p.d_in + p.d_out) as u64;
        let pairs = pair_total * rank * dims;
        let routers = p.d_in as u64 * routed_total;
        count += instances * (pairs + routers);
    }
    count
}
