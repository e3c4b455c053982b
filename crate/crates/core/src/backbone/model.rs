//! Frozen decoder-only toy transformer and its role-adapted wrapper.
//!
//! Architecture per block (pre-norm, no biases):
//!
//! ```text
//! x ── rmsnorm ── q/k/v proj ── causal attention ── out proj ──(+)── x'
//! x' ─ rmsnorm ── gate/up proj ── silu(gate)*up ─── down proj ─(+)── x''
//! ```
//!
//! Token embeddings get a fixed sinusoidal position table added; a final
//! rmsnorm feeds a separate output head. All base tensors are behind `Arc`
//! and are never written after construction — adapted models alias them
//! rather than copy. Every parameter is initialised on the f32 grid (drawn
//! in f64, then rounded through f32) so checkpoints, which store f32,
//! round-trip without changing a single forward bit.
//!
//! The forward pass retains every intermediate the hand-written backward
//! pass needs; callers that only want logits simply drop the trace.

use crate::adapter::{
    mor_layer_forward, LoraPair, MorLayer, RoleAdapterGroup, RoleId, RoleMask, RouterSelection,
    TokenRouter,
};
use crate::backbone::config::{BackboneConfig, ConfigError, MorConfig};
use crate::backbone::geometry::ModuleKind;
use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty token sequence")]
    EmptyInput,
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("mask length {mask} does not match sequence length {len}")]
    MaskLength { len: usize, mask: usize },
    #[error(transparent)]
    Adapter(#[from] crate::adapter::AdapterError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Round through f32 so the stored and in-memory values are identical.
pub fn q32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn quantize2(a: &mut Array2<f64>) {
    a.mapv_inplace(q32);
}

pub fn quantize1(a: &mut Array1<f64>) {
    a.mapv_inplace(q32);
}

/// Standard-normal draw via Box-Muller on the seeded stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}

/// Frozen weights of one decoder block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1: Arc<Array1<f64>>,
    pub wq: Arc<Array2<f64>>,
    pub wk: Arc<Array2<f64>>,
    pub wv: Arc<Array2<f64>>,
    pub wo: Arc<Array2<f64>>,
    pub ln2: Arc<Array1<f64>>,
    pub w_gate: Arc<Array2<f64>>,
    pub w_up: Arc<Array2<f64>>,
    pub w_down: Arc<Array2<f64>>,
}

impl BlockWeights {
    pub fn projection(&self, kind: ModuleKind) -> &Arc<Array2<f64>> {
        match kind {
            ModuleKind::Query => &self.wq,
            ModuleKind::Key => &self.wk,
            ModuleKind::Value => &self.wv,
            ModuleKind::Out => &self.wo,
            ModuleKind::Gate => &self.w_gate,
            ModuleKind::Up => &self.w_up,
            ModuleKind::Down => &self.w_down,
        }
    }
}

/// The frozen toy transformer.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: Arc<Array2<f64>>,
    /// Sinusoidal position table, derived from the config rather than stored.
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Arc<Array1<f64>>,
    pub lm_head: Arc<Array2<f64>>,
}

fn sinusoidal_table(max_len: usize, d: usize) -> Array2<f64> {
    let mut pos = Array2::zeros((max_len, d));
    for p in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pos[(p, 2 * i)] = (p as f64 * freq).sin();
            pos[(p, 2 * i + 1)] = (p as f64 * freq).cos();
        }
    }
    pos
}

impl Backbone {
    /// Deterministic seeded construction. Draw order is fixed (embedding,
    /// blocks in layer order with q/k/v/out/gate/up/down inside each, then
    /// the head), so equal configs give bitwise-equal models.
    pub fn new(cfg: BackboneConfig) -> Result<Backbone, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let mut m = Array2::from_shape_fn((rows, cols), |_| normal(&mut rng) * std);
            quantize2(&mut m);
            Arc::new(m)
        };
        let embed = gauss(cfg.vocab_size, d, 1.0);
        let w_std = cfg.init_gain / (d as f64).sqrt();
        let ff_std = cfg.init_gain / (cfg.d_ff as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockWeights {
                ln1: Arc::new(Array1::ones(d)),
                wq: gauss(d, d, w_std),
                wk: gauss(d, d, w_std),
                wv: gauss(d, d, w_std),
                wo: gauss(d, d, w_std),
                ln2: Arc::new(Array1::ones(d)),
                w_gate: gauss(d, cfg.d_ff, w_std),
                w_up: gauss(d, cfg.d_ff, w_std),
                w_down: gauss(cfg.d_ff, d, ff_std),
            });
        }
        let final_norm = Arc::new(Array1::ones(d));
        let lm_head = gauss(d, cfg.vocab_size, cfg.head_gain / (d as f64).sqrt());
        let pos = sinusoidal_table(cfg.max_seq_len, d);
        Ok(Backbone { cfg, embed, pos, blocks, final_norm, lm_head })
    }

    /// All-zero skeleton used by the checkpoint loader, which overwrites
    /// every tensor from the payload.
    pub(crate) fn zeroed(cfg: BackboneConfig) -> Result<Backbone, ConfigError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let z2 = |r, c| Arc::new(Array2::zeros((r, c)));
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockWeights {
                ln1: Arc::new(Array1::zeros(d)),
                wq: z2(d, d),
                wk: z2(d, d),
                wv: z2(d, d),
                wo: z2(d, d),
                ln2: Arc::new(Array1::zeros(d)),
                w_gate: z2(d, cfg.d_ff),
                w_up: z2(d, cfg.d_ff),
                w_down: z2(cfg.d_ff, d),
            })
            .collect();
        let pos = sinusoidal_table(cfg.max_seq_len, d);
        Ok(Backbone {
            embed: z2(cfg.vocab_size, d),
            pos,
            blocks,
            final_norm: Arc::new(Array1::zeros(d)),
            lm_head: z2(d, cfg.vocab_size),
            cfg,
        })
    }
}

/// Which tensor of a role group a parameter key addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterTensor {
    SharedDown,
    SharedUp,
    RoutedDown(usize),
    RoutedUp(usize),
    Router,
}

/// Stable address of one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKey {
    pub layer: usize,
    pub kind: ModuleKind,
    pub role: RoleId,
    pub tensor: AdapterTensor,
}

/// Frozen backbone plus trainable role adapters on the targeted projections.
#[derive(Debug, Clone)]
pub struct MorModel {
    pub backbone: Backbone,
    pub mor: MorConfig,
    pub adapters: BTreeMap<(usize, ModuleKind), MorLayer>,
}

/// Attach role adapter groups to every targeted projection of the backbone.
/// Base weights are aliased, not copied. Shared and routed down factors are
/// drawn uniform in `±1/sqrt(d_in)`; up factors and router weights start at
/// zero, so the adapted model initially computes exactly the base function
/// and routes uniformly.
pub fn inject_mor(backbone: Backbone, mor: MorConfig) -> Result<MorModel, ModelError> {
    mor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(backbone.cfg.seed ^ 0x4D6F_52AD);
    let mut adapters = BTreeMap::new();
    for l in 0..backbone.cfg.n_layers {
        for kind in ModuleKind::ALL {
            if !mor.targets.contains(&kind) {
                continue;
            }
            let base = Arc::clone(backbone.blocks[l].projection(kind));
            let (d_in, d_out) = (base.nrows(), base.ncols());
            let bound = 1.0 / (d_in as f64).sqrt();
            let groups = [0usize, 1, 2].map(|r| {
                let role = RoleId::ALL[r];
                let mut down_init = || {
                    let mut m =
                        Array2::from_shape_fn((d_in, mor.rank), |_| rng.gen_range(-bound..bound));
                    quantize2(&mut m);
                    m
                };
                let shared =
                    LoraPair::new(down_init(), Array2::zeros((mor.rank, d_out))).unwrap();
                let routed = (0..mor.routed(r))
                    .map(|_| {
                        LoraPair::new(down_init(), Array2::zeros((mor.rank, d_out))).unwrap()
                    })
                    .collect();
                let router =
                    TokenRouter::new(Array2::zeros((d_in, mor.routed(r))), mor.top_k[r]).unwrap();
                RoleAdapterGroup::new(role, shared, routed, router).unwrap()
            });
            adapters.insert((l, kind), MorLayer::new(base, groups)?);
        }
    }
    let mut model = MorModel { backbone, mor, adapters };
    if model.mor.adapter_init_scale > 0.0 {
        let seed = model.backbone.cfg.seed ^ 0xAD41_7EED;
        let scale = model.mor.adapter_init_scale;
        model.randomize_adapters(seed, scale);
    }
    Ok(model)
}

/// Per-block intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub x_in: Array2<f64>,
    pub a_norm: Array2<f64>,
    pub inv1: Vec<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax attention weights per head, upper triangle zero.
    pub attw: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub b_norm: Array2<f64>,
    pub inv2: Vec<f64>,
    pub g: Array2<f64>,
    pub u2: Array2<f64>,
    pub m: Array2<f64>,
}

/// Everything one forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub ids: Vec<u32>,
    pub mask: RoleMask,
    pub x_embed: Array2<f64>,
    pub blocks: Vec<BlockTrace>,
    pub x_final: Array2<f64>,
    pub inv_final: Vec<f64>,
    pub x_normed: Array2<f64>,
    pub logits: Array2<f64>,
    /// Routing decisions per adapted projection, indexed by role.
    pub selections: BTreeMap<(usize, ModuleKind), [RouterSelection; 3]>,
}

fn rmsnorm(x: &Array2<f64>, w: &Array1<f64>) -> (Array2<f64>, Vec<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let mut out = Array2::zeros((n, d));
    let mut inv = Vec::with_capacity(n);
    for t in 0..n {
        let row = x.row(t);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for j in 0..d {
            out[(t, j)] = row[j] * r * w[j];
        }
    }
    (out, inv)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl MorModel {
    pub fn d_model(&self) -> usize {
        self.backbone.cfg.d_model
    }

    /// Full traced forward pass over one token sequence.
    pub fn forward(&self, ids: &[u32], mask: &RoleMask) -> Result<ForwardTrace, ModelError> {
        let cfg = &self.backbone.cfg;
        let n = ids.len();
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        if n > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: n, max: cfg.max_seq_len });
        }
        if mask.len() != n {
            return Err(ModelError::MaskLength { len: n, mask: mask.len() });
        }
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::zeros((n, d));
        for (t, &id) in ids.iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
            }
            for j in 0..d {
                x[(t, j)] = self.backbone.embed[(id as usize, j)] + self.backbone.pos[(t, j)];
            }
        }
        let x_embed = x.clone();

        let mut selections = BTreeMap::new();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for (l, bw) in self.backbone.blocks.iter().enumerate() {
            let x_in = x.clone();
            let (a_norm, inv1) = rmsnorm(&x_in, &bw.ln1);
            let q = self.project(l, ModuleKind::Query, &a_norm, mask, &mut selections)?;
            let k = self.project(l, ModuleKind::Key, &a_norm, mask, &mut selections)?;
            let v = self.project(l, ModuleKind::Value, &a_norm, mask, &mut selections)?;

            let mut ctx = Array2::zeros((n, d));
            let mut attw = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                // Causal softmax: row t attends to positions 0..=t.
                let mut w = Array2::zeros((n, n));
                for t in 0..n {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=t {
                        max = max.max(scores[(t, j)]);
                    }
                    let mut z = 0.0;
                    for j in 0..=t {
                        let e = (scores[(t, j)] - max).exp();
                        w[(t, j)] = e;
                        z += e;
                    }
                    for j in 0..=t {
                        w[(t, j)] /= z;
                    }
                }
                let ctx_h = w.dot(&vh);
                ctx.slice_mut(cols).assign(&ctx_h);
                attw.push(w);
            }

            let o = self.project(l, ModuleKind::Out, &ctx, mask, &mut selections)?;
            let x_mid = &x_in + &o;
            let (b_norm, inv2) = rmsnorm(&x_mid, &bw.ln2);
            let g = self.project(l, ModuleKind::Gate, &b_norm, mask, &mut selections)?;
            let u2 = self.project(l, ModuleKind::Up, &b_norm, mask, &mut selections)?;
            let mut m = Array2::zeros((n, cfg.d_ff));
            for t in 0..n {
                for j in 0..cfg.d_ff {
                    m[(t, j)] = silu(g[(t, j)]) * u2[(t, j)];
                }
            }
            let dn = self.project(l, ModuleKind::Down, &m, mask, &mut selections)?;
            x = &x_mid + &dn;

            blocks.push(BlockTrace {
                x_in,
                a_norm,
                inv1,
                q,
                k,
                v,
                attw,
                ctx,
                x_mid,
                b_norm,
                inv2,
                g,
                u2,
                m,
            });
        }

        let x_final = x;
        let (x_normed, inv_final) = rmsnorm(&x_final, &self.backbone.final_norm);
        let logits = x_normed.dot(self.backbone.lm_head.as_ref());
        Ok(ForwardTrace {
            ids: ids.to_vec(),
            mask: mask.clone(),
            x_embed,
            blocks,
            x_final,
            inv_final,
            x_normed,
            logits,
            selections,
        })
    }

    fn project(
        &self,
        l: usize,
        kind: ModuleKind,
        input: &Array2<f64>,
        mask: &RoleMask,
        selections: &mut BTreeMap<(usize, ModuleKind), [RouterSelection; 3]>,
    ) -> Result<Array2<f64>, ModelError> {
        match self.adapters.get(&(l, kind)) {
            Some(layer) => {
                let (y, sel) = mor_layer_forward(layer, &input.view(), mask)?;
                selections.insert((l, kind), sel);
                Ok(y)
            }
            None => Ok(input.dot(self.backbone.blocks[l].projection(kind).as_ref())),
        }
    }

    /// Logits only; the trace is dropped.
    pub fn logits(&self, ids: &[u32], mask: &RoleMask) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward(ids, mask)?.logits)
    }

    /// Greedy decoding. Every generated position is gated to `role`;
    /// `prompt_mask` labels the prompt positions. Decoding stops after
    /// emitting a stop token, after `max_new` tokens, or at the length cap,
    /// whichever comes first. Returns prompt plus generation.
    pub fn generate_greedy(
        &self,
        prompt_ids: &[u32],
        prompt_mask: &RoleMask,
        role: RoleId,
        stop: &[u32],
        max_new: usize,
    ) -> Result<Vec<u32>, ModelError> {
        let mut ids = prompt_ids.to_vec();
        let mut mask = prompt_mask.clone();
        for _ in 0..max_new {
            if ids.len() >= self.backbone.cfg.max_seq_len {
                break;
            }
            let logits = self.logits(&ids, &mask)?;
            let last = logits.row(logits.nrows() - 1);
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            ids.push(best as u32);
            mask.0.push(role);
            if stop.contains(&(best as u32)) {
                break;
            }
        }
        Ok(ids)
    }

    /// SHA-256 over every frozen tensor in a fixed order; training must not
    /// change this.
    pub fn base_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut eat1 = |a: &Array1<f64>| {
            for &v in a.iter() {
                h.update((v as f32).to_le_bytes());
            }
        };
        for b in &self.backbone.blocks {
            eat1(&b.ln1);
            eat1(&b.ln2);
        }
        eat1(&self.backbone.final_norm);
        let mut h2 = h;
        let mut eat2 = |a: &Array2<f64>| {
            for &v in a.iter() {
                h2.update((v as f32).to_le_bytes());
            }
        };
        eat2(&self.backbone.embed);
        for b in &self.backbone.blocks {
            for kind in ModuleKind::ALL {
                eat2(b.projection(kind));
            }
        }
        eat2(&self.backbone.lm_head);
        format!("{:x}", h2.finalize())
    }

    /// Stable enumeration of every trainable tensor.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (&(layer, kind), mor_layer) in &self.adapters {
            for role in RoleId::ALL {
                let g = mor_layer.group(role);
                let mut push = |tensor| keys.push(ParamKey { layer, kind, role, tensor });
                push(AdapterTensor::SharedDown);
                push(AdapterTensor::SharedUp);
                for i in 0..g.n_experts() {
                    push(AdapterTensor::RoutedDown(i));
                    push(AdapterTensor::RoutedUp(i));
                }
                push(AdapterTensor::Router);
            }
        }
        keys
    }

    pub fn tensor(&self, key: &ParamKey) -> &Array2<f64> {
        let g = self.adapters[&(key.layer, key.kind)].group(key.role);
        match key.tensor {
            AdapterTensor::SharedDown => &g.shared.down,
            AdapterTensor::SharedUp => &g.shared.up,
            AdapterTensor::RoutedDown(i) => &g.routed[i].down,
            AdapterTensor::RoutedUp(i) => &g.routed[i].up,
            AdapterTensor::Router => &g.router.weight,
        }
    }

    pub fn tensor_mut(&mut self, key: &ParamKey) -> &mut Array2<f64> {
        let g = self
            .adapters
            .get_mut(&(key.layer, key.kind))
            .expect("adapted projection")
            .group_mut(key.role);
        match key.tensor {
            AdapterTensor::SharedDown => &mut g.shared.down,
            AdapterTensor::SharedUp => &mut g.shared.up,
            AdapterTensor::RoutedDown(i) => &mut g.routed[i].down,
            AdapterTensor::RoutedUp(i) => &mut g.routed[i].up,
            AdapterTensor::Router => &mut g.router.weight,
        }
    }

    pub fn n_trainable(&self) -> u64 {
        self.trainable_keys().iter().map(|k| self.tensor(k).len() as u64).sum()
    }

    /// Put every adapter tensor in general position (including up factors
    /// and routers, which init at zero). Used by gradient checks and tests
    /// that need non-degenerate routing; scale keeps the model well inside
    /// the smooth region.
    pub fn randomize_adapters(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for key in self.trainable_keys() {
            let t = self.tensor_mut(&key);
            t.mapv_inplace(|_| 0.0);
            let mut fresh = Array2::from_shape_fn(t.raw_dim(), |_| {
                q32(rng.gen_range(-1.0..1.0) * scale)
            });
            std::mem::swap(t, &mut fresh);
        }
    }
}
