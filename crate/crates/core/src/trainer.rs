//! Training: hand-written reverse-mode gradients through the adapted
//! transformer, plain SGD, and a finite-difference gradient check.
//!
//! Only adapter parameters (low-rank factors and routers) receive
//! gradients; every base tensor is frozen by construction — the backward
//! pass never allocates gradient storage for them.
//!
//! Loss layout per batch:
//!
//! * cross-entropy: mean over every supervised next-token target pooled
//!   across the batch;
//! * balance: per (projection, role), dispatch stats are pooled across the
//!   batch, turned into `E * sum f_i P_i`, averaged over adapted
//!   projections per role, then summed over roles (dispatch fractions are
//!   treated as constants in the gradient, matching their piecewise-constant
//!   true derivative);
//! * orthogonality: same per-role mean over adapted projections, summed
//!   over roles; its gradient touches only the routed factors.
//!
//! Everything runs in a fixed order (samples in batch order, projections in
//! map order, roles in role order), so a rerun with the same seed is
//! bit-identical.

use crate::adapter::{AdapterError, RoleId, RoleMask, RouterSelection};
use crate::backbone::checkpoint::{save_checkpoint, CheckpointError};
use crate::backbone::geometry::ModuleKind;
use crate::backbone::model::{q32, AdapterTensor, ForwardTrace, ModelError, MorModel, ParamKey};
use crate::datapipe::TokenizedSample;
use crate::objectives::{
    balance_loss, compute_load_stats, orth_loss, total_loss, LoadStats, LossBreakdown,
    ObjectiveError, OrthMode,
};
use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] crate::backbone::config::ConfigError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics sink: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

/// Gradients for one role group, mirroring its tensor layout.
#[derive(Debug, Clone)]
pub struct GroupGrads {
    pub shared_down: Array2<f64>,
    pub shared_up: Array2<f64>,
    pub routed: Vec<(Array2<f64>, Array2<f64>)>,
    pub router: Array2<f64>,
}

/// Gradient storage mirroring every trainable tensor of a model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub layers: BTreeMap<(usize, ModuleKind), [GroupGrads; 3]>,
}

impl ModelGrads {
    pub fn zeros_like(model: &MorModel) -> ModelGrads {
        let mut layers = BTreeMap::new();
        for (&key, layer) in &model.adapters {
            let groups = [0usize, 1, 2].map(|r| {
                let g = &layer.groups[r];
                GroupGrads {
                    shared_down: Array2::zeros(g.shared.down.raw_dim()),
                    shared_up: Array2::zeros(g.shared.up.raw_dim()),
                    routed: g
                        .routed
                        .iter()
                        .map(|p| {
                            (Array2::zeros(p.down.raw_dim()), Array2::zeros(p.up.raw_dim()))
                        })
                        .collect(),
                    router: Array2::zeros(g.router.weight.raw_dim()),
                }
            });
            layers.insert(key, groups);
        }
        ModelGrads { layers }
    }

    pub fn tensor(&self, key: &ParamKey) -> &Array2<f64> {
        let g = &self.layers[&(key.layer, key.kind)][key.role.index()];
        match key.tensor {
            AdapterTensor::SharedDown => &g.shared_down,
            AdapterTensor::SharedUp => &g.shared_up,
            AdapterTensor::RoutedDown(i) => &g.routed[i].0,
            AdapterTensor::RoutedUp(i) => &g.routed[i].1,
            AdapterTensor::Router => &g.router,
        }
    }

    pub fn tensor_mut(&mut self, key: &ParamKey) -> &mut Array2<f64> {
        let g = &mut self
            .layers
            .get_mut(&(key.layer, key.kind))
            .expect("gradient store covers every adapted projection")[key.role.index()];
        match key.tensor {
            AdapterTensor::SharedDown => &mut g.shared_down,
            AdapterTensor::SharedUp => &mut g.shared_up,
            AdapterTensor::RoutedDown(i) => &mut g.routed[i].0,
            AdapterTensor::RoutedUp(i) => &mut g.routed[i].1,
            AdapterTensor::Router => &mut g.router,
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut Array2<f64>)) {
        for groups in self.layers.values_mut() {
            for g in groups.iter_mut() {
                f(&mut g.shared_down);
                f(&mut g.shared_up);
                for (d, u) in g.routed.iter_mut() {
                    f(d);
                    f(u);
                }
                f(&mut g.router);
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let mut total = 0.0;
        for groups in self.layers.values() {
            for g in groups.iter() {
                let mut eat = |a: &Array2<f64>| total += a.iter().map(|v| v * v).sum::<f64>();
                eat(&g.shared_down);
                eat(&g.shared_up);
                for (d, u) in &g.routed {
                    eat(d);
                    eat(u);
                }
                eat(&g.router);
            }
        }
        total
    }
}

/// Scalars reported per optimisation step.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsLine {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub aux: f64,
    pub orth: f64,
    pub total: f64,
    pub batch_accuracy: f64,
    /// Mean dispatch fraction per expert across adapted projections.
    pub f_reasoner: Vec<f64>,
    pub f_executor: Vec<f64>,
    pub f_summarizer: Vec<f64>,
}

/// Everything a batch gradient computation yields besides the gradients.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub loss: LossBreakdown,
    /// Teacher-forced argmax accuracy over supervised targets.
    pub accuracy: f64,
    pub n_supervised: usize,
    /// Pooled dispatch stats per adapted projection and role.
    pub load: BTreeMap<(usize, ModuleKind), [LoadStats; 3]>,
}

impl BatchStats {
    /// Mean dispatch fraction per expert for one role, across projections.
    pub fn mean_f(&self, role: RoleId) -> Vec<f64> {
        let r = role.index();
        let mut acc: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for stats in self.load.values() {
            let f = &stats[r].f;
            if acc.is_empty() {
                acc = vec![0.0; f.len()];
            }
            for (a, &v) in acc.iter_mut().zip(f) {
                *a += v;
            }
            n += 1;
        }
        if n > 0 {
            for a in acc.iter_mut() {
                *a /= n as f64;
            }
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    /// Hard cap on optimisation steps across all epochs.
    pub max_steps: Option<usize>,
    /// Stop once full-dataset supervised accuracy reaches this value
    /// (checked every `log_every` steps and at epoch boundaries).
    pub target_accuracy: Option<f64>,
    /// Save a checkpoint at every epoch boundary when an output directory
    /// is given.
    pub checkpoint_epochs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            epochs: 4,
            batch_size: 4,
            seed: 0,
            grad_clip: None,
            log_every: 50,
            max_steps: None,
            target_accuracy: None,
            checkpoint_epochs: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub stopped_early: bool,
    pub final_ce: f64,
    pub final_total: f64,
    pub final_accuracy: f64,
    pub history: Vec<MetricsLine>,
}

// ---------------------------------------------------------------------------
// Forward-only evaluation
// ---------------------------------------------------------------------------

/// Loss and teacher-forced accuracy over a dataset, no gradients.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalStats {
    pub ce: f64,
    pub aux: f64,
    pub orth: f64,
    pub total: f64,
    pub accuracy: f64,
    pub n_supervised: usize,
}

/// Positions whose next-token prediction is supervised: position `t`
/// predicts token `t + 1`.
fn supervised_targets(sample: &TokenizedSample) -> impl Iterator<Item = usize> + '_ {
    (0..sample.len().saturating_sub(1)).filter(|&t| sample.supervised[t + 1])
}

struct CeAccum {
    sum: f64,
    correct: usize,
    count: usize,
}

fn ce_over_trace(trace: &ForwardTrace, sample: &TokenizedSample, acc: &mut CeAccum) {
    for t in supervised_targets(sample) {
        let label = sample.ids[t + 1] as usize;
        let row = trace.logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        acc.sum += lse - row[label];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label {
            acc.correct += 1;
        }
        acc.count += 1;
    }
}

fn pooled_load(
    model: &MorModel,
    traces: &[ForwardTrace],
) -> Result<BTreeMap<(usize, ModuleKind), [LoadStats; 3]>, ObjectiveError> {
    let mut load = BTreeMap::new();
    for (&key, layer) in &model.adapters {
        let mut per_role: Vec<LoadStats> = Vec::with_capacity(3);
        for r in 0..3 {
            let sels: Vec<&RouterSelection> =
                traces.iter().map(|tr| &tr.selections[&key][r]).collect();
            per_role.push(compute_load_stats(&sels, layer.groups[r].n_experts())?);
        }
        let arr: [LoadStats; 3] = per_role.try_into().expect("three roles");
        load.insert(key, arr);
    }
    Ok(load)
}

/// Balance loss aggregated the training way: per-role mean over adapted
/// projections, summed over roles.
fn aggregate_aux(load: &BTreeMap<(usize, ModuleKind), [LoadStats; 3]>) -> f64 {
    if load.is_empty() {
        return 0.0;
    }
    let m = load.len() as f64;
    let mut total = 0.0;
    for r in 0..3 {
        let mut role_sum = 0.0;
        for stats in load.values() {
            role_sum += balance_loss(&stats[r]);
        }
        total += role_sum / m;
    }
    total
}

/// Orthogonality loss aggregated the same way.
fn aggregate_orth(model: &MorModel, mode: OrthMode) -> f64 {
    if model.adapters.is_empty() {
        return 0.0;
    }
    let m = model.adapters.len() as f64;
    let mut total = 0.0;
    for r in 0..3 {
        let mut role_sum = 0.0;
        for layer in model.adapters.values() {
            role_sum += orth_loss(&layer.groups[r], mode);
        }
        total += role_sum / m;
    }
    total
}

/// Forward-only loss over a dataset (batched only to bound memory; the
/// pooled statistics cover the whole dataset).
pub fn evaluate(model: &MorModel, data: &[TokenizedSample]) -> Result<EvalStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut ce = CeAccum { sum: 0.0, correct: 0, count: 0 };
    let mut all_load: BTreeMap<(usize, ModuleKind), [LoadStats; 3]> = BTreeMap::new();
    // Accumulate load stats incrementally to avoid holding every trace.
    let mut counts: BTreeMap<(usize, ModuleKind), [(Vec<f64>, Vec<f64>, usize); 3]> =
        BTreeMap::new();
    for sample in data {
        let trace = model.forward(&sample.ids, &sample.mask)?;
        ce_over_trace(&trace, sample, &mut ce);
        for (&key, sels) in &trace.selections {
            let entry = counts.entry(key).or_insert_with(|| {
                [0, 1, 2].map(|r| {
                    let e = model.adapters[&key].groups[r].n_experts();
                    (vec![0.0; e], vec![0.0; e], 0usize)
                })
            });
            for r in 0..3 {
                let sel = &sels[r];
                let (counts_r, probs_r, n) = &mut entry[r];
                for t in 0..sel.n_tokens() {
                    for &i in &sel.indices[t] {
                        counts_r[i] += 1.0;
                    }
                    for i in 0..sel.n_experts() {
                        probs_r[i] += sel.probs[(t, i)];
                    }
                    *n += 1;
                }
            }
        }
    }
    for (key, entry) in counts {
        let arr = entry.map(|(c, p, n)| {
            if n == 0 {
                LoadStats { f: vec![0.0; c.len()], p: vec![0.0; p.len()], token_count: 0 }
            } else {
                LoadStats {
                    f: c.iter().map(|v| v / n as f64).collect(),
                    p: p.iter().map(|v| v / n as f64).collect(),
                    token_count: n,
                }
            }
        });
        all_load.insert(key, arr);
    }
    if ce.count == 0 {
        return Err(TrainError::Objective(ObjectiveError::EmptySupervision));
    }
    let aux = aggregate_aux(&all_load);
    let orth = aggregate_orth(model, model.mor.orth_mode);
    let b = total_loss(ce.sum / ce.count as f64, aux, orth, model.mor.alpha1, model.mor.alpha2)?;
    Ok(EvalStats {
        ce: b.ce,
        aux: b.aux,
        orth: b.orth,
        total: b.total,
        accuracy: ce.correct as f64 / ce.count as f64,
        n_supervised: ce.count,
    })
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

fn gather_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (o, &t) in idx.iter().enumerate() {
        out.row_mut(o).assign(&m.row(t));
    }
    out
}

fn scatter_add_rows(dst: &mut Array2<f64>, idx: &[usize], src: &Array2<f64>) {
    for (o, &t) in idx.iter().enumerate() {
        let mut row = dst.row_mut(t);
        row += &src.row(o);
    }
}

fn rmsnorm_backward(
    x: &Array2<f64>,
    inv: &[f64],
    w: &Array1<f64>,
    dy: &Array2<f64>,
) -> Array2<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let mut dx = Array2::zeros((n, d));
    for t in 0..n {
        let r = inv[t];
        let mut s = 0.0;
        for j in 0..d {
            s += dy[(t, j)] * w[j] * x[(t, j)];
        }
        let c = r * r * r * s / d as f64;
        for j in 0..d {
            dx[(t, j)] = dy[(t, j)] * w[j] * r - x[(t, j)] * c;
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-(projection, role) gradient seeds for the pooled balance loss,
/// already scaled by `alpha1`: seed[i] is d(total)/d(prob of expert i) for
/// every token of that role.
type AuxSeeds = BTreeMap<(usize, ModuleKind), [Vec<f64>; 3]>;

fn balance_seeds(
    model: &MorModel,
    load: &BTreeMap<(usize, ModuleKind), [LoadStats; 3]>,
) -> AuxSeeds {
    let m = model.adapters.len() as f64;
    let alpha1 = model.mor.alpha1;
    let mut seeds = AuxSeeds::new();
    for (&key, stats) in load {
        let per_role = [0usize, 1, 2].map(|r| {
            let st = &stats[r];
            if st.degenerate() {
                return vec![0.0; st.n_experts()];
            }
            let e = st.n_experts() as f64;
            let n = st.token_count as f64;
            st.f.iter().map(|&fi| alpha1 * e * fi / (m * n)).collect()
        });
        seeds.insert(key, per_role);
    }
    seeds
}

struct BackwardCtx<'a> {
    model: &'a MorModel,
    trace: &'a ForwardTrace,
    part_idx: [Vec<usize>; 3],
    seeds: &'a AuxSeeds,
    grads: &'a mut ModelGrads,
}

impl BackwardCtx<'_> {
    /// Backward through one (possibly adapted) projection: accumulates
    /// adapter gradients and returns the gradient w.r.t. the input.
    fn proj_backward(
        &mut self,
        l: usize,
        kind: ModuleKind,
        input: &Array2<f64>,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let base = self.model.backbone.blocks[l].projection(kind);
        let mut d_in = dy.dot(&base.t());
        let Some(layer) = self.model.adapters.get(&(l, kind)) else {
            return d_in;
        };
        let sels = &self.trace.selections[&(l, kind)];
        let grads = self.grads.layers.get_mut(&(l, kind)).expect("grads mirror adapters");
        for r in 0..3 {
            let idx = &self.part_idx[r];
            if idx.is_empty() {
                continue;
            }
            let group = &layer.groups[r];
            let g = &mut grads[r];
            let sel = &sels[r];
            let u = gather_rows(input, idx);
            let dyr = gather_rows(dy, idx);
            let n = idx.len();
            let e = group.n_experts();

            let mut du = Array2::zeros((n, u.ncols()));

            // Shared pair.
            let c = u.dot(&group.shared.down);
            let t1 = dyr.dot(&group.shared.up.t());
            g.shared_up = &g.shared_up + &c.t().dot(&dyr);
            g.shared_down = &g.shared_down + &u.t().dot(&t1);
            du = du + t1.dot(&group.shared.down.t());

            // Routed pairs: dense per-expert products with zero weight on
            // unchosen tokens, plus the chain into the renormalised weights.
            let w = sel.dense_weights();
            let mut s_mat = Array2::zeros((n, e)); // d(loss)/d(weight w_{t,i})
            for (i, pair) in group.routed.iter().enumerate() {
                let ci = u.dot(&pair.down);
                let ti = dyr.dot(&pair.up.t());
                for t in 0..n {
                    let mut dot = 0.0;
                    for a in 0..ci.ncols() {
                        dot += ci[(t, a)] * ti[(t, a)];
                    }
                    s_mat[(t, i)] = dot;
                }
                let wi = w.slice(s![.., i]);
                let mut cw = ci;
                for (mut row, &wt) in cw.outer_iter_mut().zip(wi.iter()) {
                    row.mapv_inplace(|v| v * wt);
                }
                let (gd, gu) = &mut g.routed[i];
                *gu = &*gu + &cw.t().dot(&dyr);
                let mut tw = ti;
                for (mut row, &wt) in tw.outer_iter_mut().zip(wi.iter()) {
                    row.mapv_inplace(|v| v * wt);
                }
                *gd = &*gd + &u.t().dot(&tw);
                du = du + tw.dot(&pair.down.t());
            }

            // Router: renormalisation backward into the chosen
            // probabilities, balance-loss seed into all of them, then the
            // softmax Jacobian down to the logits.
            let seed = &self.seeds[&(l, kind)][r];
            let mut dz = Array2::zeros((n, e));
            for t in 0..n {
                let chosen = &sel.indices[t];
                let total: f64 = chosen.iter().map(|&i| sel.probs[(t, i)]).sum();
                let mut sw = 0.0;
                for (slot, &i) in chosen.iter().enumerate() {
                    sw += s_mat[(t, i)] * sel.weights[t][slot];
                }
                let mut dp = vec![0.0; e];
                for &i in chosen {
                    dp[i] = (s_mat[(t, i)] - sw) / total;
                }
                for i in 0..e {
                    dp[i] += seed[i];
                }
                let mut dot = 0.0;
                for i in 0..e {
                    dot += dp[i] * sel.probs[(t, i)];
                }
                for i in 0..e {
                    dz[(t, i)] = sel.probs[(t, i)] * (dp[i] - dot);
                }
            }
            g.router = &g.router + &u.t().dot(&dz);
            du = du + dz.dot(&group.router.weight.t());

            scatter_add_rows(&mut d_in, idx, &du);
        }
        d_in
    }
}

/// Backward through the whole network for one sample, accumulating adapter
/// gradients. `dlogits` carries the cross-entropy seed; the balance seeds
/// enter at each router.
fn backward_sample(
    model: &MorModel,
    trace: &ForwardTrace,
    dlogits: &Array2<f64>,
    seeds: &AuxSeeds,
    grads: &mut ModelGrads,
) {
    let cfg = &model.backbone.cfg;
    let n = trace.ids.len();
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut part_idx: [Vec<usize>; 3] = Default::default();
    for (t, role) in trace.mask.iter().enumerate() {
        part_idx[role.index()].push(t);
    }
    let mut ctx = BackwardCtx { model, trace, part_idx, seeds, grads };

    // Head and final norm (both frozen; only the input gradient flows).
    let d_normed = dlogits.dot(&model.backbone.lm_head.t());
    let mut dx = rmsnorm_backward(
        &trace.x_final,
        &trace.inv_final,
        &model.backbone.final_norm,
        &d_normed,
    );

    for l in (0..model.backbone.cfg.n_layers).rev() {
        let bt = &trace.blocks[l];
        let bw = &model.backbone.blocks[l];

        // x_out = x_mid + down(m)
        let d_m = ctx.proj_backward(l, ModuleKind::Down, &bt.m, &dx);
        let mut dx_mid = dx;

        // m = silu(g) * u2
        let ff = bt.g.ncols();
        let mut dg = Array2::zeros((n, ff));
        let mut du2 = Array2::zeros((n, ff));
        for t in 0..n {
            for j in 0..ff {
                let gv = bt.g[(t, j)];
                let sg = sigmoid(gv);
                let si = gv * sg;
                dg[(t, j)] = d_m[(t, j)] * bt.u2[(t, j)] * sg * (1.0 + gv * (1.0 - sg));
                du2[(t, j)] = d_m[(t, j)] * si;
            }
        }
        let d_b1 = ctx.proj_backward(l, ModuleKind::Gate, &bt.b_norm, &dg);
        let d_b2 = ctx.proj_backward(l, ModuleKind::Up, &bt.b_norm, &du2);
        let d_bnorm = d_b1 + d_b2;
        dx_mid = dx_mid + rmsnorm_backward(&bt.x_mid, &bt.inv2, &bw.ln2, &d_bnorm);

        // x_mid = x_in + out(ctx)
        let d_ctx = ctx.proj_backward(l, ModuleKind::Out, &bt.ctx, &dx_mid);
        let mut dq = Array2::zeros((n, cfg.d_model));
        let mut dk = Array2::zeros((n, cfg.d_model));
        let mut dv = Array2::zeros((n, cfg.d_model));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = bt.q.slice(cols);
            let kh = bt.k.slice(cols);
            let vh = bt.v.slice(cols);
            let w = &bt.attw[h];
            let dctx_h = d_ctx.slice(cols);

            dv.slice_mut(cols).assign(&w.t().dot(&dctx_h));
            let dw = dctx_h.dot(&vh.t());
            // Causal softmax backward, rows independent.
            let mut ds = Array2::zeros((n, n));
            for t in 0..n {
                let mut dot = 0.0;
                for j in 0..=t {
                    dot += dw[(t, j)] * w[(t, j)];
                }
                for j in 0..=t {
                    ds[(t, j)] = w[(t, j)] * (dw[(t, j)] - dot);
                }
            }
            let mut dqh = ds.dot(&kh);
            dqh.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&dqh);
            let mut dkh = ds.t().dot(&qh);
            dkh.mapv_inplace(|v| v * scale);
            dk.slice_mut(cols).assign(&dkh);
        }
        let d_a1 = ctx.proj_backward(l, ModuleKind::Query, &bt.a_norm, &dq);
        let d_a2 = ctx.proj_backward(l, ModuleKind::Key, &bt.a_norm, &dk);
        let d_a3 = ctx.proj_backward(l, ModuleKind::Value, &bt.a_norm, &dv);
        let d_anorm = d_a1 + d_a2 + d_a3;
        dx = dx_mid + rmsnorm_backward(&bt.x_in, &bt.inv1, &bw.ln1, &d_anorm);
    }
    // Gradient w.r.t. the embedding stops here: the table is frozen.
}

/// Gradient of the orthogonality penalty, scaled by `alpha2 / M`.
fn accumulate_orth_grads(model: &MorModel, grads: &mut ModelGrads) {
    if model.adapters.is_empty() {
        return;
    }
    let scale = model.mor.alpha2 / model.adapters.len() as f64;
    if scale == 0.0 {
        return;
    }
    for (key, layer) in &model.adapters {
        let g_layer = grads.layers.get_mut(key).expect("grads mirror adapters");
        for r in 0..3 {
            let group = &layer.groups[r];
            let g = &mut g_layer[r];
            let e = group.routed.len();
            for i in 0..e {
                for j in (i + 1)..e {
                    let (a, b) = (&group.routed[i], &group.routed[j]);
                    let gram_d = a.down.t().dot(&b.down);
                    let gd_i = b.down.dot(&gram_d.t());
                    let gd_j = a.down.dot(&gram_d);
                    g.routed[i].0 = &g.routed[i].0 + &(gd_i * (2.0 * scale));
                    g.routed[j].0 = &g.routed[j].0 + &(gd_j * (2.0 * scale));
                    match model.mor.orth_mode {
                        OrthMode::RankGram => {
                            let gram_u = a.up.dot(&b.up.t());
                            let gu_i = gram_u.dot(&b.up);
                            let gu_j = gram_u.t().dot(&a.up);
                            g.routed[i].1 = &g.routed[i].1 + &(gu_i * (2.0 * scale));
                            g.routed[j].1 = &g.routed[j].1 + &(gu_j * (2.0 * scale));
                        }
                        OrthMode::Literal => {
                            let gram_u = a.up.t().dot(&b.up);
                            let gu_i = b.up.dot(&gram_u.t());
                            let gu_j = a.up.dot(&gram_u);
                            g.routed[i].1 = &g.routed[i].1 + &(gu_i * (2.0 * scale));
                            g.routed[j].1 = &g.routed[j].1 + &(gu_j * (2.0 * scale));
                        }
                    }
                }
            }
        }
    }
}

/// Loss, gradients, and stats for one batch. This is `train_step` minus the
/// parameter update, shared with the gradient check.
pub fn compute_batch_gradients(
    model: &MorModel,
    batch: &[TokenizedSample],
) -> Result<(ModelGrads, BatchStats), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut traces = Vec::with_capacity(batch.len());
    for sample in batch {
        traces.push(model.forward(&sample.ids, &sample.mask)?);
    }

    // Cross-entropy over pooled supervised targets.
    let mut ce = CeAccum { sum: 0.0, correct: 0, count: 0 };
    for (trace, sample) in traces.iter().zip(batch) {
        ce_over_trace(trace, sample, &mut ce);
    }
    if ce.count == 0 {
        return Err(TrainError::Objective(ObjectiveError::EmptySupervision));
    }
    let n_sup = ce.count as f64;

    let load = pooled_load(model, &traces)?;
    let aux = aggregate_aux(&load);
    let orth = aggregate_orth(model, model.mor.orth_mode);
    let loss = total_loss(ce.sum / n_sup, aux, orth, model.mor.alpha1, model.mor.alpha2)?;

    let seeds = balance_seeds(model, &load);
    let mut grads = ModelGrads::zeros_like(model);
    for (trace, sample) in traces.iter().zip(batch) {
        // d(total)/d(logits): softmax minus one-hot over supervised rows,
        // divided by the pooled target count.
        let mut dlogits = Array2::zeros(trace.logits.raw_dim());
        for t in supervised_targets(sample) {
            let row = trace.logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row.iter() {
                z += (v - max).exp();
            }
            for j in 0..row.len() {
                dlogits[(t, j)] = ((row[j] - max).exp() / z) / n_sup;
            }
            dlogits[(t, sample.ids[t + 1] as usize)] -= 1.0 / n_sup;
        }
        backward_sample(model, trace, &dlogits, &seeds, &mut grads);
    }
    accumulate_orth_grads(model, &mut grads);

    let stats = BatchStats {
        loss,
        accuracy: ce.correct as f64 / ce.count as f64,
        n_supervised: ce.count,
        load,
    };
    Ok((grads, stats))
}

/// One SGD update. Updated parameters are re-quantised to the f32 grid so a
/// checkpoint written at any step reproduces the in-memory model exactly.
pub fn apply_sgd(model: &mut MorModel, grads: &mut ModelGrads, lr: f64, clip: Option<f64>) {
    let mut scale = lr;
    if let Some(c) = clip {
        let norm = grads.sq_norm().sqrt();
        if norm > c {
            scale = lr * c / norm;
        }
    }
    for key in model.trainable_keys() {
        let g = grads.tensor(&key).clone();
        let t = model.tensor_mut(&key);
        for (p, gv) in t.iter_mut().zip(g.iter()) {
            *p = q32(*p - scale * gv);
        }
    }
    grads.for_each_mut(|a| a.fill(0.0));
}

/// One optimisation step over a batch.
pub fn train_step(
    model: &mut MorModel,
    batch: &[TokenizedSample],
    cfg: &TrainConfig,
) -> Result<BatchStats, TrainError> {
    let (mut grads, stats) = compute_batch_gradients(model, batch)?;
    apply_sgd(model, &mut grads, cfg.lr, cfg.grad_clip);
    Ok(stats)
}

/// Full training loop: seeded shuffling per epoch, fixed batch order, one
/// metrics line per `log_every` steps written to `metrics` (JSON, one object
/// per line), optional epoch checkpoints under `out_dir`.
pub fn train(
    model: &mut MorModel,
    data: &[TokenizedSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    metrics: &mut dyn Write,
) -> Result<TrainReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
    }
    if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(TrainError::InvalidConfig(format!("bad learning rate {}", cfg.lr)));
    }
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut stopped_early = false;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stopped_early = true;
                break 'epochs;
            }
            let batch: Vec<TokenizedSample> =
                chunk.iter().map(|&i| data[i].clone()).collect();
            let stats = train_step(model, &batch, cfg)?;
            step += 1;

            let log_now = cfg.log_every > 0 && step % cfg.log_every == 0;
            if log_now {
                let line = MetricsLine {
                    step,
                    epoch,
                    ce: stats.loss.ce,
                    aux: stats.loss.aux,
                    orth: stats.loss.orth,
                    total: stats.loss.total,
                    batch_accuracy: stats.accuracy,
                    f_reasoner: stats.mean_f(RoleId::Reasoner),
                    f_executor: stats.mean_f(RoleId::Executor),
                    f_summarizer: stats.mean_f(RoleId::Summarizer),
                };
                serde_json::to_writer(&mut *metrics, &line)
                    .map_err(|e| TrainError::Io(e.into()))?;
                metrics.write_all(b"\n")?;
                history.push(line);

                if let Some(target) = cfg.target_accuracy {
                    let eval = evaluate(model, data)?;
                    if eval.accuracy >= target {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }

        if let Some(dir) = out_dir {
            if cfg.checkpoint_epochs {
                save_checkpoint(model, &dir.join(format!("epoch{epoch}.json")))?;
            }
        }
        if let Some(target) = cfg.target_accuracy {
            let eval = evaluate(model, data)?;
            if eval.accuracy >= target {
                stopped_early = true;
                break 'epochs;
            }
        }
    }

    let final_eval = evaluate(model, data)?;
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("final.json"))?;
    }
    Ok(TrainReport {
        steps_run: step,
        stopped_early,
        final_ce: final_eval.ce,
        final_total: final_eval.total,
        final_accuracy: final_eval.accuracy,
        history,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub n_params: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Parameter location of the worst relative error.
    pub worst: String,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

fn loss_only(model: &MorModel, batch: &[TokenizedSample]) -> Result<f64, TrainError> {
    let mut traces = Vec::with_capacity(batch.len());
    for sample in batch {
        traces.push(model.forward(&sample.ids, &sample.mask)?);
    }
    let mut ce = CeAccum { sum: 0.0, correct: 0, count: 0 };
    for (trace, sample) in traces.iter().zip(batch) {
        ce_over_trace(trace, sample, &mut ce);
    }
    if ce.count == 0 {
        return Err(TrainError::Objective(ObjectiveError::EmptySupervision));
    }
    let load = pooled_load(model, &traces)?;
    let aux = aggregate_aux(&load);
    let orth = aggregate_orth(model, model.mor.orth_mode);
    let loss =
        total_loss(ce.sum / ce.count as f64, aux, orth, model.mor.alpha1, model.mor.alpha2)?;
    Ok(loss.total)
}

/// Compare analytic gradients against central finite differences of the
/// total loss for every trainable scalar.
///
/// The relative error denominator is floored (`max(|a|, |n|, floor)`): a
/// pure ratio is ill-posed where the true gradient is zero, and the floor
/// bounds the noise a difference of two O(1) losses can contribute.
pub fn finite_diff_gradcheck(
    model: &mut MorModel,
    batch: &[TokenizedSample],
    step_h: f64,
    rel_floor: f64,
) -> Result<GradcheckReport, TrainError> {
    let (grads, _) = compute_batch_gradients(model, batch)?;
    gradcheck_against(model, batch, &grads, step_h, rel_floor)
}

/// The comparison loop of [`finite_diff_gradcheck`], taking the analytic
/// gradients as an argument so the harness itself can be tested against
/// deliberately wrong inputs.
fn gradcheck_against(
    model: &mut MorModel,
    batch: &[TokenizedSample],
    grads: &ModelGrads,
    step_h: f64,
    rel_floor: f64,
) -> Result<GradcheckReport, TrainError> {
    let keys = model.trainable_keys();
    let mut n_params = 0usize;
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = String::new();
    let mut worst_pair = (0.0, 0.0);

    for key in keys {
        let dim = model.tensor(&key).raw_dim();
        for i in 0..dim[0] {
            for j in 0..dim[1] {
                let analytic = grads.tensor(&key)[(i, j)];
                let orig = model.tensor(&key)[(i, j)];
                model.tensor_mut(&key)[(i, j)] = orig + step_h;
                let up = loss_only(model, batch)?;
                model.tensor_mut(&key)[(i, j)] = orig - step_h;
                let down = loss_only(model, batch)?;
                model.tensor_mut(&key)[(i, j)] = orig;
                let numeric = (up - down) / (2.0 * step_h);
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(rel_floor);
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!(
                        "layer {} {} {} {:?} [{},{}]",
                        key.layer, key.kind, key.role, key.tensor, i, j
                    );
                    worst_pair = (analytic, numeric);
                }
                sum_rel += rel;
                n_params += 1;
            }
        }
    }
    Ok(GradcheckReport {
        n_params,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / n_params.max(1) as f64,
        worst,
        analytic_at_worst: worst_pair.0,
        numeric_at_worst: worst_pair.1,
    })
}

/// The small general-position setup used by the gradient-fidelity check:
/// two layers, 32-wide, rank 2, two experts per role with top-1 routing,
/// all seven projection kinds adapted, and a mixed-role two-sample batch.
pub fn gradcheck_preset(seed: u64) -> Result<(MorModel, Vec<TokenizedSample>), TrainError> {
    use crate::backbone::config::{BackboneConfig, MorConfig};
    use crate::backbone::model::{inject_mor, Backbone};
    let cfg = BackboneConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 32,
        seed,
        ..BackboneConfig::default()
    };
    let mor = MorConfig {
        rank: 2,
        total_pairs: [3, 3, 3],
        top_k: [1, 1, 1],
        ..MorConfig::default()
    };
    let mut model = inject_mor(Backbone::new(cfg)?, mor)?;
    // General position: routers and up factors must be away from zero so
    // routing probabilities are distinct and every gradient path is live.
    model.randomize_adapters(seed ^ 0x9E37_79B9, 0.3);

    let mk = |ids: Vec<u32>, roles: Vec<RoleId>, sup: Vec<bool>| TokenizedSample {
        ids,
        mask: RoleMask(roles),
        supervised: sup,
    };
    use RoleId::*;
    let batch = vec![
        mk(
            vec![256, 72, 105, 258, 97, 98, 262, 259, 120, 262],
            vec![
                Reasoner, Reasoner, Reasoner, Reasoner, Reasoner, Reasoner, Reasoner, Executor,
                Executor, Executor,
            ],
            vec![false, false, false, false, true, true, true, false, true, true],
        ),
        mk(
            vec![257, 104, 105, 261, 111, 107, 33, 262],
            vec![
                Reasoner, Reasoner, Reasoner, Summarizer, Summarizer, Summarizer, Summarizer,
                Summarizer,
            ],
            vec![false, false, false, false, true, true, true, true],
        ),
    ];
    Ok((model, batch))
}
