//! Role-gated low-rank adapter groups.
//!
//! A frozen linear layer `W0: [d_in x d_out]` is augmented with one adapter
//! group per role. Each group owns
//!
//! * a **shared** low-rank pair that every token of that role passes through,
//! * `E` **routed** low-rank pairs behind a per-token top-k softmax router,
//! * the router itself (`W_R: [d_in x E]`, no bias).
//!
//! For a token row `u` gated to role `rho` the adapted output is
//!
//! ```text
//! y = u W0 + (u down_sh) up_sh + sum_{i in S(u)} w_i(u) (u down_i) up_i
//! ```
//!
//! where `S(u)` is the top-k set of router softmax probabilities and `w_i`
//! are the chosen probabilities renormalised to sum to one. Tokens of the
//! other two roles are never touched by this group's parameters, which keeps
//! role computations bitwise independent.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three agent roles. Iteration and storage order everywhere in the
/// crate is `Reasoner < Executor < Summarizer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleId {
    Reasoner,
    Executor,
    Summarizer,
}

impl RoleId {
    pub const ALL: [RoleId; 3] = [RoleId::Reasoner, RoleId::Executor, RoleId::Summarizer];

    /// Dense index used for per-role arrays.
    pub fn index(self) -> usize {
        match self {
            RoleId::Reasoner => 0,
            RoleId::Executor => 1,
            RoleId::Summarizer => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<RoleId> {
        RoleId::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RoleId::Reasoner => "reasoner",
            RoleId::Executor => "executor",
            RoleId::Summarizer => "summarizer",
        }
    }
}

impl std::fmt::Display for RoleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One role label per token position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleMask(pub Vec<RoleId>);

impl RoleMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = RoleId> + '_ {
        self.0.iter().copied()
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("{context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("mask length {mask} does not match token count {tokens}")]
    MaskLength { tokens: usize, mask: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
}

/// A low-rank pair `down: [d_in x r]`, `up: [r x d_out]`.
///
/// The rank-r delta it contributes to a token batch `u: [n x d_in]` is
/// `(u down) up`, an `[n x d_out]` matrix that never materialises the full
/// `down up` product during the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}

impl LoraPair {
    pub fn new(down: Array2<f64>, up: Array2<f64>) -> Result<LoraPair, AdapterError> {
        if down.ncols() != up.nrows() {
            return Err(AdapterError::DimMismatch {
                context: "lora pair rank",
                expected: format!("down cols == up rows ({})", down.ncols()),
                actual: format!("{}", up.nrows()),
            });
        }
        let r = down.ncols();
        if r == 0 || r > down.nrows().min(up.ncols()) {
            return Err(AdapterError::InvalidConfig(format!(
                "rank {} outside 1..=min(d_in={}, d_out={})",
                r,
                down.nrows(),
                up.ncols()
            )));
        }
        if down.iter().chain(up.iter()).any(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite { context: "lora pair weights" });
        }
        Ok(LoraPair { down, up })
    }

    pub fn d_in(&self) -> usize {
        self.down.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.up.ncols()
    }

    pub fn rank(&self) -> usize {
        self.down.ncols()
    }
}

/// Per-token top-k softmax router over `E` routed pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRouter {
    /// `[d_in x E]`, no bias.
    pub weight: Array2<f64>,
    pub top_k: usize,
}

impl TokenRouter {
    pub fn new(weight: Array2<f64>, top_k: usize) -> Result<TokenRouter, AdapterError> {
        let e = weight.ncols();
        if e == 0 {
            return Err(AdapterError::InvalidConfig("router needs at least one expert".into()));
        }
        if top_k == 0 || top_k > e {
            return Err(AdapterError::InvalidConfig(format!(
                "top_k {} outside 1..=E={}",
                top_k, e
            )));
        }
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite { context: "router weight" });
        }
        Ok(TokenRouter { weight, top_k })
    }

    pub fn n_experts(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }
}

/// Routing decision for a block of tokens.
///
/// Row `t` of `probs` is the full softmax distribution for token `t`;
/// `indices[t]` holds the chosen expert ids (strictly increasing) and
/// `weights[t]` the renormalised probabilities aligned with them.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterSelection {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub probs: Array2<f64>,
}

impl RouterSelection {
    pub fn n_tokens(&self) -> usize {
        self.indices.len()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.ncols()
    }

    /// Empty selection for a role that received no tokens.
    pub fn empty(n_experts: usize) -> RouterSelection {
        RouterSelection {
            indices: Vec::new(),
            weights: Vec::new(),
            probs: Array2::zeros((0, n_experts)),
        }
    }

    /// Dense `[n x E]` matrix of renormalised weights, zero for unchosen
    /// experts. This is what the vectorised forward/backward paths consume.
    pub fn dense_weights(&self) -> Array2<f64> {
        let mut w = Array2::zeros((self.n_tokens(), self.n_experts()));
        for (t, (idx, wt)) in self.indices.iter().zip(&self.weights).enumerate() {
            for (&i, &v) in idx.iter().zip(wt) {
                w[(t, i)] = v;
            }
        }
        w
    }
}

/// All adapter state one role contributes to one adapted projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleAdapterGroup {
    pub role: RoleId,
    pub shared: LoraPair,
    pub routed: Vec<LoraPair>,
    pub router: TokenRouter,
}

impl RoleAdapterGroup {
    pub fn new(
        role: RoleId,
        shared: LoraPair,
        routed: Vec<LoraPair>,
        router: TokenRouter,
    ) -> Result<RoleAdapterGroup, AdapterError> {
        if routed.is_empty() {
            return Err(AdapterError::InvalidConfig(
                "role group needs at least one routed pair".into(),
            ));
        }
        if router.n_experts() != routed.len() {
            return Err(AdapterError::DimMismatch {
                context: "router experts vs routed pairs",
                expected: format!("{}", routed.len()),
                actual: format!("{}", router.n_experts()),
            });
        }
        let (d_in, d_out, r) = (shared.d_in(), shared.d_out(), shared.rank());
        for p in &routed {
            if p.d_in() != d_in || p.d_out() != d_out || p.rank() != r {
                return Err(AdapterError::DimMismatch {
                    context: "routed pair shape",
                    expected: format!("[{d_in}x{r}]/[{r}x{d_out}]"),
                    actual: format!(
                        "[{}x{}]/[{}x{}]",
                        p.d_in(),
                        p.rank(),
                        p.rank(),
                        p.d_out()
                    ),
                });
            }
        }
        if router.d_in() != d_in {
            return Err(AdapterError::DimMismatch {
                context: "router input dim",
                expected: format!("{d_in}"),
                actual: format!("{}", router.d_in()),
            });
        }
        Ok(RoleAdapterGroup { role, shared, routed, router })
    }

    pub fn n_experts(&self) -> usize {
        self.routed.len()
    }

    pub fn d_in(&self) -> usize {
        self.shared.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.shared.d_out()
    }

    pub fn rank(&self) -> usize {
        self.shared.rank()
    }
}

/// A frozen base projection plus the three role adapter groups attached to it.
///
/// `base` is shared (aliased) with the owning backbone; only the groups hold
/// trainable state.
#[derive(Debug, Clone)]
pub struct MorLayer {
    pub base: std::sync::Arc<Array2<f64>>,
    pub groups: [RoleAdapterGroup; 3],
}

impl MorLayer {
    pub fn new(
        base: std::sync::Arc<Array2<f64>>,
        groups: [RoleAdapterGroup; 3],
    ) -> Result<MorLayer, AdapterError> {
        for (i, g) in groups.iter().enumerate() {
            if g.role != RoleId::ALL[i] {
                return Err(AdapterError::InvalidConfig(format!(
                    "group {} carries role {}, expected {}",
                    i,
                    g.role,
                    RoleId::ALL[i]
                )));
            }
            if g.d_in() != base.nrows() || g.d_out() != base.ncols() {
                return Err(AdapterError::DimMismatch {
                    context: "group dims vs base",
                    expected: format!("[{}x{}]", base.nrows(), base.ncols()),
                    actual: format!("[{}x{}]", g.d_in(), g.d_out()),
                });
            }
        }
        Ok(MorLayer { base, groups })
    }

    pub fn group(&self, role: RoleId) -> &RoleAdapterGroup {
        &self.groups[role.index()]
    }

    pub fn group_mut(&mut self, role: RoleId) -> &mut RoleAdapterGroup {
        &mut self.groups[role.index()]
    }

    pub fn d_in(&self) -> usize {
        self.base.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.base.ncols()
    }
}

/// Low-rank delta `(u down) up` for a batch of rows.
pub fn lora_delta(u: &ArrayView2<f64>, pair: &LoraPair) -> Result<Array2<f64>, AdapterError> {
    if u.ncols() != pair.d_in() {
        return Err(AdapterError::DimMismatch {
            context: "lora_delta input",
            expected: format!("{} cols", pair.d_in()),
            actual: format!("{} cols", u.ncols()),
        });
    }
    Ok(u.dot(&pair.down).dot(&pair.up))
}

/// Softmax + top-k selection for every row of `u`.
///
/// Ties are broken toward the lower expert index; the chosen probabilities
/// are renormalised to sum to one per token.
pub fn route_tokens(
    router: &TokenRouter,
    u: &ArrayView2<f64>,
) -> Result<RouterSelection, AdapterError> {
    if u.ncols() != router.d_in() {
        return Err(AdapterError::DimMismatch {
            context: "route_tokens input",
            expected: format!("{} cols", router.d_in()),
            actual: format!("{} cols", u.ncols()),
        });
    }
    let n = u.nrows();
    let e = router.n_experts();
    let k = router.top_k;
    let logits = u.dot(&router.weight);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(AdapterError::NonFinite { context: "router logits" });
    }

    let mut probs = Array2::zeros((n, e));
    let mut indices = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for t in 0..n {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..e {
            let p = (row[i] - max).exp();
            probs[(t, i)] = p;
            z += p;
        }
        for i in 0..e {
            probs[(t, i)] /= z;
        }

        // Rank experts by probability, lower index first on ties.
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| {
            probs[(t, b)]
                .partial_cmp(&probs[(t, a)])
                .expect("softmax probabilities are finite")
                .then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order[..k].to_vec();
        chosen.sort_unstable();
        let total: f64 = chosen.iter().map(|&i| probs[(t, i)]).sum();
        let w: Vec<f64> = chosen.iter().map(|&i| probs[(t, i)] / total).collect();
        indices.push(chosen);
        weights.push(w);
    }
    Ok(RouterSelection { indices, weights, probs })
}

/// Shared + routed delta of a single role group, along with the routing
/// decision that produced the routed part.
pub fn role_group_delta(
    group: &RoleAdapterGroup,
    u: &ArrayView2<f64>,
) -> Result<(Array2<f64>, RouterSelection), AdapterError> {
    let selection = route_tokens(&group.router, u)?;
    let mut delta = lora_delta(u, &group.shared)?;
    let dense = selection.dense_weights();
    for (i, pair) in group.routed.iter().enumerate() {
        // (u down_i) scaled per token by its renormalised weight, then up_i.
        // Unchosen tokens carry weight zero, so one dense product per expert
        // covers the whole block without a per-token loop.
        let mut c = u.dot(&pair.down);
        let w = dense.index_axis(Axis(1), i);
        for (mut row, &wt) in c.outer_iter_mut().zip(w.iter()) {
            if wt == 0.0 {
                row.fill(0.0);
            } else {
                row.mapv_inplace(|v| v * wt);
            }
        }
        delta = delta + c.dot(&pair.up);
    }
    Ok((delta, selection))
}

/// Token index sets and gathered row blocks, one entry per role.
#[derive(Debug, Clone)]
pub struct RolePartition {
    /// Ascending original-row indices per role.
    pub indices: [Vec<usize>; 3],
    /// Gathered rows per role, in the same order as `indices`.
    pub rows: [Array2<f64>; 3],
}

/// Split a token batch into per-role blocks, preserving original order.
pub fn partition_by_role(
    u: &ArrayView2<f64>,
    mask: &RoleMask,
) -> Result<RolePartition, AdapterError> {
    if mask.len() != u.nrows() {
        return Err(AdapterError::MaskLength { tokens: u.nrows(), mask: mask.len() });
    }
    let mut indices: [Vec<usize>; 3] = Default::default();
    for (t, role) in mask.iter().enumerate() {
        indices[role.index()].push(t);
    }
    let d = u.ncols();
    let rows = [0, 1, 2].map(|r| {
        let idx: &Vec<usize> = &indices[r];
        let mut block = Array2::zeros((idx.len(), d));
        for (out, &t) in idx.iter().enumerate() {
            block.row_mut(out).assign(&u.row(t));
        }
        block
    });
    Ok(RolePartition { indices, rows })
}

/// Full adapted projection: base product plus each role's delta scattered
/// back to its own rows. Returns the per-role routing decisions alongside
/// (empty selection for roles without tokens).
pub fn mor_layer_forward(
    layer: &MorLayer,
    u: &ArrayView2<f64>,
    mask: &RoleMask,
) -> Result<(Array2<f64>, [RouterSelection; 3]), AdapterError> {
    if u.ncols() != layer.d_in() {
        return Err(AdapterError::DimMismatch {
            context: "mor_layer_forward input",
            expected: format!("{} cols", layer.d_in()),
            actual: format!("{} cols", u.ncols()),
        });
    }
    let part = partition_by_role(u, mask)?;
    let mut y = u.dot(layer.base.as_ref());
    let mut selections: [RouterSelection; 3] =
        [0, 1, 2].map(|r| RouterSelection::empty(layer.groups[r].n_experts()));
    for role in RoleId::ALL {
        let r = role.index();
        if part.indices[r].is_empty() {
            continue;
        }
        let (delta, sel) = role_group_delta(&layer.groups[r], &part.rows[r].view())?;
        for (block_row, &t) in part.indices[r].iter().enumerate() {
            let mut out = y.row_mut(t);
            out += &delta.row(block_row);
        }
        selections[r] = sel;
    }
    Ok((y, selections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pair(down: Array2<f64>, up: Array2<f64>) -> LoraPair {
        LoraPair::new(down, up).unwrap()
    }

    /// Naive per-element softmax used as an independent oracle.
    fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        logits.iter().map(|v| v.exp() / z).collect()
    }

    #[test]
    fn lora_delta_matches_hand_product() {
        // u = [1 2], down = I, up = diag(3, 4): delta = [3 8].
        let u = array![[1.0, 2.0]];
        let p = pair(array![[1.0, 0.0], [0.0, 1.0]], array![[3.0, 0.0], [0.0, 4.0]]);
        let d = lora_delta(&u.view(), &p).unwrap();
        assert_eq!(d, array![[3.0, 8.0]]);

        // Rank-1 case: c = 2*0.5 + 3*1 = 4, delta = 4 * [2 -1].
        let u = array![[2.0, 3.0]];
        let p = pair(array![[0.5], [1.0]], array![[2.0, -1.0]]);
        let d = lora_delta(&u.view(), &p).unwrap();
        assert_eq!(d, array![[8.0, -4.0]]);
    }

    #[test]
    fn lora_pair_rejects_bad_shapes() {
        assert!(LoraPair::new(Array2::zeros((4, 2)), Array2::zeros((3, 4))).is_err());
        // Rank above min(d_in, d_out).
        assert!(LoraPair::new(Array2::zeros((2, 3)), Array2::zeros((3, 8))).is_err());
        assert!(LoraPair::new(array![[f64::NAN]], array![[1.0]]).is_err());
    }

    #[test]
    fn lora_delta_is_scale_equivariant_and_linear() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut rand = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0f64))
        };
        for _ in 0..50 {
            let (d_in, r, d_out, n) = (6, 2, 5, 4);
            let down = rand(d_in, r);
            let up = rand(r, d_out);
            let u1 = rand(n, d_in);
            let u2 = rand(n, d_in);
            let p = pair(down.clone(), up.clone());

            // down * c, up / c leaves the composite map unchanged.
            let c = 3.7;
            let rescaled = pair(down.mapv(|v| v * c), up.mapv(|v| v / c));
            let a = lora_delta(&u1.view(), &p).unwrap();
            let b = lora_delta(&u1.view(), &rescaled).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
                assert!(rel < 1e-10, "rescaling moved the delta: {x} vs {y}");
            }

            // The delta is linear in the activations.
            let (s, t) = (-1.3, 0.8);
            let mixed = lora_delta(&(s * &u1 + t * &u2).view(), &p).unwrap();
            let split = s * &lora_delta(&u1.view(), &p).unwrap()
                + t * &lora_delta(&u2.view(), &p).unwrap();
            for (x, y) in mixed.iter().zip(split.iter()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
                assert!(rel < 1e-8, "linearity violated: {x} vs {y}");
            }
        }
    }

    #[test]
    fn route_tokens_matches_scalar_oracle() {
        // One token, identity-ish input so logits equal the first router row.
        let router = TokenRouter::new(array![[0.2, -0.1, 0.3], [0.0, 0.0, 0.0]], 2).unwrap();
        let u = array![[1.0, 0.0]];
        let sel = route_tokens(&router, &u.view()).unwrap();
        let oracle = softmax_oracle(&[0.2, -0.1, 0.3]);
        for i in 0..3 {
            assert!((sel.probs[(0, i)] - oracle[i]).abs() < 1e-12);
        }
        // Top-2 of (0.35.., 0.26.., 0.38..) is experts {0, 2}, ascending.
        assert_eq!(sel.indices[0], vec![0, 2]);
        let t = oracle[0] + oracle[2];
        assert!((sel.weights[0][0] - oracle[0] / t).abs() < 1e-12);
        assert!((sel.weights[0][1] - oracle[2] / t).abs() < 1e-12);
        let sum: f64 = sel.weights[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn route_tokens_breaks_ties_toward_lower_index() {
        let router = TokenRouter::new(Array2::zeros((2, 4)), 2).unwrap();
        let u = array![[1.0, 1.0]];
        let sel = route_tokens(&router, &u.view()).unwrap();
        assert_eq!(sel.indices[0], vec![0, 1]);
        assert_eq!(sel.weights[0], vec![0.5, 0.5]);
    }

    #[test]
    fn route_tokens_rejects_non_finite_logits() {
        let router = TokenRouter::new(array![[1.0e308], [1.0e308]], 1).unwrap();
        let u = array![[1.0e308, 1.0e308]];
        assert!(matches!(
            route_tokens(&router, &u.view()),
            Err(AdapterError::NonFinite { .. })
        ));
    }

    #[test]
    fn role_group_delta_matches_hand_computation() {
        // Two tokens steering to opposite experts with weight one each.
        let shared = pair(array![[1.0], [0.0]], array![[1.0, 1.0]]);
        let routed = vec![
            pair(array![[2.0], [0.0]], array![[1.0, 0.0]]),
            pair(array![[0.0], [3.0]], array![[0.0, 1.0]]),
        ];
        let router = TokenRouter::new(array![[1.0, 0.0], [0.0, 1.0]], 1).unwrap();
        let group =
            RoleAdapterGroup::new(RoleId::Reasoner, shared, routed, router).unwrap();
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let (delta, sel) = role_group_delta(&group, &u.view()).unwrap();
        // token 0: shared [1,1] + expert0 [2,0]; token 1: shared [0,0] + expert1 [0,3].
        assert_eq!(delta, array![[3.0, 1.0], [0.0, 3.0]]);
        assert_eq!(sel.indices, vec![vec![0], vec![1]]);
        assert_eq!(sel.weights, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn partition_preserves_order_and_covers_all_tokens() {
        let u = array![[0.0], [1.0], [2.0], [3.0], [4.0]];
        let mask = RoleMask(vec![
            RoleId::Executor,
            RoleId::Reasoner,
            RoleId::Executor,
            RoleId::Summarizer,
            RoleId::Reasoner,
        ]);
        let part = partition_by_role(&u.view(), &mask).unwrap();
        assert_eq!(part.indices[0], vec![1, 4]);
        assert_eq!(part.indices[1], vec![0, 2]);
        assert_eq!(part.indices[2], vec![3]);
        assert_eq!(part.rows[0], array![[1.0], [4.0]]);
        assert_eq!(part.rows[1], array![[0.0], [2.0]]);
        let total: usize = part.indices.iter().map(|v| v.len()).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn partition_rejects_mismatched_mask() {
        let u = Array2::zeros((3, 2));
        let mask = RoleMask(vec![RoleId::Reasoner; 2]);
        assert!(matches!(
            partition_by_role(&u.view(), &mask),
            Err(AdapterError::MaskLength { tokens: 3, mask: 2 })
        ));
    }

    fn tiny_layer(seed: u64) -> MorLayer {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
        };
        let base = std::sync::Arc::new(mat(3, 4));
        let groups = [RoleId::Reasoner, RoleId::Executor, RoleId::Summarizer].map(|role| {
            let shared = pair(mat(3, 2), mat(2, 4));
            let routed = vec![pair(mat(3, 2), mat(2, 4)), pair(mat(3, 2), mat(2, 4))];
            let router = TokenRouter::new(mat(3, 2), 1).unwrap();
            RoleAdapterGroup::new(role, shared, routed, router).unwrap()
        });
        MorLayer::new(base, groups).unwrap()
    }

    #[test]
    fn forward_reduces_to_base_product_with_zero_up_factors() {
        let mut layer = tiny_layer(7);
        for g in layer.groups.iter_mut() {
            g.shared.up.fill(0.0);
            for p in g.routed.iter_mut() {
                p.up.fill(0.0);
            }
        }
        let u = array![[0.3, -0.2, 0.9], [1.0, 0.5, -0.4]];
        let mask = RoleMask(vec![RoleId::Reasoner, RoleId::Summarizer]);
        let (y, _) = mor_layer_forward(&layer, &u.view(), &mask).unwrap();
        assert_eq!(y, u.dot(layer.base.as_ref()));
    }

    #[test]
    fn perturbing_one_role_leaves_other_rows_bitwise_unchanged() {
        let layer = tiny_layer(11);
        let u = array![
            [0.3, -0.2, 0.9],
            [1.0, 0.5, -0.4],
            [-0.7, 0.1, 0.2],
            [0.4, 0.4, 0.4]
        ];
        let mask = RoleMask(vec![
            RoleId::Reasoner,
            RoleId::Executor,
            RoleId::Summarizer,
            RoleId::Executor,
        ]);
        let (y0, _) = mor_layer_forward(&layer, &u.view(), &mask).unwrap();

        let mut perturbed = layer.clone();
        let g = perturbed.group_mut(RoleId::Executor);
        g.shared.up[(0, 0)] += 0.5;
        g.routed[1].down[(2, 1)] -= 0.25;
        g.router.weight[(0, 0)] += 1.0;
        let (y1, _) = mor_layer_forward(&perturbed, &u.view(), &mask).unwrap();

        for t in [0usize, 2] {
            for j in 0..4 {
                assert_eq!(y0[(t, j)].to_bits(), y1[(t, j)].to_bits());
            }
        }
        assert_ne!(y0.row(1), y1.row(1));
    }
}
