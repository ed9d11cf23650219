//! Sparse top-K routed expert layer with a permanent shared expert, plus the
//! two routing losses: expert-diversity (squared coefficient of variation of
//! mean usage) and geometry-weighted spatial consistency (symmetric KL
//! between router distributions of paired points).

use rand::Rng;
use thiserror::Error;

use crate::geometry::PointPairSet;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("distribution component out of domain: {0}")]
    DomainError(f64),
}

/// Which functional form the diversity regularizer uses.
///
/// `Cv2` is var/mean^2 (zero at perfectly balanced usage). `PaperLiteral`
/// is mean/var, kept selectable for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivLossForm {
    #[default]
    Cv2,
    PaperLiteral,
}

impl std::str::FromStr for DivLossForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cv2" => Ok(DivLossForm::Cv2),
            "paper-literal" => Ok(DivLossForm::PaperLiteral),
            other => Err(format!("unknown div-loss-form `{other}` (cv2|paper-literal)")),
        }
    }
}

impl std::fmt::Display for DivLossForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DivLossForm::Cv2 => "cv2",
            DivLossForm::PaperLiteral => "paper-literal",
        })
    }
}

/// Router gate state for one token.
#[derive(Debug, Clone)]
pub struct GateDistribution {
    /// softmax over all E logits
    pub probabilities: Vec<f64>,
    /// softmax over the selected top-K logits, zero elsewhere
    pub weights: Vec<f64>,
    /// selected expert indices, ascending
    pub selected: Vec<usize>,
}

/// Indices of the K largest entries, ties resolved to the lowest index.
/// Returned ascending.
pub fn top_k_select(logits: &[f64], k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= logits.len(), "need 1 <= K <= E");
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// Number of distinct routing patterns across `layers` MoE blocks.
pub fn combination_count(experts: usize, top_k: usize, layers: u32) -> u64 {
    binomial(experts as u64, top_k as u64).pow(layers)
}

/// All K-element subsets of `{0..experts}` in lexicographic order. This is
/// the canonical palette for expert-selection visualizations.
pub fn expert_combinations(experts: usize, top_k: usize) -> Vec<Vec<usize>> {
    assert!(top_k >= 1 && top_k <= experts, "need 1 <= K <= E");
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(top_k);
    fn rec(out: &mut Vec<Vec<usize>>, current: &mut Vec<usize>, from: usize, e: usize, k: usize) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in from..e {
            current.push(i);
            rec(out, current, i + 1, e, k);
            current.pop();
        }
    }
    rec(&mut out, &mut current, 0, experts, top_k);
    out
}

/// Position of an ascending selection set within `expert_combinations`.
pub fn combination_index(selected: &[usize], experts: usize) -> usize {
    expert_combinations(experts, selected.len())
        .iter()
        .position(|c| c == selected)
        .expect("selection set out of range")
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1u64;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Two-layer feed-forward expert: `w2 . act(w1 x + b1) + b2`.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let s1 = (2.0 / dim as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        ExpertParams {
            w1: store.add(format!("{prefix}.w1"), Tensor::randn(vec![dim, hidden], s1, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![1, hidden])),
            w2: store.add(format!("{prefix}.w2"), Tensor::randn(vec![hidden, dim], s2, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![1, dim])),
        }
    }

    pub fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        x.matmul(w1).add_bias_row(b1).gelu().matmul(w2).add_bias_row(b2)
    }
}

/// Linear gating network plus selection count.
#[derive(Debug, Clone)]
pub struct Router {
    pub weight: ParamId,
    pub bias: ParamId,
    pub experts: usize,
    pub top_k: usize,
}

/// Router outputs for a batch of tokens.
pub struct RoutedGates<'t> {
    /// dense pre-selection probabilities, `[T, E]`
    pub dense: Var<'t>,
    /// sparse post-selection weights, `[T, E]`, exactly K nonzero per row
    pub sparse: Var<'t>,
    /// per-token selected expert sets, ascending
    pub selected: Vec<Vec<usize>>,
}

impl<'t> RoutedGates<'t> {
    pub fn distribution(&self, token: usize) -> GateDistribution {
        let e = self.dense.cols();
        let dense = self.dense.value();
        let sparse = self.sparse.value();
        GateDistribution {
            probabilities: dense.data[token * e..(token + 1) * e].to_vec(),
            weights: sparse.data[token * e..(token + 1) * e].to_vec(),
            selected: self.selected[token].clone(),
        }
    }
}

impl Router {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        experts: usize,
        top_k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(top_k >= 1 && top_k <= experts, "need 1 <= K <= E");
        let s = (1.0 / dim as f64).sqrt();
        Router {
            weight: store.add(format!("{prefix}.gate.w"), Tensor::randn(vec![dim, experts], s, rng)),
            bias: store.add(format!("{prefix}.gate.b"), Tensor::zeros(vec![1, experts])),
            experts,
            top_k,
        }
    }

    /// Routes a batch of tokens `[T, d]`. The sparse weights come from a
    /// softmax over the selected logits only (unselected logits are masked
    /// to -inf before the softmax, so their weight is exactly zero).
    pub fn route<'t>(&self, tape: &'t Tape, store: &ParamStore, tokens: Var<'t>) -> RoutedGates<'t> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let logits = tokens.matmul(w).add_bias_row(b);
        let dense = logits.softmax_rows();
        let values = logits.value();
        let t = tokens.rows();
        let e = self.experts;
        let mut selected = Vec::with_capacity(t);
        let mut mask = vec![true; t * e];
        for i in 0..t {
            let sel = top_k_select(&values.data[i * e..(i + 1) * e], self.top_k);
            for &s in &sel {
                mask[i * e + s] = false;
            }
            selected.push(sel);
        }
        let sparse = logits.masked_fill(&mask, f64::NEG_INFINITY).softmax_rows();
        RoutedGates { dense, sparse, selected }
    }
}

/// E selectable experts, one permanent expert, one router.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub router: Router,
    pub experts: Vec<ExpertParams>,
    pub permanent: ExpertParams,
    pub dim: usize,
    pub hidden: usize,
}

impl MoeLayer {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        num_experts: usize,
        top_k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let router = Router::init(store, prefix, dim, num_experts, top_k, rng);
        let experts = (0..num_experts)
            .map(|e| ExpertParams::init(store, &format!("{prefix}.expert{e}"), dim, hidden, rng))
            .collect();
        let permanent = ExpertParams::init(store, &format!("{prefix}.permanent"), dim, hidden, rng);
        MoeLayer { router, experts, permanent, dim, hidden }
    }

    /// `y = f_p(x) + sum_e w_e f_e(x)`; only the selected experts run.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: Var<'t>,
    ) -> (Var<'t>, RoutedGates<'t>) {
        let gates = self.router.route(tape, store, tokens);
        let t = tokens.rows();
        let mut out = self.permanent.apply(tape, store, tokens);
        for (e, expert) in self.experts.iter().enumerate() {
            let routed: Vec<usize> = (0..t).filter(|i| gates.selected[*i].contains(&e)).collect();
            if routed.is_empty() {
                continue;
            }
            let sub = tokens.row_gather(&routed);
            let y = expert.apply(tape, store, sub);
            let w = gates.sparse.row_gather(&routed).slice_cols(e, 1);
            out = out.add(y.mul_col(w).row_scatter_add(&routed, t));
        }
        (out, gates)
    }

    /// Reference path: evaluates every expert for every token and weights by
    /// the sparse gates. Used to cross-check the sparse dispatch.
    pub fn forward_dense_reference<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: Var<'t>,
    ) -> (Var<'t>, RoutedGates<'t>) {
        let gates = self.router.route(tape, store, tokens);
        let mut out = self.permanent.apply(tape, store, tokens);
        for (e, expert) in self.experts.iter().enumerate() {
            let y = expert.apply(tape, store, tokens);
            let w = gates.sparse.slice_cols(e, 1);
            out = out.add(y.mul_col(w));
        }
        (out, gates)
    }
}

/// Squared coefficient of variation (or the literal mean/var form) of the
/// mean sparse gate usage over a batch of tokens. `sparse` is `[T, E]`.
pub fn diversity_loss<'t>(sparse: Var<'t>, form: DivLossForm) -> Var<'t> {
    assert!(sparse.rows() > 0, "diversity loss needs at least one gate");
    let usage = sparse.mean_axis0(); // [1, E]
    let mean = usage.mean_all();
    let e = usage.cols();
    let var = usage.sub(mean.broadcast_to(1, e)).square().mean_all();
    match form {
        DivLossForm::Cv2 => var.div(mean.square()),
        DivLossForm::PaperLiteral => mean.div(var),
    }
}

/// Per-row symmetric KL between two batches of distributions `[T, E]`:
/// `1/2 KL(p||q) + 1/2 KL(q||p)` per row, natural log. Result `[T, 1]`.
pub fn symmetric_kl_rows<'t>(p: Var<'t>, q: Var<'t>) -> Var<'t> {
    p.sub(q).mul(p.log().sub(q.log())).sum_axis1().scale(0.5)
}

/// Scalar symmetric KL for two strictly positive distributions.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64, MoeError> {
    assert_eq!(p.len(), q.len(), "distribution lengths differ");
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi <= 0.0 {
            return Err(MoeError::DomainError(pi));
        }
        if qi <= 0.0 {
            return Err(MoeError::DomainError(qi));
        }
        acc += 0.5 * (pi - qi) * (pi.ln() - qi.ln());
    }
    Ok(acc)
}

/// Spatial consistency loss for one close-ray pair at one MoE layer:
/// confidence-weighted symmetric KL between the dense router distributions
/// of each point and its nearest partner. `gates_a`/`gates_b` are `[M, E]`
/// dense probabilities for the two rays' sample points.
pub fn spatial_consistency_pair<'t>(
    tape: &'t Tape,
    pair_set: &PointPairSet,
    gates_a: Var<'t>,
    gates_b: Var<'t>,
) -> Var<'t> {
    let idx_a: Vec<usize> = pair_set.pairs.iter().map(|p| p.index_a).collect();
    let idx_b: Vec<usize> = pair_set.pairs.iter().map(|p| p.index_b).collect();
    let p = gates_a.row_gather(&idx_a);
    let q = gates_b.row_gather(&idx_b);
    let kl = symmetric_kl_rows(p, q);
    let rho = tape.constant(&Tensor::new(
        vec![pair_set.confidence.len(), 1],
        pair_set.confidence.clone(),
    ));
    kl.mul(rho).sum_all()
}
