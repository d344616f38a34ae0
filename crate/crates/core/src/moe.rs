//! Sparse mixture-of-experts feed-forward block.
//!
//! A router maps each token to per-expert scores (softmax or sigmoid). The
//! `top_k` highest scores, optionally shifted by a selection-only
//! [`GatingBias`], choose the active experts, and the block output is the sum
//! of selected expert outputs weighted by their raw, un-renormalized scores.
//! Shared experts are always active and added with coefficient 1. Routing is
//! dropless: every selected (token, expert) pair is computed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub hidden_dim: usize,
    pub expert_dim: usize,
    pub gating: Gating,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 16,
            top_k: 2,
            n_shared: 1,
            hidden_dim: 64,
            expert_dim: 32,
            gating: Gating::Softmax,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= top_k <= n_experts (top_k = {}, n_experts = {})",
                self.top_k, self.n_experts
            )));
        }
        if self.hidden_dim == 0 || self.expert_dim == 0 {
            return Err(Error::Config("hidden_dim and expert_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Selection-only additive bias on gate scores.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingBias {
    pub bias: Vec<f64>,
}

impl GatingBias {
    pub fn zeros(n_experts: usize) -> Self {
        Self {
            bias: vec![0.0; n_experts],
        }
    }
}

/// Routing outcome for a batch of `T` tokens.
#[derive(Clone, Debug)]
pub struct GatingDecision {
    /// Post-gating scores, `T×N_E`.
    pub probs: Tensor,
    /// `T×K`, row-major, each row in descending selection-score order.
    pub topk_indices: Vec<usize>,
    /// `T×K` with `topk_scores[t][j] == probs[t][topk_indices[t][j]]`.
    pub topk_scores: Tensor,
    /// `T×N_E` 0/1 token-expert selection matrix.
    pub selection: Vec<u8>,
    pub top_k: usize,
}

impl GatingDecision {
    pub fn n_tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.cols()
    }

    pub fn indices(&self, t: usize) -> &[usize] {
        &self.topk_indices[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn selected(&self, t: usize, e: usize) -> bool {
        self.selection[t * self.n_experts() + e] == 1
    }

    /// Tokens routed to each expert, ascending token order.
    pub fn tokens_per_expert(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_experts()];
        for t in 0..self.n_tokens() {
            for &e in self.indices(t) {
                out[e].push(t);
            }
        }
        out
    }
}

/// Picks the `top_k` largest `probs + bias` entries per row; equal scores
/// resolve to the lower expert index.
pub fn select_topk(probs: &Tensor, top_k: usize, bias: Option<&GatingBias>) -> Result<GatingDecision> {
    let [t, n] = probs.shape();
    if top_k == 0 || top_k > n {
        return Err(Error::Config(format!(
            "top_k must satisfy 1 <= top_k <= n_experts (top_k = {top_k}, n_experts = {n})"
        )));
    }
    if t == 0 {
        return Err(Error::EmptyBatch("route"));
    }
    if let Some(b) = bias {
        if b.bias.len() != n {
            return Err(Error::Dimension {
                op: "route",
                left: [t, n],
                right: [1, b.bias.len()],
            });
        }
    }
    let mut topk_indices = Vec::with_capacity(t * top_k);
    let mut scores = Vec::with_capacity(t * top_k);
    let mut selection = vec![0u8; t * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut key = vec![0.0; n];
    for r in 0..t {
        let row = probs.row_slice(r);
        for (e, k) in key.iter_mut().enumerate() {
            *k = row[e] + bias.map_or(0.0, |b| b.bias[e]);
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
        for &e in &order[..top_k] {
            topk_indices.push(e);
            scores.push(row[e]);
            selection[r * n + e] = 1;
        }
    }
    Ok(GatingDecision {
        probs: probs.clone(),
        topk_indices,
        topk_scores: Tensor::from_vec(t, top_k, scores)?,
        selection,
        top_k,
    })
}

/// Per-expert selection counts (column sums of the selection matrix).
pub fn expert_load(decision: &GatingDecision) -> Vec<u64> {
    let n = decision.n_experts();
    let mut counts = vec![0u64; n];
    for row in decision.selection.chunks_exact(n) {
        for (c, &s) in counts.iter_mut().zip(row) {
            *c += u64::from(s);
        }
    }
    counts
}

/// Two-layer relu MLP `h -> expert_dim -> h`.
#[derive(Clone, Copy, Debug)]
pub struct Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Expert {
    fn init(store: &mut ParamStore, prefix: &str, h: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: store.add_normal(format!("{prefix}.w1"), h, d, (2.0 / h as f64).sqrt(), rng),
            b1: store.add_normal(format!("{prefix}.b1"), 1, d, 0.0, rng),
            w2: store.add_normal(format!("{prefix}.w2"), d, h, (1.0 / d as f64).sqrt(), rng),
            b2: store.add_normal(format!("{prefix}.b2"), 1, h, 0.0, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let hdn = tape.matmul(x, p.var(self.w1))?;
        let hdn = tape.add_row(hdn, p.var(self.b1))?;
        let hdn = tape.relu(hdn);
        let out = tape.matmul(hdn, p.var(self.w2))?;
        tape.add_row(out, p.var(self.b2))
    }
}

/// Tape handles and routing produced by one [`MoeLayer::forward`].
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub y: Var,
    pub router_logits: Var,
    pub probs: Var,
    pub decision: GatingDecision,
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub cfg: MoeConfig,
    pub router: ParamId,
    pub experts: Vec<Expert>,
    pub shared: Vec<Expert>,
}

impl MoeLayer {
    pub fn init(
        cfg: &MoeConfig,
        store: &mut ParamStore,
        prefix: &str,
        router_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, d) = (cfg.hidden_dim, cfg.expert_dim);
        let router = store.add_normal(format!("{prefix}.router"), h, cfg.n_experts, router_std, rng);
        let experts = (0..cfg.n_experts)
            .map(|i| Expert::init(store, &format!("{prefix}.expert{i}"), h, d, rng))
            .collect();
        let shared = (0..cfg.n_shared)
            .map(|i| Expert::init(store, &format!("{prefix}.shared{i}"), h, d, rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            router,
            experts,
            shared,
        })
    }

    /// Router logits, gate scores and the top-k decision for `x[T×h]`.
    pub fn route(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        bias: Option<&GatingBias>,
    ) -> Result<(Var, Var, GatingDecision)> {
        let logits = tape.matmul(x, p.var(self.router))?;
        let probs = match self.cfg.gating {
            Gating::Softmax => tape.softmax(logits)?,
            Gating::Sigmoid => tape.sigmoid(logits),
        };
        let decision = select_topk(tape.value(probs), self.cfg.top_k, bias)?;
        Ok((logits, probs, decision))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        bias: Option<&GatingBias>,
    ) -> Result<MoeOutput> {
        let (router_logits, probs, decision) = self.route(tape, p, x, bias)?;
        let y = moe_forward(tape, p, x, probs, &decision, &self.experts, &self.shared)?;
        Ok(MoeOutput {
            y,
            router_logits,
            probs,
            decision,
        })
    }
}

/// `y[t] = sum_{i in topK(t)} probs[t][i] * E_i(x[t]) + sum_s S_s(x[t])`.
pub fn moe_forward(
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    probs: Var,
    decision: &GatingDecision,
    experts: &[Expert],
    shared: &[Expert],
) -> Result<Var> {
    let [t, _] = tape.shape(x);
    if decision.n_tokens() != t || decision.n_experts() != experts.len() {
        return Err(Error::Dimension {
            op: "moe_forward",
            left: [t, experts.len()],
            right: [decision.n_tokens(), decision.n_experts()],
        });
    }
    let mut acc: Option<Var> = None;
    for (e, rows) in decision.tokens_per_expert().iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, rows)?;
        let out = experts[e].forward(tape, p, xe)?;
        let pairs: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        let w = tape.gather_elements(probs, &pairs)?;
        let part = tape.scatter_weighted_rows(out, w, rows, t)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, part)?,
            None => part,
        });
    }
    for s in shared {
        let out = s.forward(tape, p, x)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, out)?,
            None => out,
        });
    }
    // T >= 1 and K >= 1 guarantee at least one routed expert.
    Ok(acc.expect("at least one expert output"))
}
