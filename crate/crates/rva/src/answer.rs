//! From the recursive visual feature to a ranked answer list:
//! visual feature filter, fact embedding over the history, joint
//! embedding, dot-product candidate scoring, and the discriminative
//! cross-entropy loss.

use crate::nn::{self, FwdCtx};
use crate::tensor::{Binder, Graph, NodeId, ParamSet, Result, Rng, TensorError};

pub fn init_answer_head(
    params: &mut ParamSet,
    d_emb: usize,
    d_h: usize,
    d_v: usize,
    rng: &mut Rng,
) {
    nn::init_gated(params, "filter.f", d_emb, d_v, rng);
    nn::init_gated(params, "fact.fq", 2 * d_h, d_h, rng);
    nn::init_gated(params, "fact.fh", 2 * d_h, d_h, rng);
    nn::init_score(params, "fact.w", d_h, rng);
    nn::init_linear(params, "joint", d_v + d_emb + 2 * d_h, d_h, rng);
    nn::init_linear(params, "cand", 2 * d_h, d_h, rng);
}

/// v_tilde = v_hat ∘ f(q_ans). With `identity_gate` (the FL ablation)
/// the filter is withdrawn and v_hat passes through unchanged.
pub fn filter_visual(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    v_hat: NodeId,
    q_ans: NodeId,
    identity_gate: bool,
) -> Result<NodeId> {
    if identity_gate {
        return Ok(v_hat);
    }
    let gate = nn::gated(g, b, params, ctx, "filter.f", q_ans)?;
    g.hadamard(v_hat, gate)
}

/// Attention-weighted summary of the history codes:
/// z_i = l2norm(f_q(e^q) ∘ f_h(e^h_i)), h^f = sum alpha_i e^h_i.
pub fn fact_embedding(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    e_q: NodeId,
    histories: &[NodeId],
) -> Result<NodeId> {
    if histories.is_empty() {
        return Err(TensorError::Invalid {
            op: "fact_embedding",
            reason: "empty history".into(),
        });
    }
    let fq = nn::gated(g, b, params, ctx, "fact.fq", e_q)?;
    let mut zs = Vec::with_capacity(histories.len());
    for &h in histories {
        let fh = nn::gated(g, b, params, ctx, "fact.fh", h)?;
        let z = g.hadamard(fq, fh)?;
        zs.push(g.l2_normalize(z)?);
    }
    let rows = g.stack_rows(&zs)?;
    let scores = nn::score_rows(g, b, params, "fact.w", rows)?;
    let alpha = g.softmax(scores)?;
    let hist_rows = g.stack_rows(histories)?;
    g.vecmat(alpha, hist_rows)
}

/// e^J = tanh(W [v_tilde, q_ans, h^f] + b)
pub fn joint_embedding(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    v_tilde: NodeId,
    q_ans: NodeId,
    h_fact: NodeId,
) -> Result<NodeId> {
    let cat = g.concat(&[v_tilde, q_ans, h_fact])?;
    let lin = nn::linear(g, b, params, ctx, "joint", cat)?;
    g.tanh(lin)
}

/// Projects a candidate's history-pathway sentence code to width d_h.
pub fn project_candidate(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    code: NodeId,
) -> Result<NodeId> {
    nn::linear(g, b, params, ctx, "cand", code)
}

/// score_i = dot(e^J, candidate_i); returns the score vector node.
pub fn score_candidates(
    g: &mut Graph,
    joint: NodeId,
    candidates: &[NodeId],
    expected_count: usize,
) -> Result<NodeId> {
    if candidates.len() != expected_count {
        return Err(TensorError::Invalid {
            op: "score_candidates",
            reason: format!(
                "candidate count {} does not match configured {}",
                candidates.len(),
                expected_count
            ),
        });
    }
    let scores: Vec<NodeId> = candidates
        .iter()
        .map(|&c| g.dot(joint, c))
        .collect::<Result<_>>()?;
    g.stack_scalars(&scores)
}

/// Descending ranking of candidate indices; ties break by index.
pub fn ranking_from_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Cross-entropy over candidate scores:
/// loss = logsumexp(scores) - scores[gt], computed stably.
pub fn discriminative_loss(g: &mut Graph, scores: NodeId, gt: usize) -> Result<NodeId> {
    let n = g.value(scores).len();
    if gt >= n {
        return Err(TensorError::IndexOutOfBounds {
            op: "discriminative_loss",
            index: gt,
            extent: n,
        });
    }
    let max = g
        .value(scores)
        .data
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = g.constant(crate::tensor::Tensor::vector(vec![max; n]))?;
    let shifted = g.sub(scores, shift)?;
    let ex = g.exp(shifted)?;
    let z = g.sum(ex)?;
    let lz = g.log(z)?;
    let maxn = g.scalar(max)?;
    let lse = g.add(lz, maxn)?;
    let gt_score = g.index(scores, gt)?;
    g.sub(lse, gt_score)
}
