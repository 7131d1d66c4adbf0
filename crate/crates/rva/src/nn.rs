//! Shared building blocks: forward-pass context, the gated non-linear
//! transformation used for every f(.) map, and plain linear layers.

use crate::tensor::{Binder, Graph, NodeId, ParamSet, Result, Rng};

/// How discrete decisions behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionMode {
    /// Gumbel noise, hard sample forward, relaxed gradients (straight-through).
    Train,
    /// No noise, argmax forward. Evaluation behavior.
    Greedy,
    /// Gumbel noise but soft (relaxed) forward values; used by the
    /// gradient checker, where the loss must be smooth.
    Relaxed,
}

/// Mutable per-forward state threaded through the model.
pub struct FwdCtx<'a> {
    pub train: bool,
    pub dropout: f64,
    pub mode: DecisionMode,
    pub tau: f64,
    pub drop_rng: &'a mut Rng,
    pub gumbel_rng: &'a mut Rng,
}

impl<'a> FwdCtx<'a> {
    pub fn dropout(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.dropout(x, self.dropout, self.drop_rng, self.train)
    }
}

/// Registers the parameters of a gated transform `prefix`: in -> out.
pub fn init_gated(params: &mut ParamSet, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) {
    let scale = (1.0 / in_dim as f64).sqrt();
    params.init_uniform(&format!("{prefix}.w1"), vec![out_dim, in_dim], scale, rng);
    params.init_zeros(&format!("{prefix}.b1"), vec![out_dim]);
    params.init_uniform(&format!("{prefix}.w2"), vec![out_dim, in_dim], scale, rng);
    params.init_zeros(&format!("{prefix}.b2"), vec![out_dim]);
}

/// Gated non-linear transformation:
/// f(x) = tanh(W1 x + b1) ∘ sigmoid(W2 x + b2),
/// with dropout applied once to the shared input.
pub fn gated(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let xd = ctx.dropout(g, x)?;
    let w1 = b.get(g, params, &format!("{prefix}.w1"))?;
    let b1 = b.get(g, params, &format!("{prefix}.b1"))?;
    let w2 = b.get(g, params, &format!("{prefix}.w2"))?;
    let b2 = b.get(g, params, &format!("{prefix}.b2"))?;
    let h1 = g.matvec(w1, xd)?;
    let h1 = g.add(h1, b1)?;
    let h1 = g.tanh(h1)?;
    let h2 = g.matvec(w2, xd)?;
    let h2 = g.add(h2, b2)?;
    let h2 = g.sigmoid(h2)?;
    g.hadamard(h1, h2)
}

pub fn init_linear(params: &mut ParamSet, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) {
    let scale = (1.0 / in_dim as f64).sqrt();
    params.init_uniform(&format!("{prefix}.w"), vec![out_dim, in_dim], scale, rng);
    params.init_zeros(&format!("{prefix}.b"), vec![out_dim]);
}

/// y = W drop(x) + b
pub fn linear(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let xd = ctx.dropout(g, x)?;
    let w = b.get(g, params, &format!("{prefix}.w"))?;
    let bias = b.get(g, params, &format!("{prefix}.b"))?;
    let y = g.matvec(w, xd)?;
    g.add(y, bias)
}

/// Score vector for stacked rows: softmax-ready logits W z_i, no bias
/// (a shared bias would cancel in the softmax anyway).
pub fn init_score(params: &mut ParamSet, name: &str, in_dim: usize, rng: &mut Rng) {
    let scale = (1.0 / in_dim as f64).sqrt();
    params.init_uniform(name, vec![in_dim], scale, rng);
}

pub fn score_rows(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    name: &str,
    rows: NodeId,
) -> Result<NodeId> {
    let w = b.get(g, params, name)?;
    g.matvec(rows, w)
}
