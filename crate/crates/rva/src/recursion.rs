//! Composition of Infer, Pair and Att into recursive visual attention.
//!
//! Rounds are processed sequentially within an episode; each round's
//! attention state is cached, so when a later round backtracks it
//! reuses the state computed when that round was current. This is
//! equivalent to the literal recursion because the recursive call sees
//! exactly the inputs the cached round saw, and it gives one decision
//! sample per round per forward pass. `blend_reference` is the naive
//! unrolled recursion kept as an independent oracle for tests.

use crate::modules::{self, InferDecision, PairDecision};
use crate::nn::FwdCtx;
use crate::tensor::{Binder, Graph, NodeId, ParamSet, Result, TensorError};

/// Attention over regions plus bookkeeping for one round.
pub struct AttentionState {
    pub alpha: NodeId,
    pub round: usize,
}

/// Per-round diagnostic record, detached from the gradient graph.
#[derive(Debug, Clone)]
pub struct TraceRound {
    pub round: usize,
    pub cond: bool,
    pub lambda: f64,
    pub t_p: Option<usize>,
    pub alpha: Vec<f64>,
    /// This round's own question-guided attention, before any blend.
    pub att_alpha: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RecursionTrace {
    pub rounds: Vec<TraceRound>,
}

impl RecursionTrace {
    /// Chain of rounds visited when answering `t`, following pair edges
    /// until a terminating round.
    pub fn chain(&self, t: usize) -> Vec<usize> {
        let mut out = vec![t];
        let mut cur = t;
        while let Some(tp) = self.rounds[cur].t_p {
            if tp >= cur {
                break;
            }
            out.push(tp);
            cur = tp;
        }
        out
    }

    /// DOT digraph of the recursion edges (t -> t_p), nodes labeled
    /// with cond and lambda.
    pub fn to_dot(&self, episode: usize) -> String {
        let mut s = format!("digraph episode_{episode} {{\n");
        for r in &self.rounds {
            s.push_str(&format!(
                "  r{} [label=\"t={} cond={} lambda={:.4}\"];\n",
                r.round, r.round, r.cond, r.lambda
            ));
        }
        for r in &self.rounds {
            if let Some(tp) = r.t_p {
                s.push_str(&format!("  r{} -> r{};\n", r.round, tp));
            }
        }
        s.push_str("}\n");
        s
    }

    /// Structured-text dump with attention vectors.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rounds {
            s.push_str(&format!(
                "round {} cond {} lambda {:.6} t_p {}\n",
                r.round,
                r.cond,
                r.lambda,
                r.t_p.map_or("-".to_string(), |t| t.to_string())
            ));
            let alpha: Vec<String> = r.alpha.iter().map(|a| format!("{a:.6}")).collect();
            s.push_str(&format!("alpha {}\n", alpha.join(" ")));
        }
        s
    }
}

/// Ablation switches for the engine.
#[derive(Debug, Clone, Copy, Default)]
pub struct EngineAblations {
    /// Rv: keep only question-guided attention (no recursion).
    pub rv_only: bool,
    /// Always pair with round t-1 instead of running Pair.
    pub pair_last: bool,
}

/// Per-episode recursive attention engine. Holds the cache of earlier
/// rounds' attention states for one forward pass.
pub struct RvaEngine {
    cache: Vec<AttentionState>,
    pub trace: RecursionTrace,
    ablations: EngineAblations,
}

const SIMPLEX_TOL: f64 = 1e-6;

impl RvaEngine {
    pub fn new(ablations: EngineAblations) -> Self {
        RvaEngine {
            cache: Vec::new(),
            trace: RecursionTrace::default(),
            ablations,
        }
    }

    fn assert_simplex(g: &Graph, alpha: NodeId) -> Result<()> {
        let v = g.value(alpha);
        let sum: f64 = v.data.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || v.data.iter().any(|&x| x < -SIMPLEX_TOL) {
            return Err(TensorError::Invalid {
                op: "rva",
                reason: format!("attention left the simplex (sum {sum})"),
            });
        }
        Ok(())
    }

    /// Processes round `t`. Requires rounds 0..t to have been processed
    /// earlier in the same forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        g: &mut Graph,
        b: &mut Binder,
        params: &ParamSet,
        ctx: &mut FwdCtx,
        region_emb: &[NodeId],
        q_ref: NodeId,
        e_q: NodeId,
        histories: &[NodeId],
        t: usize,
    ) -> Result<&AttentionState> {
        if t != self.cache.len() {
            return Err(TensorError::Invalid {
                op: "rva",
                reason: format!(
                    "round {t} processed out of order (cache holds {})",
                    self.cache.len()
                ),
            });
        }
        let decision: InferDecision = modules::infer(g, b, params, ctx, q_ref, t)?;
        let lambda_val = g.value(decision.lambda).data[0];
        let terminate = decision.cond || self.ablations.rv_only;

        let att_alpha = modules::att(g, b, params, ctx, region_emb, q_ref)?;
        let (alpha, t_p) = if terminate {
            (att_alpha, None)
        } else {
            let (recursed, t_p) = if self.ablations.pair_last {
                (self.cache[t - 1].alpha, t - 1)
            } else {
                let pd: PairDecision = modules::pair(g, b, params, ctx, e_q, histories, t)?;
                debug_assert!(pd.t_p < t);
                let cached: Vec<NodeId> = self.cache.iter().map(|s| s.alpha).collect();
                let rows = g.stack_rows(&cached)?;
                (g.vecmat(pd.selection, rows)?, pd.t_p)
            };
            let one = g.scalar(1.0)?;
            let keep = g.sub(one, decision.lambda)?;
            let from_past = g.scale_by(recursed, keep)?;
            let from_here = g.scale_by(att_alpha, decision.lambda)?;
            (g.add(from_past, from_here)?, Some(t_p))
        };
        Self::assert_simplex(g, alpha)?;

        self.trace.rounds.push(TraceRound {
            round: t,
            cond: terminate,
            lambda: lambda_val,
            t_p,
            alpha: g.value(alpha).data.clone(),
            att_alpha: g.value(att_alpha).data.clone(),
        });
        self.cache.push(AttentionState { alpha, round: t });
        Ok(&self.cache[t])
    }

    pub fn state(&self, t: usize) -> Result<&AttentionState> {
        self.cache.get(t).ok_or_else(|| TensorError::Invalid {
            op: "rva",
            reason: format!("no cached state for round {t}"),
        })
    }
}

/// Attended feature: v_hat = sum_i alpha_i v_i over stacked regions.
pub fn attend_feature(g: &mut Graph, alpha: NodeId, regions: NodeId) -> Result<NodeId> {
    g.vecmat(alpha, regions)
}

/// Frozen decisions for one round, as plain data.
#[derive(Debug, Clone)]
pub struct FrozenRound {
    pub cond: bool,
    pub lambda: f64,
    pub t_p: usize,
    pub att_alpha: Vec<f64>,
}

/// Literal Algorithm-1 recursion over frozen per-round decisions.
/// Independent of the memoized engine; used as an equivalence oracle.
pub fn blend_reference(rounds: &[FrozenRound], t: usize) -> Vec<f64> {
    let r = &rounds[t];
    if r.cond || t == 0 {
        return r.att_alpha.clone();
    }
    let past = blend_reference(rounds, r.t_p);
    r.att_alpha
        .iter()
        .zip(&past)
        .map(|(a, p)| (1.0 - r.lambda) * p + r.lambda * a)
        .collect()
}
