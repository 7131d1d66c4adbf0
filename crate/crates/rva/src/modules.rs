//! The three decision modules and the Gumbel sampler that makes their
//! discrete choices differentiable.
//!
//! Infer decides whether the traced question is unambiguous (recursion
//! termination) and produces the fusion weight lambda; Pair picks which
//! earlier round an ambiguous question refers to; Att computes
//! question-guided attention over regions. All discrete draws go
//! through `gumbel_sample`, whose straight-through output carries the
//! hard sample forward and the relaxed softmax gradients backward.

use crate::nn::{self, DecisionMode, FwdCtx};
use crate::tensor::{Binder, Graph, NodeId, ParamSet, Result, Tensor, TensorError};

/// One differentiable discrete draw.
pub struct GumbelSample {
    /// Index of the 1 in the hard sample (greedy ties break low).
    pub hard_index: usize,
    /// Hard one-hot values.
    pub one_hot: Vec<f64>,
    /// Simplex node from the softmax relaxation.
    pub relaxed: NodeId,
    /// Node to use in downstream arithmetic: forward value is the hard
    /// one-hot, gradient path is the relaxed one (except in Relaxed
    /// mode, where it is the relaxed node itself).
    pub value: NodeId,
}

fn argmax_low_tie(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-Max sampling with the straight-through softmax relaxation.
///
/// Train mode perturbs the logits with g = -log(-log(u)) per
/// coordinate; greedy mode is noise-free and deterministic.
pub fn gumbel_sample(
    g: &mut Graph,
    ctx: &mut FwdCtx,
    logits: NodeId,
) -> Result<GumbelSample> {
    let n = g.value(logits).len();
    if g.shape(logits).len() != 1 || n < 2 {
        return Err(TensorError::Invalid {
            op: "gumbel_sample",
            reason: format!("logits must be a vector of length >= 2, got {:?}", g.shape(logits)),
        });
    }
    if ctx.tau <= 0.0 {
        return Err(TensorError::Invalid {
            op: "gumbel_sample",
            reason: format!("temperature {} must be positive", ctx.tau),
        });
    }
    let noisy = match ctx.mode {
        DecisionMode::Train | DecisionMode::Relaxed => {
            let noise: Vec<f64> = (0..n).map(|_| ctx.gumbel_rng.gumbel()).collect();
            let noise = g.constant(Tensor::vector(noise))?;
            g.add(logits, noise)?
        }
        DecisionMode::Greedy => logits,
    };
    let scaled = g.scale(noisy, 1.0 / ctx.tau)?;
    let relaxed = g.softmax(scaled)?;
    let hard_index = match ctx.mode {
        DecisionMode::Greedy => argmax_low_tie(&g.value(logits).data),
        _ => argmax_low_tie(&g.value(noisy).data),
    };
    let mut one_hot = vec![0.0; n];
    one_hot[hard_index] = 1.0;
    let value = match ctx.mode {
        DecisionMode::Relaxed => relaxed,
        _ => {
            // value = relaxed + stop_gradient(one_hot - relaxed)
            let oh = g.constant(Tensor::vector(one_hot.clone()))?;
            let diff = g.sub(oh, relaxed)?;
            let frozen = g.stop_gradient(diff)?;
            g.add(relaxed, frozen)?
        }
    };
    Ok(GumbelSample {
        hard_index,
        one_hot,
        relaxed,
        value,
    })
}

/// Infer module output.
pub struct InferDecision {
    /// Terminate the recursion at this round.
    pub cond: bool,
    /// Fusion weight alpha^I_0, a scalar node in (0, 1).
    pub lambda: NodeId,
    /// Softmax of the shared logits.
    pub alpha: NodeId,
    pub sample: GumbelSample,
}

pub fn init_infer(params: &mut ParamSet, d_emb: usize, d_h: usize, rng: &mut crate::tensor::Rng) {
    nn::init_gated(params, "infer.f", d_emb, d_h, rng);
    let scale = (1.0 / d_h as f64).sqrt();
    params.init_uniform("infer.w", vec![2, d_h], scale, rng);
}

/// Termination decision and fusion weight from the reference-aware
/// question feature. The Gumbel sample and the softmax share one set
/// of logits, so the discrete decision's parameters still receive
/// gradient through lambda.
pub fn infer(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    q_ref: NodeId,
    t: usize,
) -> Result<InferDecision> {
    let z = nn::gated(g, b, params, ctx, "infer.f", q_ref)?;
    let w = b.get(g, params, "infer.w")?;
    let logits = g.matvec(w, z)?;
    let sample = gumbel_sample(g, ctx, logits)?;
    let alpha = g.softmax(logits)?;
    let lambda = g.index(alpha, 0)?;
    let cond = t == 0 || sample.hard_index == 0;
    Ok(InferDecision {
        cond,
        lambda,
        alpha,
        sample,
    })
}

/// Pair module output.
pub struct PairDecision {
    /// Chosen earlier round, strictly less than the current one.
    pub t_p: usize,
    /// Straight-through selection weights over rounds 0..t. For t = 1
    /// this is a constant [1.0] (single candidate, nothing to sample).
    pub selection: NodeId,
    pub logits: NodeId,
}

pub fn init_pair(params: &mut ParamSet, d_h: usize, rng: &mut crate::tensor::Rng) {
    nn::init_gated(params, "pair.fq", 2 * d_h, d_h, rng);
    nn::init_gated(params, "pair.fh", 2 * d_h, d_h, rng);
    nn::init_gated(params, "pair.mlp", 2 * d_h, d_h, rng);
    nn::init_score(params, "pair.mlp_out", d_h, rng);
    // shared per-candidate map (mlp match, dot match, distance) -> logit
    params.init_uniform("pair.w", vec![3], 0.5, rng);
}

/// Picks the history round an ambiguous question refers to.
///
/// Each candidate i in 0..t gets an additive match score
/// mlp([f(e^q), f(e^h_i)]), a multiplicative one dot(f(e^q), f(e^h_i)),
/// and a distance t - i; a shared 3-input linear map turns these into a
/// logit, so any history length is supported by one parameter set. The
/// dot term matters: content matching against a recency prior is a
/// correlation judgement, which a one-hidden-layer map over
/// concatenated codes is poor at expressing.
pub fn pair(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    e_q: NodeId,
    histories: &[NodeId],
    t: usize,
) -> Result<PairDecision> {
    if t == 0 || histories.is_empty() {
        return Err(TensorError::Invalid {
            op: "pair",
            reason: "pair requires at least one earlier round".into(),
        });
    }
    if histories.len() != t {
        return Err(TensorError::Invalid {
            op: "pair",
            reason: format!("expected {} history codes, got {}", t, histories.len()),
        });
    }
    let eq = nn::gated(g, b, params, ctx, "pair.fq", e_q)?;
    let w = b.get(g, params, "pair.w")?;
    let mut logits = Vec::with_capacity(t);
    for (i, &h) in histories.iter().enumerate() {
        let eh = nn::gated(g, b, params, ctx, "pair.fh", h)?;
        let cat = g.concat(&[eq, eh])?;
        let hid = nn::gated(g, b, params, ctx, "pair.mlp", cat)?;
        let wz = b.get(g, params, "pair.mlp_out")?;
        let z = g.dot(wz, hid)?;
        let z_dot = g.dot(eq, eh)?;
        let delta = g.scalar((t - i) as f64)?;
        let feats = g.stack_scalars(&[z, z_dot, delta])?;
        logits.push(g.dot(w, feats)?);
    }
    let logits = g.stack_scalars(&logits)?;
    if t == 1 {
        // single candidate: the choice is forced
        let one = g.constant(Tensor::vector(vec![1.0]))?;
        return Ok(PairDecision {
            t_p: 0,
            selection: one,
            logits,
        });
    }
    let sample = gumbel_sample(g, ctx, logits)?;
    Ok(PairDecision {
        t_p: sample.hard_index,
        selection: sample.value,
        logits,
    })
}

pub fn init_att(params: &mut ParamSet, d_emb: usize, d_v: usize, d_h: usize, rng: &mut crate::tensor::Rng) {
    nn::init_gated(params, "att.fq", d_emb, d_h, rng);
    nn::init_gated(params, "att.fv", d_v, d_h, rng);
    nn::init_score(params, "att.w", d_h, rng);
}

/// Embeds each region once per forward pass; Att is called once per
/// round and reuses these.
pub fn embed_regions(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    regions: &[NodeId],
) -> Result<Vec<NodeId>> {
    if regions.is_empty() {
        return Err(TensorError::Invalid {
            op: "att",
            reason: "no regions".into(),
        });
    }
    regions
        .iter()
        .map(|&v| nn::gated(g, b, params, ctx, "att.fv", v))
        .collect()
}

/// Question-guided region attention:
/// z_i = l2norm(f_q(q) ∘ f_v(v_i)), alpha = softmax(W Z).
pub fn att(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    ctx: &mut FwdCtx,
    region_emb: &[NodeId],
    q_ref: NodeId,
) -> Result<NodeId> {
    if region_emb.is_empty() {
        return Err(TensorError::Invalid {
            op: "att",
            reason: "no regions".into(),
        });
    }
    let eq = nn::gated(g, b, params, ctx, "att.fq", q_ref)?;
    let mut zs = Vec::with_capacity(region_emb.len());
    for &ev in region_emb {
        let z = g.hadamard(eq, ev)?;
        zs.push(g.l2_normalize(z)?);
    }
    let rows = g.stack_rows(&zs)?;
    let scores = nn::score_rows(g, b, params, "att.w", rows)?;
    g.softmax(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Rng};

    fn ctx<'a>(
        mode: DecisionMode,
        drop: &'a mut Rng,
        gum: &'a mut Rng,
    ) -> FwdCtx<'a> {
        FwdCtx {
            train: mode == DecisionMode::Train,
            dropout: 0.0,
            mode,
            tau: 1.0,
            drop_rng: drop,
            gumbel_rng: gum,
        }
    }

    #[test]
    fn greedy_sample_is_argmax_with_low_tie_break() {
        let mut g = Graph::new(Precision::F64);
        let logits = g.constant(Tensor::vector(vec![0.2, 1.5, 1.5, -3.0])).unwrap();
        let mut drop = Rng::new(0);
        let mut gum = Rng::new(0);
        let mut c = ctx(DecisionMode::Greedy, &mut drop, &mut gum);
        let s = gumbel_sample(&mut g, &mut c, logits).unwrap();
        assert_eq!(s.hard_index, 1);
        assert_eq!(s.one_hot, vec![0.0, 1.0, 0.0, 0.0]);
        // greedy value carries the hard one-hot forward
        assert_eq!(g.value(s.value).data, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn greedy_sample_ignores_noise_stream_state() {
        let mut g = Graph::new(Precision::F64);
        let logits = g.constant(Tensor::vector(vec![0.1, 0.9, 0.3])).unwrap();
        let mut drop = Rng::new(7);
        let mut gum = Rng::new(7);
        let before = gum.state();
        let mut c = ctx(DecisionMode::Greedy, &mut drop, &mut gum);
        let s = gumbel_sample(&mut g, &mut c, logits).unwrap();
        assert_eq!(s.hard_index, 1);
        assert_eq!(gum.state(), before, "greedy mode must not consume gumbel noise");
    }

    #[test]
    fn straight_through_value_is_one_hot_and_relaxed_is_simplex() {
        let mut g = Graph::new(Precision::F64);
        let logits = g.constant(Tensor::vector(vec![0.3, -0.2, 0.8])).unwrap();
        let mut drop = Rng::new(3);
        let mut gum = Rng::new(3);
        let mut c = ctx(DecisionMode::Train, &mut drop, &mut gum);
        let s = gumbel_sample(&mut g, &mut c, logits).unwrap();
        let value = g.value(s.value).data.clone();
        assert_eq!(value, s.one_hot);
        assert_eq!(value.iter().filter(|&&x| x == 1.0).count(), 1);
        let relaxed = g.value(s.relaxed).data.clone();
        let sum: f64 = relaxed.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(relaxed.iter().all(|&x| x > 0.0));
        // hard index agrees with the relaxed argmax (same noisy logits)
        let relaxed_argmax = argmax_low_tie(&relaxed);
        assert_eq!(s.hard_index, relaxed_argmax);
    }

    #[test]
    fn relaxed_mode_value_is_the_relaxed_node() {
        let mut g = Graph::new(Precision::F64);
        let logits = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let mut drop = Rng::new(5);
        let mut gum = Rng::new(5);
        let mut c = ctx(DecisionMode::Relaxed, &mut drop, &mut gum);
        let s = gumbel_sample(&mut g, &mut c, logits).unwrap();
        assert_eq!(s.value, s.relaxed);
    }

    #[test]
    fn gumbel_frequencies_match_softmax() {
        // P(argmax(logits + gumbel noise) = i) = softmax(logits)_i.
        // logits ln(7)/ln(3) vs 0 give probabilities 0.7/0.3 at tau=1.
        let p0 = 0.7_f64;
        let logits_v = vec![(p0 / (1.0 - p0)).ln(), 0.0];
        let n = 100_000;
        let mut hits = 0usize;
        let mut drop = Rng::new(0);
        let mut gum = Rng::new(0xB00B5).derive(9);
        for _ in 0..n {
            let mut g = Graph::new(Precision::F64);
            let logits = g.constant(Tensor::vector(logits_v.clone())).unwrap();
            let mut c = ctx(DecisionMode::Train, &mut drop, &mut gum);
            let s = gumbel_sample(&mut g, &mut c, logits).unwrap();
            if s.hard_index == 0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!(
            (freq - p0).abs() < 0.01,
            "frequency {freq} deviates from {p0}"
        );
    }

    #[test]
    fn sampler_rejects_degenerate_inputs() {
        let mut g = Graph::new(Precision::F64);
        let one = g.constant(Tensor::vector(vec![0.5])).unwrap();
        let two = g.constant(Tensor::vector(vec![0.5, 0.1])).unwrap();
        let mut drop = Rng::new(0);
        let mut gum = Rng::new(0);
        let mut c = ctx(DecisionMode::Train, &mut drop, &mut gum);
        assert!(gumbel_sample(&mut g, &mut c, one).is_err());
        c.tau = 0.0;
        assert!(gumbel_sample(&mut g, &mut c, two).is_err());
    }

    fn toy_params(d_emb: usize, d_v: usize, d_h: usize, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = Rng::new(seed);
        init_infer(&mut params, d_emb, d_h, &mut rng);
        init_pair(&mut params, d_h, &mut rng);
        init_att(&mut params, d_emb, d_v, d_h, &mut rng);
        params
    }

    #[test]
    fn infer_round_zero_always_terminates_and_lambda_matches_softmax() {
        let d_emb = 5;
        let d_h = 4;
        let params = toy_params(d_emb, 3, d_h, 42);
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let mut drop = Rng::new(1);
        let mut gum = Rng::new(2);
        let mut c = ctx(DecisionMode::Train, &mut drop, &mut gum);
        let q = g.constant(Tensor::vector(vec![0.3, -0.1, 0.7, 0.2, -0.5])).unwrap();
        let d = infer(&mut g, &mut b, &params, &mut c, q, 0).unwrap();
        assert!(d.cond, "round 0 must terminate regardless of the sample");
        let lambda = g.value(d.lambda).data[0];
        assert!(lambda > 0.0 && lambda < 1.0);
        let alpha = g.value(d.alpha).data.clone();
        assert_eq!(alpha.len(), 2);
        assert_eq!(lambda, alpha[0]);
        assert!((alpha[0] + alpha[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pair_choice_stays_strictly_earlier() {
        let d_h = 4;
        let params = toy_params(5, 3, d_h, 9);
        let mut drop = Rng::new(1);
        let mut gum = Rng::new(77);
        for trial in 0..200u64 {
            let mut g = Graph::new(Precision::F64);
            let mut b = Binder::new();
            let mut c = ctx(DecisionMode::Train, &mut drop, &mut gum);
            let mut hist_rng = Rng::new(trial).derive(4);
            let e_q = g
                .constant(Tensor::vector(
                    (0..2 * d_h).map(|_| hist_rng.normal()).collect(),
                ))
                .unwrap();
            let t = 2 + (trial as usize % 5);
            let histories: Vec<NodeId> = (0..t)
                .map(|_| {
                    g.constant(Tensor::vector(
                        (0..2 * d_h).map(|_| hist_rng.normal()).collect(),
                    ))
                    .unwrap()
                })
                .collect();
            let d = pair(&mut g, &mut b, &params, &mut c, e_q, &histories, t).unwrap();
            assert!(d.t_p < t, "t_p {} not earlier than t {}", d.t_p, t);
            let sel = g.value(d.selection).data.clone();
            assert_eq!(sel.len(), t);
            assert_eq!(sel[d.t_p], 1.0);
            assert_eq!(sel.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn pair_with_one_candidate_is_forced() {
        let d_h = 4;
        let params = toy_params(5, 3, d_h, 9);
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let mut drop = Rng::new(1);
        let mut gum = Rng::new(1);
        let before = gum.state();
        let mut c = ctx(DecisionMode::Train, &mut drop, &mut gum);
        let e_q = g.constant(Tensor::vector(vec![0.1; 8])).unwrap();
        let h0 = g.constant(Tensor::vector(vec![0.2; 8])).unwrap();
        let d = pair(&mut g, &mut b, &params, &mut c, e_q, &[h0], 1).unwrap();
        assert_eq!(d.t_p, 0);
        assert_eq!(g.value(d.selection).data, vec![1.0]);
        assert_eq!(gum.state(), before, "forced choice must not draw noise");
    }

    #[test]
    fn pair_rejects_mismatched_history() {
        let d_h = 4;
        let params = toy_params(5, 3, d_h, 9);
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let mut drop = Rng::new(1);
        let mut gum = Rng::new(1);
        let mut c = ctx(DecisionMode::Train, &mut drop, &mut gum);
        let e_q = g.constant(Tensor::vector(vec![0.1; 8])).unwrap();
        let h0 = g.constant(Tensor::vector(vec![0.2; 8])).unwrap();
        assert!(pair(&mut g, &mut b, &params, &mut c, e_q, &[], 0).is_err());
        assert!(pair(&mut g, &mut b, &params, &mut c, e_q, &[h0], 2).is_err());
    }

    fn att_on(
        params: &ParamSet,
        q_data: &[f64],
        regions: &[Vec<f64>],
    ) -> Vec<f64> {
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let mut drop = Rng::new(1);
        let mut gum = Rng::new(1);
        let mut c = ctx(DecisionMode::Greedy, &mut drop, &mut gum);
        let q = g.constant(Tensor::vector(q_data.to_vec())).unwrap();
        let vs: Vec<NodeId> = regions
            .iter()
            .map(|r| g.constant(Tensor::vector(r.clone())).unwrap())
            .collect();
        let emb = embed_regions(&mut g, &mut b, params, &mut c, &vs).unwrap();
        let alpha = att(&mut g, &mut b, params, &mut c, &emb, q).unwrap();
        g.value(alpha).data.clone()
    }

    #[test]
    fn att_is_permutation_equivariant() {
        let d_emb = 5;
        let d_v = 3;
        let params = toy_params(d_emb, d_v, 4, 17);
        let q = [0.4, -0.2, 0.9, 0.1, 0.3];
        let regions = vec![
            vec![1.0, 0.2, -0.3],
            vec![-0.5, 0.8, 0.1],
            vec![0.3, 0.3, 0.9],
            vec![0.0, -0.7, 0.4],
        ];
        let base = att_on(&params, &q, &regions);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| regions[i].clone()).collect();
        let shuffled = att_on(&params, &q, &permuted);
        for (j, &i) in perm.iter().enumerate() {
            assert!(
                (shuffled[j] - base[i]).abs() < 1e-12,
                "weight moved with the region: {} vs {}",
                shuffled[j],
                base[i]
            );
        }
        let sum: f64 = base.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn att_gives_duplicate_regions_equal_weight() {
        let params = toy_params(5, 3, 4, 23);
        let q = [0.4, -0.2, 0.9, 0.1, 0.3];
        let dup = vec![0.6, -0.1, 0.2];
        let regions = vec![dup.clone(), vec![-0.3, 0.5, 0.8], dup];
        let alpha = att_on(&params, &q, &regions);
        assert_eq!(alpha[0], alpha[2]);
    }

    #[test]
    fn att_rejects_empty_regions() {
        let params = toy_params(5, 3, 4, 1);
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let mut drop = Rng::new(1);
        let mut gum = Rng::new(1);
        let mut c = ctx(DecisionMode::Greedy, &mut drop, &mut gum);
        let q = g.constant(Tensor::vector(vec![0.0; 5])).unwrap();
        assert!(embed_regions(&mut g, &mut b, &params, &mut c, &[]).is_err());
        assert!(att(&mut g, &mut b, &params, &mut c, &[], q).is_err());
    }
}
