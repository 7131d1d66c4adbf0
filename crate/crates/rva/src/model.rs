//! Full episode forward pass: text encoding, recursive attention,
//! answer scoring and the episode loss, plus the per-round diagnostics
//! used by evaluation and the mechanism tests.

use crate::answer;
use crate::config::RunConfig;
use crate::modules;
use crate::nn::FwdCtx;
use crate::recursion::{EngineAblations, RecursionTrace, RvaEngine, attend_feature};
use crate::synth::Episode;
use crate::tensor::{Binder, Graph, NodeId, ParamSet, Result, Rng, Tensor, TensorError};
use crate::text::{
    MAX_ANSWER_LEN, MAX_CAPTION_LEN, MAX_QUESTION_LEN, TextDims, TextEncoder, Vocabulary,
};

pub struct Model {
    pub encoder: TextEncoder,
    pub d_v: usize,
    pub candidates: usize,
    pub no_filter: bool,
    pub ablations: EngineAblations,
    /// Weight of the auxiliary grounding loss on training rounds.
    pub ground_weight: f64,
}

impl Model {
    pub fn from_config(cfg: &RunConfig, vocab_size: usize) -> Self {
        let mut encoder = TextEncoder::new(TextDims {
            vocab: vocab_size,
            d_emb: cfg.d_emb,
            d_h: cfg.d_h,
        });
        encoder.attend_hidden = cfg.attend_hidden;
        Model {
            encoder,
            d_v: cfg.d_v,
            candidates: cfg.candidates,
            no_filter: cfg.no_filter,
            ablations: EngineAblations {
                rv_only: cfg.rv_only,
                pair_last: cfg.pair_last,
            },
            ground_weight: cfg.ground_weight,
        }
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let mut params = ParamSet::new();
        let TextDims { d_emb, d_h, .. } = self.encoder.dims;
        self.encoder.init_params(&mut params, rng);
        modules::init_infer(&mut params, d_emb, d_h, rng);
        modules::init_pair(&mut params, d_h, rng);
        modules::init_att(&mut params, d_emb, self.d_v, d_h, rng);
        answer::init_answer_head(&mut params, d_emb, d_h, self.d_v, rng);
        params
    }

    /// Runs one episode through the model. Rounds contribute equally
    /// to the scalar loss; diagnostics are detached plain data.
    pub fn forward_episode(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        ctx: &mut FwdCtx,
        vocab: &Vocabulary,
        episode: &Episode,
    ) -> Result<EpisodeForward> {
        let mut b = Binder::new();
        let b = &mut b;

        // regions as constants
        let region_nodes: Vec<NodeId> = episode
            .world
            .regions
            .iter()
            .map(|r| {
                if r.feature.len() != self.d_v {
                    return Err(TensorError::Invalid {
                        op: "forward_episode",
                        reason: format!(
                            "region feature width {} does not match configured d_v {}",
                            r.feature.len(),
                            self.d_v
                        ),
                    });
                }
                g.constant(Tensor::vector(r.feature.clone()))
            })
            .collect::<Result<_>>()?;
        let region_matrix = g.stack_rows(&region_nodes)?;
        let region_emb = modules::embed_regions(g, b, params, ctx, &region_nodes)?;

        let mut engine = RvaEngine::new(self.ablations);

        // the caption seeds both pathways as round 0
        let caption_tokens = vocab.encode(&episode.caption, MAX_CAPTION_LEN);
        let cap_q = self.encoder.encode_question(g, b, params, ctx, &caption_tokens)?;
        engine.step(g, b, params, ctx, &region_emb, cap_q.q_ref, cap_q.seq.code, &[], 0)?;
        let mut histories: Vec<NodeId> = vec![self
            .encoder
            .encode_history_round(g, b, params, &caption_tokens, None, true)?];

        let mut losses = Vec::with_capacity(episode.rounds.len());
        let mut rounds = Vec::with_capacity(episode.rounds.len());
        for (i, round) in episode.rounds.iter().enumerate() {
            let t = i + 1;
            let q_tokens = vocab.encode(&round.question, MAX_QUESTION_LEN);
            let q = self.encoder.encode_question(g, b, params, ctx, &q_tokens)?;

            let state = engine.step(
                g, b, params, ctx, &region_emb, q.q_ref, q.seq.code, &histories, t,
            )?;
            let alpha = state.alpha;

            let v_hat = attend_feature(g, alpha, region_matrix)?;
            let v_tilde =
                answer::filter_visual(g, b, params, ctx, v_hat, q.q_ans, self.no_filter)?;
            let h_fact = answer::fact_embedding(g, b, params, ctx, q.seq.code, &histories)?;
            let joint = answer::joint_embedding(g, b, params, ctx, v_tilde, q.q_ans, h_fact)?;

            let mut cand_nodes = Vec::with_capacity(round.candidates.len());
            for cand in &round.candidates {
                let words: Vec<String> =
                    cand.split_whitespace().map(|s| s.to_string()).collect();
                let tokens = vocab.encode(&words, MAX_ANSWER_LEN);
                let code = self
                    .encoder
                    .encode_sequence(g, b, params, &tokens, crate::text::EncoderId::History)?
                    .code;
                cand_nodes.push(answer::project_candidate(g, b, params, ctx, code)?);
            }
            let scores = answer::score_candidates(g, joint, &cand_nodes, self.candidates)?;
            let mut round_loss = answer::discriminative_loss(g, scores, round.gt_index)?;
            if ctx.train && self.ground_weight > 0.0 {
                // grounding aid on the blended attention; for ambiguous
                // rounds the question itself carries no referent, so
                // only the recursion pathway can satisfy this term
                let p = g.index(alpha, round.gt_region)?;
                let lp = g.log(p)?;
                let aux = g.scale(lp, -self.ground_weight)?;
                round_loss = g.add(round_loss, aux)?;
            }
            losses.push(round_loss);

            let score_vals = g.value(scores).data.clone();
            let trace = engine.trace.rounds.last().unwrap();
            let alpha_vals = &trace.alpha;
            let att_argmax = alpha_vals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            rounds.push(RoundForward {
                ranking: answer::ranking_from_scores(&score_vals),
                scores: score_vals,
                gt_index: round.gt_index,
                relevances: round.relevances.clone(),
                terminated: trace.cond,
                lambda: trace.lambda,
                t_p: trace.t_p,
                att_argmax,
                gt_region: round.gt_region,
                ambiguous: round.ambiguous,
                antecedent: round.antecedent,
                skip: round.skip,
            });

            let a_words: Vec<String> =
                round.answer.split_whitespace().map(|s| s.to_string()).collect();
            let a_tokens = vocab.encode(&a_words, MAX_ANSWER_LEN);
            histories.push(self.encoder.encode_history_round(
                g,
                b,
                params,
                &q_tokens,
                Some(&a_tokens),
                false,
            )?);
        }

        let stacked = g.stack_scalars(&losses)?;
        let loss = g.mean(stacked)?;
        Ok(EpisodeForward {
            loss,
            rounds,
            trace: engine.trace,
        })
    }
}

/// Detached per-round outputs.
#[derive(Debug, Clone)]
pub struct RoundForward {
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub gt_index: usize,
    pub relevances: Vec<f64>,
    pub terminated: bool,
    pub lambda: f64,
    pub t_p: Option<usize>,
    /// Region with the largest attention weight this round.
    pub att_argmax: usize,
    pub gt_region: usize,
    pub ambiguous: bool,
    pub antecedent: Option<usize>,
    pub skip: bool,
}

pub struct EpisodeForward {
    pub loss: NodeId,
    pub rounds: Vec<RoundForward>,
    pub trace: RecursionTrace,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DecisionMode;
    use crate::synth::{self, GenConfig};
    use crate::tensor::{GradMap, Precision};

    fn toy_config() -> RunConfig {
        RunConfig {
            d_emb: 6,
            d_h: 8,
            d_v: 16,
            regions: 4,
            rounds: 3,
            candidates: 10,
            precision: Precision::F64,
            ..RunConfig::default()
        }
    }

    fn toy_setup() -> (RunConfig, Vec<Episode>, Vocabulary) {
        let cfg = toy_config();
        let gen = GenConfig {
            regions: cfg.regions,
            rounds: cfg.rounds,
            candidates: cfg.candidates,
            d_v: cfg.d_v,
            ..GenConfig::default()
        };
        let eps = synth::generate_dataset(13, 3, &gen).unwrap();
        let vocab = synth::dataset_vocab(&eps);
        (cfg, eps, vocab)
    }

    fn forward_loss(
        cfg: &RunConfig,
        episode: &Episode,
        vocab: &Vocabulary,
        params: &ParamSet,
        mode: DecisionMode,
        seed: u64,
    ) -> (f64, Vec<RoundForward>) {
        let model = Model::from_config(cfg, vocab.len());
        let mut g = Graph::new(cfg.precision);
        let mut drop_rng = Rng::new(seed).derive(1);
        let mut gumbel_rng = Rng::new(seed).derive(2);
        let mut ctx = FwdCtx {
            train: mode != DecisionMode::Greedy,
            dropout: if mode == DecisionMode::Greedy { 0.0 } else { cfg.dropout },
            mode,
            tau: cfg.tau,
            drop_rng: &mut drop_rng,
            gumbel_rng: &mut gumbel_rng,
        };
        let out = model
            .forward_episode(&mut g, params, &mut ctx, vocab, episode)
            .unwrap();
        (g.value(out.loss).data[0], out.rounds)
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let (cfg, eps, vocab) = toy_setup();
        let model = Model::from_config(&cfg, vocab.len());
        let params = model.init_params(&mut Rng::new(7));
        let (l1, r1) = forward_loss(&cfg, &eps[0], &vocab, &params, DecisionMode::Train, 5);
        let (l2, r2) = forward_loss(&cfg, &eps[0], &vocab, &params, DecisionMode::Train, 5);
        assert!(l1.is_finite());
        assert_eq!(l1, l2);
        assert_eq!(r1[0].scores, r2[0].scores);
        // different noise stream changes the training-mode outcome
        let (l3, _) = forward_loss(&cfg, &eps[0], &vocab, &params, DecisionMode::Train, 6);
        assert_ne!(l1, l3);
    }

    #[test]
    fn greedy_mode_ignores_noise_seed() {
        let (cfg, eps, vocab) = toy_setup();
        let model = Model::from_config(&cfg, vocab.len());
        let params = model.init_params(&mut Rng::new(7));
        let (l1, _) = forward_loss(&cfg, &eps[0], &vocab, &params, DecisionMode::Greedy, 5);
        let (l2, _) = forward_loss(&cfg, &eps[0], &vocab, &params, DecisionMode::Greedy, 999);
        assert_eq!(l1, l2);
    }

    #[test]
    fn grounding_aid_changes_training_loss_but_not_evaluation() {
        let (cfg, eps, vocab) = toy_setup();
        let model = Model::from_config(&cfg, vocab.len());
        let params = model.init_params(&mut Rng::new(7));
        let mut aided = cfg.clone();
        aided.ground_weight = 0.5;
        let episode = eps
            .iter()
            .find(|e| e.rounds.iter().any(|r| !r.ambiguous))
            .expect("an episode with an unambiguous round");

        let (plain, _) = forward_loss(&cfg, episode, &vocab, &params, DecisionMode::Train, 5);
        let (with_aid, _) = forward_loss(&aided, episode, &vocab, &params, DecisionMode::Train, 5);
        assert!(with_aid > plain, "aux term should add loss: {with_aid} vs {plain}");

        let (g1, _) = forward_loss(&cfg, episode, &vocab, &params, DecisionMode::Greedy, 0);
        let (g2, _) = forward_loss(&aided, episode, &vocab, &params, DecisionMode::Greedy, 0);
        assert_eq!(g1, g2, "evaluation must ignore the training-only aid");
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        // -log(1/10) = 2.3026 for 10 candidates; an untrained model
        // should sit in that neighborhood
        let (cfg, eps, vocab) = toy_setup();
        let model = Model::from_config(&cfg, vocab.len());
        let params = model.init_params(&mut Rng::new(3));
        let (loss, _) = forward_loss(&cfg, &eps[0], &vocab, &params, DecisionMode::Greedy, 0);
        assert!((loss - (10f64).ln()).abs() < 0.7, "loss {loss}");
    }

    #[test]
    fn ablation_flags_change_predictions() {
        let (cfg, eps, vocab) = toy_setup();
        let model = Model::from_config(&cfg, vocab.len());
        let params = model.init_params(&mut Rng::new(7));
        let (base, base_rounds) =
            forward_loss(&cfg, &eps[0], &vocab, &params, DecisionMode::Greedy, 0);

        let mut rv = cfg.clone();
        rv.rv_only = true;
        let (l_rv, rv_rounds) = forward_loss(&rv, &eps[0], &vocab, &params, DecisionMode::Greedy, 0);
        assert!(rv_rounds.iter().all(|r| r.terminated));
        let mut nf = cfg.clone();
        nf.no_filter = true;
        let (l_nf, _) = forward_loss(&nf, &eps[0], &vocab, &params, DecisionMode::Greedy, 0);
        let mut pl = cfg.clone();
        pl.pair_last = true;
        let (l_pl, pl_rounds) =
            forward_loss(&pl, &eps[0], &vocab, &params, DecisionMode::Greedy, 0);
        for (i, r) in pl_rounds.iter().enumerate() {
            if let Some(tp) = r.t_p {
                // dialog round i+1 must always pair with its predecessor
                assert_eq!(tp, i);
            }
        }
        assert_ne!(base, l_nf, "no_filter is a dead flag");
        // rv_only / pair_last only differ when some round recursed
        if base_rounds.iter().any(|r| !r.terminated) {
            assert_ne!(base, l_rv, "rv_only is a dead flag");
            let _ = l_pl;
        }
    }

    #[test]
    fn gradients_flow_to_every_parameter_group() {
        let (cfg, eps, vocab) = toy_setup();
        let model = Model::from_config(&cfg, vocab.len());
        let params = model.init_params(&mut Rng::new(11));
        let mut g = Graph::new(Precision::F64);
        let mut drop_rng = Rng::new(1).derive(1);
        let mut gumbel_rng = Rng::new(1).derive(2);
        let mut ctx = FwdCtx {
            train: true,
            dropout: 0.0,
            mode: DecisionMode::Train,
            tau: cfg.tau,
            drop_rng: &mut drop_rng,
            gumbel_rng: &mut gumbel_rng,
        };
        let out = model
            .forward_episode(&mut g, &params, &mut ctx, &vocab, &eps[0])
            .unwrap();
        g.backward(out.loss).unwrap();
        let mut grads = GradMap::new();
        grads.accumulate_from(&g).unwrap();
        let mut zero_groups = Vec::new();
        for (name, _) in params.iter() {
            let grad = grads.get(name).unwrap();
            if grad.data.iter().all(|&x| x == 0.0) {
                zero_groups.push(name.clone());
            }
        }
        // pair params only receive gradient when a round recursed with
        // t >= 2; embedding pad row is frozen by construction
        let benign = |n: &String| n.starts_with("pair.");
        zero_groups.retain(|n| !benign(n));
        assert!(
            zero_groups.is_empty(),
            "no gradient reached: {zero_groups:?}"
        );
    }
}
