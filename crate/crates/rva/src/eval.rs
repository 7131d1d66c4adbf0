//! Greedy evaluation: metrics over a dataset, per-question prediction
//! dumps, recursion traces, and the co-reference diagnostics the
//! mechanism experiments are built on.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::metrics::{self, EvalRecord, MetricsReport};
use crate::model::{Model, RoundForward};
use crate::nn::{DecisionMode, FwdCtx};
use crate::recursion::RecursionTrace;
use crate::synth::Episode;
use crate::tensor::{Graph, ParamSet, Result, Rng};
use crate::text::Vocabulary;

/// Region- and antecedent-level accuracy, split by question kind.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    /// gt-region argmax accuracy over unambiguous rounds.
    pub region_acc_unambiguous: f64,
    pub unambiguous_rounds: usize,
    /// gt-region argmax accuracy over ambiguous rounds.
    pub region_acc_ambiguous: f64,
    pub ambiguous_rounds: usize,
    /// Fraction of skip rounds where Pair chose the labeled antecedent.
    pub pair_skip_acc: f64,
    pub skip_rounds: usize,
    /// Chance level for the same skip rounds: 1 / (choices at round t).
    pub pair_skip_chance: f64,
    /// Termination decision agreement with the ambiguity labels.
    pub infer_acc: f64,
    pub rounds: usize,
}

/// One evaluated question in the prediction dump.
#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub episode: usize,
    pub round: usize,
    pub ranking: Vec<usize>,
    pub gt_index: usize,
    pub gt_rank: usize,
    pub terminated: bool,
    pub lambda: f64,
    pub t_p: Option<usize>,
    pub att_argmax: usize,
    pub gt_region: usize,
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub diagnostics: Diagnostics,
    pub predictions: Vec<Prediction>,
    pub traces: Vec<RecursionTrace>,
}

/// Runs every episode in greedy mode with dropout off. Parameters are
/// read-only; the caller can hash them before and after to confirm.
pub fn evaluate(
    cfg: &RunConfig,
    params: &ParamSet,
    vocab: &Vocabulary,
    episodes: &[Episode],
) -> Result<Evaluation> {
    let model = Model::from_config(cfg, vocab.len());
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    let mut traces = Vec::new();
    let mut rounds: Vec<RoundForward> = Vec::new();
    for (ei, episode) in episodes.iter().enumerate() {
        let mut g = Graph::new(cfg.precision);
        // greedy decisions and no dropout: the streams are never drawn
        let mut drop_rng = Rng::new(0);
        let mut gumbel_rng = Rng::new(0);
        let mut ctx = FwdCtx {
            train: false,
            dropout: 0.0,
            mode: DecisionMode::Greedy,
            tau: cfg.tau,
            drop_rng: &mut drop_rng,
            gumbel_rng: &mut gumbel_rng,
        };
        let out = model.forward_episode(&mut g, params, &mut ctx, vocab, episode)?;
        for (i, r) in out.rounds.iter().enumerate() {
            let record = EvalRecord {
                ranking: r.ranking.clone(),
                gt: r.gt_index,
                relevances: Some(r.relevances.clone()),
            };
            predictions.push(Prediction {
                episode: ei,
                round: i + 1,
                ranking: r.ranking.clone(),
                gt_index: r.gt_index,
                gt_rank: record.gt_rank(),
                terminated: r.terminated,
                lambda: r.lambda,
                t_p: r.t_p,
                att_argmax: r.att_argmax,
                gt_region: r.gt_region,
            });
            records.push(record);
        }
        rounds.extend(out.rounds);
        traces.push(out.trace);
    }
    let report = metrics::report(&records).map_err(|e| crate::tensor::TensorError::Invalid {
        op: "evaluate",
        reason: e.to_string(),
    })?;
    Ok(Evaluation {
        report,
        diagnostics: diagnostics(&rounds),
        predictions,
        traces,
    })
}

/// Aggregates co-reference diagnostics from per-round outputs.
pub fn diagnostics(rounds: &[RoundForward]) -> Diagnostics {
    let mut d = Diagnostics::default();
    let mut amb_hits = 0usize;
    let mut unamb_hits = 0usize;
    let mut skip_hits = 0usize;
    let mut infer_hits = 0usize;
    for r in rounds.iter() {
        d.rounds += 1;
        let region_hit = r.att_argmax == r.gt_region;
        if r.ambiguous {
            d.ambiguous_rounds += 1;
            amb_hits += region_hit as usize;
        } else {
            d.unambiguous_rounds += 1;
            unamb_hits += region_hit as usize;
        }
        if r.skip {
            d.skip_rounds += 1;
            skip_hits += (r.t_p == r.antecedent) as usize;
        }
        // Infer should terminate exactly on unambiguous questions
        infer_hits += (r.terminated == !r.ambiguous) as usize;
    }
    // chance for a skip round at dialog round t is 1/t: Pair picks
    // among rounds 0..t, and the antecedent label gives t >= a + 2
    let mut chance_sum = 0.0;
    let mut skip_seen = 0usize;
    for r in rounds.iter() {
        if r.skip {
            if let Some(a) = r.antecedent {
                chance_sum += 1.0 / (a + 2) as f64;
                skip_seen += 1;
            }
        }
    }
    let skip_chance = if skip_seen > 0 { chance_sum / skip_seen as f64 } else { 0.0 };

    let frac = |num: usize, den: usize| if den > 0 { num as f64 / den as f64 } else { 0.0 };
    d.region_acc_ambiguous = frac(amb_hits, d.ambiguous_rounds);
    d.region_acc_unambiguous = frac(unamb_hits, d.unambiguous_rounds);
    d.pair_skip_acc = frac(skip_hits, d.skip_rounds);
    d.pair_skip_chance = skip_chance;
    d.infer_acc = frac(infer_hits, d.rounds);
    d
}

impl Diagnostics {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "region_acc_unambiguous {:.6}", self.region_acc_unambiguous);
        let _ = writeln!(s, "unambiguous_rounds {}", self.unambiguous_rounds);
        let _ = writeln!(s, "region_acc_ambiguous {:.6}", self.region_acc_ambiguous);
        let _ = writeln!(s, "ambiguous_rounds {}", self.ambiguous_rounds);
        let _ = writeln!(s, "pair_skip_acc {:.6}", self.pair_skip_acc);
        let _ = writeln!(s, "pair_skip_chance {:.6}", self.pair_skip_chance);
        let _ = writeln!(s, "skip_rounds {}", self.skip_rounds);
        let _ = writeln!(s, "infer_acc {:.6}", self.infer_acc);
        let _ = writeln!(s, "rounds {}", self.rounds);
        s
    }
}

/// JSON-lines prediction dump.
pub fn dump_predictions(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        let _ = writeln!(out, "{}", serde_json::to_string(p).unwrap());
    }
    out
}
