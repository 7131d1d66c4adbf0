//! Finite-difference verification of the whole model: every parameter
//! group is checked through the relaxed-path episode loss on a fixed
//! toy episode, at 64-bit precision.
//!
//! Relaxed decisions keep the loss smooth; the noise and dropout
//! streams are cloned from frozen states for every evaluation so the
//! loss is a deterministic function of the parameters.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::model::Model;
use crate::nn::{DecisionMode, FwdCtx};
use crate::synth::{self, Episode};
use crate::tensor::gradcheck::finite_diff_check_detailed;
use crate::tensor::{GradMap, Graph, ParamSet, Precision, Result, Rng};
use crate::text::Vocabulary;

pub struct GradcheckReport {
    /// Max relative error per parameter group.
    pub groups: BTreeMap<String, f64>,
    pub worst: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, err) in &self.groups {
            let mark = if *err < self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("{name:<24} {err:.3e}  {mark}\n"));
        }
        s.push_str(&format!(
            "worst {:.3e} tolerance {:.1e} -> {}\n",
            self.worst,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        ));
        s
    }
}

/// Toy dimensions for the check; anything larger is pointlessly slow
/// for a per-coordinate finite-difference sweep.
pub fn toy_config(base: &RunConfig) -> RunConfig {
    RunConfig {
        d_emb: 6,
        d_h: 8,
        d_v: 12,
        regions: 3,
        rounds: 3,
        candidates: 10,
        precision: Precision::F64,
        // exercise the auxiliary grounding-loss path too
        ground_weight: 0.5,
        ..base.clone()
    }
}

pub const TOLERANCE: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

pub fn run(base: &RunConfig) -> Result<GradcheckReport> {
    let cfg = toy_config(base);
    let gen = cfg.gen_config();
    let episode = synth::generate_episode(cfg.seed ^ 0x47_43, &gen).map_err(|e| {
        crate::tensor::TensorError::Invalid {
            op: "gradcheck",
            reason: e.to_string(),
        }
    })?;
    let vocab = synth::dataset_vocab(std::slice::from_ref(&episode));
    run_on_episode(&cfg, &episode, &vocab)
}

pub fn run_on_episode(
    cfg: &RunConfig,
    episode: &Episode,
    vocab: &Vocabulary,
) -> Result<GradcheckReport> {
    let model = Model::from_config(cfg, vocab.len());
    let mut init_rng = Rng::new(cfg.seed).derive(0x494E);
    let params = model.init_params(&mut init_rng);

    // frozen noise: every loss evaluation sees identical draws
    let drop_base = Rng::new(cfg.seed).derive(0x6472);
    let gumbel_base = Rng::new(cfg.seed).derive(0x6775);
    let forward = |p: &ParamSet| -> Result<(Graph, crate::tensor::NodeId)> {
        let mut g = Graph::new(Precision::F64);
        let mut drop_rng = drop_base.clone();
        let mut gumbel_rng = gumbel_base.clone();
        let mut ctx = FwdCtx {
            train: true,
            dropout: cfg.dropout,
            mode: DecisionMode::Relaxed,
            tau: cfg.tau,
            drop_rng: &mut drop_rng,
            gumbel_rng: &mut gumbel_rng,
        };
        let out = model.forward_episode(&mut g, p, &mut ctx, vocab, episode)?;
        Ok((g, out.loss))
    };

    let (mut g, loss) = forward(&params)?;
    g.backward(loss)?;
    let mut grads = GradMap::new();
    grads.accumulate_from(&g)?;

    let groups = finite_diff_check_detailed(
        |p| forward(p).map(|(g, l)| g.value(l).data[0]),
        &params,
        &grads,
        FD_EPS,
    )?;
    let worst = groups.values().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport {
        groups,
        worst,
        tolerance: TOLERANCE,
    })
}
