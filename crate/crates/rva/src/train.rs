//! Training loop: Adam with the halving learning-rate schedule,
//! per-episode gradient averaging over batches, and checkpoints that
//! carry everything needed to resume a run bit-exactly (parameters,
//! optimizer state, epoch counter, rng stream states, config).

use std::path::Path;

use thiserror::Error;

use crate::config::RunConfig;
use crate::model::Model;
use crate::nn::{DecisionMode, FwdCtx};
use crate::synth::Episode;
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{GradMap, Graph, ParamSet, Precision, Rng, RngStreams, Tensor, TensorError};
use crate::text::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

/// Adam with bias correction; standard defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    pub fn new() -> Self {
        Adam {
            m: ParamSet::new(),
            v: ParamSet::new(),
            t: 0,
        }
    }

    /// One update over every parameter with a gradient entry. All
    /// stored state is rounded per the precision policy so checkpoints
    /// and resumes stay bit-exact.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &GradMap,
        lr: f64,
        precision: Precision,
    ) -> Result<(), TensorError> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, grad) in grads.iter() {
            if !self.m.contains(name) {
                self.m.init_zeros(name, grad.shape.clone());
                self.v.init_zeros(name, grad.shape.clone());
            }
            let m = self.m.get_mut(name)?;
            for (mi, gi) in m.data.iter_mut().zip(&grad.data) {
                *mi = precision.round(BETA1 * *mi + (1.0 - BETA1) * gi);
            }
            let m = self.m.get(name)?.clone();
            let v = self.v.get_mut(name)?;
            for (vi, gi) in v.data.iter_mut().zip(&grad.data) {
                *vi = precision.round(BETA2 * *vi + (1.0 - BETA2) * gi * gi);
            }
            let v = self.v.get(name)?.clone();
            let p = params.get_mut(name)?;
            for ((pi, mi), vi) in p.data.iter_mut().zip(&m.data).zip(&v.data) {
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                *pi = precision.round(*pi - lr * m_hat / (v_hat.sqrt() + EPS));
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Everything a resumable run carries between epochs.
pub struct TrainState {
    pub params: ParamSet,
    pub adam: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub streams: RngStreams,
    pub config: RunConfig,
    /// The vocabulary the embedding table was built over; rides along
    /// in checkpoints so evaluation can never index with a different
    /// word order than training did.
    pub vocab: Vocabulary,
    pub loss_curve: Vec<f64>,
}

impl TrainState {
    pub fn new(config: &RunConfig, vocab: &Vocabulary) -> Self {
        let mut streams = RngStreams::from_seed(config.seed);
        let model = Model::from_config(config, vocab.len());
        let mut params = model.init_params(&mut streams.init);
        if config.precision == Precision::F32 {
            for (_, t) in params.iter_mut() {
                for x in t.data.iter_mut() {
                    *x = *x as f32 as f64;
                }
            }
        }
        TrainState {
            params,
            adam: Adam::new(),
            epoch: 0,
            streams,
            config: config.clone(),
            vocab: vocab.clone(),
            loss_curve: Vec::new(),
        }
    }
}

/// Per-epoch progress callback data.
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Runs `state.config.epochs - state.epoch` further epochs. Batches are
/// contiguous slices of a per-epoch shuffle; each episode's mean-round
/// loss contributes equally to the batch gradient.
pub fn train(
    state: &mut TrainState,
    episodes: &[Episode],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(), TrainError> {
    let cfg = state.config.clone();
    let vocab = state.vocab.clone();
    let model = Model::from_config(&cfg, vocab.len());
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        // epoch-keyed shuffle stream: order does not depend on how many
        // draws earlier epochs consumed
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        let mut shuffle_rng = state.streams.data.derive(epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.below(i + 1));
        }

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = GradMap::new();
            for &ei in batch {
                let mut g = Graph::new(cfg.precision);
                let mut ctx = FwdCtx {
                    train: true,
                    dropout: cfg.dropout,
                    mode: DecisionMode::Train,
                    tau: cfg.tau,
                    drop_rng: &mut state.streams.dropout,
                    gumbel_rng: &mut state.streams.gumbel,
                };
                let out = model.forward_episode(&mut g, &state.params, &mut ctx, &vocab, &episodes[ei])?;
                let loss = g.value(out.loss).data[0];
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step });
                }
                loss_sum += loss;
                loss_count += 1;
                g.backward(out.loss)?;
                grads.accumulate_from(&g)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            if cfg.precision == Precision::F32 {
                // grads already rounded by the graph; the scale divides
                // by small integers so re-round to stay in f32 grid
                let mut rounded = GradMap::new();
                for (name, t) in grads.iter() {
                    let data = t.data.iter().map(|&x| x as f32 as f64).collect();
                    rounded.insert(name, Tensor { shape: t.shape.clone(), data });
                }
                grads = rounded;
            }
            state.adam.step(&mut state.params, &grads, lr, cfg.precision)?;
            zero_pad_row(&mut state.params)?;
        }

        let mean_loss = loss_sum / loss_count.max(1) as f64;
        state.loss_curve.push(mean_loss);
        state.epoch += 1;
        on_epoch(&EpochLog {
            epoch,
            lr,
            mean_loss,
        });
    }
    Ok(())
}

/// The pad embedding never trains.
fn zero_pad_row(params: &mut ParamSet) -> Result<(), TensorError> {
    let table = params.get_mut("embed.table")?;
    let d_emb = table.shape[1];
    for x in table.data[..d_emb].iter_mut() {
        *x = 0.0;
    }
    Ok(())
}

// ---- checkpoint meta encoding ----
//
// The container stores only named tensors, so non-tensor state rides
// along as reserved "__meta.*" / "__opt.*" records. u64s are split into
// 16-bit limbs (exact in f32); the config text is stored one byte per
// value.

fn u64_tensor(x: u64) -> Tensor {
    Tensor::vector((0..4).map(|i| ((x >> (16 * i)) & 0xFFFF) as f64).collect())
}

fn tensor_u64(t: &Tensor) -> Result<u64, TrainError> {
    if t.data.len() != 4 {
        return Err(TrainError::Mismatch("bad u64 meta record".into()));
    }
    Ok(t
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as u64) << (16 * i))
        .sum())
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<(), TrainError> {
    let mut all = state.params.clone();
    for (name, t) in state.adam.m.iter() {
        all.insert(&format!("__opt.m.{name}"), t.clone());
    }
    for (name, t) in state.adam.v.iter() {
        all.insert(&format!("__opt.v.{name}"), t.clone());
    }
    all.insert("__opt.t", u64_tensor(state.adam.t));
    all.insert("__meta.epoch", u64_tensor(state.epoch as u64));
    for (tag, rng) in [
        ("dropout", &state.streams.dropout),
        ("gumbel", &state.streams.gumbel),
        ("data", &state.streams.data),
        ("init", &state.streams.init),
    ] {
        let (key, counter) = rng.state();
        all.insert(&format!("__meta.rng.{tag}.key"), u64_tensor(key));
        all.insert(&format!("__meta.rng.{tag}.counter"), u64_tensor(counter));
    }
    let cfg_bytes: Vec<f64> = state
        .config
        .serialize()
        .into_bytes()
        .iter()
        .map(|&b| b as f64)
        .collect();
    all.insert("__meta.config", Tensor::vector(cfg_bytes));
    // tokens beyond the two fixed specials, one byte per value;
    // Vocabulary::build sorts, so rebuilding restores identical ids
    let vocab_bytes: Vec<f64> = state
        .vocab
        .words()
        .join("\n")
        .into_bytes()
        .iter()
        .map(|&b| b as f64)
        .collect();
    all.insert("__meta.vocab", Tensor::vector(vocab_bytes));
    let curve_bits: Vec<f64> = state
        .loss_curve
        .iter()
        .flat_map(|&x| {
            let bits = x.to_bits();
            (0..4).map(move |i| ((bits >> (16 * i)) & 0xFFFF) as f64)
        })
        .collect();
    if !curve_bits.is_empty() {
        all.insert("__meta.loss_curve", Tensor::vector(curve_bits));
    }
    checkpoint::save(path, &all, state.config.precision)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let (all, precision) = checkpoint::load(path)?;
    let mut params = ParamSet::new();
    let mut adam = Adam::new();
    let mut epoch = 0usize;
    let mut config_text = None;
    let mut vocab_text = None;
    let mut rng_parts: std::collections::HashMap<String, u64> = std::collections::HashMap::new();
    let mut loss_curve = Vec::new();
    for (name, t) in all.iter() {
        if let Some(rest) = name.strip_prefix("__opt.m.") {
            adam.m.insert(rest, t.clone());
        } else if let Some(rest) = name.strip_prefix("__opt.v.") {
            adam.v.insert(rest, t.clone());
        } else if name == "__opt.t" {
            adam.t = tensor_u64(t)?;
        } else if name == "__meta.epoch" {
            epoch = tensor_u64(t)? as usize;
        } else if name == "__meta.config" {
            let bytes: Vec<u8> = t.data.iter().map(|&v| v as u8).collect();
            config_text = Some(String::from_utf8(bytes).map_err(|_| {
                TrainError::Mismatch("config snapshot is not UTF-8".into())
            })?);
        } else if name == "__meta.vocab" {
            let bytes: Vec<u8> = t.data.iter().map(|&v| v as u8).collect();
            vocab_text = Some(String::from_utf8(bytes).map_err(|_| {
                TrainError::Mismatch("vocabulary snapshot is not UTF-8".into())
            })?);
        } else if name == "__meta.loss_curve" {
            for chunk in t.data.chunks(4) {
                let bits: u64 = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v as u64) << (16 * i))
                    .sum();
                loss_curve.push(f64::from_bits(bits));
            }
        } else if let Some(rest) = name.strip_prefix("__meta.rng.") {
            rng_parts.insert(rest.to_string(), tensor_u64(t)?);
        } else {
            params.insert(name, t.clone());
        }
    }
    let config_text =
        config_text.ok_or_else(|| TrainError::Mismatch("missing config snapshot".into()))?;
    let config = RunConfig::parse(&config_text)
        .map_err(|e| TrainError::Mismatch(format!("bad config snapshot: {e}")))?;
    if config.precision != precision {
        return Err(TrainError::Mismatch(
            "container precision flag disagrees with config snapshot".into(),
        ));
    }
    let stream = |tag: &str| -> Result<Rng, TrainError> {
        let key = rng_parts
            .get(&format!("{tag}.key"))
            .ok_or_else(|| TrainError::Mismatch(format!("missing rng stream {tag}")))?;
        let counter = rng_parts
            .get(&format!("{tag}.counter"))
            .ok_or_else(|| TrainError::Mismatch(format!("missing rng stream {tag}")))?;
        Ok(Rng::from_state(*key, *counter))
    };
    let streams = RngStreams {
        init: stream("init")?,
        dropout: stream("dropout")?,
        gumbel: stream("gumbel")?,
        data: stream("data")?,
    };
    let vocab_text = vocab_text
        .ok_or_else(|| TrainError::Mismatch("missing vocabulary snapshot".into()))?;
    let vocab = Vocabulary::build(vocab_text.split('\n').filter(|w| !w.is_empty()));
    let table = params.get("embed.table")?;
    if table.shape[0] != vocab.len() {
        return Err(TrainError::Mismatch(format!(
            "embedding table has {} rows but the stored vocabulary has {} entries",
            table.shape[0],
            vocab.len()
        )));
    }
    Ok(TrainState {
        params,
        adam,
        epoch,
        streams,
        config,
        vocab,
        loss_curve,
    })
}
