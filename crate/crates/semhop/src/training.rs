//! Single-hop pretraining and recursive multi-hop fine-tuning.
//!
//! Recursive training unrolls `t` transmissions on one tape, scores every
//! intermediate reconstruction, and minimizes the weighted sum
//! `sum_i lambda^(t-i) * L_i` with one AdamW update per batch. Gradients flow
//! through all hops; channel noise enters by reparameterization so the unroll
//! stays differentiable.

use crate::channel::{ChannelConfig, ChannelKind, ChannelStats};
use crate::codec::{AnyCodec, CheckpointMeta, Codec, CodecParams, ModelConfig};
use crate::data::{self, ImageBatch, ImageSet};
use crate::error::{Error, Result};
use crate::keys;
use crate::multihop;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use tapegrad::nn::collect_grads;
use tapegrad::optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};
use tapegrad::{Graph, Scalar as _, Var};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// `L_i = d(s_0, s_i)` — every stage anchored at the source image.
    Source,
    /// `L_i = d(s_{i-1}, s_i)` — each stage anchored at its own input.
    Consecutive,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrMode {
    Fixed,
    Sampled,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrScheduleKind {
    Cosine,
    Constant,
}

pub const LR_MIN: f64 = 1e-6;
pub const GRAD_CLIP: f64 = 1.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Unroll depth `t` for recursive training.
    pub t: usize,
    pub lambda: f64,
    pub anchor_mode: AnchorMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub lr_schedule: LrScheduleKind,
    pub snr_mode: SnrMode,
    pub snr_db: f64,
    pub snr_list: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t: 10,
            lambda: 0.9,
            anchor_mode: AnchorMode::Source,
            epochs: 40,
            batch_size: 64,
            lr: 0.0005,
            lr_schedule: LrScheduleKind::Cosine,
            snr_mode: SnrMode::Fixed,
            snr_db: 18.0,
            snr_list: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0],
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(Error::Config("train.t must be >= 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("train.lambda must be in (0, 1], got {}", self.lambda)));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.snr_mode == SnrMode::Sampled && self.snr_list.is_empty() {
            return Err(Error::Config("train.snr_mode=sampled requires a non-empty train.snr_list".into()));
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        match self.lr_schedule {
            LrScheduleKind::Cosine => LrSchedule::Cosine { lr_min: LR_MIN },
            LrScheduleKind::Constant => LrSchedule::Constant,
        }
    }

    /// Label for metrics records: the fixed SNR or the sampled list.
    pub fn snr_label(&self) -> String {
        match self.snr_mode {
            SnrMode::Fixed => format!("{}", self.snr_db),
            SnrMode::Sampled => {
                let items: Vec<String> = self.snr_list.iter().map(|s| format!("{s}")).collect();
                format!("sampled[{}]", items.join(","))
            }
        }
    }
}

/// Mean over the batch of per-image squared error divided by n.
pub fn mse_distortion(a: &ImageBatch<f32>, b: &ImageBatch<f32>) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Argument(format!(
            "mse_distortion: shape {:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Incremental weights `[lambda^(t-1), ..., lambda, 1]`; the last hop always
/// carries weight exactly 1.
pub fn hop_weights(t: usize, lambda: f64) -> Vec<f64> {
    assert!(t >= 1, "t must be >= 1");
    (0..t).map(|i| lambda.powi((t - 1 - i) as i32)).collect()
}

/// Per-hop losses, their weights, and the weighted total.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub per_hop: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn from_per_hop(per_hop: Vec<f64>, weights: Vec<f64>) -> Self {
        let total = per_hop.iter().zip(&weights).map(|(l, w)| l * w).sum();
        LossBreakdown { per_hop, weights, total }
    }
}

/// Draws the training SNR for one batch.
pub fn sample_train_snr(cfg: &TrainConfig, rng: &mut rand_chacha::ChaCha12Rng) -> Result<f64> {
    match cfg.snr_mode {
        SnrMode::Fixed => Ok(cfg.snr_db),
        SnrMode::Sampled => {
            if cfg.snr_list.is_empty() {
                return Err(Error::Config("empty train.snr_list".into()));
            }
            let i = rand::Rng::random_range(rng, 0..cfg.snr_list.len());
            Ok(cfg.snr_list[i])
        }
    }
}

/// Records the unrolled per-hop losses on an existing graph and returns the
/// scalar loss vars plus the weighted total.
pub fn recursive_loss_on_graph<C: Codec>(
    g: &mut Graph<f32>,
    codec: &C,
    pv: &tapegrad::nn::ParamVars,
    s0: Var,
    t: usize,
    weights: &[f64],
    anchor_mode: AnchorMode,
    channel: &ChannelConfig,
    master: u64,
    image_indices: &[u64],
    stats: &mut ChannelStats,
) -> (Vec<Var>, Var) {
    let hops = multihop::chain_on_graph(g, codec, pv, s0, t, channel, master, image_indices, stats);
    let mut per_hop = Vec::with_capacity(t);
    let mut anchor = s0;
    for (s_i, _) in &hops {
        per_hop.push(g.mean_sq_diff(anchor, *s_i));
        if anchor_mode == AnchorMode::Consecutive {
            anchor = *s_i;
        }
    }
    let total = g.weighted_sum(&per_hop, weights);
    (per_hop, total)
}

fn mse_f64(a: &ndarray::ArrayD<f32>, b: &ndarray::ArrayD<f32>) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Evaluates the recursive objective for one batch (no parameter update).
/// Losses are reported in full f64 precision.
pub fn recursive_loss<C: Codec>(
    codec: &C,
    cp: &CodecParams<f32>,
    batch: &ImageBatch<f32>,
    image_indices: &[u64],
    t: usize,
    lambda: f64,
    anchor_mode: AnchorMode,
    channel: &ChannelConfig,
    master: u64,
) -> Result<LossBreakdown> {
    if t < 1 {
        return Err(Error::Argument("recursive_loss: t must be >= 1".into()));
    }
    let weights = hop_weights(t, lambda);
    let mut g = Graph::<f32>::inference();
    let pv = g.register_params(&cp.params, false);
    let s0 = g.constant(batch.data.clone().into_dyn());
    let mut stats = ChannelStats::default();
    let hops =
        multihop::chain_on_graph(&mut g, codec, &pv, s0, t, channel, master, image_indices, &mut stats);
    let mut per_hop = Vec::with_capacity(t);
    let mut anchor = s0;
    for (s_i, _) in &hops {
        per_hop.push(mse_f64(g.value(anchor), g.value(*s_i)));
        if anchor_mode == AnchorMode::Consecutive {
            anchor = *s_i;
        }
    }
    Ok(LossBreakdown::from_per_hop(per_hop, weights))
}

/// Expected distortion of a single transmission, `E[d(s_0, T(s_0))]`.
pub fn single_hop_loss<C: Codec>(
    codec: &C,
    cp: &CodecParams<f32>,
    batch: &ImageBatch<f32>,
    image_indices: &[u64],
    channel: &ChannelConfig,
    master: u64,
) -> Result<f64> {
    Ok(recursive_loss(codec, cp, batch, image_indices, 1, 1.0, AnchorMode::Source, channel, master)?.total)
}

#[derive(Serialize)]
struct RunLogRecord<'a> {
    epoch: usize,
    total_loss: f64,
    per_hop: &'a [f64],
    lr: f64,
    wall_s: f64,
}

fn train_loop<C: Codec>(
    codec: &C,
    cp: &mut CodecParams<f32>,
    tcfg: &TrainConfig,
    kind: ChannelKind,
    unroll: usize,
    data: &ImageSet,
    phase: &str,
    run_log: Option<&Path>,
) -> Result<CheckpointMeta> {
    tcfg.validate()?;
    let schedule = tcfg.schedule();
    let weights = hop_weights(unroll, tcfg.lambda);
    let mut opt = AdamW::new(&cp.params, AdamWConfig::default());
    let mut history: Vec<f64> = Vec::new();
    let mut log_file = match run_log {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(std::fs::OpenOptions::new().create(true).append(true).open(path)?)
        }
        None => None,
    };

    for epoch in 0..tcfg.epochs {
        let wall = Instant::now();
        let lr = schedule.lr_at(tcfg.lr, epoch, tcfg.epochs);
        let epoch_seed = keys::sub_master(tcfg.seed, "epoch-shuffle", &[phase_tag(phase), epoch as u64]);
        let mut epoch_total = 0.0f64;
        let mut epoch_hops = vec![0.0f64; unroll];
        let mut steps = 0usize;

        for (step, mb) in data::batches(data, tcfg.batch_size, true, epoch_seed)?.enumerate() {
            let master = keys::sub_master(tcfg.seed, "train-step", &[phase_tag(phase), epoch as u64, step as u64]);
            let mut snr_rng = keys::rng_for(tcfg.seed, "train-snr", &[phase_tag(phase), epoch as u64, step as u64]);
            let snr_db = sample_train_snr(tcfg, &mut snr_rng)?;
            let channel = ChannelConfig { kind, snr_db };

            let mut g = Graph::<f32>::new();
            let pv = g.register_params(&cp.params, true);
            let s0 = g.constant(mb.images.data.clone().into_dyn());
            let mut stats = ChannelStats::default();
            let (per_hop_vars, total) = recursive_loss_on_graph(
                &mut g, codec, &pv, s0, unroll, &weights, tcfg.anchor_mode, &channel, master, &mb.indices,
                &mut stats,
            );
            let per_hop: Vec<f64> =
                per_hop_vars.iter().map(|&v| g.value(v).iter().next().unwrap().f64()).collect();
            let loss = g.value(total).iter().next().unwrap().f64();
            if !loss.is_finite() {
                let bad_hop = per_hop.iter().position(|l| !l.is_finite()).map(|i| i + 1).unwrap_or(0);
                return Err(Error::Diverged(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {step}, hop {bad_hop} (per-hop {per_hop:?})"
                )));
            }

            let mut grads = g.backward(total);
            let mut grad_map = collect_grads(&mut grads, &pv, &cp.params);
            drop(g);
            clip_global_norm(&mut grad_map, GRAD_CLIP);
            opt.step(&mut cp.params, &grad_map, lr);

            history.push(loss);
            epoch_total += loss;
            for (acc, l) in epoch_hops.iter_mut().zip(&per_hop) {
                *acc += l;
            }
            steps += 1;
        }

        let denom = steps.max(1) as f64;
        let per_hop_avg: Vec<f64> = epoch_hops.iter().map(|l| l / denom).collect();
        let record = RunLogRecord {
            epoch,
            total_loss: epoch_total / denom,
            per_hop: &per_hop_avg,
            lr,
            wall_s: wall.elapsed().as_secs_f64(),
        };
        if let Some(f) = log_file.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            f.write_all(&line)?;
        }
        log::info!(
            "{phase} epoch {epoch}: loss {:.6} lr {:.2e} ({:.1}s)",
            record.total_loss,
            lr,
            record.wall_s
        );
    }

    Ok(CheckpointMeta {
        phase: phase.to_string(),
        train: Some(serde_json::to_value(tcfg).expect("config serializes")),
        loss_history: history,
        epochs: tcfg.epochs,
    })
}

fn phase_tag(phase: &str) -> u64 {
    match phase {
        "single_hop" => 1,
        "recursive" => 2,
        _ => 0,
    }
}

/// Trains a fresh codec on the single-hop objective.
pub fn train_single_hop(
    tcfg: &TrainConfig,
    model_cfg: &ModelConfig,
    kind: ChannelKind,
    data: &ImageSet,
    run_log: Option<&Path>,
) -> Result<(AnyCodec, CodecParams<f32>, CheckpointMeta)> {
    let (codec, mut cp) = crate::codec::build_codec(model_cfg, tcfg.seed)?;
    let meta = train_loop(&codec, &mut cp, tcfg, kind, 1, data, "single_hop", run_log)?;
    Ok((codec, cp, meta))
}

/// Fine-tunes a single-hop checkpoint with the recursive objective. The warm
/// start is required: recursive training refines a codec that already works
/// for one hop.
pub fn train_recursive(
    tcfg: &TrainConfig,
    init: (AnyCodec, CodecParams<f32>, CheckpointMeta),
    kind: ChannelKind,
    data: &ImageSet,
    run_log: Option<&Path>,
) -> Result<(AnyCodec, CodecParams<f32>, CheckpointMeta)> {
    let (codec, mut cp, init_meta) = init;
    if init_meta.phase != "single_hop" && init_meta.phase != "recursive" {
        return Err(Error::Argument(format!(
            "recursive training requires a single-hop-trained checkpoint, found phase {:?}",
            init_meta.phase
        )));
    }
    let meta = train_loop(&codec, &mut cp, tcfg, kind, tcfg.t, data, "recursive", run_log)?;
    Ok((codec, cp, meta))
}
