//! Per-hop transform `T_i = decode . equalize . channel . encode` and the
//! t-hop chain `s_0 -> s_1 -> ... -> s_t`. All hops share one parameter
//! store; realizations are i.i.d. across hops.

use crate::channel::{self, ChannelConfig, ChannelRealization, ChannelStats, HopKey};
use crate::codec::{Codec, CodecParams};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use ndarray::Ix4;
use tapegrad::nn::ParamVars;
use tapegrad::{Graph, Scalar, Var};

/// Source batch plus every intermediate reconstruction and realization.
pub struct HopTrace {
    pub source: ImageBatch<f32>,
    pub reconstructions: Vec<ImageBatch<f32>>,
    pub realizations: Vec<ChannelRealization>,
}

/// Options for the chain; the default re-encodes decoder outputs directly.
#[derive(Copy, Clone, Debug, Default)]
pub struct ChainOptions {
    /// Quantize intermediate images to the 8-bit grid before re-encoding.
    pub quantize_between_hops: bool,
}

fn quantize8(batch: &mut ImageBatch<f32>) {
    batch.data.mapv_inplace(|v| (v * 255.0).round() / 255.0);
}

/// Records one hop on an existing graph. Returns the decoded image node.
pub fn hop_on_graph<F: Scalar, C: Codec>(
    g: &mut Graph<F>,
    codec: &C,
    pv: &ParamVars,
    s: Var,
    config: &ChannelConfig,
    key: &HopKey<'_>,
    stats: &mut ChannelStats,
) -> (Var, ChannelRealization) {
    let realization = channel::sample_realization(config, key);
    let symbols = codec.encode_on(g, pv, s);
    let received = channel::op_apply_channel(g, symbols, &realization, key);
    let equalized = channel::op_equalize(g, received, &realization, stats);
    let decoded = codec.decode_on(g, pv, equalized);
    (decoded, realization)
}

/// One transmission `T_i(s; h_i, n_i)` in inference mode.
pub fn hop<C: Codec>(
    codec: &C,
    cp: &CodecParams<f32>,
    s: &ImageBatch<f32>,
    config: &ChannelConfig,
    key: &HopKey<'_>,
    stats: &mut ChannelStats,
) -> Result<(ImageBatch<f32>, ChannelRealization)> {
    if s.len() != key.image_indices.len() {
        return Err(Error::Argument(format!(
            "batch of {} images but {} image indices",
            s.len(),
            key.image_indices.len()
        )));
    }
    let mut g = Graph::<f32>::inference();
    let pv = g.register_params(&cp.params, false);
    let sv = g.constant(s.data.clone().into_dyn());
    let (out, realization) = hop_on_graph(&mut g, codec, &pv, sv, config, key, stats);
    let data = g.value(out).clone().into_dimensionality::<Ix4>().unwrap();
    Ok((ImageBatch::from_bounded(data), realization))
}

/// Chains `t` hops with fresh realizations per hop. All hops use the same
/// shared parameters; noise is keyed by `(master, image, hop)`, so the
/// prefix of a longer chain is bit-identical to a shorter one.
pub fn chain<C: Codec>(
    codec: &C,
    cp: &CodecParams<f32>,
    s0: &ImageBatch<f32>,
    t: usize,
    config: &ChannelConfig,
    master: u64,
    image_indices: &[u64],
    options: ChainOptions,
    stats: &mut ChannelStats,
) -> Result<HopTrace> {
    if t < 1 {
        return Err(Error::Argument("chain length t must be >= 1".into()));
    }
    let mut reconstructions = Vec::with_capacity(t);
    let mut realizations = Vec::with_capacity(t);
    let mut current = s0.clone();
    for i in 1..=t {
        let key = HopKey { master, image_indices, hop: i as u64 };
        let (mut next, realization) = hop(codec, cp, &current, config, &key, stats)?;
        if options.quantize_between_hops {
            quantize8(&mut next);
        }
        reconstructions.push(next.clone());
        realizations.push(realization);
        current = next;
    }
    Ok(HopTrace { source: s0.clone(), reconstructions, realizations })
}

/// Unrolls `t` hops on one graph for training; gradients flow through every
/// hop. Returns the decoded node and realization per hop.
pub fn chain_on_graph<F: Scalar, C: Codec>(
    g: &mut Graph<F>,
    codec: &C,
    pv: &ParamVars,
    s0: Var,
    t: usize,
    config: &ChannelConfig,
    master: u64,
    image_indices: &[u64],
    stats: &mut ChannelStats,
) -> Vec<(Var, ChannelRealization)> {
    assert!(t >= 1, "chain length t must be >= 1");
    let mut out = Vec::with_capacity(t);
    let mut current = s0;
    for i in 1..=t {
        let key = HopKey { master, image_indices, hop: i as u64 };
        let (next, realization) = hop_on_graph(g, codec, pv, current, config, &key, stats);
        out.push((next, realization));
        current = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelKind;
    use crate::codec::{build_codec, AnyCodec, ModelConfig};

    fn mini_config() -> ModelConfig {
        crate::testutil::mini_vitsc_config()
    }

    fn mini_batch(b: usize) -> ImageBatch<f32> {
        crate::testutil::random_batch(b, &mini_config(), 5)
    }

    #[test]
    fn chain_rejects_zero_hops() {
        let cfg = mini_config();
        let (codec, cp) = build_codec(&cfg, 1).unwrap();
        let s0 = mini_batch(2);
        let channel = ChannelConfig { kind: ChannelKind::Awgn, snr_db: 18.0 };
        let mut stats = ChannelStats::default();
        let err = chain(&codec, &cp, &s0, 0, &channel, 1, &[0, 1], ChainOptions::default(), &mut stats);
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn single_hop_chain_matches_hop() {
        let cfg = mini_config();
        let (codec, cp) = build_codec(&cfg, 1).unwrap();
        let s0 = mini_batch(3);
        let channel = ChannelConfig { kind: ChannelKind::Rayleigh, snr_db: 12.0 };
        let idx = [5u64, 9, 11];
        let mut stats = ChannelStats::default();
        let trace =
            chain(&codec, &cp, &s0, 1, &channel, 77, &idx, ChainOptions::default(), &mut stats).unwrap();
        let key = HopKey { master: 77, image_indices: &idx, hop: 1 };
        let (direct, _) = hop(&codec, &cp, &s0, &channel, &key, &mut stats).unwrap();
        assert_eq!(trace.reconstructions.len(), 1);
        assert_eq!(trace.reconstructions[0].data, direct.data);
    }

    #[test]
    fn chain_prefix_is_bitwise_consistent() {
        let cfg = mini_config();
        let (codec, cp) = build_codec(&cfg, 2).unwrap();
        let s0 = mini_batch(2);
        let channel = ChannelConfig { kind: ChannelKind::Rayleigh, snr_db: 8.0 };
        let idx = [0u64, 1];
        let mut stats = ChannelStats::default();
        let long =
            chain(&codec, &cp, &s0, 3, &channel, 42, &idx, ChainOptions::default(), &mut stats).unwrap();
        let short =
            chain(&codec, &cp, &s0, 2, &channel, 42, &idx, ChainOptions::default(), &mut stats).unwrap();
        for i in 0..2 {
            assert_eq!(long.reconstructions[i].data, short.reconstructions[i].data, "hop {i}");
        }
    }

    #[test]
    fn identical_seeds_identical_outputs() {
        let cfg = mini_config();
        let (codec, cp) = build_codec(&cfg, 3).unwrap();
        let s0 = mini_batch(2);
        let channel = ChannelConfig { kind: ChannelKind::Awgn, snr_db: 6.0 };
        let idx = [3u64, 4];
        let mut stats = ChannelStats::default();
        let a = chain(&codec, &cp, &s0, 2, &channel, 9, &idx, ChainOptions::default(), &mut stats).unwrap();
        let b = chain(&codec, &cp, &s0, 2, &channel, 9, &idx, ChainOptions::default(), &mut stats).unwrap();
        let c = chain(&codec, &cp, &s0, 2, &channel, 10, &idx, ChainOptions::default(), &mut stats).unwrap();
        assert_eq!(a.reconstructions[1].data, b.reconstructions[1].data);
        assert_ne!(a.reconstructions[1].data, c.reconstructions[1].data);
    }

    #[test]
    fn trace_stays_in_unit_range() {
        let cfg = mini_config();
        let (codec, cp) = build_codec(&cfg, 4).unwrap();
        let s0 = mini_batch(2);
        let channel = ChannelConfig { kind: ChannelKind::Rayleigh, snr_db: 0.0 };
        let mut stats = ChannelStats::default();
        let trace =
            chain(&codec, &cp, &s0, 4, &channel, 1, &[0, 1], ChainOptions::default(), &mut stats).unwrap();
        assert_eq!(trace.reconstructions.len(), 4);
        for rec in &trace.reconstructions {
            assert_eq!(rec.data.shape(), s0.data.shape());
            assert!(rec.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn two_hop_gradient_reaches_encoder_and_matches_fd() {
        use tapegrad::fd::check_grads;
        let cfg = mini_config();
        let codec = AnyCodec::from_config(&cfg).unwrap();
        let params64 = codec.init_params::<f64>(6);
        let s0 = mini_batch(2).cast::<f64>();
        let channel = ChannelConfig { kind: ChannelKind::Rayleigh, snr_db: 10.0 };
        let idx = [0u64, 1];

        let run = |p: &tapegrad::nn::Params<f64>| -> (f64, Option<indexmap::IndexMap<String, ndarray::ArrayD<f64>>>, bool) {
            let mut g = Graph::<f64>::new();
            let pv = g.register_params(p, true);
            let sv = g.constant(s0.data.clone().into_dyn());
            let mut stats = ChannelStats::default();
            let hops = chain_on_graph(&mut g, &codec, &pv, sv, 2, &channel, 13, &idx, &mut stats);
            let loss = g.mean_sq_diff(hops[1].0, sv);
            let value = g.value(loss).iter().next().copied().unwrap();
            let mut grads = g.backward(loss);
            let collected = tapegrad::nn::collect_grads(&mut grads, &pv, p);
            (value, Some(collected), true)
        };

        let (_, grads, _) = run(&params64);
        let grads = grads.unwrap();
        // encoder must receive a nonzero gradient through both hops
        let enc_norm: f64 = grads
            .iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(enc_norm > 1e-8, "encoder gradient vanished: {enc_norm}");

        // spot-check a subset of parameters against finite differences
        let mut fd_params = tapegrad::nn::Params::<f64>::new();
        for name in ["enc.patch.w", "enc.head.b", "dec.head.b", "enc.blk0.ln1.g"] {
            fd_params.insert(name, params64.get(name).clone());
        }
        let mut eval = |p: &tapegrad::nn::Params<f64>| -> f64 {
            let mut full = params64.clone();
            for (name, value) in p.iter() {
                *full.get_mut(name) = value.clone();
            }
            run(&full).0
        };
        let mut analytic = indexmap::IndexMap::new();
        for (name, _) in fd_params.iter() {
            analytic.insert(name.clone(), grads.get(name).unwrap().clone());
        }
        let report = check_grads(&mut eval, &fd_params, &analytic, 1e-5);
        assert!(report.max_rel_err < 1e-4, "2-hop unroll FD mismatch: {report:?}");
    }
}
