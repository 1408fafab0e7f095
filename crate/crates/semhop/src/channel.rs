//! Per-hop wireless transformation: block fading, additive complex Gaussian
//! noise, SNR bookkeeping, and zero-forcing equalization with receiver CSI.
//!
//! Signal power is normalized to 1 by the encoder, so `snr_db` fully
//! determines the noise power `sigma^2 = 10^(-snr_db/10)` per complex symbol
//! (`sigma^2 / 2` per real component). Fading is block fading: one complex
//! gain per image per hop, constant across that image's `k` symbols.
//!
//! Every random draw is keyed by `(master seed, image index, hop index)`, so
//! replaying a seed reproduces the exact noise regardless of batching.

use crate::codec::SymbolBatch;
use crate::error::{Error, Result};
use crate::keys;
use ndarray::{Array2, ArrayView2, ArrayD};
use num_complex::Complex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tapegrad::{Graph, Scalar, Var};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Eval/train SNR in dB; `f64::INFINITY` is the noiseless sentinel.
    pub snr_db: f64,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() {
            return Err(Error::Config("channel.snr_db must not be NaN".into()));
        }
        Ok(())
    }
}

/// Noise power per complex symbol for unit signal power.
pub fn snr_to_noise_power(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Per-image fading gains and the hop's noise power.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    /// One gain per image in the batch; exactly `1 + 0i` for AWGN.
    pub h: Vec<Complex<f64>>,
    pub sigma2: f64,
}

/// Keys one hop's draws: master seed plus the dataset index of every image
/// in the batch and the 1-based hop index.
#[derive(Clone, Debug)]
pub struct HopKey<'a> {
    pub master: u64,
    pub image_indices: &'a [u64],
    pub hop: u64,
}

/// Counters for guarded numeric events during a run.
#[derive(Clone, Copy, Debug, Default)]
pub struct ChannelStats {
    /// Equalizations that hit the deep-fade epsilon floor on `|h|`.
    pub deep_fade_guards: u64,
}

const DEEP_FADE_EPS: f64 = 1e-6;

/// Draws the hop's fading realization. AWGN: `h = 1`. Rayleigh: `h ~ CN(0,1)`
/// per image, constant across that image's symbols.
pub fn sample_realization(config: &ChannelConfig, key: &HopKey<'_>) -> ChannelRealization {
    let sigma2 = snr_to_noise_power(config.snr_db);
    let h = match config.kind {
        ChannelKind::Awgn => vec![Complex::new(1.0, 0.0); key.image_indices.len()],
        ChannelKind::Rayleigh => key
            .image_indices
            .iter()
            .map(|&img| {
                let mut rng = keys::rng_for(key.master, "fade", &[img, key.hop]);
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
            })
            .collect(),
    };
    ChannelRealization { h, sigma2 }
}

/// Draws the additive noise for one hop as interleaved reals `(B, 2k)`, each
/// component `N(0, sigma^2 / 2)`.
pub fn sample_noise<F: Scalar>(sigma2: f64, k: usize, key: &HopKey<'_>) -> Array2<F> {
    let b = key.image_indices.len();
    let mut out = Array2::zeros((b, 2 * k));
    if sigma2 == 0.0 {
        return out;
    }
    let std = (sigma2 / 2.0).sqrt();
    for (row, &img) in key.image_indices.iter().enumerate() {
        let mut rng = keys::rng_for(key.master, "noise", &[img, key.hop]);
        for slot in out.row_mut(row).iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *slot = F::of(n * std);
        }
    }
    out
}

/// `y = h x + n` on interleaved-real rows; shared by the inference path and
/// the tape op so both produce bit-identical numbers.
fn rotate_rows<F: Scalar>(x: ArrayView2<'_, F>, h: &[Complex<f64>]) -> Array2<F> {
    let (b, w) = x.dim();
    debug_assert_eq!(h.len(), b);
    let mut out = Array2::zeros((b, w));
    for i in 0..b {
        let (hr, hi) = (F::of(h[i].re), F::of(h[i].im));
        let xrow = x.row(i);
        let mut orow = out.row_mut(i);
        for j in 0..w / 2 {
            let (re, im) = (xrow[2 * j], xrow[2 * j + 1]);
            orow[2 * j] = hr * re - hi * im;
            orow[2 * j + 1] = hr * im + hi * re;
        }
    }
    out
}

/// The equalizer divides by `h`; magnitudes below the epsilon floor are
/// clamped (same phase) and counted.
fn equalizer_gains(r: &ChannelRealization, stats: &mut ChannelStats) -> Vec<Complex<f64>> {
    r.h.iter()
        .map(|&h| {
            let mag = h.norm();
            let h_eff = if mag < DEEP_FADE_EPS {
                stats.deep_fade_guards += 1;
                log::warn!("equalize: |h| = {mag:.3e} below epsilon floor, clamping");
                if mag == 0.0 {
                    Complex::new(DEEP_FADE_EPS, 0.0)
                } else {
                    h * (DEEP_FADE_EPS / mag)
                }
            } else {
                h
            };
            h_eff.inv()
        })
        .collect()
}

/// Applies the channel to a symbol batch: `y = h x + n`. The output is a raw
/// received array, not power-normalized.
pub fn apply<F: Scalar>(
    x: &SymbolBatch<F>,
    realization: &ChannelRealization,
    key: &HopKey<'_>,
) -> Array2<Complex<F>> {
    assert_eq!(x.batch(), realization.h.len(), "one fading gain per image");
    assert_eq!(x.batch(), key.image_indices.len());
    let noise = sample_noise::<F>(realization.sigma2, x.k(), key);
    let mut y = rotate_rows(x.interleaved().view(), &realization.h);
    y += &noise;
    SymbolBatch::from_interleaved(y).expect("valid width").as_complex()
}

/// Zero-forcing equalization `y / h` with perfect receiver CSI.
pub fn equalize<F: Scalar>(
    y: ArrayView2<'_, Complex<F>>,
    realization: &ChannelRealization,
    stats: &mut ChannelStats,
) -> Array2<Complex<F>> {
    assert_eq!(y.nrows(), realization.h.len(), "one fading gain per image");
    let inv = equalizer_gains(realization, stats);
    let interleaved = SymbolBatch::from_complex(y);
    let out = rotate_rows(interleaved.interleaved().view(), &inv);
    SymbolBatch::from_interleaved(out).expect("valid width").as_complex()
}

/// Tape op for `y = h x + n` with the noise drawn outside the graph
/// (reparameterization): gradients flow through `x` as multiplication by
/// `conj(h)`.
pub fn op_apply_channel<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    realization: &ChannelRealization,
    key: &HopKey<'_>,
) -> Var {
    let shape = g.shape(x).to_vec();
    assert_eq!(shape.len(), 2, "channel expects (B, 2k)");
    let k = shape[1] / 2;
    let noise = sample_noise::<F>(realization.sigma2, k, key);
    let noise_var = g.constant(noise.into_dyn());
    let rotated = op_rotate_rows(g, x, realization.h.clone());
    g.add(rotated, noise_var)
}

/// Tape op for zero-forcing equalization.
pub fn op_equalize<F: Scalar>(
    g: &mut Graph<F>,
    y: Var,
    realization: &ChannelRealization,
    stats: &mut ChannelStats,
) -> Var {
    let inv = equalizer_gains(realization, stats);
    op_rotate_rows(g, y, inv)
}

/// Multiplies every complex symbol of row `i` by the per-row constant `h[i]`.
/// Backward multiplies the gradient by `conj(h[i])`.
fn op_rotate_rows<F: Scalar>(g: &mut Graph<F>, x: Var, h: Vec<Complex<f64>>) -> Var {
    let shape = g.shape(x).to_vec();
    assert_eq!(shape.len(), 2);
    assert_eq!(shape[0], h.len(), "one gain per row");
    let xv = g.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let value = rotate_rows(xv, &h).into_dyn();
    let backward = g.grad_needed(&[x]).then(|| -> Box<dyn Fn(&tapegrad::graph::BackwardCtx<'_, F>) -> Vec<Option<ArrayD<F>>>> {
        let conj: Vec<Complex<f64>> = h.iter().map(Complex::conj).collect();
        Box::new(move |ctx| {
            let gv = ctx.grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            vec![Some(rotate_rows(gv, &conj).into_dyn())]
        })
    });
    g.push_op(value, vec![x], backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn snr_conversion_closed_forms() {
        assert!((snr_to_noise_power(0.0) - 1.0).abs() < 1e-12);
        assert!((snr_to_noise_power(18.0) - 10f64.powf(-1.8)).abs() < 1e-12);
        assert!((snr_to_noise_power(18.0) - 0.015_848_93).abs() < 1e-7);
        assert_eq!(snr_to_noise_power(f64::INFINITY), 0.0);
    }

    #[test]
    fn awgn_gain_is_unity() {
        let cfg = ChannelConfig { kind: ChannelKind::Awgn, snr_db: 10.0 };
        let idx: Vec<u64> = (0..5).collect();
        let r = sample_realization(&cfg, &HopKey { master: 1, image_indices: &idx, hop: 1 });
        assert!(r.h.iter().all(|&h| h == Complex::new(1.0, 0.0)));
    }

    #[test]
    fn rayleigh_mean_square_gain_is_unity() {
        let cfg = ChannelConfig { kind: ChannelKind::Rayleigh, snr_db: 10.0 };
        let n = 1_000_000usize;
        let idx: Vec<u64> = (0..n as u64).collect();
        let r = sample_realization(&cfg, &HopKey { master: 3, image_indices: &idx, hop: 1 });
        let mean_sq: f64 = r.h.iter().map(|h| h.norm_sqr()).sum::<f64>() / n as f64;
        assert!((mean_sq - 1.0).abs() < 0.01, "E|h|^2 = {mean_sq}");
    }

    #[test]
    fn rayleigh_gain_power_is_exponential() {
        // |h|^2 ~ Exp(1): Kolmogorov-Smirnov at the 1% level on 1e5 draws.
        let cfg = ChannelConfig { kind: ChannelKind::Rayleigh, snr_db: 10.0 };
        let n = 100_000usize;
        let idx: Vec<u64> = (0..n as u64).collect();
        let r = sample_realization(&cfg, &HopKey { master: 11, image_indices: &idx, hop: 2 });
        let mut pow: Vec<f64> = r.h.iter().map(|h| h.norm_sqr()).collect();
        pow.sort_by(f64::total_cmp);
        let mut d = 0.0f64;
        for (i, &x) in pow.iter().enumerate() {
            let cdf = 1.0 - (-x).exp();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((cdf - lo).abs()).max((cdf - hi).abs());
        }
        // critical value at alpha = 0.01: 1.628 / sqrt(n)
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} exceeds {crit}");
    }

    fn unit_symbols(b: usize, k: usize) -> SymbolBatch<f64> {
        // deterministic unit-power rows
        let mut x = Array2::<f64>::zeros((b, 2 * k));
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j % 2 == 0 { 1.0 } else { 0.0 };
            }
        }
        SymbolBatch::from_interleaved(x).unwrap()
    }

    #[test]
    fn noiseless_identity_channel() {
        let x = unit_symbols(3, 16);
        let r = ChannelRealization { h: vec![Complex::new(1.0, 0.0); 3], sigma2: 0.0 };
        let idx: Vec<u64> = (0..3).collect();
        let y = apply(&x, &r, &HopKey { master: 5, image_indices: &idx, hop: 1 });
        let want = x.as_complex();
        assert_eq!(y, want);
    }

    #[test]
    fn noise_statistics_match_sigma2() {
        // zero signal: received power equals sigma^2 within 1% over 1e6 symbols
        for snr_db in [0.0, 10.0, 18.0] {
            let sigma2 = snr_to_noise_power(snr_db);
            let (b, k) = (500usize, 1000usize);
            let idx: Vec<u64> = (0..b as u64).collect();
            let key = HopKey { master: 17, image_indices: &idx, hop: 3 };
            let noise = sample_noise::<f64>(sigma2, k, &key);
            let mut acc = 0.0;
            for row in noise.rows() {
                for j in 0..k {
                    acc += row[2 * j] * row[2 * j] + row[2 * j + 1] * row[2 * j + 1];
                }
            }
            let per_symbol = acc / (b * k) as f64;
            assert!(
                (per_symbol / sigma2 - 1.0).abs() < 0.01,
                "snr {snr_db}: measured {per_symbol} vs sigma2 {sigma2}"
            );
        }
    }

    #[test]
    fn equalize_inverts_fading_exactly_without_noise() {
        let x = unit_symbols(2, 8);
        let h = vec![Complex::new(2.0, 0.0), Complex::new(0.3, -1.2)];
        let r = ChannelRealization { h, sigma2: 0.0 };
        let idx: Vec<u64> = (0..2).collect();
        let y = apply(&x, &r, &HopKey { master: 9, image_indices: &idx, hop: 1 });
        let mut stats = ChannelStats::default();
        let z = equalize(y.view(), &r, &mut stats);
        let want = x.as_complex();
        for (got, want) in z.iter().zip(want.iter()) {
            assert!((got - want).norm() < 1e-6 * want.norm().max(1.0));
        }
        assert_eq!(stats.deep_fade_guards, 0);
    }

    #[test]
    fn equalized_noise_power_is_sigma2_over_h2() {
        let (b, k) = (500usize, 1000usize);
        let x = unit_symbols(b, k);
        let h = Complex::new(0.6, 0.8); // |h|^2 = 1, scaled below
        let hs = h * 0.7;
        let r = ChannelRealization { h: vec![hs; b], sigma2: snr_to_noise_power(10.0) };
        let idx: Vec<u64> = (0..b as u64).collect();
        let y = apply(&x, &r, &HopKey { master: 23, image_indices: &idx, hop: 4 });
        let mut stats = ChannelStats::default();
        let z = equalize(y.view(), &r, &mut stats);
        let x_c = x.as_complex();
        let mut acc = 0.0;
        for (zi, xi) in z.iter().zip(x_c.iter()) {
            acc += (zi - xi).norm_sqr();
        }
        let measured = acc / (b * k) as f64;
        let want = r.sigma2 / hs.norm_sqr();
        assert!((measured / want - 1.0).abs() < 0.01, "measured {measured} vs {want}");
    }

    #[test]
    fn deep_fade_guard_counts_events() {
        let y = Array2::from_elem((1, 4), Complex::new(1.0f64, 0.0));
        let r = ChannelRealization { h: vec![Complex::new(0.0, 0.0)], sigma2: 0.0 };
        let mut stats = ChannelStats::default();
        let z = equalize(y.view(), &r, &mut stats);
        assert_eq!(stats.deep_fade_guards, 1);
        assert!(z.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
    }

    #[test]
    fn draws_depend_only_on_seed_image_and_hop() {
        let key1 = HopKey { master: 7, image_indices: &[10, 11, 12], hop: 2 };
        let noise1 = sample_noise::<f32>(0.1, 8, &key1);
        // same images split across different batch layouts
        let key_a = HopKey { master: 7, image_indices: &[10], hop: 2 };
        let key_b = HopKey { master: 7, image_indices: &[11, 12], hop: 2 };
        let na = sample_noise::<f32>(0.1, 8, &key_a);
        let nb = sample_noise::<f32>(0.1, 8, &key_b);
        assert_eq!(noise1.row(0), na.row(0));
        assert_eq!(noise1.row(1), nb.row(0));
        assert_eq!(noise1.row(2), nb.row(1));
        // different hop, different noise
        let key3 = HopKey { master: 7, image_indices: &[10, 11, 12], hop: 3 };
        let noise3 = sample_noise::<f32>(0.1, 8, &key3);
        assert_ne!(noise1, noise3);
    }

    #[test]
    fn gradient_passes_through_apply_and_equalize() {
        // FD check on a 4-symbol toy case, double precision.
        use tapegrad::fd::{fd_grad_tensor, max_rel_err};
        let x0 = Array1::from_vec(vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9, 0.05, -1.3])
            .into_shape_with_order((1, 8))
            .unwrap();
        let h = vec![Complex::new(0.8, -0.5)];
        let r = ChannelRealization { h, sigma2: 0.25 };
        let idx = [4u64];
        let target: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let target = Array1::from_vec(target).into_shape_with_order((1, 8)).unwrap();

        let loss = |x: &ndarray::ArrayD<f64>| -> (f64, Option<ndarray::ArrayD<f64>>) {
            let mut g = Graph::<f64>::new();
            let xv = g.leaf(x.clone(), true);
            let key = HopKey { master: 99, image_indices: &idx, hop: 1 };
            let y = op_apply_channel(&mut g, xv, &r, &key);
            let mut stats = ChannelStats::default();
            let z = op_equalize(&mut g, y, &r, &mut stats);
            let t = g.constant(target.clone().into_dyn());
            let l = g.mean_sq_diff(z, t);
            let value = g.value(l).iter().next().copied().unwrap();
            let mut grads = g.backward(l);
            (value, grads.take(xv))
        };

        let x0d = x0.clone().into_dyn();
        let (_, analytic) = loss(&x0d);
        let analytic = analytic.unwrap();
        let fd = fd_grad_tensor(&mut |x| loss(x).0, &x0d, 1e-6);
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-4, "channel gradient rel err {err}");
    }
}
