//! Evaluation metrics, experiment grids, and metrics-file plumbing.

pub mod baseline;
pub mod plot;

use crate::channel::{ChannelKind, ChannelStats};
use crate::codec::{AnyCodec, CodecParams, Ratio};
use crate::data::{ImageBatch, ImageSet};
use crate::error::{Error, Result};
use crate::keys;
use crate::multihop::{self, ChainOptions};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const PSNR_MAX: f64 = 255.0;

/// Per-image PSNR plus batch aggregates. Images identical to the reference
/// produce the `+inf` sentinel; those are flagged and excluded from the mean
/// and standard deviation.
#[derive(Clone, Debug)]
pub struct PsnrResult {
    pub per_image: Vec<f64>,
    pub mean_db: f64,
    pub std_db: f64,
    pub infinite_count: usize,
}

/// PSNR on the 0..255 scale without integer rounding; the candidate is
/// clipped to `[0, 1]` first.
pub fn psnr(reference: &ImageBatch<f32>, candidate: &ImageBatch<f32>) -> Result<PsnrResult> {
    if reference.data.shape() != candidate.data.shape() {
        return Err(Error::Argument(format!(
            "psnr: shape {:?} vs {:?}",
            reference.data.shape(),
            candidate.data.shape()
        )));
    }
    let per_image = per_image_psnr(reference, candidate);
    let (mean_db, std_db, infinite_count) = aggregate_psnr(&per_image);
    Ok(PsnrResult { per_image, mean_db, std_db, infinite_count })
}

fn per_image_psnr(reference: &ImageBatch<f32>, candidate: &ImageBatch<f32>) -> Vec<f64> {
    let n = reference.pixels_per_image() as f64;
    reference
        .data
        .axis_iter(Axis(0))
        .zip(candidate.data.axis_iter(Axis(0)))
        .map(|(r, c)| {
            let sse: f64 = r
                .iter()
                .zip(c.iter())
                .map(|(&rv, &cv)| {
                    let d = (rv as f64 - (cv as f64).clamp(0.0, 1.0)) * PSNR_MAX;
                    d * d
                })
                .sum();
            let mse = sse / n;
            if mse == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (PSNR_MAX * PSNR_MAX / mse).log10()
            }
        })
        .collect()
}

/// Mean and population std over the finite entries; infinite sentinels are
/// counted separately. All-infinite input yields an infinite mean.
pub fn aggregate_psnr(values: &[f64]) -> (f64, f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let infinite_count = values.len() - finite.len();
    if finite.is_empty() {
        return (f64::INFINITY, 0.0, infinite_count);
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / finite.len() as f64;
    (mean, var.sqrt(), infinite_count)
}

/// One row of the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scheme: String,
    pub channel_kind: String,
    pub cbr: Ratio,
    pub train_snr: String,
    pub eval_snr_db: f64,
    pub hop: u32,
    pub psnr_mean_db: f64,
    pub psnr_std_db: f64,
    pub n_images: u32,
    pub seed: u64,
}

impl MetricsRecord {
    fn sort_key(&self) -> (String, String, String, String, u64, u32, u64, u64, u32, u64) {
        (
            self.scheme.clone(),
            self.channel_kind.clone(),
            self.cbr.to_string(),
            self.train_snr.clone(),
            self.eval_snr_db.to_bits(),
            self.hop,
            self.psnr_mean_db.to_bits(),
            self.psnr_std_db.to_bits(),
            self.n_images,
            self.seed,
        )
    }
}

pub fn channel_kind_label(kind: ChannelKind) -> &'static str {
    match kind {
        ChannelKind::Awgn => "awgn",
        ChannelKind::Rayleigh => "rayleigh",
    }
}

/// Evaluation grid parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub hops: usize,
    pub snr_list: Vec<f64>,
    /// Number of test images (taken from the head of the split).
    pub n_images: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub quantize_between_hops: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hops: 10,
            snr_list: vec![18.0],
            n_images: 1000,
            batch_size: 64,
            seed: 123,
            quantize_between_hops: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops < 1 {
            return Err(Error::Config("eval.hops must be >= 1".into()));
        }
        if self.snr_list.is_empty() {
            return Err(Error::Config("eval.snr_list must be non-empty".into()));
        }
        if self.n_images < 1 || self.batch_size < 1 {
            return Err(Error::Config("eval.n_images and eval.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Runs the multi-hop chain over the test set for every eval SNR and records
/// PSNR(s_0, s_i) for every hop. Emits exactly `hops * |snr_list|` records.
pub fn evaluate_chain(
    codec: &AnyCodec,
    cp: &CodecParams<f32>,
    test: &ImageSet,
    kind: ChannelKind,
    eval: &EvalConfig,
    scheme: &str,
    train_snr: &str,
) -> Result<(Vec<MetricsRecord>, ChannelStats)> {
    eval.validate()?;
    if eval.n_images > test.count() {
        return Err(Error::Argument(format!(
            "eval.n_images {} exceeds test set size {}",
            eval.n_images,
            test.count()
        )));
    }
    let mut records = Vec::with_capacity(eval.hops * eval.snr_list.len());
    let mut stats = ChannelStats::default();
    let options = ChainOptions { quantize_between_hops: eval.quantize_between_hops };

    for &snr_db in &eval.snr_list {
        let channel = crate::channel::ChannelConfig { kind, snr_db };
        channel.validate()?;
        let master = keys::sub_master(eval.seed, "eval", &[snr_db.to_bits()]);
        let mut per_hop: Vec<Vec<f64>> = vec![Vec::with_capacity(eval.n_images); eval.hops];

        let mut start = 0usize;
        while start < eval.n_images {
            let end = (start + eval.batch_size).min(eval.n_images);
            let data = test.images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            let batch = ImageBatch::from_bounded(data);
            let indices: Vec<u64> = (start as u64..end as u64).collect();
            let trace =
                multihop::chain(codec, cp, &batch, eval.hops, &channel, master, &indices, options, &mut stats)?;
            for (i, rec) in trace.reconstructions.iter().enumerate() {
                per_hop[i].extend(per_image_psnr(&batch, rec));
            }
            start = end;
        }

        for (i, values) in per_hop.iter().enumerate() {
            let (mean_db, std_db, n_inf) = aggregate_psnr(values);
            if n_inf > 0 {
                log::warn!("evaluate_chain: {n_inf} infinite-PSNR images at snr {snr_db} hop {}", i + 1);
            }
            records.push(MetricsRecord {
                scheme: scheme.to_string(),
                channel_kind: channel_kind_label(kind).to_string(),
                cbr: cp.config.cbr,
                train_snr: train_snr.to_string(),
                eval_snr_db: snr_db,
                hop: (i + 1) as u32,
                psnr_mean_db: mean_db,
                psnr_std_db: std_db,
                n_images: eval.n_images as u32,
                seed: eval.seed,
            });
        }
    }
    Ok((records, stats))
}

pub const CSV_HEADER: &str =
    "scheme,channel_kind,cbr,train_snr,eval_snr_db,hop,psnr_mean_db,psnr_std_db,n_images,seed";

/// Writes records as CSV with the fixed header and a stable row order
/// (sorted by every column, left to right).
pub fn export_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.sort_key());
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        // `{}` float formatting round-trips exactly
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&r.scheme),
            csv_field(&r.channel_kind),
            r.cbr,
            csv_field(&r.train_snr),
            r.eval_snr_db,
            r.hop,
            r.psnr_mean_db,
            r.psnr_std_db,
            r.n_images,
            r.seed
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Quotes a field if it contains CSV metacharacters (train_snr lists do).
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reads a metrics CSV produced by [`export_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Argument(e.to_string()))?.clone();
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Argument(format!("unexpected CSV header {headers:?}")));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Argument(e.to_string()))?;
        let field = |i: usize| -> &str { row.get(i).unwrap_or("") };
        let parse_f64 = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|_| Error::Argument(format!("bad float {:?} in column {i}", field(i))))
        };
        out.push(MetricsRecord {
            scheme: field(0).to_string(),
            channel_kind: field(1).to_string(),
            cbr: field(2).parse()?,
            train_snr: field(3).to_string(),
            eval_snr_db: parse_f64(4)?,
            hop: field(5).parse().map_err(|_| Error::Argument("bad hop".into()))?,
            psnr_mean_db: parse_f64(6)?,
            psnr_std_db: parse_f64(7)?,
            n_images: field(8).parse().map_err(|_| Error::Argument("bad n_images".into()))?,
            seed: field(9).parse().map_err(|_| Error::Argument("bad seed".into()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn batch_of(value: f32, n: usize) -> ImageBatch<f32> {
        ImageBatch::from_bounded(Array4::from_elem((n, 3, 32, 32), value))
    }

    #[test]
    fn psnr_closed_forms() {
        // identical -> +inf sentinel
        let a = batch_of(0.3, 2);
        let r = psnr(&a, &a).unwrap();
        assert!(r.per_image.iter().all(|v| v.is_infinite()));
        assert_eq!(r.infinite_count, 2);

        // all-zeros vs all-ones: MSE = 255^2 -> 0 dB
        let zeros = batch_of(0.0, 3);
        let ones = batch_of(1.0, 3);
        let r = psnr(&zeros, &ones).unwrap();
        assert!((r.mean_db - 0.0).abs() < 0.01, "got {}", r.mean_db);
        assert_eq!(r.infinite_count, 0);

        // MSE = 65.025 on the 0..255 scale -> exactly 30 dB
        let delta = (65.025f64).sqrt() / 255.0;
        let cand = batch_of(delta as f32, 3);
        let r = psnr(&zeros, &cand).unwrap();
        assert!((r.mean_db - 30.0).abs() < 0.01, "got {}", r.mean_db);
    }

    #[test]
    fn psnr_clips_candidate_not_reference() {
        let reference = batch_of(1.0, 1);
        let mut wild = Array4::from_elem((1, 3, 32, 32), 2.0f32); // out of range
        wild[[0, 0, 0, 0]] = 1.0;
        let candidate = ImageBatch { data: wild };
        let r = psnr(&reference, &candidate).unwrap();
        assert!(r.per_image[0].is_infinite(), "clipping makes it identical to the all-ones reference");
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = batch_of(0.1, 2);
        let b = batch_of(0.1, 3);
        assert!(matches!(psnr(&a, &b), Err(Error::Argument(_))));
    }

    #[test]
    fn psnr_matches_mse_distortion_through_scaling() {
        use crate::training::mse_distortion;
        let mut rng = crate::keys::rng_for(3, "psnr-mse", &[]);
        for _ in 0..100 {
            let a = ImageBatch::from_bounded(Array4::from_shape_fn((1, 3, 32, 32), |_| {
                rand::Rng::random_range(&mut rng, 0.0..1.0f32)
            }));
            let b = ImageBatch::from_bounded(Array4::from_shape_fn((1, 3, 32, 32), |_| {
                rand::Rng::random_range(&mut rng, 0.0..1.0f32)
            }));
            let d = mse_distortion(&a, &b).unwrap();
            let p = psnr(&a, &b).unwrap().mean_db;
            let expected = 10.0 * (PSNR_MAX * PSNR_MAX / (d * PSNR_MAX * PSNR_MAX)).log10();
            assert!(
                (p - expected).abs() <= 1e-9 * expected.abs().max(1.0),
                "psnr {p} vs from-mse {expected}"
            );
        }
    }

    #[test]
    fn csv_round_trip_and_order() {
        let rec = |scheme: &str, snr: f64, hop: u32| MetricsRecord {
            scheme: scheme.into(),
            channel_kind: "awgn".into(),
            cbr: Ratio::new(1, 6),
            train_snr: "sampled[0,2,4]".into(),
            eval_snr_db: snr,
            hop,
            psnr_mean_db: 27.123456789,
            psnr_std_db: 1.25,
            n_images: 100,
            seed: 7,
        };
        let records = vec![rec("vitsc", 18.0, 2), rec("deepjscc", 18.0, 1), rec("vitsc", 6.0, 1)];
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("m.csv");
        export_metrics(&records, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert!(lines.next().unwrap().starts_with("deepjscc"));

        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 3);
        let mut sorted = records.clone();
        sorted.sort_by_key(|r| r.sort_key());
        assert_eq!(back, sorted);

        // header-only file for zero records
        let empty = dir.path().join("empty.csv");
        export_metrics(&[], &empty).unwrap();
        assert_eq!(std::fs::read_to_string(&empty).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(read_metrics(&empty).unwrap().is_empty());
    }

    #[test]
    fn aggregate_excludes_infinities() {
        let (mean, std, inf) = aggregate_psnr(&[30.0, f64::INFINITY, 20.0]);
        assert_eq!(inf, 1);
        assert!((mean - 25.0).abs() < 1e-12);
        assert!((std - 5.0).abs() < 1e-12);
        let (mean, std, inf) = aggregate_psnr(&[f64::INFINITY]);
        assert!(mean.is_infinite());
        assert_eq!(std, 0.0);
        assert_eq!(inf, 1);
    }
}
