//! Image codecs: the ViT-based `vitsc` encoder/decoder and the convolutional
//! `deepjscc` baseline, behind one interface. Both map `(B, C, H, W)` images
//! to power-normalized complex channel symbols and back.

mod deepjscc;
mod vitsc;

pub use deepjscc::DeepJscc;
pub use vitsc::Vitsc;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::keys;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayD, IxDyn};
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use tapegrad::nn::{ParamVars, Params};
use tapegrad::{Graph, Scalar, Var};

/// Exact rational, serialized as `"num/den"`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Self {
        assert!(den > 0, "zero denominator");
        Ratio { num, den }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |x: &str| -> Result<u32> {
            x.trim().parse::<u32>().map_err(|_| Error::Config(format!("invalid rational component {x:?}")))
        };
        match s.split_once('/') {
            Some((n, d)) => {
                let den = parse(d)?;
                if den == 0 {
                    return Err(Error::Config("rational denominator must be nonzero".into()));
                }
                Ok(Ratio::new(parse(n)?, den))
            }
            None => Ok(Ratio::new(parse(s)?, 1)),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Vitsc,
    Deepjscc,
}

/// Architecture hyperparameters. `k = round(cbr * n)` complex symbols per
/// image; the layer counts for `vitsc` are fixed at 4 encoder / 2 decoder
/// transformer layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub cbr: Ratio,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Vitsc,
            cbr: Ratio::new(1, 6),
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 256,
            num_heads: 8,
            enc_layers: 4,
            dec_layers: 2,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// Source dimension n (pixels per image across channels).
    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Complex channel symbols per image, `k = round(cbr * n)`.
    pub fn symbols(&self) -> usize {
        (self.cbr.value() * self.pixels() as f64).round() as usize
    }

    /// Token count for the ViT layout.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.channels == 0 {
            return fail("image_size and channels must be positive".into());
        }
        if self.symbols() == 0 {
            return fail(format!("cbr {} yields zero channel symbols", self.cbr));
        }
        match self.arch {
            Arch::Vitsc => {
                if self.enc_layers != 4 || self.dec_layers != 2 {
                    return fail(format!(
                        "vitsc uses 4 encoder / 2 decoder layers, got {}/{}",
                        self.enc_layers, self.dec_layers
                    ));
                }
                if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
                    return fail(format!(
                        "patch_size {} must divide image_size {}",
                        self.patch_size, self.image_size
                    ));
                }
                if self.embed_dim % self.num_heads != 0 {
                    return fail(format!(
                        "embed_dim {} must divide into num_heads {}",
                        self.embed_dim, self.num_heads
                    ));
                }
                let tokens = self.tokens();
                if (2 * self.symbols()) % tokens != 0 {
                    return fail(format!(
                        "2k = {} must be divisible by the token count {}",
                        2 * self.symbols(),
                        tokens
                    ));
                }
            }
            Arch::Deepjscc => {
                if self.image_size % 4 != 0 {
                    return fail(format!(
                        "deepjscc downsamples by 4; image_size {} must be divisible by 4",
                        self.image_size
                    ));
                }
                let spatial = (self.image_size / 4) * (self.image_size / 4);
                if (2 * self.symbols()) % spatial != 0 {
                    return fail(format!(
                        "2k = {} must be divisible by the {}-cell feature map",
                        2 * self.symbols(),
                        spatial
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A batch of length-k complex symbol vectors, stored as interleaved reals
/// `(re, im, re, im, ...)` of width `2k`. Encoder outputs satisfy the
/// per-image unit average power constraint; received (noisy) symbols use the
/// same container without that invariant.
#[derive(Clone, Debug)]
pub struct SymbolBatch<F: Scalar = f32> {
    interleaved: Array2<F>,
}

impl<F: Scalar> SymbolBatch<F> {
    pub fn from_interleaved(interleaved: Array2<F>) -> Result<Self> {
        if interleaved.ncols() == 0 || interleaved.ncols() % 2 != 0 {
            return Err(Error::Argument(format!(
                "symbol batch width {} is not an even, positive number of reals",
                interleaved.ncols()
            )));
        }
        Ok(SymbolBatch { interleaved })
    }

    pub fn from_complex(symbols: ArrayView2<'_, Complex<F>>) -> Self {
        let (b, k) = symbols.dim();
        let mut interleaved = Array2::zeros((b, 2 * k));
        for (i, row) in symbols.rows().into_iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                interleaved[[i, 2 * j]] = c.re;
                interleaved[[i, 2 * j + 1]] = c.im;
            }
        }
        SymbolBatch { interleaved }
    }

    pub fn batch(&self) -> usize {
        self.interleaved.nrows()
    }

    /// Complex symbols per image.
    pub fn k(&self) -> usize {
        self.interleaved.ncols() / 2
    }

    pub fn interleaved(&self) -> &Array2<F> {
        &self.interleaved
    }

    pub fn as_complex(&self) -> Array2<Complex<F>> {
        let (b, k) = (self.batch(), self.k());
        Array2::from_shape_fn((b, k), |(i, j)| {
            Complex::new(self.interleaved[[i, 2 * j]], self.interleaved[[i, 2 * j + 1]])
        })
    }

    /// Average symbol power `(1/k) * sum |x_j|^2` per image, in f64.
    pub fn power_per_image(&self) -> Vec<f64> {
        let k = self.k() as f64;
        self.interleaved
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|v| v.f64().powi(2)).sum::<f64>() / k)
            .collect()
    }

    /// Checks the unit-power invariant within `tol`.
    pub fn validate_power(&self, tol: f64) -> Result<()> {
        for (i, p) in self.power_per_image().iter().enumerate() {
            if (p - 1.0).abs() >= tol {
                return Err(Error::Numeric(format!("image {i}: average symbol power {p} violates 1 +/- {tol}")));
            }
        }
        Ok(())
    }
}

/// Norm floor below which rows are treated as degenerate.
const NORM2_FLOOR: f64 = 1e-24;

/// Pairs consecutive reals into complex symbols and rescales so the total
/// power is exactly `k` (unit average power per symbol).
pub fn power_normalize<F: Scalar>(raw: ArrayView1<'_, F>) -> Result<Array1<Complex<F>>> {
    if raw.len() % 2 != 0 || raw.is_empty() {
        return Err(Error::Argument(format!("raw length {} must be a positive even number", raw.len())));
    }
    let k = raw.len() / 2;
    let norm2: f64 = raw.iter().map(|v| v.f64().powi(2)).sum();
    if norm2 < NORM2_FLOOR {
        return Err(Error::Numeric("power_normalize: input is identically zero".into()));
    }
    let scale = (k as f64 / norm2).sqrt();
    let sf = F::of(scale);
    Ok(Array1::from_shape_fn(k, |j| Complex::new(raw[2 * j] * sf, raw[2 * j + 1] * sf)))
}

/// Differentiable per-row power normalization on the tape: input `(B, 2k)`,
/// output `(B, 2k)` with every row scaled to squared norm `k`. Degenerate
/// all-zero rows hit an epsilon floor and are flagged in the logs.
pub fn op_power_normalize<F: Scalar>(g: &mut Graph<F>, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    assert_eq!(shape.len(), 2, "power normalization expects (B, 2k)");
    let (b, two_k) = (shape[0], shape[1]);
    assert!(two_k % 2 == 0 && two_k > 0);
    let k = two_k / 2;

    let xv = g.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut norms2 = vec![0f64; b];
    let mut scales = vec![0f64; b];
    let mut out = Array2::<F>::zeros((b, two_k));
    for (i, row) in xv.rows().into_iter().enumerate() {
        let mut n2: f64 = row.iter().map(|v| v.f64().powi(2)).sum();
        if n2 < NORM2_FLOOR {
            log::warn!("power_normalize: all-zero symbol row {i}; applying epsilon floor");
            n2 = NORM2_FLOOR;
        }
        let s = (k as f64 / n2).sqrt();
        norms2[i] = n2;
        scales[i] = s;
        let sf = F::of(s);
        out.row_mut(i).assign(&row.mapv(|v| v * sf));
    }

    let backward = g.grad_needed(&[x]).then(|| -> Box<dyn Fn(&tapegrad::graph::BackwardCtx<'_, F>) -> Vec<Option<ArrayD<F>>>> {
        Box::new(move |ctx| {
            let xv = ctx.parents[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let gv = ctx.grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut dx = Array2::<F>::zeros((b, two_k));
            for i in 0..b {
                let (xrow, grow) = (xv.row(i), gv.row(i));
                let dot: f64 = xrow.iter().zip(grow.iter()).map(|(&a, &g)| a.f64() * g.f64()).sum();
                let s = scales[i];
                let coef = F::of(s * dot / norms2[i]);
                let sf = F::of(s);
                let mut drow = dx.row_mut(i);
                ndarray::Zip::from(&mut drow).and(&grow).and(&xrow).for_each(|d, &g, &x| {
                    *d = sf * g - coef * x;
                });
            }
            vec![Some(dx.into_dyn())]
        })
    });
    g.push_op(out.into_dyn(), vec![x], backward)
}

/// One codec family behind a common differentiable interface.
pub trait Codec {
    fn config(&self) -> &ModelConfig;

    /// Fresh, seeded parameter store. Same seed, same bits.
    fn init_params<F: Scalar>(&self, seed: u64) -> Params<F>;

    /// `(B, C, H, W)` image node -> `(B, 2k)` power-normalized symbol node.
    fn encode_on<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, images: Var) -> Var;

    /// `(B, 2k)` received-symbol node -> `(B, C, H, W)` image node in `[0, 1]`.
    fn decode_on<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, symbols: Var) -> Var;
}

/// Runtime-selected codec.
pub enum AnyCodec {
    Vitsc(Vitsc),
    Deepjscc(DeepJscc),
}

impl AnyCodec {
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config.arch {
            Arch::Vitsc => AnyCodec::Vitsc(Vitsc::new(config.clone())),
            Arch::Deepjscc => AnyCodec::Deepjscc(DeepJscc::new(config.clone())),
        })
    }
}

impl Codec for AnyCodec {
    fn config(&self) -> &ModelConfig {
        match self {
            AnyCodec::Vitsc(m) => m.config(),
            AnyCodec::Deepjscc(m) => m.config(),
        }
    }

    fn init_params<F: Scalar>(&self, seed: u64) -> Params<F> {
        match self {
            AnyCodec::Vitsc(m) => m.init_params(seed),
            AnyCodec::Deepjscc(m) => m.init_params(seed),
        }
    }

    fn encode_on<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, images: Var) -> Var {
        match self {
            AnyCodec::Vitsc(m) => m.encode_on(g, pv, images),
            AnyCodec::Deepjscc(m) => m.encode_on(g, pv, images),
        }
    }

    fn decode_on<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, symbols: Var) -> Var {
        match self {
            AnyCodec::Vitsc(m) => m.decode_on(g, pv, symbols),
            AnyCodec::Deepjscc(m) => m.decode_on(g, pv, symbols),
        }
    }
}

/// Trainable parameter stores (theta for the encoder prefix `enc.`, phi for
/// the decoder prefix `dec.`) plus the architecture that shapes them.
pub struct CodecParams<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Params<F>,
    pub version: u32,
}

/// Initialization seed derivation shared by both codecs.
pub(crate) fn init_rng(seed: u64, arch: Arch) -> rand_chacha::ChaCha12Rng {
    let tag = match arch {
        Arch::Vitsc => 1,
        Arch::Deepjscc => 2,
    };
    keys::rng_for(seed, "init", &[tag])
}

/// Builds a seeded codec of the configured architecture.
pub fn build_codec(config: &ModelConfig, seed: u64) -> Result<(AnyCodec, CodecParams<f32>)> {
    let codec = AnyCodec::from_config(config)?;
    let params = codec.init_params::<f32>(seed);
    Ok((codec, CodecParams { config: config.clone(), params, version: CHECKPOINT_VERSION }))
}

fn check_image_shape(config: &ModelConfig, batch: &ImageBatch<f32>) -> Result<()> {
    let shape = batch.data.shape();
    let want = [config.channels, config.image_size, config.image_size];
    if shape[1..] != want {
        return Err(Error::Argument(format!(
            "image batch shape {:?} does not match configured {:?}",
            &shape[1..],
            want
        )));
    }
    Ok(())
}

/// Inference-mode encode: images -> power-normalized symbols.
pub fn encode(codec: &AnyCodec, cp: &CodecParams<f32>, batch: &ImageBatch<f32>) -> Result<SymbolBatch<f32>> {
    check_image_shape(&cp.config, batch)?;
    let mut g = Graph::<f32>::inference();
    let pv = g.register_params(&cp.params, false);
    let images = g.constant(batch.data.clone().into_dyn());
    let symbols = codec.encode_on(&mut g, &pv, images);
    let out = g.value(symbols).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    SymbolBatch::from_interleaved(out)
}

/// Inference-mode decode: received symbols -> images in `[0, 1]`.
pub fn decode(codec: &AnyCodec, cp: &CodecParams<f32>, received: &SymbolBatch<f32>) -> Result<ImageBatch<f32>> {
    if received.k() != cp.config.symbols() {
        return Err(Error::Argument(format!(
            "received {} symbols per image, configuration expects {}",
            received.k(),
            cp.config.symbols()
        )));
    }
    let mut g = Graph::<f32>::inference();
    let pv = g.register_params(&cp.params, false);
    let symbols = g.constant(received.interleaved().clone().into_dyn());
    let images = codec.decode_on(&mut g, &pv, symbols);
    let out = g.value(images).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
    Ok(ImageBatch::from_bounded(out))
}

// ---------------------------------------------------------------------------
// checkpoint container

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SEMHOPCK";

/// Training provenance stored alongside the parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"init"`, `"single_hop"`, or `"recursive"`.
    pub phase: String,
    /// Snapshot of the training configuration, if any.
    pub train: Option<serde_json::Value>,
    /// Per-step total loss history.
    pub loss_history: Vec<f64>,
    pub epochs: usize,
}

impl CheckpointMeta {
    pub fn fresh() -> Self {
        CheckpointMeta { phase: "init".into(), train: None, loss_history: Vec::new(), epochs: 0 }
    }
}

pub fn save_checkpoint(path: &Path, cp: &CodecParams<f32>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(cp.version)?;
    let config = serde_json::to_vec(&cp.config).expect("config serializes");
    w.write_u32::<LittleEndian>(config.len() as u32)?;
    w.write_all(&config)?;
    let meta_bytes = serde_json::to_vec(meta).expect("meta serializes");
    w.write_u32::<LittleEndian>(meta_bytes.len() as u32)?;
    w.write_all(&meta_bytes)?;
    w.write_u32::<LittleEndian>(cp.params.len() as u32)?;
    for (name, value) in cp.params.iter() {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(value.ndim() as u8)?;
        for &d in value.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in value.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AnyCodec, CodecParams<f32>, CheckpointMeta)> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a semhop checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let config_len = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    let mut buf = vec![0u8; config_len];
    r.read_exact(&mut buf).map_err(|e| bad(e.to_string()))?;
    let config: ModelConfig = serde_json::from_slice(&buf).map_err(|e| bad(format!("config: {e}")))?;
    let meta_len = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    let mut buf = vec![0u8; meta_len];
    r.read_exact(&mut buf).map_err(|e| bad(e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&buf).map_err(|e| bad(format!("meta: {e}")))?;

    let n_params = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    let mut params = Params::<f32>::new();
    for _ in 0..n_params {
        let name_len = r.read_u16::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| bad(format!("param name: {e}")))?;
        let ndim = r.read_u8().map_err(|e| bad(e.to_string()))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f32::<LittleEndian>().map_err(|e| bad(e.to_string()))?);
        }
        params.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
    }

    // Shapes are fully determined by the config; verify agreement.
    let codec = AnyCodec::from_config(&config).map_err(|e| bad(format!("embedded config invalid: {e}")))?;
    let expected = codec.init_params::<f32>(0);
    if expected.len() != params.len() {
        return Err(bad(format!("expected {} parameters, found {}", expected.len(), params.len())));
    }
    for (name, value) in expected.iter() {
        if !params.contains(name) {
            return Err(bad(format!("missing parameter {name}")));
        }
        if params.get(name).shape() != value.shape() {
            return Err(bad(format!(
                "parameter {name} has shape {:?}, config implies {:?}",
                params.get(name).shape(),
                value.shape()
            )));
        }
    }

    Ok((codec, CodecParams { config, params, version }, meta))
}

#[cfg(test)]
mod tests;
