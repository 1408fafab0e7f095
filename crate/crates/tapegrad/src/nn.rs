//! Named parameter stores and the layer building blocks used by the codecs.

use crate::conv::ConvSpec;
use crate::graph::{Graph, Var};
use crate::Scalar;
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Ordered map of named tensors. Insertion order is the canonical parameter
/// order for initialization, optimizer state, and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct Params<F: Scalar> {
    map: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Shape of every tensor, in insertion order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.map.iter().map(|(n, a)| (n.clone(), a.shape().to_vec())).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        let mut out = Params::new();
        for (name, value) in &self.map {
            out.insert(name.clone(), value.mapv(|v| G::of(v.f64())));
        }
        out
    }
}

/// Tape handles for a parameter store registered on a graph.
pub struct ParamVars {
    map: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.map.iter().map(|(n, &v)| (n, v))
    }
}

impl<F: Scalar> Graph<F> {
    /// Registers every parameter as a leaf. `trainable` controls whether
    /// gradients flow to them.
    pub fn register_params(&mut self, params: &Params<F>, trainable: bool) -> ParamVars {
        let mut map = IndexMap::new();
        for (name, value) in params.iter() {
            map.insert(name.clone(), self.leaf(value.clone(), trainable));
        }
        ParamVars { map }
    }
}

/// Gathers leaf gradients back into a name-keyed store (zeros for parameters
/// the loss did not touch).
pub fn collect_grads<F: Scalar>(
    grads: &mut crate::Gradients<F>,
    vars: &ParamVars,
    params: &Params<F>,
) -> IndexMap<String, ArrayD<F>> {
    let mut out = IndexMap::new();
    for (name, var) in vars.iter() {
        let g = grads
            .take(var)
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(params.get(name).shape())));
        out.insert(name.clone(), g);
    }
    out
}

fn sample_normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let data: Vec<F> = (0..shape.iter().product::<usize>()).map(|_| F::of(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---------------------------------------------------------------------------
// layers

pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub init_std: f64,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear { name: name.into(), din, dout, init_std: 0.02 }
    }

    pub fn init<F: Scalar, R: Rng>(&self, params: &mut Params<F>, rng: &mut R) {
        params.insert(format!("{}.w", self.name), sample_normal(rng, &[self.din, self.dout], self.init_std));
        params.insert(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.dout])));
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Var {
        let w = pv.get(&format!("{}.w", self.name));
        let b = pv.get(&format!("{}.b", self.name));
        g.linear(x, w, Some(b))
    }
}

pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim, eps: 1e-5 }
    }

    pub fn init<F: Scalar, R: Rng>(&self, params: &mut Params<F>, _rng: &mut R) {
        params.insert(format!("{}.g", self.name), ArrayD::ones(IxDyn(&[self.dim])));
        params.insert(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.dim])));
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Var {
        let gamma = pv.get(&format!("{}.g", self.name));
        let beta = pv.get(&format!("{}.b", self.name));
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "embed dim must divide into heads");
        MultiHeadAttention {
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            o: Linear::new(format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, params: &mut Params<F>, rng: &mut R) {
        self.q.init(params, rng);
        self.k.init(params, rng);
        self.v.init(params, rng);
        self.o.init(params, rng);
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Var {
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.q.forward(g, pv, x);
        let k = self.k.forward(g, pv, x);
        let v = self.v.forward(g, pv, x);
        let qh = g.split_heads(q, self.heads);
        let kh = g.split_heads(k, self.heads);
        let vh = g.split_heads(v, self.heads);
        let scores = g.attn_scores(qh, kh, scale);
        let probs = g.softmax_last(scores);
        let ctx = g.attn_context(probs, vh);
        let merged = g.merge_heads(ctx);
        self.o.forward(g, pv, merged)
    }
}

/// Pre-norm transformer encoder block: MSA and a GeLU feed-forward, each with
/// layer norm applied before the module and a residual connection around it.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(format!("{name}.ln2"), dim),
            fc1: Linear::new(format!("{name}.mlp.fc1"), dim, dim * mlp_ratio),
            fc2: Linear::new(format!("{name}.mlp.fc2"), dim * mlp_ratio, dim),
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, params: &mut Params<F>, rng: &mut R) {
        self.ln1.init(params, rng);
        self.attn.init(params, rng);
        self.ln2.init(params, rng);
        self.fc1.init(params, rng);
        self.fc2.init(params, rng);
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Var {
        let normed = self.ln1.forward(g, pv, x);
        let attn = self.attn.forward(g, pv, normed);
        let x = g.add(x, attn);
        let normed = self.ln2.forward(g, pv, x);
        let hidden = self.fc1.forward(g, pv, normed);
        let act = g.gelu(hidden);
        let out = self.fc2.forward(g, pv, act);
        g.add(x, out)
    }
}

pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, spec: ConvSpec) -> Self {
        Conv2d { name: name.into(), cin, cout, spec }
    }

    pub fn init<F: Scalar, R: Rng>(&self, params: &mut Params<F>, rng: &mut R) {
        let fan_in = self.cin * self.spec.kernel * self.spec.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        params.insert(
            format!("{}.w", self.name),
            sample_normal(rng, &[self.cout, self.cin, self.spec.kernel, self.spec.kernel], std),
        );
        params.insert(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.cout])));
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Var {
        let w = pv.get(&format!("{}.w", self.name));
        let b = pv.get(&format!("{}.b", self.name));
        g.conv2d(x, w, b, self.spec)
    }
}

pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub spec: ConvSpec,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, spec: ConvSpec, output_pad: usize) -> Self {
        ConvTranspose2d { name: name.into(), cin, cout, spec, output_pad }
    }

    pub fn init<F: Scalar, R: Rng>(&self, params: &mut Params<F>, rng: &mut R) {
        let fan_in = self.cin * self.spec.kernel * self.spec.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        params.insert(
            format!("{}.w", self.name),
            sample_normal(rng, &[self.cin, self.cout, self.spec.kernel, self.spec.kernel], std),
        );
        params.insert(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.cout])));
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Var {
        let w = pv.get(&format!("{}.w", self.name));
        let b = pv.get(&format!("{}.b", self.name));
        g.conv_transpose2d(x, w, b, self.spec, self.output_pad)
    }
}

pub struct PRelu {
    pub name: String,
    pub channels: usize,
}

impl PRelu {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        PRelu { name: name.into(), channels }
    }

    pub fn init<F: Scalar, R: Rng>(&self, params: &mut Params<F>, _rng: &mut R) {
        params.insert(format!("{}.a", self.name), ArrayD::from_elem(IxDyn(&[self.channels]), F::of(0.25)));
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Var {
        let a = pv.get(&format!("{}.a", self.name));
        g.prelu(x, a)
    }
}

/// Learned embedding added to every batch row (positional embedding).
pub struct PosEmbedding {
    pub name: String,
    pub tokens: usize,
    pub dim: usize,
}

impl PosEmbedding {
    pub fn new(name: impl Into<String>, tokens: usize, dim: usize) -> Self {
        PosEmbedding { name: name.into(), tokens, dim }
    }

    pub fn init<F: Scalar, R: Rng>(&self, params: &mut Params<F>, rng: &mut R) {
        params.insert(self.name.clone(), sample_normal(rng, &[self.tokens, self.dim], 0.02));
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, pv: &ParamVars, x: Var) -> Var {
        let p = pv.get(&self.name);
        g.add_bcast(x, p)
    }
}
