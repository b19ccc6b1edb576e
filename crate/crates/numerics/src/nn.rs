//! Parameter storage and the small set of layers the models are built from.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::segments::Segments;
use crate::tensor::Tensor;

/// Layer-norm variance floor. Small enough that normalized rows have unit
/// variance to within 1e-8 for any row variance above 0.01.
pub const LN_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init scaled by `std`.
    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, Tensor::matrix(rows, cols, vec![value; rows * cols]).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Freeze or unfreeze every parameter.
    pub fn set_trainable(&mut self, flag: bool) {
        for t in &mut self.tensors {
            let taken = std::mem::replace(t, Tensor::scalar(0.0));
            *t = taken.with_requires_grad(flag);
        }
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn assign(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.len() != data.len() {
            return Err(NumericsError::Dimension {
                op: "assign",
                detail: format!("{} values into {:?}", data.len(), t.shape()),
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn N(0, 1/in), zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(store, name, in_dim, out_dim, std, 0.0, rng)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_std: f64,
        bias_value: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), in_dim, out_dim, weight_std, rng);
        let bias = Some(store.add_const(format!("{name}.bias"), 1, out_dim, bias_value));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `y = x·W`, weights drawn N(0, 1/in).
    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: store.add_normal(format!("{name}.weight"), in_dim, out_dim, std, rng),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Zero the weight, leaving the bias.
    pub fn zero_weight(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// Two linear layers with an activation in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng),
            second: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, rng),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = self.act.apply(g, h);
        self.second.forward(g, store, h)
    }
}

/// Multi-head self-attention with separate Q/K/V/output projections.
/// The key projection has no bias: it would add a per-query constant to
/// every score, which the softmax discards.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(NumericsError::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::without_bias(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
        })
    }

    /// Self-attention over each segment of the packed rows of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let a = g.attention(q, k, v, segs, self.heads)?;
        self.out.forward(g, store, a)
    }
}

/// Inverted dropout mask: kept entries scaled by `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Apply dropout when `rng` is given, identity otherwise.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut dyn rand::RngCore>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let (r, c) = g.shape(x);
            let mask = dropout_mask(r * c, p, rng);
            let m = g.constant_from(r, c, mask);
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

/// Sinusoidal encoding of a real position: `sin(pos/10000^(2i/D))` in even
/// columns and the matching `cos` in odd columns.
pub fn sinusoidal_row(pos: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(NumericsError::Config(format!(
            "sinusoidal encoding needs an even width, got {dim}"
        )));
    }
    let mut row = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        row[2 * i] = (pos * freq).sin();
        row[2 * i + 1] = (pos * freq).cos();
    }
    Ok(row)
}

/// `T×D` table of [`sinusoidal_row`] for positions `0..T`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        data.extend(sinusoidal_row(p as f64, dim)?);
    }
    Tensor::matrix(len.max(1), dim, data)
}
