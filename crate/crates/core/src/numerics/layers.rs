//! Standard layers over the graph, plus graph-free entry points for the
//! elementwise and MLP primitives.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{Binding, ParamId, ParamStore};
use crate::numerics::rng::RandomSource;
use crate::numerics::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Initialisation scheme for a weight matrix.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers feeding a GeLU.
    He,
    /// `N(0, 1 / fan_in)`.
    FanIn,
    /// `N(0, std²)`.
    Normal(f64),
    Zeros,
}

impl Init {
    fn sample(self, rng: &mut RandomSource, fan_in: usize, n: usize) -> Vec<f64> {
        let std = match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::FanIn => (1.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
            Init::Zeros => return vec![0.0; n],
        };
        rng.normal_vec(n, 0.0, std)
    }
}

/// Dense layer `y = x·W + b`, `W: [d_in × d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut RandomSource,
        trainable: bool,
    ) -> Self {
        let w = Tensor::from_parts(vec![d_in, d_out], init.sample(rng, d_in, d_in * d_out));
        let weight = store.add(format!("{name}.weight"), w, trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), trainable));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with a GeLU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        out_init: Init,
        rng: &mut RandomSource,
        trainable: bool,
    ) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, true, Init::He, rng, trainable);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, true, out_init, rng, trainable);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }

    /// Snapshot of the current weights as plain tensors.
    pub fn params(&self, store: &ParamStore) -> MlpParams {
        let bias = |b: Option<ParamId>, n| b.map_or_else(|| Tensor::zeros(&[n]), |id| store.get(id).clone());
        MlpParams {
            w1: store.get(self.fc1.weight).clone(),
            b1: bias(self.fc1.bias, self.fc1.d_out),
            w2: store.get(self.fc2.weight).clone(),
            b2: bias(self.fc2.bias, self.fc2.d_out),
        }
    }
}

/// Plain-tensor weights of a two-layer GeLU perceptron.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let p = Self { w1, b1, w2, b2 };
        p.validate()?;
        Ok(p)
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    fn validate(&self) -> Result<()> {
        let hidden = self.w1.cols();
        if self.w1.shape().len() != 2 || self.w2.shape().len() != 2 {
            return Err(Error::shape("mlp", "weights must be matrices"));
        }
        if self.b1.numel() != hidden || self.w2.rows() != hidden || self.b2.numel() != self.w2.cols() {
            return Err(Error::shape(
                "mlp",
                format!(
                    "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    self.w1.shape(),
                    self.b1.shape(),
                    self.w2.shape(),
                    self.b2.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Row-wise layer normalisation with affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0), trainable);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]), trainable);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Multi-head scaled dot-product attention without projection biases.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut RandomSource,
        trainable: bool,
    ) -> Self {
        assert_eq!(d % heads, 0, "model width must divide by head count");
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), d, d, false, Init::FanIn, rng, trainable);
        let q = lin("q");
        let k = lin("k");
        let v = lin("v");
        let o = lin("o");
        Self { q, k, v, o, heads }
    }

    /// Queries from `x_q` attend over keys/values from `x_kv`. With `causal`,
    /// query `i` sees only keys `j ≤ i`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x_q: Var, x_kv: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, p, x_q)?;
        let k = self.k.forward(g, p, x_kv)?;
        let v = self.v.forward(g, p, x_kv)?;
        let (lq, d) = (g.value(q).rows(), g.value(q).cols());
        let lk = g.value(k).rows();
        let hd = d / self.heads;
        let mask: Option<Vec<bool>> = causal.then(|| (0..lq * lk).map(|idx| idx % lk <= idx / lk).collect());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd)?,
                    g.slice_cols(k, h * hd, hd)?,
                    g.slice_cols(v, h * hd, hd)?,
                )
            };
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
            let attn = g.softmax_rows(scores, mask.as_deref())?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, p, merged)
    }
}

/// Elementwise GeLU (tanh approximation).
pub fn gelu(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.gelu(v);
    g.value(y).clone()
}

/// Numerically stable softmax of a vector; `−∞` entries map to exactly 0.
pub fn softmax_stable(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("softmax_stable"));
    }
    let keep: Vec<bool> = x.iter().map(|v| v.is_finite()).collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::AllMasked);
    }
    let clean: Vec<f64> = x.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_parts(vec![1, x.len()], clean));
    let y = g.softmax_rows(v, Some(&keep))?;
    Ok(g.value(y).data().to_vec())
}

/// `w2·GeLU(w1·x + b1) + b2` along the last dimension of `x`.
pub fn mlp_forward(p: &MlpParams, x: &Tensor) -> Result<Tensor> {
    p.validate()?;
    if x.cols() != p.d_in() {
        return Err(Error::shape("mlp_forward", format!("input width {} vs {}", x.cols(), p.d_in())));
    }
    let mut g = Graph::new();
    let rows = x.rows();
    let xv = g.constant(Tensor::from_parts(vec![rows, x.cols()], x.data().to_vec()));
    let w1 = g.constant(p.w1.clone());
    let b1 = g.constant(p.b1.clone());
    let w2 = g.constant(p.w2.clone());
    let b2 = g.constant(p.b2.clone());
    let h = g.matmul(xv, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h);
    let y = g.matmul(h, w2)?;
    let y = g.add_bias(y, b2)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = p.d_out();
    Ok(Tensor::from_parts(shape, g.value(y).data().to_vec()))
}

/// Mean cross-entropy over positions whose target differs from
/// `ignore_index`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], ignore_index: usize) -> Result<f64> {
    let vocab = logits.cols();
    let ts: Vec<Option<usize>> = targets
        .iter()
        .map(|&t| (t != ignore_index).then_some(t))
        .collect();
    if let Some(&id) = ts.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::TargetOutOfRange { id, vocab });
    }
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_parts(vec![logits.rows(), vocab], logits.data().to_vec()));
    let ce = g.cross_entropy(l, &ts)?;
    Ok(g.value(ce).item())
}
