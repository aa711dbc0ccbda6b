//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Leaves are either trainable parameters or constants; gradients are only
//! propagated along edges that lead to a trainable leaf, so frozen branches
//! cost nothing in the backward pass. A trainable leaf that never feeds the
//! loss is not an error: its gradient is reported as all zeros.
//!
//! Most operations treat tensors as matrices over their last dimension
//! (`rows × cols`); vectors are single-row matrices.

use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const GELU_COEFF: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    EmbedRows {
        table: Var,
        ids: Vec<usize>,
    },
    ColScale(Var, Var),
    Sum(Var),
    ColSum(Var),
    CvSquared(Var),
    NormalCdf(Var),
    LoadProb {
        scores: Var,
        inv_scale: f64,
        competitor: Vec<usize>,
    },
    RowNorm(Var),
    Im2Col {
        x: Var,
        height: usize,
        width: usize,
        stride: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    trainable: Vec<bool>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Trainable leaves that do not
    /// reach the loss get zeros; nodes that cannot carry gradient get `None`.
    pub fn get(&self, v: Var) -> Option<Vec<f64>> {
        match &self.grads[v.0] {
            Some(g) => Some(g.clone()),
            None if self.trainable[v.0] => Some(vec![0.0; self.sizes[v.0]]),
            None => None,
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = FRAC_2_SQRT_PI / SQRT_2;
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = FRAC_2_SQRT_PI / SQRT_2;
    let inner = c * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() * (0.5 * FRAC_2_SQRT_PI / SQRT_2)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output size of a 3×3, padding-1 convolution with the given stride.
pub fn conv_out(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m × k]`, `b: [n × k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        self.check_same(name, a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("[{m}x{n}] + bias of {}", self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, c), &[x])
    }

    /// Elementwise GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| gelu_scalar(a)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu(x), &[x])
    }

    /// Row-wise softmax. `keep[i] == false` forces entry `i` to exactly zero
    /// (equivalent to a score of −∞).
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = dims2(v);
        if let Some(k) = keep {
            if k.len() != m * n {
                return Err(Error::shape("softmax_rows", "mask length differs from input"));
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let kept = |j: usize| keep.map_or(true, |k| k[i * n + j]);
            let max = (0..n)
                .filter(|&j| kept(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMasked);
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if kept(j) {
                    orow[j] = (row[j] - max).exp();
                    total += orow[j];
                }
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let (m, n) = dims2(v);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", "affine parameters differ from row width"));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if width == 0 || start + width > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {n}", start + width)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, width], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Gathers rows of `table` (embedding lookup).
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = dims2(self.value(table));
        if ids.is_empty() {
            return Err(Error::shape("embed_rows", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::VocabOverflow { id, vocab });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multiplies row `i` of `x` by `s[i]`; `s` has one value per row.
    pub fn col_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if self.value(s).numel() != m {
            return Err(Error::shape("col_scale", "one scale per row required"));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &c) in data.chunks_mut(n).zip(sv) {
            row.iter_mut().for_each(|o| *o *= c);
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ColScale(x, s), &[x, s]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of a matrix, as a vector.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let (m, n) = dims2(self.value(x));
        let mut out = vec![0.0; n];
        for i in 0..m {
            out.iter_mut()
                .zip(self.value(x).row(i))
                .for_each(|(o, v)| *o += v);
        }
        self.push(Tensor::from_parts(vec![n], out), Op::ColSum(x), &[x])
    }

    /// Squared coefficient of variation, `(pop_std / mean)²`.
    pub fn cv_squared(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if mean == 0.0 {
            return Err(Error::ZeroMeanImportance);
        }
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(var / (mean * mean)), Op::CvSquared(x), &[x]))
    }

    pub fn normal_cdf(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| normal_cdf(a)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::NormalCdf(x), &[x])
    }

    /// Smooth routing probability per entry:
    /// `Φ((r_k − max_{j≠k} r_j) / (σ·√2))`. A single-column input routes
    /// everything to its only expert (probability 1).
    pub fn load_prob(&mut self, scores: Var, sigma: f64) -> Result<Var> {
        if !(sigma > 0.0) {
            return Err(Error::NonpositiveSigma(sigma));
        }
        let v = self.value(scores);
        let (m, n) = dims2(v);
        let inv_scale = 1.0 / (sigma * SQRT_2);
        let mut out = vec![1.0; m * n];
        let mut competitor = vec![usize::MAX; m * n];
        if n > 1 {
            for i in 0..m {
                let row = v.row(i);
                let (mut best, mut second) = (0usize, usize::MAX);
                for j in 1..n {
                    if row[j] > row[best] {
                        second = best;
                        best = j;
                    } else if second == usize::MAX || row[j] > row[second] {
                        second = j;
                    }
                }
                for k in 0..n {
                    let c = if k == best { second } else { best };
                    competitor[i * n + k] = c;
                    out[i * n + k] = normal_cdf((row[k] - row[c]) * inv_scale);
                }
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LoadProb {
                scores,
                inv_scale,
                competitor,
            },
            &[scores],
        ))
    }

    /// Euclidean norm of each row, as a vector.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (m, _) = dims2(v);
        let out = (0..m).map(|i| dot(v.row(i), v.row(i)).sqrt()).collect();
        self.push(Tensor::from_parts(vec![m], out), Op::RowNorm(x), &[x])
    }

    /// Unfolds 3×3 neighbourhoods (zero padding 1) of a feature map stored as
    /// `[height·width × channels]`, producing
    /// `[out_h·out_w × 9·channels]` with column `(ky·3 + kx)·channels + c`.
    pub fn im2col(&mut self, x: Var, height: usize, width: usize, stride: usize) -> Result<Var> {
        let (rows, c) = dims2(self.value(x));
        if rows != height * width || stride == 0 {
            return Err(Error::shape("im2col", format!("{rows} rows vs {height}x{width}")));
        }
        let (oh, ow) = (conv_out(height, stride), conv_out(width, stride));
        let src = self.value(x).data();
        let mut out = vec![0.0; oh * ow * 9 * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * 9 * c;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let p = iy as usize * width + ix as usize;
                        let dst = base + (ky * 3 + kx) * c;
                        out[dst..dst + c].copy_from_slice(&src[p * c..(p + 1) * c]);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![oh * ow, 9 * c], out),
            Op::Im2Col {
                x,
                height,
                width,
                stride,
            },
            &[x],
        ))
    }

    /// Mean token cross-entropy over positions whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits);
        let (m, n) = dims2(v);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", format!("{m} rows vs {} targets", targets.len())));
        }
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            let row = v.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - max).exp()).sum();
            let prow = &mut probs[i * n..(i + 1) * n];
            for j in 0..n {
                prow[j] = (row[j] - max).exp() / z;
            }
            if let Some(id) = *t {
                if id >= n {
                    return Err(Error::TargetOutOfRange { id, vocab: n });
                }
                total += -(row[id] - max - z.ln());
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let trainable = self
            .nodes
            .iter()
            .map(|n| n.needs_grad && matches!(n.op, Op::Leaf))
            .collect();
        let sizes = self.nodes.iter().map(|n| n.value.numel()).collect();
        Ok(Gradients {
            grads,
            trainable,
            sizes,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let size = nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; size]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims2(val(a));
                let n = val(b).cols();
                let (av, bv) = (val(a).data(), val(b).data());
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * gv;
                            }
                        }
                    }
                });
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = dims2(val(a));
                let n = val(b).rows();
                let (av, bv) = (val(a).data(), val(b).data());
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let row = &mut ga[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, &bv) in row.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *o += gij * bv;
                            }
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, &a) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *o += gij * a;
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                let n = val(x).cols();
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(bias, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            &Op::Scale(x, c) => {
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
            }
            &Op::Gelu(x) => {
                let xv = val(x).data();
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad_scalar(xv[i]);
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(x, &mut |gx| {
                    for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gm = val(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; n];
                    for (i, (hr, gr)) in xhat.chunks(n).zip(g.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = gr[j] * gm[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, hr) / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let n = val(x).cols();
                let w = node.value.cols();
                acc(x, &mut |gx| {
                    for (i, gr) in g.chunks(w).enumerate() {
                        for (o, v) in gx[i * n + start..i * n + start + w].iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |gp| {
                        for (i, row) in gp.chunks_mut(w).enumerate() {
                            for (o, v) in row.iter_mut().zip(&g[i * total + offset..i * total + offset + w]) {
                                *o += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(o, v)| *o += v);
                    });
                    offset += len;
                }
            }
            Op::EmbedRows { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                });
            }
            &Op::ColScale(x, s) => {
                let n = node.value.cols();
                let (xv, sv) = (val(x).data(), val(s).data());
                acc(x, &mut |gx| {
                    for (i, gr) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            gx[i * n + j] += gr[j] * sv[i];
                        }
                    }
                });
                acc(s, &mut |gs| {
                    for (i, gr) in g.chunks(n).enumerate() {
                        gs[i] += dot(gr, &xv[i * n..(i + 1) * n]);
                    }
                });
            }
            &Op::Sum(x) => {
                let g0 = g[0];
                acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g0));
            }
            &Op::ColSum(x) => {
                let n = node.value.numel();
                acc(x, &mut |gx| {
                    for row in gx.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                    }
                });
            }
            &Op::CvSquared(x) => {
                let v = val(x).data();
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
                let g0 = g[0];
                acc(x, &mut |gx| {
                    for (o, &a) in gx.iter_mut().zip(v) {
                        let d_var = 2.0 * (a - mean) / n;
                        let d_mean = 1.0 / n;
                        *o += g0 * (d_var / (mean * mean) - 2.0 * var / (mean * mean * mean) * d_mean);
                    }
                });
            }
            &Op::NormalCdf(x) => {
                let xv = val(x).data();
                acc(x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * normal_pdf(xv[i]);
                    }
                });
            }
            Op::LoadProb {
                scores,
                inv_scale,
                competitor,
            } => {
                let sv = val(*scores).data();
                let n = node.value.cols();
                if n > 1 {
                    acc(*scores, &mut |gs| {
                        for (idx, &c) in competitor.iter().enumerate() {
                            let row = idx / n;
                            let z = (sv[idx] - sv[row * n + c]) * inv_scale;
                            let d = g[idx] * normal_pdf(z) * inv_scale;
                            gs[idx] += d;
                            gs[row * n + c] -= d;
                        }
                    });
                }
            }
            &Op::RowNorm(x) => {
                let xv = val(x).data();
                let n = val(x).cols();
                let norms = node.value.data();
                acc(x, &mut |gx| {
                    for i in 0..norms.len() {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        let c = g[i] / norms[i];
                        for j in 0..n {
                            gx[i * n + j] += c * xv[i * n + j];
                        }
                    }
                });
            }
            &Op::Im2Col {
                x,
                height,
                width,
                stride,
            } => {
                let c = val(x).cols();
                let (oh, ow) = (conv_out(height, stride), conv_out(width, stride));
                acc(x, &mut |gx| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let base = (oy * ow + ox) * 9 * c;
                            for ky in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= height as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= width as isize {
                                        continue;
                                    }
                                    let p = iy as usize * width + ix as usize;
                                    let src = base + (ky * 3 + kx) * c;
                                    for ch in 0..c {
                                        gx[p * c + ch] += g[src + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = val(*logits).cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(id) = *t else { continue };
                        for j in 0..n {
                            gl[i * n + j] += scale * probs[i * n + j];
                        }
                        gl[i * n + id] -= scale;
                    }
                });
            }
        }
    }
}
