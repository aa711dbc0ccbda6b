//! Mock vision experts, their native-token encoders, grid alignment and the
//! token projectors that map every expert into the language width.

pub mod interp;
pub mod spec;

use std::cell::Cell;

pub use interp::{align_token_count, bilinear_matrix};
pub use spec::{ExpertKind, ExpertSpec, HubManifest};

use crate::error::{Error, Result};
use crate::numerics::graph::conv_out;
use crate::numerics::{mlp_forward, Binding, Graph, Init, Linear, MlpParams, ParamId, ParamStore, RandomSource, Tensor, Var};
use crate::synth::{RenderedSample, SourceChannel};

/// Largest attribute id an embedding expert's code table covers.
pub const MAX_CODE_CLASSES: usize = 15;

thread_local! {
    static EXPERT_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of expert evaluations on this thread since the last reset.
pub fn expert_invocations() -> u64 {
    EXPERT_CALLS.with(Cell::get)
}

pub fn reset_expert_invocations() {
    EXPERT_CALLS.with(|c| c.set(0));
}

fn count_invocation() {
    EXPERT_CALLS.with(|c| c.set(c.get() + 1));
}

/// Sizes shared by every expert in a hub.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HubDims {
    pub d_lang: usize,
    /// Projector hidden width.
    pub d_hidden: usize,
    /// Channels between conv layers.
    pub conv_channels: usize,
    pub conv_depth: usize,
    /// Vision-token grid every expert is aligned to.
    pub base_grid: (usize, usize),
    /// Pixel size of the source maps.
    pub pixels: (usize, usize),
    /// Initial scale of native expert tokens: std of the code tables and
    /// multiplier on the last conv layer's weights.
    pub token_gain: f64,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    c_in: usize,
}

/// Stack of 3×3, padding-1 convolutions with GeLU between layers.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    layers: Vec<ConvLayer>,
    input: (usize, usize),
}

fn conv_strides(input: (usize, usize), grid: (usize, usize), depth: usize) -> Result<Vec<usize>> {
    let bad = || Error::ConfigInvalid(format!("no stride schedule maps {input:?} to {grid:?} in {depth} layers"));
    if input.0 % grid.0 != 0 || input.0 / grid.0 != input.1 / grid.1 || input.1 % grid.1 != 0 || depth == 0 {
        return Err(bad());
    }
    let mut remaining = input.0 / grid.0;
    let mut strides = vec![1; depth];
    for s in strides.iter_mut() {
        if remaining % 2 == 0 {
            *s = 2;
            remaining /= 2;
        }
    }
    *strides.last_mut().expect("depth ≥ 1") *= remaining;
    let out = strides
        .iter()
        .fold(input, |(h, w), &s| (conv_out(h, s), conv_out(w, s)));
    if out != grid {
        return Err(bad());
    }
    Ok(strides)
}

impl ConvEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: (usize, usize),
        grid: (usize, usize),
        depth: usize,
        hidden: usize,
        out: usize,
        init: Init,
        gain: f64,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let strides = conv_strides(input, grid, depth)?;
        let mut layers = Vec::with_capacity(depth);
        for (i, &stride) in strides.iter().enumerate() {
            let c_in = if i == 0 { 1 } else { hidden };
            let c_out = if i + 1 == depth { out } else { hidden };
            let lin = Linear::new(store, &format!("{name}.conv{i}"), 9 * c_in, c_out, true, init, rng, true);
            if i + 1 == depth {
                store.get_mut(lin.weight).data_mut().iter_mut().for_each(|w| *w *= gain);
            }
            layers.push(ConvLayer {
                weight: lin.weight,
                bias: lin.bias.expect("conv layers carry a bias"),
                stride,
                c_in,
            });
        }
        Ok(Self { layers, input })
    }

    fn forward(&self, g: &mut Graph, p: &ParamSource, map: Var) -> Result<Var> {
        let (mut h, mut w) = self.input;
        let mut x = map;
        for (i, l) in self.layers.iter().enumerate() {
            debug_assert_eq!(g.value(x).cols(), l.c_in);
            let cols = g.im2col(x, h, w, l.stride)?;
            let wv = p.var(g, l.weight);
            let bv = p.var(g, l.bias);
            x = g.matmul(cols, wv)?;
            x = g.add_bias(x, bv)?;
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
            }
            (h, w) = (conv_out(h, l.stride), conv_out(w, l.stride));
        }
        Ok(x)
    }
}

/// Where parameter values come from during a forward pass.
pub enum ParamSource<'a> {
    /// Already on the graph (training).
    Bound(&'a Binding),
    /// Read from the store as constants (inference).
    Store(&'a ParamStore),
}

impl ParamSource<'_> {
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        match self {
            ParamSource::Bound(b) => b.var(id),
            ParamSource::Store(s) => g.constant(s.get(id).clone()),
        }
    }
}

/// Plain-tensor projector weights: one `ψ1` per expert, a shared `ψ2`.
#[derive(Clone, Debug)]
pub struct ProjectorParams {
    pub psi1: Vec<(Tensor, Tensor)>,
    pub psi2: (Tensor, Tensor),
}

/// `ψ2·GeLU(ψ1ᵏ·t + b1ᵏ) + b2`, row-wise.
pub fn project_expert_tokens(proj: &ProjectorParams, k: usize, tokens: &Tensor) -> Result<Tensor> {
    let (w1, b1) = proj.psi1.get(k).ok_or(Error::UnknownExpert(k))?;
    let mlp = MlpParams::new(w1.clone(), b1.clone(), proj.psi2.0.clone(), proj.psi2.1.clone())?;
    mlp_forward(&mlp, tokens)
}

#[derive(Clone, Debug)]
enum Encoder {
    Conv(ConvEncoder),
    /// Frozen code table `[(1 + MAX_CODE_CLASSES) × d_k]`, row 0 zero.
    Codes(ParamId),
}

/// The experts, their encoders and projectors. Parameters live in the
/// shared store under `hub.`.
#[derive(Clone, Debug)]
pub struct ExpertHub {
    pub manifest: HubManifest,
    pub dims: HubDims,
    encoders: Vec<Encoder>,
    psi1: Vec<Linear>,
    psi2: Linear,
}

pub const HUB_PREFIX: &str = "hub.";

impl ExpertHub {
    pub fn new(manifest: HubManifest, dims: HubDims, store: &mut ParamStore, rng: &mut RandomSource) -> Result<Self> {
        manifest.validate()?;
        let mut encoders = Vec::with_capacity(manifest.len());
        let mut psi1 = Vec::with_capacity(manifest.len());
        for e in &manifest.experts {
            let name = format!("{HUB_PREFIX}e{}", e.id);
            encoders.push(match e.kind {
                ExpertKind::LowLevelMap => Encoder::Conv(ConvEncoder::new(
                    store,
                    &name,
                    dims.pixels,
                    e.native_grid,
                    dims.conv_depth,
                    dims.conv_channels,
                    e.native_dim,
                    Init::He,
                    dims.token_gain,
                    rng,
                )?),
                ExpertKind::Embedding => {
                    let mut table = rng.normal_vec((1 + MAX_CODE_CLASSES) * e.native_dim, 0.0, dims.token_gain);
                    table[..e.native_dim].iter_mut().for_each(|v| *v = 0.0);
                    let t = Tensor::new(vec![1 + MAX_CODE_CLASSES, e.native_dim], table)?;
                    Encoder::Codes(store.add(format!("{name}.codes"), t, false))
                }
            });
            psi1.push(Linear::new(
                store,
                &format!("{HUB_PREFIX}proj.psi1.e{}", e.id),
                e.native_dim,
                dims.d_hidden,
                true,
                Init::He,
                rng,
                true,
            ));
        }
        let psi2 = Linear::new(
            store,
            &format!("{HUB_PREFIX}proj.psi2"),
            dims.d_hidden,
            dims.d_lang,
            true,
            Init::FanIn,
            rng,
            true,
        );
        Ok(Self {
            manifest,
            dims,
            encoders,
            psi1,
            psi2,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn spec(&self, k: usize) -> Result<&ExpertSpec> {
        self.manifest.experts.get(k).ok_or(Error::UnknownExpert(k))
    }

    /// Embedding experts have no trainable state, so their aligned tokens
    /// can be computed once per sample.
    pub fn is_cacheable(&self, k: usize) -> bool {
        matches!(self.encoders.get(k), Some(Encoder::Codes(_)))
    }

    /// Native tokens `[h_k·w_k × d_k]` on the graph.
    fn native(&self, g: &mut Graph, p: &ParamSource, k: usize, sample: &RenderedSample) -> Result<Var> {
        let spec = self.spec(k)?;
        let src = sample
            .sources
            .get(spec.source())
            .ok_or_else(|| Error::MissingChannel(spec.source().to_string()))?;
        if src.dims() != self.dims.pixels {
            return Err(Error::shape(
                "expert_infer",
                format!("source {} is {:?}, hub expects {:?}", spec.source(), src.dims(), self.dims.pixels),
            ));
        }
        match (&self.encoders[k], src) {
            (Encoder::Conv(enc), SourceChannel::Map(m)) => {
                let (h, w) = self.dims.pixels;
                let x = g.constant(Tensor::from_parts(vec![h * w, 1], m.data().to_vec()));
                enc.forward(g, p, x)
            }
            (Encoder::Codes(table), SourceChannel::Labels { ids, .. }) => {
                let codes = p.var(g, *table);
                let tokens = pool_codes(g.value(codes), ids, self.dims.pixels, spec.native_grid)?;
                Ok(g.constant(tokens))
            }
            _ => Err(Error::MissingChannel(format!("{} as {:?} input", spec.source(), spec.kind))),
        }
    }

    /// Runs expert `k` on a sample with the store's current parameters.
    pub fn expert_infer(&self, store: &ParamStore, k: usize, sample: &RenderedSample) -> Result<Tensor> {
        count_invocation();
        let mut g = Graph::new();
        let v = self.native(&mut g, &ParamSource::Store(store), k, sample)?;
        Ok(g.value(v).clone())
    }

    /// Expert `k`'s tokens resized to the base grid, `[N × d_k]`. A cached
    /// tensor stands in for the expert's own computation.
    pub fn aligned_tokens(
        &self,
        g: &mut Graph,
        p: &ParamSource,
        k: usize,
        sample: &RenderedSample,
        cached: Option<&Tensor>,
    ) -> Result<Var> {
        count_invocation();
        if let Some(t) = cached {
            return Ok(g.constant(t.clone()));
        }
        let native = self.native(g, p, k, sample)?;
        let grid = self.spec(k)?.native_grid;
        if grid == self.dims.base_grid {
            return Ok(native);
        }
        if !g.needs_grad(native) {
            let t = align_token_count(g.value(native), grid, self.dims.base_grid)?;
            return Ok(g.constant(t));
        }
        let m = g.constant(bilinear_matrix(grid, self.dims.base_grid)?);
        g.matmul(m, native)
    }

    /// Aligned tokens of a cacheable expert, computed outside any graph.
    pub fn cache_tokens(&self, store: &ParamStore, k: usize, sample: &RenderedSample) -> Result<Tensor> {
        let native = self.expert_infer(store, k, sample)?;
        align_token_count(&native, self.spec(k)?.native_grid, self.dims.base_grid)
    }

    /// `H_ψk` on the graph.
    pub fn project(&self, g: &mut Graph, p: &ParamSource, k: usize, tokens: Var) -> Result<Var> {
        let l1 = self.psi1.get(k).ok_or(Error::UnknownExpert(k))?;
        if g.value(tokens).cols() != l1.d_in {
            return Err(Error::shape(
                "project_expert_tokens",
                format!("expert {k} expects width {}, got {}", l1.d_in, g.value(tokens).cols()),
            ));
        }
        let h = linear(g, p, l1, tokens)?;
        let h = g.gelu(h);
        linear(g, p, &self.psi2, h)
    }

    pub fn projector_params(&self, store: &ParamStore) -> ProjectorParams {
        let pair = |l: &Linear| (store.get(l.weight).clone(), store.get(l.bias.expect("bias")).clone());
        ProjectorParams {
            psi1: self.psi1.iter().map(pair).collect(),
            psi2: pair(&self.psi2),
        }
    }

    /// Parameter name prefix owned by expert `k` (encoder and `ψ1`).
    pub fn expert_prefixes(k: usize) -> [String; 2] {
        [format!("{HUB_PREFIX}e{k}."), format!("{HUB_PREFIX}proj.psi1.e{k}.")]
    }
}

pub(crate) fn linear(g: &mut Graph, p: &ParamSource, l: &Linear, x: Var) -> Result<Var> {
    let w = p.var(g, l.weight);
    let y = g.matmul(x, w)?;
    match l.bias {
        Some(b) => {
            let bv = p.var(g, b);
            g.add_bias(y, bv)
        }
        None => Ok(y),
    }
}

/// Area-averages per-pixel code vectors onto the native grid.
fn pool_codes(codes: &Tensor, ids: &[usize], pixels: (usize, usize), grid: (usize, usize)) -> Result<Tensor> {
    let d = codes.cols();
    let (ph, pw) = pixels;
    let wy = interp::area_weights(ph, grid.0);
    let wx = interp::area_weights(pw, grid.1);
    let mut out = vec![0.0; grid.0 * grid.1 * d];
    for y in 0..ph {
        for x in 0..pw {
            let id = ids[y * pw + x];
            if id == 0 {
                continue;
            }
            if id >= codes.rows() {
                return Err(Error::VocabOverflow { id, vocab: codes.rows() });
            }
            let code = codes.row(id);
            for gy in 0..grid.0 {
                let a = wy[gy * ph + y];
                if a == 0.0 {
                    continue;
                }
                for gx in 0..grid.1 {
                    let b = wx[gx * pw + x];
                    if b == 0.0 {
                        continue;
                    }
                    let row = &mut out[(gy * grid.1 + gx) * d..(gy * grid.1 + gx + 1) * d];
                    row.iter_mut().zip(code).for_each(|(o, c)| *o += a * b * c);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![grid.0 * grid.1, d], out))
}
