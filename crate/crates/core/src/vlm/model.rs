use crate::error::{Error, Result};
use crate::hub::{ExpertHub, HubManifest, ParamSource};
use crate::numerics::{Binding, Graph, ParamStore, RandomSource, Tensor, Var};
use crate::objectives::{importance_loss_graph, load_loss_graph, pretrain_loss, LossBreakdown};
use crate::routing::{
    ensemble_graph, ensemble_weights_graph, fuse_residual_graph, Fusion, Gating, RoutingState, TransferStrategy,
};
use crate::synth::RenderedSample;
use crate::vlm::config::ModelConfig;
use crate::vlm::decoder::Decoder;
use crate::vlm::encoder::VisionEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    /// No auxiliary loss, adaptors active.
    Finetune,
    /// Noise-free, no auxiliary loss.
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub strategy: TransferStrategy,
    pub lambda: f64,
    pub retained: Vec<usize>,
    pub noise: bool,
    pub aux: bool,
    pub alpha_t: f64,
    pub adaptors: bool,
    /// Run detached experts and weight them by zero instead of skipping them.
    pub compute_detached: bool,
}

impl ForwardOptions {
    pub fn eval(experts: usize, lambda: f64, strategy: TransferStrategy) -> Self {
        Self {
            mode: Mode::Eval,
            strategy,
            lambda,
            retained: (0..experts).collect(),
            noise: false,
            aux: false,
            alpha_t: 0.0,
            adaptors: false,
            compute_detached: false,
        }
    }
}

/// Expert-side modules of a full model.
#[derive(Clone, Debug)]
pub struct ExpertModules {
    pub hub: ExpertHub,
    pub gate: Gating,
    pub fusion: Fusion,
}

/// Frozen per-sample inputs: base vision tokens and the aligned tokens of
/// parameter-free experts.
#[derive(Clone, Debug)]
pub struct SampleCache {
    pub t_vis: Tensor,
    pub expert_tokens: Vec<Option<Tensor>>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub total: Var,
    pub lm: Var,
    pub imp: Option<Var>,
    pub load: Option<Var>,
    pub alpha_t: f64,
    pub scores: Option<Var>,
    pub weights: Option<Var>,
    pub t_vis: Var,
    pub fused: Var,
    pub logits: Var,
    pub labels: Vec<Option<usize>>,
}

impl ForwardOut {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        let mut b = pretrain_loss(g.value(self.lm).item(), v(self.imp), v(self.load), self.alpha_t);
        b.total = g.value(self.total).item();
        b
    }

    pub fn routing_state(&self, g: &Graph, opts: &ForwardOptions) -> Option<RoutingState> {
        Some(RoutingState {
            scores: g.value(self.scores?).clone(),
            weights: g.value(self.weights?).clone(),
            retained: opts.retained.clone(),
            noise_enabled: opts.noise && opts.mode != Mode::Eval,
        })
    }
}

/// Vision encoder, caption decoder and (optionally) the expert pathway.
#[derive(Clone, Debug)]
pub struct ToveModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: VisionEncoder,
    pub decoder: Decoder,
    pub experts: Option<ExpertModules>,
}

impl ToveModel {
    /// Every component draws from its own child stream of `seed`, so models
    /// with and without experts share encoder and decoder initialisation.
    pub fn new(cfg: ModelConfig, manifest: Option<HubManifest>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RandomSource::new(seed);
        let mut store = ParamStore::new();
        let encoder = VisionEncoder::new(&mut store, &cfg, &mut root.child("encoder"), false);
        let decoder = Decoder::new(&mut store, &cfg, &mut root.child("decoder"));
        let experts = match manifest {
            None => None,
            Some(m) => {
                let k = m.len();
                let hub = ExpertHub::new(m, cfg.hub_dims(), &mut store, &mut root.child("hub"))?;
                let gate = Gating::new(&mut store, cfg.gating, cfg.d_model, k, &mut root.child("gate"));
                let fusion = Fusion::new(&mut store, cfg.d_model, &mut root.child("fusion"));
                Some(ExpertModules { hub, gate, fusion })
            }
        };
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.as_ref().map_or(0, |e| e.hub.len())
    }

    /// Base vision tokens `[N × d_model]`.
    pub fn encode_image(&self, sample: &RenderedSample) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let patches = g.constant(VisionEncoder::patches(&self.cfg, sample)?);
        let t = self.encoder.forward(&mut g, &p, patches)?;
        Ok(g.value(t).clone())
    }

    pub fn precompute(&self, sample: &RenderedSample) -> Result<SampleCache> {
        let t_vis = self.encode_image(sample)?;
        let expert_tokens = match &self.experts {
            None => Vec::new(),
            Some(e) => (0..e.hub.len())
                .map(|k| {
                    e.hub
                        .is_cacheable(k)
                        .then(|| e.hub.cache_tokens(&self.store, k, sample))
                        .transpose()
                })
                .collect::<Result<_>>()?,
        };
        Ok(SampleCache {
            t_vis,
            expert_tokens,
        })
    }

    /// Encoder → experts → routing → fusion → decoder → losses, on `g`.
    /// A cache may only be supplied while the encoder is frozen. Evaluating
    /// with every expert detached decodes from the base tokens alone.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        sample: &RenderedSample,
        cache: Option<&SampleCache>,
        opts: &ForwardOptions,
        rng: &mut RandomSource,
    ) -> Result<ForwardOut> {
        let t_vis = match cache {
            Some(c) => g.constant(c.t_vis.clone()),
            None => {
                let patches = g.constant(VisionEncoder::patches(&self.cfg, sample)?);
                self.encoder.forward(g, p, patches)?
            }
        };
        let (mut imp, mut load, mut scores, mut weights) = (None, None, None, None);
        let bypass = opts.retained.is_empty() && opts.mode == Mode::Eval;
        let fused = match &self.experts {
            None => t_vis,
            Some(_) if bypass => t_vis,
            Some(e) => {
                let k = e.hub.len();
                let src = ParamSource::Bound(p);
                let r = e.gate.forward(g, &src, t_vis)?;
                let clean = ensemble_weights_graph(g, r, None, &opts.retained)?;
                let noisy = opts.noise && opts.mode != Mode::Eval;
                let w = if noisy {
                    ensemble_weights_graph(g, r, Some(rng), &opts.retained)?
                } else {
                    clean
                };
                let mut projected = vec![None; k];
                for (e_id, slot) in projected.iter_mut().enumerate() {
                    if !opts.compute_detached && !opts.retained.contains(&e_id) {
                        continue;
                    }
                    let cached = cache.and_then(|c| c.expert_tokens.get(e_id)).and_then(Option::as_ref);
                    let t = e.hub.aligned_tokens(g, &src, e_id, sample, cached)?;
                    *slot = Some(e.hub.project(g, &src, e_id, t)?);
                }
                let t_exp = ensemble_graph(g, w, &projected)?;
                if opts.mode == Mode::Pretrain {
                    imp = Some(importance_loss_graph(g, clean)?);
                    load = Some(load_loss_graph(g, r, 1.0 / k as f64)?);
                }
                scores = Some(r);
                weights = Some(w);
                match opts.strategy {
                    TransferStrategy::Residual => fuse_residual_graph(g, &src, &e.fusion, opts.lambda, t_vis, t_exp)?,
                    TransferStrategy::Direct => g.add(t_vis, t_exp)?,
                    TransferStrategy::Concat => g.concat_rows(&[t_vis, t_exp])?,
                }
            }
        };
        let (logits, labels) = self.decoder.teacher_forced(g, p, fused, &sample.caption, opts.adaptors)?;
        let lm = g.cross_entropy(logits, &labels)?;
        let alpha_t = if opts.mode == Mode::Pretrain && opts.aux { opts.alpha_t } else { 0.0 };
        let total = match (imp, load) {
            (Some(i), Some(l)) if alpha_t > 0.0 => {
                let aux = g.add(i, l)?;
                let aux = g.scale(aux, 0.5 * alpha_t);
                g.add(lm, aux)?
            }
            _ => lm,
        };
        Ok(ForwardOut {
            total,
            lm,
            imp,
            load,
            alpha_t,
            scores,
            weights,
            t_vis,
            fused,
            logits,
            labels,
        })
    }

    /// One forward pass outside training; returns the losses and routing.
    pub fn forward_tove(
        &self,
        sample: &RenderedSample,
        opts: &ForwardOptions,
        rng: &mut RandomSource,
    ) -> Result<(LossBreakdown, Option<RoutingState>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward(&mut g, &p, sample, None, opts, rng)?;
        Ok((out.breakdown(&g), out.routing_state(&g, opts)))
    }

    /// Checks that `retained` names existing experts.
    pub fn check_retained(&self, retained: &[usize]) -> Result<()> {
        if retained.is_empty() {
            return Err(Error::EmptyRetainedSet);
        }
        match retained.iter().find(|&&k| k >= self.num_experts()) {
            Some(&k) => Err(Error::UnknownExpert(k)),
            None => Ok(()),
        }
    }
}
