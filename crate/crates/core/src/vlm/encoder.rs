use crate::error::{Error, Result};
use crate::numerics::layers::{Attention, LayerNorm};
use crate::numerics::{Binding, Graph, Init, Linear, Mlp, ParamId, ParamStore, RandomSource, Tensor, Var};
use crate::synth::RenderedSample;
use crate::vlm::config::ModelConfig;

pub const ENC_PREFIX: &str = "enc.";

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Toy ViT: patch embedding, optional position embedding, pre-norm blocks
/// and a final layer norm. The patch embedding starts with zero weights on
/// the detail channels, so a freshly built encoder sees color only.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    patch: Linear,
    pos: Option<ParamId>,
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RandomSource, trainable: bool) -> Self {
        let d = cfg.d_model;
        let patch = Linear::new(
            store,
            "enc.patch",
            cfg.patch_dim(),
            d,
            true,
            Init::Normal((1.0 / (cfg.patch_dim() * cfg.base_channels / cfg.channels()) as f64).sqrt()),
            rng,
            trainable,
        );
        let c = cfg.channels();
        let w = store.get_mut(patch.weight).data_mut();
        for row in 0..cfg.patch_dim() {
            if row % c >= cfg.base_channels {
                w[row * d..(row + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let pos = cfg.positional.then(|| {
            let t = Tensor::from_parts(vec![cfg.tokens(), d], rng.normal_vec(cfg.tokens() * d, 0.0, 0.5));
            store.add("enc.pos", t, trainable)
        });
        let blocks = (0..cfg.enc_blocks)
            .map(|i| {
                let n = format!("enc.blk{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d, trainable),
                    attn: Attention::new(store, &format!("{n}.attn"), d, cfg.heads, rng, trainable),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d, trainable),
                    mlp: Mlp::new(
                        store,
                        &format!("{n}.mlp"),
                        d,
                        d * cfg.mlp_ratio,
                        d,
                        Init::FanIn,
                        rng,
                        trainable,
                    ),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, "enc.ln_f", d, trainable);
        Self {
            patch,
            pos,
            blocks,
            ln_f,
        }
    }

    /// Row-major patches `[N × patch_dim]`; within a patch, pixels in raster
    /// order, base channels then detail channels.
    pub fn patches(cfg: &ModelConfig, sample: &RenderedSample) -> Result<Tensor> {
        let (h, w) = cfg.pixels;
        let want_base = [h, w, cfg.base_channels];
        let want_detail = [h, w, cfg.detail_channels];
        if sample.base.shape() != want_base || (cfg.detail_channels > 0 && sample.detail.shape() != want_detail) {
            return Err(Error::shape(
                "encode_image",
                format!(
                    "sample base {:?} / detail {:?}, expected {want_base:?} / {want_detail:?}",
                    sample.base.shape(),
                    sample.detail.shape()
                ),
            ));
        }
        let (ph, pw) = cfg.patch();
        let (cb, cd, c) = (cfg.base_channels, cfg.detail_channels, cfg.channels());
        let mut out = vec![0.0; cfg.tokens() * cfg.patch_dim()];
        for gy in 0..cfg.grid.0 {
            for gx in 0..cfg.grid.1 {
                let row = &mut out[(gy * cfg.grid.1 + gx) * cfg.patch_dim()..][..cfg.patch_dim()];
                for dy in 0..ph {
                    for dx in 0..pw {
                        let p = (gy * ph + dy) * w + gx * pw + dx;
                        let o = (dy * pw + dx) * c;
                        row[o..o + cb].copy_from_slice(&sample.base.data()[p * cb..(p + 1) * cb]);
                        if cd > 0 {
                            row[o + cb..o + c].copy_from_slice(&sample.detail.data()[p * cd..(p + 1) * cd]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![cfg.tokens(), cfg.patch_dim()], out))
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, patches: Var) -> Result<Var> {
        let mut x = self.patch.forward(g, p, patches)?;
        if let Some(pos) = self.pos {
            x = g.add(x, p.var(pos))?;
        }
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x)?;
            let h = b.attn.forward(g, p, h, h, false)?;
            x = g.add(x, h)?;
            let h = b.ln2.forward(g, p, x)?;
            let h = b.mlp.forward(g, p, h)?;
            x = g.add(x, h)?;
        }
        self.ln_f.forward(g, p, x)
    }
}
