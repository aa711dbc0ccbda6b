use crate::error::{Error, Result};
use crate::numerics::layers::{Attention, LayerNorm};
use crate::numerics::{Binding, Graph, Init, Linear, Mlp, ParamId, ParamStore, RandomSource, Tensor, Var};
use crate::vlm::caption::TokenizedCaption;
use crate::vlm::config::ModelConfig;

pub const DEC_PREFIX: &str = "dec.";
pub const ADAPTOR_PREFIX: &str = "dec.adapt";

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
    adaptor: Mlp,
}

/// Causal transformer decoder with cross-attention over vision tokens and
/// a bottleneck adaptor after each block.
#[derive(Clone, Debug)]
pub struct Decoder {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    head: Linear,
    vocab: usize,
    max_len: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RandomSource) -> Self {
        let d = cfg.d_model;
        let tok = store.add(
            "dec.tok",
            Tensor::from_parts(vec![cfg.vocab, d], rng.normal_vec(cfg.vocab * d, 0.0, 1.0)),
            true,
        );
        let pos = store.add(
            "dec.pos",
            Tensor::from_parts(vec![cfg.max_len, d], rng.normal_vec(cfg.max_len * d, 0.0, 0.5)),
            true,
        );
        let blocks = (0..cfg.dec_blocks)
            .map(|i| {
                let n = format!("dec.blk{i}");
                DecoderBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d, true),
                    self_attn: Attention::new(store, &format!("{n}.self"), d, cfg.heads, rng, true),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d, true),
                    cross_attn: Attention::new(store, &format!("{n}.cross"), d, cfg.heads, rng, true),
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), d, true),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), d, d * cfg.mlp_ratio, d, Init::FanIn, rng, true),
                    adaptor: Mlp::new(
                        store,
                        &format!("{ADAPTOR_PREFIX}{i}"),
                        d,
                        cfg.adaptor_width(),
                        d,
                        Init::Zeros,
                        rng,
                        false,
                    ),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, "dec.ln_f", d, true);
        let head = Linear::new(store, "dec.head", d, cfg.vocab, true, Init::FanIn, rng, true);
        Self {
            tok,
            pos,
            blocks,
            ln_f,
            head,
            vocab: cfg.vocab,
            max_len: cfg.max_len,
        }
    }

    /// Logits `[L × V]` for the input ids, attending to `vis` (any number of
    /// rows).
    pub fn forward(&self, g: &mut Graph, p: &Binding, vis: Var, ids: &[usize], adaptors: bool) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::shape("decoder", "empty input"));
        }
        if ids.len() > self.max_len {
            return Err(Error::shape("decoder", format!("{} tokens exceed max length {}", ids.len(), self.max_len)));
        }
        let tok = g.embed_rows(p.var(self.tok), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embed_rows(p.var(self.pos), &positions)?;
        let mut x = g.add(tok, pos)?;
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x)?;
            let h = b.self_attn.forward(g, p, h, h, true)?;
            x = g.add(x, h)?;
            let h = b.ln2.forward(g, p, x)?;
            let h = b.cross_attn.forward(g, p, h, vis, false)?;
            x = g.add(x, h)?;
            let h = b.ln3.forward(g, p, x)?;
            let h = b.mlp.forward(g, p, h)?;
            x = g.add(x, h)?;
            if adaptors {
                let a = b.adaptor.forward(g, p, x)?;
                x = g.add(x, a)?;
            }
        }
        let x = self.ln_f.forward(g, p, x)?;
        self.head.forward(g, p, x)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Teacher-forced logits and the per-position labels.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        p: &Binding,
        vis: Var,
        caption: &TokenizedCaption,
        adaptors: bool,
    ) -> Result<(Var, Vec<Option<usize>>)> {
        if caption.vocab > self.vocab {
            return Err(Error::VocabOverflow {
                id: caption.vocab - 1,
                vocab: self.vocab,
            });
        }
        let (inputs, labels) = caption.teacher_forcing();
        let logits = self.forward(g, p, vis, &inputs, adaptors)?;
        Ok((logits, labels))
    }

    /// Mean cross-entropy over caption positions; prompt positions ignored.
    pub fn lm_loss(
        &self,
        g: &mut Graph,
        p: &Binding,
        vis: Var,
        caption: &TokenizedCaption,
        adaptors: bool,
    ) -> Result<Var> {
        let (logits, labels) = self.teacher_forced(g, p, vis, caption, adaptors)?;
        g.cross_entropy(logits, &labels)
    }

    /// Argmax decoding until EOS or `max_len` new tokens; EOS is not
    /// included.
    pub fn generate_greedy(
        &self,
        p: &ParamStore,
        vis: &Tensor,
        prompt: &[usize],
        eos: usize,
        max_len: usize,
        adaptors: bool,
    ) -> Result<Vec<usize>> {
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let v = g.constant(vis.clone());
        let mark = g.len();
        for _ in 0..max_len {
            if ids.len() > self.max_len {
                break;
            }
            g.truncate(mark);
            let logits = self.forward(&mut g, &b, v, &ids, adaptors)?;
            let last = g.value(logits).row(ids.len() - 1);
            let next = (0..last.len())
                .max_by(|&a, &c| last[a].total_cmp(&last[c]).then(c.cmp(&a)))
                .expect("vocabulary is non-empty");
            if next == eos {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }
}
