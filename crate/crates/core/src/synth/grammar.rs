//! Caption vocabulary and the scene ↔ caption mapping.
//!
//! A caption lists every occupied slot in raster order as
//! `<cell> <attribute> <color>`, then `EOS`. The attribute token belongs to
//! the family bound to the object's color group. Naming the attribute before
//! the color keeps the decoder from conditioning it on the color token.

use crate::error::{Error, Result};
use crate::synth::scene::{Family, Object, Scene, NUM_COLORS, NUM_SHAPES, NUM_SLOTS, NUM_TEXTURES};
use crate::vlm::TokenizedCaption;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const DESCRIBE: usize = 3;
pub const CELL_BASE: usize = 4;
pub const COLOR_BASE: usize = CELL_BASE + NUM_SLOTS;
pub const SHAPE_BASE: usize = COLOR_BASE + NUM_COLORS;
pub const TEXTURE_BASE: usize = SHAPE_BASE + NUM_SHAPES;
pub const DEPTH_BASE: usize = TEXTURE_BASE + NUM_TEXTURES;
pub const EDGE_BASE: usize = DEPTH_BASE + 4;
pub const USED_VOCAB: usize = EDGE_BASE + 2;
pub const DEFAULT_VOCAB: usize = 64;
/// Prompt + 4 objects × 3 tokens + EOS.
pub const MAX_CAPTION: usize = 2 + 4 * 3 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Special,
    Cell,
    Color,
    Attribute(Family),
    Unused,
}

impl TokenKind {
    pub fn is_expert_only(self) -> bool {
        matches!(self, TokenKind::Attribute(_))
    }
}

/// Vocabulary table and the caption template.
#[derive(Clone, Debug)]
pub struct CaptionGrammar {
    pub vocab: usize,
}

impl Default for CaptionGrammar {
    fn default() -> Self {
        Self { vocab: DEFAULT_VOCAB }
    }
}

fn family_base(f: Family) -> usize {
    match f {
        Family::Shape => SHAPE_BASE,
        Family::Texture => TEXTURE_BASE,
        Family::Depth => DEPTH_BASE,
        Family::Edge => EDGE_BASE,
    }
}

fn family_size(f: Family) -> usize {
    match f {
        Family::Shape => NUM_SHAPES,
        Family::Texture => NUM_TEXTURES,
        Family::Depth => 4,
        Family::Edge => 2,
    }
}

/// One parsed `<cell> <attribute> <color>` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptionEntry {
    pub slot: usize,
    pub color: usize,
    pub family: Family,
    pub value: usize,
}

impl CaptionGrammar {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < USED_VOCAB {
            return Err(Error::ConfigInvalid(format!("vocabulary {vocab} smaller than {USED_VOCAB}")));
        }
        Ok(Self { vocab })
    }

    pub fn prompt(&self) -> Vec<usize> {
        vec![BOS, DESCRIBE]
    }

    pub fn kind(&self, id: usize) -> TokenKind {
        match id {
            PAD | BOS | EOS | DESCRIBE => TokenKind::Special,
            i if i < COLOR_BASE => TokenKind::Cell,
            i if i < SHAPE_BASE => TokenKind::Color,
            i if i < TEXTURE_BASE => TokenKind::Attribute(Family::Shape),
            i if i < DEPTH_BASE => TokenKind::Attribute(Family::Texture),
            i if i < EDGE_BASE => TokenKind::Attribute(Family::Depth),
            i if i < USED_VOCAB => TokenKind::Attribute(Family::Edge),
            _ => TokenKind::Unused,
        }
    }

    pub fn attribute_token(&self, o: &Object) -> usize {
        let f = Family::for_color(o.color);
        family_base(f) + o.attribute(f)
    }

    pub fn target_ids(&self, scene: &Scene) -> Vec<usize> {
        let mut ids = Vec::with_capacity(3 * scene.count() + 1);
        for (slot, o) in scene.objects() {
            ids.extend([CELL_BASE + slot, self.attribute_token(o), COLOR_BASE + o.color]);
        }
        ids.push(EOS);
        ids
    }

    pub fn caption(&self, scene: &Scene) -> TokenizedCaption {
        TokenizedCaption::new(self.prompt(), self.target_ids(scene), self.vocab)
            .expect("grammar ids fit the vocabulary")
    }

    /// Inverse of [`Self::target_ids`]. Rejects anything the template cannot
    /// produce.
    pub fn parse(&self, target: &[usize]) -> Result<Vec<CaptionEntry>> {
        let bad = |why: &str| Error::CorruptDataset(format!("caption {target:?}: {why}"));
        let (&last, body) = target.split_last().ok_or_else(|| bad("empty"))?;
        if last != EOS || body.len() % 3 != 0 {
            return Err(bad("not a sequence of triples ending in EOS"));
        }
        let mut out = Vec::with_capacity(body.len() / 3);
        for t in body.chunks(3) {
            let (TokenKind::Cell, TokenKind::Attribute(family), TokenKind::Color) =
                (self.kind(t[0]), self.kind(t[1]), self.kind(t[2]))
            else {
                return Err(bad("triple out of order"));
            };
            let color = t[2] - COLOR_BASE;
            if Family::for_color(color) != family {
                return Err(bad("attribute family does not match color group"));
            }
            let value = t[1] - family_base(family);
            debug_assert!(value < family_size(family));
            let slot = t[0] - CELL_BASE;
            if out.last().is_some_and(|e: &CaptionEntry| e.slot >= slot) {
                return Err(bad("cells not in raster order"));
            }
            out.push(CaptionEntry {
                slot,
                color,
                family,
                value,
            });
        }
        Ok(out)
    }

    /// Human-readable rendering of ids.
    pub fn describe(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match self.kind(id) {
                TokenKind::Special => ["<pad>", "<bos>", "<eos>", "<describe>"][id].to_string(),
                TokenKind::Cell => format!("cell{}", id - CELL_BASE),
                TokenKind::Color => format!("color{}", id - COLOR_BASE),
                TokenKind::Attribute(f) => format!("{}{}", f.name(), id - family_base(f)),
                TokenKind::Unused => format!("<{id}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
