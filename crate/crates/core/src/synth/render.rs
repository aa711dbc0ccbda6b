use std::collections::BTreeMap;

use crate::numerics::Tensor;
use crate::synth::grammar::CaptionGrammar;
use crate::synth::scene::{Scene, CANVAS, GRID_SLOTS, NUM_SHAPES, NUM_TEXTURES, OBJECT_PX, SLOT_PX};
use crate::vlm::TokenizedCaption;

pub const BASE_CHANNELS: usize = 3;
pub const DETAIL_CHANNELS: usize = 4;

/// Eight fully saturated hues, 45° apart.
pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.75, 0.0],
    [0.5, 1.0, 0.0],
    [0.0, 1.0, 0.25],
    [0.0, 1.0, 1.0],
    [0.0, 0.25, 1.0],
    [0.5, 0.0, 1.0],
    [1.0, 0.0, 0.75],
];

/// Raw input an expert reads.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceChannel {
    /// Per-pixel class ids in `0..=classes`, 0 meaning background.
    Labels {
        height: usize,
        width: usize,
        classes: usize,
        ids: Vec<usize>,
    },
    /// Per-pixel real-valued map, shape `[height, width]`.
    Map(Tensor),
}

impl SourceChannel {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            SourceChannel::Labels { height, width, .. } => (*height, *width),
            SourceChannel::Map(t) => (t.shape()[0], t.shape()[1]),
        }
    }
}

/// One image with everything every consumer needs.
#[derive(Clone, Debug)]
pub struct RenderedSample {
    /// `[H, W, 3]`, color only.
    pub base: Tensor,
    /// `[H, W, 4]` fine detail (shape, texture, depth, outline) that the
    /// frozen encoder's patch embedding ignores.
    pub detail: Tensor,
    pub sources: BTreeMap<String, SourceChannel>,
    pub caption: TokenizedCaption,
}

impl RenderedSample {
    pub fn height(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.base.shape()[1]
    }
}

fn object_pixels(slot: usize) -> impl Iterator<Item = (usize, usize, bool)> {
    let (sy, sx) = (slot / GRID_SLOTS * SLOT_PX + 1, slot % GRID_SLOTS * SLOT_PX + 1);
    (0..OBJECT_PX).flat_map(move |dy| {
        (0..OBJECT_PX).map(move |dx| {
            let rim = dy == 0 || dx == 0 || dy == OBJECT_PX - 1 || dx == OBJECT_PX - 1;
            (sy + dy, sx + dx, rim)
        })
    })
}

/// Paints the base canvas, detail channels and expert sources for a scene.
pub fn render(scene: &Scene, grammar: &CaptionGrammar) -> RenderedSample {
    let px = CANVAS * CANVAS;
    let mut base = vec![0.0; px * BASE_CHANNELS];
    let mut detail = vec![0.0; px * DETAIL_CHANNELS];
    let mut shape_ids = vec![0usize; px];
    let mut texture_ids = vec![0usize; px];
    let mut depth = vec![0.0; px];
    let mut edge = vec![0.0; px];
    for (slot, o) in scene.objects() {
        let d = (o.depth + 1) as f64 / 4.0;
        for (y, x, rim) in object_pixels(slot) {
            let p = y * CANVAS + x;
            base[p * BASE_CHANNELS..(p + 1) * BASE_CHANNELS].copy_from_slice(&PALETTE[o.color]);
            let outline = if rim && o.boundary { 1.0 } else { 0.0 };
            let det = [
                (o.shape + 1) as f64 / NUM_SHAPES as f64,
                (o.texture + 1) as f64 / NUM_TEXTURES as f64,
                d,
                outline,
            ];
            detail[p * DETAIL_CHANNELS..(p + 1) * DETAIL_CHANNELS].copy_from_slice(&det);
            shape_ids[p] = o.shape + 1;
            texture_ids[p] = o.texture + 1;
            depth[p] = d;
            edge[p] = outline;
        }
    }
    let labels = |classes, ids| SourceChannel::Labels {
        height: CANVAS,
        width: CANVAS,
        classes,
        ids,
    };
    let map = |v| SourceChannel::Map(Tensor::from_parts(vec![CANVAS, CANVAS], v));
    let sources = BTreeMap::from([
        ("shape".to_string(), labels(NUM_SHAPES, shape_ids)),
        ("texture".to_string(), labels(NUM_TEXTURES, texture_ids)),
        ("depth".to_string(), map(depth)),
        ("edge".to_string(), map(edge)),
    ]);
    RenderedSample {
        base: Tensor::from_parts(vec![CANVAS, CANVAS, BASE_CHANNELS], base),
        detail: Tensor::from_parts(vec![CANVAS, CANVAS, DETAIL_CHANNELS], detail),
        sources,
        caption: grammar.caption(scene),
    }
}
