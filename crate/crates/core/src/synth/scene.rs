use crate::numerics::RandomSource;

pub const GRID_SLOTS: usize = 4;
pub const NUM_SLOTS: usize = GRID_SLOTS * GRID_SLOTS;
pub const SLOT_PX: usize = 8;
pub const CANVAS: usize = GRID_SLOTS * SLOT_PX;
/// Objects fill the slot minus a one-pixel margin.
pub const OBJECT_PX: usize = SLOT_PX - 2;
pub const MAX_OBJECTS: usize = 4;

pub const NUM_COLORS: usize = 8;
pub const NUM_SHAPES: usize = 4;
pub const NUM_TEXTURES: usize = 4;

/// The attribute families that only an expert can see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Shape,
    Texture,
    Depth,
    Edge,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Shape, Family::Texture, Family::Depth, Family::Edge];

    /// Colors come in four groups of two adjacent hues; each group names
    /// one family in the caption.
    pub fn for_color(color: usize) -> Family {
        Family::ALL[color / 2]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Shape => "shape",
            Family::Texture => "texture",
            Family::Depth => "depth",
            Family::Edge => "edge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub color: usize,
    pub shape: usize,
    pub texture: usize,
    /// 0 is nearest.
    pub depth: usize,
    pub boundary: bool,
}

impl Object {
    /// Value of the attribute the caption reports for this object.
    pub fn attribute(&self, family: Family) -> usize {
        match family {
            Family::Shape => self.shape,
            Family::Texture => self.texture,
            Family::Depth => self.depth,
            Family::Edge => self.boundary as usize,
        }
    }
}

/// A 4×4 grid of slots, 1 to 4 of them occupied.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub slots: [Option<Object>; NUM_SLOTS],
}

impl Scene {
    /// Occupied slots in raster order.
    pub fn objects(&self) -> impl Iterator<Item = (usize, &Object)> {
        self.slots.iter().enumerate().filter_map(|(i, o)| o.as_ref().map(|o| (i, o)))
    }

    pub fn count(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn is_valid(&self) -> bool {
        let n = self.count();
        if !(1..=MAX_OBJECTS).contains(&n) {
            return false;
        }
        let mut seen = vec![false; n];
        for (_, o) in self.objects() {
            if o.color >= NUM_COLORS || o.shape >= NUM_SHAPES || o.texture >= NUM_TEXTURES || o.depth >= n {
                return false;
            }
            if std::mem::replace(&mut seen[o.depth], true) {
                return false;
            }
        }
        true
    }

    pub fn contains_pair(&self, color: usize, shape: usize) -> bool {
        self.objects().any(|(_, o)| o.color == color && o.shape == shape)
    }
}

/// Uniform valid scene: object count, slots, attributes and the depth
/// permutation are drawn independently.
pub fn generate_scene(rng: &mut RandomSource) -> Scene {
    let n = 1 + rng.below(MAX_OBJECTS);
    let mut order: Vec<usize> = (0..NUM_SLOTS).collect();
    rng.shuffle(&mut order);
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable();
    let mut depths: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut depths);
    let mut slots = [None; NUM_SLOTS];
    for (slot, depth) in chosen.into_iter().zip(depths) {
        slots[slot] = Some(Object {
            color: rng.below(NUM_COLORS),
            shape: rng.below(NUM_SHAPES),
            texture: rng.below(NUM_TEXTURES),
            depth,
            boundary: rng.below(2) == 1,
        });
    }
    Scene { slots }
}
