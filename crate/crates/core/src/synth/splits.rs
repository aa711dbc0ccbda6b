use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::RandomSource;
use crate::synth::grammar::CaptionGrammar;
use crate::synth::scene::{generate_scene, Object, Scene, NUM_COLORS, NUM_SHAPES, NUM_SLOTS};

/// Which (color, shape) combinations are kept out of training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HoldoutRule {
    None,
    /// Train never contains a held-out pair; validation scenes each contain
    /// at least one.
    NovelComposition(Vec<(usize, usize)>),
}

impl HoldoutRule {
    pub fn default_novel() -> Self {
        HoldoutRule::NovelComposition(vec![(0, 0), (1, 1)])
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        match self {
            HoldoutRule::None => &[],
            HoldoutRule::NovelComposition(p) => p,
        }
    }

    pub fn is_held_out(&self, o: &Object) -> bool {
        self.pairs().iter().any(|&(c, s)| o.color == c && o.shape == s)
    }

    fn touches(&self, scene: &Scene) -> bool {
        scene.objects().any(|(_, o)| self.is_held_out(o))
    }

    fn validate(&self) -> Result<()> {
        let HoldoutRule::NovelComposition(pairs) = self else { return Ok(()) };
        let space = NUM_COLORS * NUM_SHAPES;
        let unique: HashSet<_> = pairs.iter().collect();
        if pairs.is_empty() {
            return Err(Error::InsufficientCombinations("no held-out combinations".into()));
        }
        if let Some(p) = pairs.iter().find(|&&(c, s)| c >= NUM_COLORS || s >= NUM_SHAPES) {
            return Err(Error::InsufficientCombinations(format!("pair {p:?} outside the combination space")));
        }
        if unique.len() * 2 > space {
            return Err(Error::InsufficientCombinations(format!(
                "{} of {space} combinations held out",
                unique.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub holdout: HoldoutRule,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

/// Draws `n_train` training and `n_val` validation scenes. Validation never
/// repeats a training scene.
pub fn make_splits(rng: &mut RandomSource, n_train: usize, n_val: usize, holdout: HoldoutRule) -> Result<Dataset> {
    holdout.validate()?;
    let seed = rng.seed();
    let mut train_rng = rng.child("train");
    let mut val_rng = rng.child("val");
    let mut train = Vec::with_capacity(n_train);
    while train.len() < n_train {
        let s = generate_scene(&mut train_rng);
        if !holdout.touches(&s) {
            train.push(s);
        }
    }
    let seen: HashSet<&Scene> = train.iter().collect();
    let novel = matches!(holdout, HoldoutRule::NovelComposition(_));
    let mut val = Vec::with_capacity(n_val);
    while val.len() < n_val {
        let s = generate_scene(&mut val_rng);
        if novel != holdout.touches(&s) || seen.contains(&s) {
            continue;
        }
        val.push(s);
    }
    Ok(Dataset {
        seed,
        holdout,
        train,
        val,
    })
}

const HEADER_MAGIC: &str = "tove-dataset v1";
const SLOT_BYTES: usize = 6;

impl Dataset {
    /// Text header ending in a blank line, then little-endian binary records
    /// (scene slots plus caption ids).
    pub fn write(&self, path: &Path, grammar: &CaptionGrammar) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{HEADER_MAGIC}")?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "train = {}", self.train.len())?;
        writeln!(f, "val = {}", self.val.len())?;
        writeln!(f, "vocab = {}", grammar.vocab)?;
        let pairs: Vec<String> = self.holdout.pairs().iter().map(|(c, s)| format!("{c}:{s}")).collect();
        writeln!(
            f,
            "holdout = {}",
            match self.holdout {
                HoldoutRule::None => "none".to_string(),
                _ => pairs.join(","),
            }
        )?;
        writeln!(f, "grammar = {}", grammar.describe(&(0..crate::synth::grammar::USED_VOCAB).collect::<Vec<_>>()))?;
        writeln!(f)?;
        for s in self.train.iter().chain(&self.val) {
            for slot in &s.slots {
                let rec = match slot {
                    None => [0u8; SLOT_BYTES],
                    Some(o) => [1, o.color as u8, o.shape as u8, o.texture as u8, o.depth as u8, o.boundary as u8],
                };
                f.write_all(&rec)?;
            }
            let ids = grammar.target_ids(s);
            f.write_all(&(ids.len() as u16).to_le_bytes())?;
            for id in ids {
                f.write_all(&(id as u16).to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path, grammar: &CaptionGrammar) -> Result<Self> {
        let corrupt = |why: String| Error::CorruptDataset(why);
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != HEADER_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut fields = std::collections::HashMap::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(corrupt("header not terminated".into()));
            }
            let l = line.trim_end();
            if l.is_empty() {
                break;
            }
            let (k, v) = l.split_once(" = ").ok_or_else(|| corrupt(format!("header line {l:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let num = |k: &str| -> Result<u64> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| corrupt(format!("header field {k}")))
        };
        let (seed, n_train, n_val) = (num("seed")?, num("train")? as usize, num("val")? as usize);
        let holdout = match fields.get("holdout").map(String::as_str) {
            Some("none") => HoldoutRule::None,
            Some(list) => {
                let pairs = list
                    .split(',')
                    .map(|p| {
                        let (c, s) = p.split_once(':')?;
                        Some((c.parse().ok()?, s.parse().ok()?))
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| corrupt(format!("holdout {list:?}")))?;
                HoldoutRule::NovelComposition(pairs)
            }
            None => return Err(corrupt("header field holdout".into())),
        };
        let mut scenes = Vec::with_capacity(n_train + n_val);
        let mut buf = [0u8; SLOT_BYTES];
        for _ in 0..n_train + n_val {
            let mut slots = [None; NUM_SLOTS];
            for slot in &mut slots {
                r.read_exact(&mut buf).map_err(|_| corrupt("truncated record".into()))?;
                *slot = match buf[0] {
                    0 => None,
                    1 => Some(Object {
                        color: buf[1] as usize,
                        shape: buf[2] as usize,
                        texture: buf[3] as usize,
                        depth: buf[4] as usize,
                        boundary: buf[5] != 0,
                    }),
                    b => return Err(corrupt(format!("occupancy byte {b}"))),
                };
            }
            let scene = Scene { slots };
            if !scene.is_valid() {
                return Err(corrupt("invalid scene".into()));
            }
            let mut two = [0u8; 2];
            r.read_exact(&mut two).map_err(|_| corrupt("truncated caption".into()))?;
            let len = u16::from_le_bytes(two) as usize;
            let mut ids = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut two).map_err(|_| corrupt("truncated caption".into()))?;
                ids.push(u16::from_le_bytes(two) as usize);
            }
            if ids != grammar.target_ids(&scene) {
                return Err(corrupt("caption does not match scene".into()));
            }
            scenes.push(scene);
        }
        if r.read(&mut buf)? != 0 {
            return Err(corrupt("trailing bytes".into()));
        }
        let val = scenes.split_off(n_train);
        Ok(Dataset {
            seed,
            holdout,
            train: scenes,
            val,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_oversized_holdout() {
        let pairs: Vec<_> = (0..NUM_COLORS).flat_map(|c| (0..3).map(move |s| (c, s))).collect();
        let r = make_splits(&mut RandomSource::new(0), 4, 4, HoldoutRule::NovelComposition(pairs));
        assert!(matches!(r, Err(Error::InsufficientCombinations(_))));
        let r = make_splits(&mut RandomSource::new(0), 4, 4, HoldoutRule::NovelComposition(vec![]));
        assert!(matches!(r, Err(Error::InsufficientCombinations(_))));
    }
}
