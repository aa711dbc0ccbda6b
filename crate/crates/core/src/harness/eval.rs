use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::data::Example;
use crate::numerics::{Graph, RandomSource};
use crate::objectives::entropy;
use crate::synth::grammar::{CaptionGrammar, TokenKind};
use crate::synth::scene::{Family, GRID_SLOTS};
use crate::synth::HoldoutRule;
use crate::vlm::{ForwardOptions, ToveModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub hits: u64,
    pub total: u64,
}

impl Tally {
    pub fn add(&mut self, hit: bool) {
        self.hits += hit as u64;
        self.total += 1;
    }

    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Teacher-forced caption accuracy and routing summaries over a split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub lm: f64,
    pub overall: Tally,
    pub cell: Tally,
    pub color: Tally,
    /// Indexed by [`Family::index`].
    pub family: [Tally; 4],
    /// All expert-only attribute tokens.
    pub attribute: Tally,
    /// Attribute tokens of objects whose (color, shape) pair was held out of
    /// training.
    pub novel_attribute: Tally,
    /// Mean ensemble weight per expert over all tokens.
    pub expert_means: Vec<f64>,
    /// `[family][expert]`: mean weight over tokens covering objects whose
    /// caption reports that family.
    pub family_routing: Vec<Vec<f64>>,
}

impl EvalSummary {
    pub fn accuracy(&self) -> f64 {
        self.overall.rate()
    }

    pub fn attribute_accuracy(&self) -> f64 {
        self.attribute.rate()
    }

    /// Usage entropy of the mean expert weights.
    pub fn routing_entropy(&self) -> f64 {
        entropy(&self.expert_means)
    }

    /// Mean weight of the expert named after `f` over that family's objects.
    pub fn matched_weight(&self, model: &ToveModel, f: Family) -> Option<f64> {
        let e = model.experts.as_ref()?;
        let k = e.hub.manifest.experts.iter().position(|s| s.name == f.name())?;
        self.family_routing.get(f.index()).map(|row| row[k])
    }
}

/// Token rows covering a slot on the model's grid.
fn slot_tokens(slot: usize, grid: (usize, usize)) -> Vec<usize> {
    let (sh, sw) = (grid.0 / GRID_SLOTS, grid.1 / GRID_SLOTS);
    let (r, c) = (slot / GRID_SLOTS, slot % GRID_SLOTS);
    (0..sh)
        .flat_map(|dy| (0..sw).map(move |dx| (r * sh + dy) * grid.1 + c * sw + dx))
        .collect()
}

pub fn evaluate(
    model: &ToveModel,
    examples: &[Example],
    opts: &ForwardOptions,
    grammar: &CaptionGrammar,
    holdout: &HoldoutRule,
) -> Result<EvalSummary> {
    let k = model.num_experts();
    let mut s = EvalSummary {
        expert_means: vec![0.0; k],
        family_routing: vec![vec![0.0; k]; 4],
        ..Default::default()
    };
    let mut family_rows = [0usize; 4];
    let mut rows = 0usize;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mark = g.len();
    let mut rng = RandomSource::new(0);
    for ex in examples {
        g.truncate(mark);
        let sample = ex.sample(grammar);
        let out = model.forward(&mut g, &p, &sample, Some(&ex.cache), opts, &mut rng)?;
        s.lm += g.value(out.lm).item() / examples.len() as f64;
        let logits = g.value(out.logits);
        let objects: Vec<_> = ex.scene.objects().collect();
        for (pos, label) in out.labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            let row = logits.row(pos);
            let pred = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("vocabulary is non-empty");
            let hit = pred == label;
            s.overall.add(hit);
            match grammar.kind(label) {
                TokenKind::Cell => s.cell.add(hit),
                TokenKind::Color => s.color.add(hit),
                TokenKind::Attribute(f) => {
                    s.family[f.index()].add(hit);
                    s.attribute.add(hit);
                    let target_index = pos + 1 - sample.caption.prompt.len();
                    let (_, o) = objects[target_index / 3];
                    if holdout.is_held_out(o) {
                        s.novel_attribute.add(hit);
                    }
                }
                _ => {}
            }
        }
        if let Some(w) = out.weights {
            let w = g.value(w);
            for i in 0..model.cfg.tokens() {
                s.expert_means.iter_mut().zip(w.row(i)).for_each(|(m, v)| *m += v);
            }
            rows += model.cfg.tokens();
            for (slot, o) in &objects {
                let f = Family::for_color(o.color).index();
                for t in slot_tokens(*slot, model.cfg.grid) {
                    s.family_routing[f].iter_mut().zip(w.row(t)).for_each(|(m, v)| *m += v);
                    family_rows[f] += 1;
                }
            }
        }
    }
    if rows > 0 {
        s.expert_means.iter_mut().for_each(|m| *m /= rows as f64);
    }
    for (f, n) in family_rows.iter().enumerate() {
        if *n > 0 {
            s.family_routing[f].iter_mut().for_each(|m| *m /= *n as f64);
        }
    }
    Ok(s)
}
