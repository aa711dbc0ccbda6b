use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::numerics::RandomSource;
use crate::synth::{make_splits, render, CaptionGrammar, Dataset, RenderedSample, Scene};
use crate::vlm::{SampleCache, ToveModel};

/// A scene plus the frozen model inputs derived from it. The image itself
/// is re-rendered on demand.
#[derive(Clone, Debug)]
pub struct Example {
    pub scene: Scene,
    pub cache: SampleCache,
}

impl Example {
    pub fn sample(&self, grammar: &CaptionGrammar) -> RenderedSample {
        render(&self.scene, grammar)
    }
}

pub fn grammar(cfg: &RunConfig) -> Result<CaptionGrammar> {
    CaptionGrammar::new(cfg.model.vocab)
}

/// The dataset a config describes, drawn from the run seed.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut rng = RandomSource::new(cfg.seed).child("data");
    make_splits(&mut rng, cfg.data.n_train, cfg.data.n_val, cfg.data.rule())
}

/// Caches the frozen encoder output and parameter-free expert tokens.
pub fn prepare(model: &ToveModel, scenes: &[Scene], grammar: &CaptionGrammar) -> Result<Vec<Example>> {
    scenes
        .iter()
        .map(|s| {
            let cache = model.precompute(&render(s, grammar))?;
            Ok(Example {
                scene: s.clone(),
                cache,
            })
        })
        .collect()
}
