use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::Example;
use crate::numerics::{Graph, Optimizer, RandomSource, Var};
use crate::objectives::{alpha_schedule, entropy, LossBreakdown, ScheduleConfig};
use crate::routing::ContributionStats;
use crate::synth::CaptionGrammar;
use crate::vlm::decoder::ADAPTOR_PREFIX;
use crate::vlm::encoder::ENC_PREFIX;
use crate::vlm::{ForwardOptions, Mode, ToveModel};

/// One row of the per-epoch metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub routing_entropy: f64,
    pub expert_means: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub stats: Option<ContributionStats>,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let k = self.epochs.first().map_or(0, |e| e.expert_means.len());
        let mut out = String::from("epoch,lm,imp,load,aux,alpha_t,total,routing_entropy");
        for i in 0..k {
            out.push_str(&format!(",w{i}"));
        }
        out.push('\n');
        for e in &self.epochs {
            let l = &e.loss;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}",
                e.epoch, l.lm, l.imp, l.load, l.aux, l.alpha_t, l.total, e.routing_entropy
            ));
            for w in &e.expert_means {
                out.push_str(&format!(",{w}"));
            }
            out.push('\n');
        }
        out
    }
}

fn training_options(model: &ToveModel, cfg: &RunConfig, mode: Mode) -> ForwardOptions {
    let t = &cfg.train;
    ForwardOptions {
        mode,
        strategy: t.strategy,
        lambda: t.lambda,
        retained: cfg.retained(model.num_experts()),
        noise: t.noise,
        aux: t.aux && mode == Mode::Pretrain,
        alpha_t: 0.0,
        adaptors: mode == Mode::Finetune,
        compute_detached: false,
    }
}

/// Pretrains (α from the cosine schedule, adaptors off) or fine-tunes
/// (α = 0, adaptors on). The vision encoder never trains here.
pub fn train(
    model: &mut ToveModel,
    examples: &[Example],
    cfg: &RunConfig,
    mode: Mode,
    grammar: &CaptionGrammar,
) -> Result<TrainReport> {
    if mode == Mode::Eval {
        return Err(Error::ConfigInvalid("evaluation mode cannot train".into()));
    }
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::ConfigInvalid("no training examples".into()));
    }
    let (epochs, lr) = match mode {
        Mode::Finetune => (cfg.finetune.epochs, cfg.finetune.lr),
        _ => (cfg.train.epochs, cfg.train.lr),
    };
    model.store.set_trainable(ENC_PREFIX, false);
    model.store.set_trainable(ADAPTOR_PREFIX, mode == Mode::Finetune);
    let mut opts = training_options(model, cfg, mode);
    model.check_retained(&opts.retained).or_else(|e| match model.num_experts() {
        0 => Ok(()),
        _ => Err(e),
    })?;
    let root = RandomSource::new(cfg.seed).child(match mode {
        Mode::Finetune => "finetune",
        _ => "pretrain",
    });
    let mut order_rng = root.child("order");
    let mut noise_rng = root.child("noise");
    let mut opt = Optimizer::new(cfg.train.optimizer, lr);
    let schedule = ScheduleConfig {
        alpha0: cfg.train.alpha0,
        epochs,
    };
    let k = model.num_experts();
    let mut stats = (k > 0).then(|| ContributionStats::new(k));
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..epochs {
        opts.alpha_t = match mode {
            Mode::Pretrain => alpha_schedule(&schedule, epoch as f64)?,
            _ => 0.0,
        };
        order_rng.shuffle(&mut order);
        let mut losses = Vec::with_capacity(examples.len());
        let mut epoch_stats = ContributionStats::new(k);
        for batch in order.chunks(cfg.train.batch_size) {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let mut totals: Vec<Var> = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &examples[i];
                let sample = ex.sample(grammar);
                let out = model.forward(&mut g, &p, &sample, Some(&ex.cache), &opts, &mut noise_rng)?;
                losses.push(out.breakdown(&g));
                if let Some(w) = out.weights {
                    let w = g.value(w);
                    epoch_stats.update(w);
                    if let Some(s) = stats.as_mut() {
                        s.update(w);
                    }
                }
                totals.push(out.total);
            }
            let mut sum = totals[0];
            for &t in &totals[1..] {
                sum = g.add(sum, t)?;
            }
            let loss = g.scale(sum, 1.0 / batch.len() as f64);
            let grads = g.backward(loss)?;
            model.store.accumulate(&p, &grads);
            opt.step(&mut model.store);
            debug_assert!(model
                .store
                .ids()
                .filter(|&id| model.store.name(id).starts_with(ENC_PREFIX))
                .all(|id| !model.store.is_trainable(id)));
        }
        report.epochs.push(EpochMetrics {
            epoch,
            loss: LossBreakdown::mean(&losses),
            routing_entropy: entropy(&epoch_stats.means),
            expert_means: epoch_stats.means.clone(),
        });
    }
    report.stats = stats;
    Ok(report)
}
