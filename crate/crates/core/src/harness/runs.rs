use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{MergeStrategy, RunConfig};
use crate::harness::data::{grammar, prepare, Example};
use crate::harness::eval::{evaluate, EvalSummary};
use crate::harness::train::{train, TrainReport};
use crate::hub::HubManifest;
use crate::merge::{MergeReport, MergeSession};
use crate::numerics::{RandomSource, Tensor};
use crate::routing::{ContributionStats, TransferStrategy};
use crate::synth::{CaptionGrammar, Dataset, HoldoutRule};
use crate::vlm::{Checkpoint, ForwardOptions, Mode, ToveModel};

/// Checkpoint tensors holding contribution statistics rather than weights.
pub const STATS_PREFIX: &str = "stats.";

/// A model together with the config that produced it.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: ToveModel,
    pub config: RunConfig,
    pub stats: Option<ContributionStats>,
}

impl Trained {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = ToveModel::new(config.model.clone(), config.manifest()?, config.seed)?;
        Ok(Self {
            model,
            config,
            stats: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let manifest = self.model.experts.as_ref().map_or(String::new(), |e| e.hub.manifest.to_toml());
        let mut ck = Checkpoint::from_store(self.config.to_toml(), manifest, &self.model.store, |_| true);
        if let Some(s) = &self.stats {
            let means = Tensor::vector(s.means.clone()).expect("means are finite");
            ck.tensors.push((format!("{STATS_PREFIX}means"), means));
            ck.tensors.push((format!("{STATS_PREFIX}count"), Tensor::scalar(s.count as f64)));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_toml(&ck.config).map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
        let manifest = match ck.manifest.is_empty() {
            true => None,
            false => Some(HubManifest::from_toml(&ck.manifest).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?),
        };
        let mut model = ToveModel::new(config.model.clone(), manifest, config.seed)?;
        ck.restore(&mut model.store, |n| n.starts_with(STATS_PREFIX))?;
        let stats = match (ck.get(&format!("{STATS_PREFIX}means")), ck.get(&format!("{STATS_PREFIX}count"))) {
            (Some(m), Some(c)) => {
                if m.numel() != model.num_experts() {
                    return Err(Error::CorruptCheckpoint(format!(
                        "{} contribution means for {} experts",
                        m.numel(),
                        model.num_experts()
                    )));
                }
                Some(ContributionStats {
                    means: m.data().to_vec(),
                    count: c.item() as u64,
                })
            }
            (None, None) => None,
            _ => return Err(Error::CorruptCheckpoint("incomplete contribution statistics".into())),
        };
        Ok(Self { model, config, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Noise-free evaluation options from the run config, optionally
    /// overriding the retained set and λ.
    pub fn eval_options(&self, retained: Option<&[usize]>, lambda: Option<f64>) -> Result<ForwardOptions> {
        let k = self.model.num_experts();
        let t = &self.config.train;
        let mut opts = ForwardOptions::eval(k, lambda.unwrap_or(t.lambda), t.strategy);
        if let Some(l) = lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::ConfigInvalid(format!("lambda {l} outside [0, 1]")));
            }
        }
        match retained {
            Some(r) => {
                if k > 0 {
                    self.model.check_retained(r)?;
                }
                opts.retained = r.to_vec();
            }
            None => opts.retained = if k > 0 { self.config.retained(k) } else { Vec::new() },
        }
        Ok(opts)
    }
}

/// Both splits with their cached model inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub grammar: CaptionGrammar,
    pub holdout: HoldoutRule,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl Prepared {
    pub fn new(model: &ToveModel, dataset: &Dataset, grammar: CaptionGrammar) -> Result<Self> {
        Ok(Self {
            train: prepare(model, &dataset.train, &grammar)?,
            val: prepare(model, &dataset.val, &grammar)?,
            holdout: dataset.holdout.clone(),
            grammar,
        })
    }
}

/// Builds a fresh model from `config` and pretrains it.
pub fn run_pretrain(config: &RunConfig, dataset: &Dataset) -> Result<(Trained, TrainReport)> {
    let mut t = Trained::new(config.clone())?;
    let prepared = Prepared::new(&t.model, dataset, grammar(config)?)?;
    let report = train(&mut t.model, &prepared.train, config, Mode::Pretrain, &prepared.grammar)?;
    t.stats = report.stats.clone();
    Ok((t, report))
}

/// Fine-tunes a pretrained model with adaptors enabled. Contribution
/// statistics from pretraining are kept.
pub fn run_finetune(trained: &Trained, dataset: &Dataset) -> Result<(Trained, TrainReport)> {
    let mut t = trained.clone();
    let prepared = Prepared::new(&t.model, dataset, grammar(&t.config)?)?;
    let report = train(&mut t.model, &prepared.train, &t.config, Mode::Finetune, &prepared.grammar)?;
    if t.stats.is_none() {
        t.stats = report.stats.clone();
    }
    Ok((t, report))
}

/// Evaluates on the validation split.
pub fn run_eval(trained: &Trained, dataset: &Dataset, opts: &ForwardOptions) -> Result<EvalSummary> {
    let prepared = Prepared::new(&trained.model, dataset, grammar(&trained.config)?)?;
    evaluate(&trained.model, &prepared.val, opts, &prepared.grammar, &prepared.holdout)
}

pub fn eval_report(s: &EvalSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "lm {:.6}", s.lm);
    let _ = writeln!(out, "overall {:.4} ({} tokens)", s.overall.rate(), s.overall.total);
    let _ = writeln!(out, "cell {:.4}", s.cell.rate());
    let _ = writeln!(out, "color {:.4}", s.color.rate());
    let _ = writeln!(out, "attribute {:.4}", s.attribute.rate());
    let _ = writeln!(out, "novel_attribute {:.4}", s.novel_attribute.rate());
    for f in crate::synth::Family::ALL {
        let _ = writeln!(out, "family {} {:.4}", f.name(), s.family[f.index()].rate());
    }
    if !s.expert_means.is_empty() {
        let _ = writeln!(out, "routing_entropy {:.6}", s.routing_entropy());
        let _ = writeln!(out, "expert_means {:?}", s.expert_means);
    }
    out
}

/// One retained-set size of a detachment sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachRow {
    pub size: usize,
    /// Retained after removing the lowest-contribution experts first.
    pub lowest_first: Vec<usize>,
    pub lowest_first_accuracy: f64,
    /// Retained after removing the highest-contribution experts first.
    pub highest_first: Vec<usize>,
    pub highest_first_accuracy: f64,
    /// Set on the size-0 row, where the model decodes from base tokens alone.
    pub collapsed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetachReport {
    pub ranking: Vec<usize>,
    pub means: Vec<f64>,
    pub rows: Vec<DetachRow>,
}

fn ids(v: &[usize]) -> String {
    v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ")
}

impl DetachReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("size,lowest_first,lowest_first_accuracy,highest_first,highest_first_accuracy,collapsed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.size,
                ids(&r.lowest_first),
                r.lowest_first_accuracy,
                ids(&r.highest_first),
                r.highest_first_accuracy,
                r.collapsed
            );
        }
        out
    }

    /// Accuracy after lowest-first removal, from K experts down to 1.
    pub fn lowest_first_curve(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.size > 0).map(|r| r.lowest_first_accuracy).collect()
    }
}

/// Attribute-token accuracy of every retained-set size from K to 0, without
/// retraining, under both removal orders.
pub fn detach_sweep(trained: &Trained, dataset: &Dataset) -> Result<DetachReport> {
    let stats = trained.stats.as_ref().ok_or(Error::MissingStats)?;
    let k = trained.model.num_experts();
    if k == 0 || stats.means.len() != k {
        return Err(Error::MissingStats);
    }
    let prepared = Prepared::new(&trained.model, dataset, grammar(&trained.config)?)?;
    let ranking = stats.rank();
    let accuracy = |retained: &[usize]| -> Result<f64> {
        let mut opts = trained.eval_options(None, None)?;
        opts.retained = retained.to_vec();
        let s = evaluate(&trained.model, &prepared.val, &opts, &prepared.grammar, &prepared.holdout)?;
        Ok(s.attribute.rate())
    };
    let mut rows = Vec::with_capacity(k + 1);
    for size in (0..=k).rev() {
        let mut lowest_first = ranking[..size].to_vec();
        let mut highest_first = ranking[k - size..].to_vec();
        lowest_first.sort_unstable();
        highest_first.sort_unstable();
        let a = accuracy(&lowest_first)?;
        let b = if highest_first == lowest_first { a } else { accuracy(&highest_first)? };
        rows.push(DetachRow {
            size,
            lowest_first,
            lowest_first_accuracy: a,
            highest_first,
            highest_first_accuracy: b,
            collapsed: size == 0,
        });
    }
    Ok(DetachReport {
        ranking,
        means: stats.means.clone(),
        rows,
    })
}

/// Noise-free routing weights `[N × K]` for each example.
pub fn routing_maps(trained: &Trained, examples: &[Example], grammar: &CaptionGrammar) -> Result<Vec<Tensor>> {
    if trained.model.num_experts() == 0 {
        return Err(Error::ConfigInvalid("model has no experts to route".into()));
    }
    let opts = trained.eval_options(None, None)?;
    examples
        .iter()
        .map(|e| {
            let (_, state) = trained.model.forward_tove(&e.sample(grammar), &opts, &mut RandomSource::new(0))?;
            Ok(state.expect("expert model routes").weights)
        })
        .collect()
}

/// Binary portable graymap of one weight column, scaled to 0..=255.
pub fn pgm(weights: &Tensor, expert: usize, grid: (usize, usize)) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.1, grid.0).into_bytes();
    out.extend((0..weights.rows()).map(|i| (weights.at(i, expert).clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn routing_csv(weights: &Tensor, grid: (usize, usize)) -> String {
    let mut out = String::from("token,row,col");
    for k in 0..weights.cols() {
        let _ = write!(out, ",w{k}");
    }
    out.push('\n');
    for i in 0..weights.rows() {
        let _ = write!(out, "{},{},{}", i, i / grid.1, i % grid.1);
        for v in weights.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes a CSV per sample and a graymap per expert per sample for the
/// first `limit` validation scenes. Returns the files written.
pub fn route_dump(trained: &Trained, dataset: &Dataset, out: &Path, limit: usize) -> Result<Vec<PathBuf>> {
    let g = grammar(&trained.config)?;
    let scenes = &dataset.val[..limit.min(dataset.val.len())];
    let examples = prepare(&trained.model, scenes, &g)?;
    let maps = routing_maps(trained, &examples, &g)?;
    let names: Vec<String> = trained.model.experts.as_ref().expect("checked").hub.manifest.experts.iter().map(|e| e.name.clone()).collect();
    let grid = trained.model.cfg.grid;
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (i, w) in maps.iter().enumerate() {
        let csv = out.join(format!("sample{i:04}.csv"));
        std::fs::write(&csv, routing_csv(w, grid))?;
        files.push(csv);
        for (k, name) in names.iter().enumerate() {
            let img = out.join(format!("sample{i:04}_{name}.pgm"));
            std::fs::write(&img, pgm(w, k, grid))?;
            files.push(img);
        }
    }
    Ok(files)
}

/// Distils `teacher` into an expert-free model. `baseline_accuracy` is the
/// attribute accuracy of a plain captioner, when known.
pub fn run_merge(
    teacher: &Trained,
    dataset: &Dataset,
    strategy: MergeStrategy,
    baseline_accuracy: Option<f64>,
) -> Result<(Trained, MergeReport)> {
    let cfg = &teacher.config;
    let g = grammar(cfg)?;
    let prepared = Prepared::new(&teacher.model, dataset, g.clone())?;
    let t = &cfg.train;
    let mut session = MergeSession::new(
        teacher.model.clone(),
        t.lambda,
        t.strategy,
        strategy.weights(),
        t.optimizer,
        cfg.merge.lr,
    )?;
    let data = session.targets(&prepared.train, &g)?;
    let initial_gap = session.mean_gap(&data, &g)?;
    let teacher_eval = evaluate(
        &teacher.model,
        &prepared.val,
        &teacher.eval_options(None, None)?,
        &g,
        &prepared.holdout,
    )?;
    let mut lite_config = cfg.clone();
    lite_config.experts = false;
    lite_config.hub_manifest = None;
    let lite_eval = |session: &MergeSession| -> Result<EvalSummary> {
        let lite = session.lite_model()?;
        let val = prepare(&lite, &dataset.val, &g)?;
        evaluate(&lite, &val, &ForwardOptions::eval(0, 0.0, TransferStrategy::Residual), &g, &prepared.holdout)
    };
    let before = lite_eval(&session)?;
    let mut rng = RandomSource::new(cfg.seed).child("merge");
    for _ in 0..cfg.merge.epochs {
        session.run_epoch(&data, &g, t.batch_size, &mut rng)?;
    }
    if !session.teacher_unchanged() {
        return Err(Error::CorruptCheckpoint("teacher changed during merging".into()));
    }
    let after = lite_eval(&session)?;
    let report = MergeReport {
        strategy: strategy.name().to_string(),
        initial_gap,
        final_gap: session.mean_gap(&data, &g)?,
        lm_before: before.lm,
        lm_after: after.lm,
        teacher_accuracy: teacher_eval.attribute.rate(),
        student_accuracy: after.attribute.rate(),
        baseline_accuracy,
        gap_history: session.gap_history.clone(),
    };
    let ck = session.export_lite(lite_config.to_toml())?;
    let lite = Trained::from_checkpoint(&ck)?;
    Ok((lite, report))
}

/// One cell of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    /// Mean LM loss over the first training epoch; empty for merge rows.
    pub lm_epoch0: Option<f64>,
    pub accuracy: f64,
    pub attribute: f64,
    pub novel: f64,
    /// Final over initial mean gap, for merge rows.
    pub gap_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const LAMBDA_SWEEP: [f64; 6] = [0.0, 0.05, 0.1, 0.3, 0.5, 1.0];

impl AblationTable {
    pub fn find(&self, axis: &str, value: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.axis == axis && r.value == value)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("axis,value,lm_epoch0,accuracy,attribute,novel,gap_ratio\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.axis,
                r.value,
                opt(r.lm_epoch0),
                r.accuracy,
                r.attribute,
                r.novel,
                opt(r.gap_ratio)
            );
        }
        out
    }
}

fn ablation_row(axis: &str, value: String, report: Option<&TrainReport>, s: &EvalSummary) -> AblationRow {
    AblationRow {
        axis: axis.into(),
        value,
        lm_epoch0: report.and_then(|r| r.epochs.first()).map(|e| e.loss.lm),
        accuracy: s.overall.rate(),
        attribute: s.attribute.rate(),
        novel: s.novel_attribute.rate(),
        gap_ratio: None,
    }
}

/// Trains the baseline, the λ sweep and the transfer-strategy variants from
/// `base`, then merges the `base` model under each merge strategy. Every
/// cell shares the seed and differs from `base` on one axis only.
pub fn run_ablation(base: &RunConfig, dataset: &Dataset) -> Result<AblationTable> {
    base.validate()?;
    let mut table = AblationTable::default();
    let cell = |cfg: RunConfig| -> Result<(Trained, TrainReport, EvalSummary)> {
        let (t, report) = run_pretrain(&cfg, dataset)?;
        let s = run_eval(&t, dataset, &t.eval_options(None, None)?)?;
        Ok((t, report, s))
    };

    let mut plain = base.clone();
    plain.experts = false;
    let (_, report, baseline) = cell(plain)?;
    table.rows.push(ablation_row("baseline", "none".into(), Some(&report), &baseline));

    let mut reference = None;
    for lambda in LAMBDA_SWEEP {
        let mut cfg = base.clone();
        cfg.train.lambda = lambda;
        cfg.train.strategy = TransferStrategy::Residual;
        let (t, report, s) = cell(cfg)?;
        table.rows.push(ablation_row("lambda", lambda.to_string(), Some(&report), &s));
        if lambda == base.train.lambda {
            reference = Some((t, report, s));
        }
    }
    let (teacher, report, s) = match reference {
        Some(r) => r,
        None => {
            let mut cfg = base.clone();
            cfg.train.strategy = TransferStrategy::Residual;
            cell(cfg)?
        }
    };
    table.rows.push(ablation_row("strategy", "residual".into(), Some(&report), &s));
    for strategy in [TransferStrategy::Direct, TransferStrategy::Concat] {
        let mut cfg = base.clone();
        cfg.train.strategy = strategy;
        let (_, report, s) = cell(cfg)?;
        table.rows.push(ablation_row("strategy", strategy.name().into(), Some(&report), &s));
    }

    for strategy in [MergeStrategy::L2, MergeStrategy::Lm, MergeStrategy::LmL2] {
        let (lite, m) = run_merge(&teacher, dataset, strategy, Some(baseline.attribute.rate()))?;
        let s = run_eval(&lite, dataset, &lite.eval_options(None, None)?)?;
        let mut row = ablation_row("merge", strategy.name().into(), None, &s);
        row.gap_ratio = Some(m.final_gap / m.initial_gap);
        table.rows.push(row);
    }
    Ok(table)
}
