//! Distils the expert-augmented vision tokens of a trained model back into a
//! copy of its own vision encoder, yielding an expert-free "lite" model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Example;
use crate::numerics::{Binding, Graph, Optimizer, OptimizerKind, ParamStore, RandomSource, Tensor, Var};
use crate::objectives::{gap_graph, mean_gap, merge_objective, MergeWeights};
use crate::routing::TransferStrategy;
use crate::synth::CaptionGrammar;
use crate::vlm::decoder::DEC_PREFIX;
use crate::vlm::encoder::ENC_PREFIX;
use crate::vlm::{Checkpoint, ForwardOptions, ToveModel, VisionEncoder};

/// A training example paired with the teacher's fused tokens for it.
#[derive(Clone, Debug)]
pub struct MergeExample {
    pub example: Example,
    pub target: Tensor,
}

/// Loss terms of one merge step or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeLoss {
    pub lm: f64,
    pub gap: f64,
    pub total: f64,
}

impl MergeLoss {
    pub fn mean(items: &[MergeLoss]) -> MergeLoss {
        let n = items.len().max(1) as f64;
        items.iter().fold(MergeLoss::default(), |a, b| MergeLoss {
            lm: a.lm + b.lm / n,
            gap: a.gap + b.gap / n,
            total: a.total + b.total / n,
        })
    }
}

/// Frozen teacher plus a trainable clone of its vision encoder.
#[derive(Clone, Debug)]
pub struct MergeSession {
    pub teacher: ToveModel,
    teacher_hash: String,
    pub student: ParamStore,
    pub student_encoder: VisionEncoder,
    pub weights: MergeWeights,
    lambda: f64,
    strategy: TransferStrategy,
    opt: Optimizer,
    /// Mean gap over each finished epoch, measured before each update.
    pub gap_history: Vec<f64>,
    pub loss_history: Vec<MergeLoss>,
}

impl MergeSession {
    /// Freezes every teacher parameter and copies the encoder. The student
    /// may update all of its weights, including the detail-channel rows of
    /// the patch embedding that the teacher keeps at zero.
    pub fn new(
        mut teacher: ToveModel,
        lambda: f64,
        strategy: TransferStrategy,
        weights: MergeWeights,
        optimizer: OptimizerKind,
        lr: f64,
    ) -> Result<Self> {
        if teacher.experts.is_none() {
            return Err(Error::CorruptCheckpoint("teacher has no expert pathway".into()));
        }
        teacher.store.freeze_all();
        let mut student = ParamStore::new();
        let student_encoder = VisionEncoder::new(&mut student, &teacher.cfg, &mut RandomSource::new(0), true);
        student.copy_from(&teacher.store, ENC_PREFIX)?;
        if student.len() != teacher.store.iter().filter(|(n, _)| n.starts_with(ENC_PREFIX)).count() {
            return Err(Error::CorruptCheckpoint("teacher encoder layout differs from its config".into()));
        }
        let teacher_hash = teacher.store.hash("");
        Ok(Self {
            teacher,
            teacher_hash,
            student,
            student_encoder,
            weights,
            lambda,
            strategy,
            opt: Optimizer::new(optimizer, lr),
            gap_history: Vec::new(),
            loss_history: Vec::new(),
        })
    }

    pub fn teacher_unchanged(&self) -> bool {
        self.teacher.store.hash("") == self.teacher_hash
    }

    fn teacher_options(&self) -> ForwardOptions {
        ForwardOptions::eval(self.teacher.num_experts(), self.lambda, self.strategy)
    }

    /// Noise-free fused tokens of the teacher for one example.
    pub fn teacher_tokens(&self, example: &Example, grammar: &CaptionGrammar) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.teacher.store.bind(&mut g);
        let sample = example.sample(grammar);
        let out = self.teacher.forward(
            &mut g,
            &p,
            &sample,
            Some(&example.cache),
            &self.teacher_options(),
            &mut RandomSource::new(0),
        )?;
        Ok(g.value(out.fused).clone())
    }

    pub fn targets(&self, examples: &[Example], grammar: &CaptionGrammar) -> Result<Vec<MergeExample>> {
        examples
            .iter()
            .map(|e| {
                Ok(MergeExample {
                    example: e.clone(),
                    target: self.teacher_tokens(e, grammar)?,
                })
            })
            .collect()
    }

    fn student_forward(&self, g: &mut Graph, p: &Binding, example: &Example, grammar: &CaptionGrammar) -> Result<Var> {
        let sample = example.sample(grammar);
        let patches = g.constant(VisionEncoder::patches(&self.teacher.cfg, &sample)?);
        self.student_encoder.forward(g, p, patches)
    }

    pub fn student_tokens(&self, example: &Example, grammar: &CaptionGrammar) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.student.bind(&mut g);
        let t = self.student_forward(&mut g, &p, example, grammar)?;
        Ok(g.value(t).clone())
    }

    /// Mean per-token gap between teacher targets and current student tokens.
    pub fn mean_gap(&self, data: &[MergeExample], grammar: &CaptionGrammar) -> Result<f64> {
        let mut total = 0.0;
        for m in data {
            total += mean_gap(&m.target, &self.student_tokens(&m.example, grammar)?)?;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// One optimizer step on the mean merging loss of `batch`.
    pub fn merge_step(&mut self, batch: &[&MergeExample], grammar: &CaptionGrammar) -> Result<MergeLoss> {
        if batch.is_empty() {
            return Err(Error::ConfigInvalid("empty merge batch".into()));
        }
        let mut g = Graph::new();
        let pt = self.teacher.store.bind(&mut g);
        let ps = self.student.bind(&mut g);
        let mut totals = Vec::with_capacity(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        for m in batch {
            let tokens = self.student_forward(&mut g, &ps, &m.example, grammar)?;
            let target = g.constant(m.target.clone());
            let gap = gap_graph(&mut g, tokens, target)?;
            let caption = m.example.sample(grammar).caption;
            let (logits, labels) = self.teacher.decoder.teacher_forced(&mut g, &pt, tokens, &caption, false)?;
            let lm = g.cross_entropy(logits, &labels)?;
            let total = merge_objective(&mut g, Some(lm), gap, self.weights)?;
            losses.push(MergeLoss {
                lm: g.value(lm).item(),
                gap: g.value(gap).item(),
                total: g.value(total).item(),
            });
            totals.push(total);
        }
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = g.add(sum, t)?;
        }
        let loss = g.scale(sum, 1.0 / batch.len() as f64);
        let grads = g.backward(loss)?;
        self.student.accumulate(&ps, &grads);
        self.opt.step(&mut self.student);
        Ok(MergeLoss::mean(&losses))
    }

    /// One shuffled pass over `data`; appends the epoch-mean gap.
    pub fn run_epoch(
        &mut self,
        data: &[MergeExample],
        grammar: &CaptionGrammar,
        batch_size: usize,
        rng: &mut RandomSource,
    ) -> Result<MergeLoss> {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::ConfigInvalid("merge needs data and a positive batch size".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&MergeExample> = chunk.iter().map(|&i| &data[i]).collect();
            let l = self.merge_step(&batch, grammar)?;
            losses.extend(std::iter::repeat(l).take(batch.len()));
        }
        let epoch = MergeLoss::mean(&losses);
        self.gap_history.push(epoch.gap);
        self.loss_history.push(epoch);
        Ok(epoch)
    }

    /// The expert-free model: student encoder plus the teacher's decoder.
    pub fn lite_model(&self) -> Result<ToveModel> {
        let mut lite = ToveModel::new(self.teacher.cfg.clone(), None, 0)?;
        lite.store.copy_from(&self.student, ENC_PREFIX)?;
        lite.store.copy_from(&self.teacher.store, DEC_PREFIX)?;
        lite.store.freeze_all();
        Ok(lite)
    }

    /// Checkpoint of the lite model; `config` is stored as its provenance
    /// text and should describe an expert-free run.
    pub fn export_lite(&self, config: String) -> Result<Checkpoint> {
        if self.gap_history.is_empty() {
            return Err(Error::ConfigInvalid("export requires at least one merge epoch".into()));
        }
        let lite = self.lite_model()?;
        Ok(Checkpoint::from_store(config, String::new(), &lite.store, |_| true))
    }
}

/// Outcome of a merge run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub strategy: String,
    pub initial_gap: f64,
    pub final_gap: f64,
    pub lm_before: f64,
    pub lm_after: f64,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub baseline_accuracy: Option<f64>,
    pub gap_history: Vec<f64>,
}

impl MergeReport {
    /// Fraction of the teacher's lead over the baseline that the student
    /// keeps.
    pub fn recovery(&self) -> Option<f64> {
        let b = self.baseline_accuracy?;
        let lead = self.teacher_accuracy - b;
        (lead > 0.0).then(|| (self.student_accuracy - b) / lead)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,gap\n");
        out.push_str(&format!("init,{}\n", self.initial_gap));
        for (i, g) in self.gap_history.iter().enumerate() {
            out.push_str(&format!("{i},{g}\n"));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "merge strategy: {}\ngap: {:.6} -> {:.6} (ratio {:.3})\nlm: {:.4} -> {:.4}\naccuracy: teacher {:.4} lite {:.4}",
            self.strategy,
            self.initial_gap,
            self.final_gap,
            self.final_gap / self.initial_gap.max(f64::MIN_POSITIVE),
            self.lm_before,
            self.lm_after,
            self.teacher_accuracy,
            self.student_accuracy,
        );
        if let Some(b) = self.baseline_accuracy {
            s.push_str(&format!(" baseline {b:.4}"));
        }
        if let Some(r) = self.recovery() {
            s.push_str(&format!("\nrecovered fraction of teacher lead: {r:.3}"));
        }
        s.push('\n');
        s
    }
}
