use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tove_core::harness::{
    detach_sweep, eval_report, generate_dataset, grammar, route_dump, run_ablation, run_eval, run_finetune, run_merge,
    run_pretrain, RunConfig, Trained,
};
use tove_core::synth::Dataset;
use tove_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tove", version, about = "Train, merge and inspect expert-routed captioning models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train/validation scenes and write them to OUT/dataset.bin.
    GenData(Common),
    /// Pretrain a model; writes OUT/model.ckpt and OUT/metrics.csv.
    Pretrain(Common),
    /// Fine-tune a checkpoint with adaptors; writes OUT/finetuned.ckpt.
    Finetune(Common),
    /// Merge expert knowledge into the encoder; writes OUT/lite.ckpt.
    Merge(Common),
    /// Evaluate a checkpoint on the validation split.
    Eval(Common),
    /// Evaluate shrinking retained-expert sets without retraining.
    DetachSweep(Common),
    /// Dump per-token routing weights as CSV and graymap images.
    RouteDump {
        #[command(flatten)]
        common: Common,
        /// Number of validation scenes to dump.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Run the λ, transfer-strategy and merge-strategy ablations.
    Ablate(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run config (TOML). Defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated expert ids, e.g. "0,2,3".
    #[arg(long)]
    retain: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Dataset written by gen-data; regenerated from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

fn parse_retain(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| invalid(format!("bad expert id `{p}` in --retain"))))
        .collect()
}

impl Common {
    fn retain(&self) -> Result<Option<Vec<usize>>> {
        self.retain.as_deref().map(parse_retain).transpose()
    }

    /// Config from `--config` (or defaults) with command-line overrides.
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
        }
        if let Some(r) = self.retain()? {
            cfg.train.retained = Some(r);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The checkpointed model. A `--config` replaces the embedded run
    /// config but must describe the same model.
    fn trained(&self) -> Result<Trained> {
        let path = self.checkpoint.as_ref().ok_or_else(|| invalid("--checkpoint is required"))?;
        let mut t = Trained::load(path)?;
        if let Some(p) = &self.config {
            let cfg = RunConfig::load(p)?;
            if cfg.model != t.config.model {
                return Err(invalid("config model section differs from the checkpoint"));
            }
            t.config = RunConfig {
                experts: t.config.experts,
                hub_manifest: t.config.hub_manifest.clone(),
                ..cfg
            };
        }
        if let Some(s) = self.seed {
            t.config.seed = s;
        }
        Ok(t)
    }

    fn dataset(&self, cfg: &RunConfig) -> Result<Dataset> {
        match &self.data {
            Some(p) => Dataset::read(p, &grammar(cfg)?),
            None => generate_dataset(cfg),
        }
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.run_config()?;
            let ds = generate_dataset(&cfg)?;
            ds.write(&c.out_file("dataset.bin")?, &grammar(&cfg)?)?;
            write(&c.out_file("config.toml")?, &cfg.to_toml())?;
            println!("{} train / {} val scenes", ds.train.len(), ds.val.len());
        }
        Command::Pretrain(c) => {
            let cfg = c.run_config()?;
            let ds = c.dataset(&cfg)?;
            let (trained, report) = run_pretrain(&cfg, &ds)?;
            trained.save(&c.out_file("model.ckpt")?)?;
            write(&c.out_file("metrics.csv")?, &report.csv())?;
            if let Some(last) = report.epochs.last() {
                println!("final lm {:.6} routing entropy {:.6}", last.loss.lm, last.routing_entropy);
            }
        }
        Command::Finetune(c) => {
            let t = c.trained()?;
            let ds = c.dataset(&t.config)?;
            let (tuned, report) = run_finetune(&t, &ds)?;
            tuned.save(&c.out_file("finetuned.ckpt")?)?;
            write(&c.out_file("finetune_metrics.csv")?, &report.csv())?;
        }
        Command::Merge(c) => {
            let t = c.trained()?;
            let ds = c.dataset(&t.config)?;
            let (lite, report) = run_merge(&t, &ds, t.config.merge.strategy, None)?;
            lite.save(&c.out_file("lite.ckpt")?)?;
            write(&c.out_file("merge.csv")?, &report.csv())?;
            write(&c.out_file("merge_summary.txt")?, &report.summary())?;
            print!("{}", report.summary());
        }
        Command::Eval(c) => {
            let t = c.trained()?;
            let ds = c.dataset(&t.config)?;
            let retain = c.retain()?;
            let opts = t.eval_options(retain.as_deref(), c.lambda)?;
            let report = eval_report(&run_eval(&t, &ds, &opts)?);
            write(&c.out_file("eval.txt")?, &report)?;
            print!("{report}");
        }
        Command::DetachSweep(c) => {
            let t = c.trained()?;
            let ds = c.dataset(&t.config)?;
            let report = detach_sweep(&t, &ds)?;
            let csv = report.csv();
            write(&c.out_file("detach.csv")?, &csv)?;
            print!("{csv}");
        }
        Command::RouteDump { common: c, limit } => {
            let t = c.trained()?;
            let ds = c.dataset(&t.config)?;
            let files = route_dump(&t, &ds, &c.out, limit)?;
            println!("wrote {} files", files.len());
        }
        Command::Ablate(c) => {
            let cfg = c.run_config()?;
            let ds = c.dataset(&cfg)?;
            let table = run_ablation(&cfg, &ds)?;
            let csv = table.csv();
            write(&c.out_file("ablation.csv")?, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
