//! Command-line pipeline: dataset generation, module training, fine-tuning
//! and evaluation campaigns over one output directory.
//!
//! Layout under `--out`:
//! `config.toml`, `manifest.json`, `data/dataset.bin`,
//! `checkpoints/{perception,control,finetuned}.ck`, `logs/*.csv`,
//! `reports/{summary,trials_<variant>}.{csv,json}`, `reports/comparison.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{env_overrides, ConfigError, RunConfig};
use crate::control::{ground_truth_policy, train_best_of, ControlError, ControlNet};
use crate::eval::{
    compare, export_rows, run_campaign, summarize, summary_row, trial_rows, CampaignSummary, Comparison, EvalError,
    Format,
};
use crate::finetune::{finetune, CombinedPolicy, FinetuneError};
use crate::nn::{Checkpoint, CheckpointError};
use crate::perception::{split_dataset, train_perception, PerceptionError, PerceptionNet};
use crate::render::{build_dataset, Dataset, RenderError};

pub const DATASET: &str = "data/dataset.bin";
pub const PERCEPTION_CK: &str = "checkpoints/perception.ck";
pub const CONTROL_CK: &str = "checkpoints/control.ck";
pub const FINETUNED_CK: &str = "checkpoints/finetuned.ck";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";
const CONTROL_NET: &str = "control";
const PERCEPTION_NET: &str = "perception";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    /// Message for stderr with a single `error:` prefix.
    pub fn report(&self) -> String {
        let msg = self.to_string();
        let msg = msg.trim_end();
        if msg.starts_with("error:") {
            msg.to_string()
        } else {
            format!("error: {msg}")
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(RenderError, CheckpointError, EvalError, std::io::Error, csv::Error, serde_json::Error);

impl From<PerceptionError> for CliError {
    fn from(e: PerceptionError) -> Self {
        match e {
            PerceptionError::Divergence { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Divergence { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FinetuneError> for CliError {
    fn from(e: FinetuneError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "handeye", version, about = "Modular visuo-motor reaching pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config and every stage seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the labelled sim and pseudo-real dataset.
    GenData,
    /// Train one stage.
    Train {
        #[arg(value_enum)]
        stage: Stage,
    },
    /// Run shared-seed campaigns and export reports.
    Eval {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "initial,finetuned,cr")]
        variants: Vec<Variant>,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
    },
    /// gen-data, all train stages and eval in sequence.
    Pipeline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Perception,
    Control,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Variant {
    Initial,
    Finetuned,
    Cr,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Initial => "Initial",
            Variant::Finetuned => "Fine-tuned",
            Variant::Cr => "CR",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Variant::Initial => "initial",
            Variant::Finetuned => "finetuned",
            Variant::Cr => "cr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    fn format(self) -> Format {
        match self {
            ReportFormat::Csv => Format::Csv,
            ReportFormat::Json => Format::Json,
        }
    }

    fn ext(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    /// Relative artifact path → content SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self, CliError> {
        let path = out.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Clone, Debug, Serialize)]
struct ComparisonEntry<'a> {
    baseline: &'a str,
    candidate: &'a str,
    #[serde(flatten)]
    comparison: Comparison,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) if !e.use_stderr() => {
            e.print()?;
            Ok(())
        }
        Err(e) => Err(CliError::Usage(e.render().to_string())),
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref(), env_overrides())?;
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    let mut ctx = Context {
        out: cli.out.clone(),
        force: cli.force,
        config,
        manifest: Manifest::load(&cli.out)?,
    };
    std::fs::create_dir_all(&ctx.out)?;
    let result = match &cli.command {
        Command::GenData => ctx.gen_data(),
        Command::Train { stage } => ctx.train(*stage),
        Command::Eval { variants, format } => ctx.eval(variants, *format),
        Command::Pipeline => ctx.pipeline(),
    };
    ctx.write_manifest()?;
    result
}

struct Context {
    out: PathBuf,
    force: bool,
    config: RunConfig,
    manifest: Manifest,
}

impl Context {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn guard(&self, rels: &[String]) -> Result<(), CliError> {
        if self.force {
            return Ok(());
        }
        match rels.iter().find(|r| self.path(r).exists()) {
            Some(r) => Err(CliError::Usage(format!(
                "{} already exists; pass --force to overwrite",
                self.path(r).display()
            ))),
            None => Ok(()),
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes)?;
        self.record(rel)
    }

    fn record(&mut self, rel: &str) -> Result<(), CliError> {
        let digest = hex::encode(Sha256::digest(std::fs::read(self.path(rel))?));
        self.manifest.artifacts.insert(rel.to_string(), digest);
        Ok(())
    }

    fn write_csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        self.write(rel, &bytes)
    }

    fn write_manifest(&mut self) -> Result<(), CliError> {
        self.manifest.config_sha256 = self.config.hash();
        self.manifest.seed = self.config.seed;
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(self.path(MANIFEST), bytes)?;
        Ok(())
    }

    fn save_config(&mut self) -> Result<(), CliError> {
        let text = self.config.to_toml();
        self.write(CONFIG_COPY, text.as_bytes())
    }

    fn require(&self, rel: &str, what: &str, stage: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Data(format!(
                "{what} not found at {}; run `handeye {stage}` first",
                p.display()
            )))
        }
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        Ok(Dataset::load(&self.require(DATASET, "dataset", "gen-data")?)?)
    }

    fn perception(&self) -> Result<PerceptionNet, CliError> {
        let ck = Checkpoint::load(&self.require(PERCEPTION_CK, "perception checkpoint", "train perception")?)?;
        let net = ck.get(PERCEPTION_NET)?.clone();
        PerceptionNet::from_network(net).map_err(|e| CliError::Data(e.to_string()))
    }

    fn control(&self) -> Result<ControlNet, CliError> {
        let ck = Checkpoint::load(&self.require(CONTROL_CK, "control checkpoint", "train control")?)?;
        let net = ck.get(CONTROL_NET)?.clone();
        ControlNet::from_network(net).map_err(|e| CliError::Data(e.to_string()))
    }

    fn finetuned(&self) -> Result<CombinedPolicy, CliError> {
        let ck = Checkpoint::load(&self.require(FINETUNED_CK, "fine-tuned checkpoint", "train finetune")?)?;
        Ok(CombinedPolicy::from_checkpoint(&ck)?)
    }

    fn pipeline(&mut self) -> Result<(), CliError> {
        let mut outputs = vec![DATASET.to_string(), PERCEPTION_CK.into(), CONTROL_CK.into(), FINETUNED_CK.into()];
        outputs.extend(report_paths(&[Variant::Initial, Variant::Finetuned, Variant::Cr], ReportFormat::Csv));
        self.guard(&outputs)?;
        let force = std::mem::replace(&mut self.force, true);
        let result = self
            .gen_data()
            .and_then(|_| self.train(Stage::Perception))
            .and_then(|_| self.train(Stage::Control))
            .and_then(|_| self.train(Stage::Finetune))
            .and_then(|_| self.eval(&[Variant::Initial, Variant::Finetuned, Variant::Cr], ReportFormat::Csv));
        self.force = force;
        result
    }

    fn gen_data(&mut self) -> Result<(), CliError> {
        self.guard(&[DATASET.into()])?;
        let c = &self.config;
        eprintln!(
            "gen-data: {} sim + {} pseudo-real frames",
            c.dataset.n_sim, c.dataset.n_pseudo_real
        );
        let ds = build_dataset(c.dataset.n_sim, c.dataset.n_pseudo_real, c.seed, &c.arm, &c.camera, &c.perturbation)?;
        self.save_config()?;
        self.write(DATASET, &ds.to_bytes())
    }

    fn train(&mut self, stage: Stage) -> Result<(), CliError> {
        match stage {
            Stage::Perception => {
                self.guard(&[PERCEPTION_CK.into()])?;
                let ds = self.dataset()?;
                eprintln!("train perception: {} steps", self.config.perception.steps);
                let run = train_perception(&ds, &self.config.perception)?;
                self.save_config()?;
                self.write_csv("logs/perception.csv", &run.log)?;
                let ck = Checkpoint::single(PERCEPTION_NET, run.net.net, self.config.perception.seed);
                self.write(PERCEPTION_CK, &ck.to_bytes())
            }
            Stage::Control => {
                self.guard(&[CONTROL_CK.into()])?;
                let c = &self.config;
                let seeds = c.control_seeds();
                eprintln!("train control: {} env steps x {} seeds", c.control.env_steps, seeds.len());
                let (run, scores) = train_best_of(&c.arm, &c.camera, &c.control, &seeds, c.selection.trials)?;
                let best_seed = scores
                    .iter()
                    .find(|s| Some(s.rbar) == scores.iter().map(|s| s.rbar).reduce(f64::max))
                    .map_or(c.control.seed, |s| s.seed);
                self.save_config()?;
                self.write_csv("logs/control.csv", &run.log)?;
                self.write_csv("logs/control_seeds.csv", &scores)?;
                let ck = Checkpoint::single(CONTROL_NET, run.net.net, best_seed);
                self.write(CONTROL_CK, &ck.to_bytes())
            }
            Stage::Finetune => {
                self.guard(&[FINETUNED_CK.into()])?;
                let control = self.control()?;
                let perception = self.perception()?;
                let ds = self.dataset()?;
                let c = &self.config;
                let pool = split_dataset(&ds, c.perception.val_fraction).train_real;
                eprintln!("train finetune: {} steps, beta {}", c.finetune.steps, c.finetune.beta);
                let run = finetune(
                    CombinedPolicy { perception, control },
                    &c.arm,
                    &c.camera,
                    &ds,
                    pool,
                    &c.finetune,
                )?;
                let seed = c.finetune.seed;
                self.save_config()?;
                self.write_csv("logs/finetune.csv", &run.log)?;
                self.write(FINETUNED_CK, &run.best.to_checkpoint(seed).to_bytes())?;
                match run.diverged_at {
                    Some(step) => Err(CliError::Divergence(format!(
                        "fine-tuning diverged at step {step}; kept the snapshot from step {}",
                        run.best_step
                    ))),
                    None => Ok(()),
                }
            }
        }
    }

    fn eval(&mut self, variants: &[Variant], format: ReportFormat) -> Result<(), CliError> {
        let mut variants = variants.to_vec();
        variants.sort();
        variants.dedup();
        if variants.is_empty() {
            return Err(CliError::Usage("no variants requested".into()));
        }
        self.guard(&report_paths(&variants, format))?;
        let c = self.config.clone();
        let (arm, cam) = (&c.arm, &c.camera);
        let mut summaries: Vec<(Variant, CampaignSummary)> = Vec::new();
        for &v in &variants {
            eprintln!("eval {}: {} trials", v.label(), c.eval.trials);
            let campaign = match v {
                Variant::Initial => {
                    let p = CombinedPolicy {
                        perception: self.perception()?,
                        control: self.control()?,
                    };
                    run_campaign(arm, cam, |s| Ok(p.act(s, arm, cam)), c.eval.trials, c.eval.seed)?
                }
                Variant::Finetuned => {
                    let p = self.finetuned()?;
                    run_campaign(arm, cam, |s| Ok(p.act(s, arm, cam)), c.eval.trials, c.eval.seed)?
                }
                Variant::Cr => {
                    let net = self.control()?;
                    run_campaign(arm, cam, ground_truth_policy(arm, cam, &net), c.eval.trials, c.eval.seed)?
                }
            };
            let rel = format!("reports/trials_{}.{}", v.slug(), format.ext());
            self.export(&rel, &trial_rows(&campaign.reports, cam), format)?;
            summaries.push((v, summarize(&campaign.reports, cam)?));
        }
        let rows: Vec<_> = summaries.iter().map(|(v, s)| summary_row(v.label(), s)).collect();
        self.export(&format!("reports/summary.{}", format.ext()), &rows, format)?;
        if summaries.len() > 1 {
            let (base, first) = &summaries[0];
            let entries: Vec<ComparisonEntry> = summaries[1..]
                .iter()
                .map(|(v, s)| ComparisonEntry {
                    baseline: base.label(),
                    candidate: v.label(),
                    comparison: compare(first, s),
                })
                .collect();
            let bytes = serde_json::to_vec_pretty(&entries)?;
            self.write("reports/comparison.json", &bytes)?;
        }
        Ok(())
    }

    fn export<T: crate::eval::ReportRow>(&mut self, rel: &str, rows: &[T], format: ReportFormat) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        export_rows(rows, &path, format.format())?;
        self.record(rel)
    }
}

fn report_paths(variants: &[Variant], format: ReportFormat) -> Vec<String> {
    let mut v: Vec<String> = variants
        .iter()
        .map(|v| format!("reports/trials_{}.{}", v.slug(), format.ext()))
        .collect();
    v.push(format!("reports/summary.{}", format.ext()));
    v
}
