//! Runs a whole schedule: per-step data, training, evaluation and outputs.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, MIoUReport};
use crate::geometry::Curvature;
use crate::losses::LossWeights;
use crate::model::{BackboneConfig, Segmenter};
use crate::presets;
use crate::protocol::{self, AuditLog, ReplayAudit, TaskSchedule};
use crate::pseudolabel::LevelThresholds;
use crate::synth::{Dataset, Scene};
use crate::trainer::{self, EpochRecord, Objective, PseudoLabelMode, StepContext, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub backbone: BackboneConfig,
    pub curvature: Curvature,
    pub loss: LossWeights,
    pub thresholds: LevelThresholds,
    pub train: TrainConfig,
    /// Cap on `|D^t|` drawn from the training pool.
    pub train_per_step: usize,
    /// Validation scenes added per step.
    pub val_per_step: usize,
    /// Run only the first `steps` steps.
    pub steps: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            backbone: BackboneConfig::default(),
            curvature: Curvature::new(3.0).expect("positive"),
            loss: LossWeights::default(),
            thresholds: LevelThresholds::default(),
            train: TrainConfig::default(),
            train_per_step: 500,
            val_per_step: 100,
            steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.train_per_step == 0 || self.val_per_step == 0 || self.steps == Some(0) {
            return Err(Error::Config("per-step sample counts and step limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub reports: Vec<MIoUReport>,
    pub epochs: Vec<EpochRecord>,
    pub audit: Option<AuditLog>,
    pub model: Segmenter,
}

impl RunOutcome {
    pub fn last(&self) -> &MIoUReport {
        self.reports.last().expect("at least one step")
    }
}

/// Output file names inside a run directory.
pub const SUMMARY_CSV: &str = "summary.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const CURVE_CSV: &str = "step_curve.csv";
pub const EPOCH_CSV: &str = "epochs.csv";
pub const RUN_JSON: &str = "run.json";

fn epochs_csv(rows: &[EpochRecord]) -> String {
    let mut out = String::from("step,epoch,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.10},{:.10}\n", r.step, r.epoch, r.loss, r.lr));
    }
    out
}

#[derive(Serialize)]
struct RunRecord<'a> {
    name: &'a str,
    schedule: &'a str,
    steps: usize,
    config: &'a ExperimentConfig,
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, schedule: &TaskSchedule, out: &RunOutcome) -> Result<()> {
    fs::write(dir.join(SUMMARY_CSV), eval::summary_csv(&out.reports))?;
    fs::write(dir.join(REPORT_CSV), eval::report_csv(&out.reports))?;
    fs::write(dir.join(CURVE_CSV), eval::step_curve_csv(&out.reports))?;
    fs::write(dir.join(EPOCH_CSV), epochs_csv(&out.epochs))?;
    let record = RunRecord { name: &cfg.name, schedule: schedule.name(), steps: out.reports.len(), config: cfg };
    fs::write(dir.join(RUN_JSON), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

/// Trains every step of `schedule` in order, evaluating after each one.
///
/// With `out_dir` set, checkpoints and CSVs are rewritten after every step.
pub fn run(
    cfg: &ExperimentConfig,
    schedule: &TaskSchedule,
    train_pool: &[Scene],
    val_pool: &[Scene],
    out_dir: Option<&Path>,
    audit: bool,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let steps = cfg.steps.unwrap_or(schedule.num_steps()).min(schedule.num_steps());
    let seed = cfg.train.seed;
    let tax = trainer::model_taxonomy(schedule, 1, cfg.train.objective)?;
    let model = Segmenter::new(cfg.backbone.clone(), tax, cfg.curvature, seed)?;
    let audit_log = audit.then(ReplayAudit::new);
    let ctx = StepContext {
        schedule,
        config: &cfg.train,
        weights: &cfg.loss,
        thresholds: &cfg.thresholds,
        audit: audit_log.as_ref(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut out = RunOutcome { reports: Vec::new(), epochs: Vec::new(), audit: None, model };
    for t in 1..=steps {
        let data = schedule.step_samples(t, train_pool, cfg.train_per_step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let log = trainer::train_step_t(&mut out.model, &ctx, t, &data, &mut rng)?;
        out.epochs.extend(log);
        let val = schedule.eval_scenes(t, val_pool, cfg.val_per_step)?;
        out.reports.push(trainer::evaluate(&out.model, schedule, t, &val)?);
        if let Some(dir) = out_dir {
            out.model.save(&dir.join("checkpoints").join(format!("step_{t}.json")))?;
            write_outputs(dir, cfg, schedule, &out)?;
        }
    }
    out.audit = audit_log.map(|a| a.log());
    Ok(out)
}

/// Configurations compared by the forgetting benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Flat cross-entropy fine-tuning without pseudo-labels.
    Naive,
    /// Hierarchical loss with Dice, hierarchical pseudo-labels, c = 3.
    Full,
    /// As `Full` but with leaf-only pseudo-labels.
    UniformPl,
    /// Leaf-only pseudo-labels, no Dice term, c = 2.
    NoDiceUniformC2,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Naive, Variant::Full, Variant::UniformPl, Variant::NoDiceUniformC2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Full => "full",
            Variant::UniformPl => "uniform-pl",
            Variant::NoDiceUniformC2 => "no-dice-uniform-c2",
        }
    }
}

/// The 12-leaf disjoint 8-1 benchmark at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub size: usize,
    pub train_pool: usize,
    pub val_pool: usize,
    pub data_seed: u64,
    pub backbone: BackboneConfig,
    pub epochs_base: usize,
    pub epochs_incremental: usize,
    pub crop: Option<usize>,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            size: 32,
            train_pool: 3500,
            val_pool: 700,
            data_seed: 0,
            backbone: BackboneConfig { channels: vec![3, 12, 16, 8], ..BackboneConfig::default() },
            epochs_base: 12,
            epochs_incremental: 6,
            crop: Some(24),
        }
    }
}

impl Benchmark {
    pub fn schedule(&self) -> Result<TaskSchedule> {
        let (cfg, tax) = presets::schedule(presets::DISJOINT_8_1)?;
        protocol::build_schedule(&cfg, &presets::taxonomy(tax)?)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let spec = presets::scene_spec(presets::ENDOVIS_LIKE_12, self.size, self.size)?;
        Dataset::generate(&spec, self.train_pool, self.val_pool, self.data_seed)
    }

    pub fn config(&self, variant: Variant, seed: u64) -> ExperimentConfig {
        let mut e = ExperimentConfig::new(variant.name());
        e.backbone = self.backbone.clone();
        e.train.epochs_base = self.epochs_base;
        e.train.epochs_incremental = self.epochs_incremental;
        e.train.crop = self.crop;
        e.train.seed = seed;
        match variant {
            Variant::Naive => {
                e.train.objective = Objective::Flat;
                e.train.pseudo_label = PseudoLabelMode::None;
            }
            Variant::Full => {}
            Variant::UniformPl => e.train.pseudo_label = PseudoLabelMode::Uniform,
            Variant::NoDiceUniformC2 => {
                e.train.pseudo_label = PseudoLabelMode::Uniform;
                e.loss.beta = 0.0;
                e.curvature = Curvature::new(2.0).expect("positive");
            }
        }
        e
    }
}
