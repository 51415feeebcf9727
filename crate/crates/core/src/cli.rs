//! `gen`, `run` and `report` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{read_summary, SummaryRow};
use crate::experiment::{self, ExperimentConfig, RunOutcome, RUN_JSON, SUMMARY_CSV};
use crate::geometry::Curvature;
use crate::losses::LossWeights;
use crate::model::BackboneConfig;
use crate::presets;
use crate::protocol::{build_schedule, ScheduleConfig, TaskSchedule};
use crate::pseudolabel::LevelThresholds;
use crate::synth::{self, Dataset, SceneSpec};
use crate::taxonomy::Taxonomy;
use crate::trainer::{Objective, PseudoLabelMode, TrainConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "HYCISS_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::MissingRun(_) => EXIT_MISSING,
        _ => EXIT_CONFIG,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Leaf-only pseudo-labels with a uniform 0.5 threshold.
    pub uniform_pl: bool,
    /// Drop the Dice term.
    pub no_dice: bool,
    /// No pseudo-labels at all.
    pub no_pl: bool,
    /// Flat softmax objective over leaves; implies `no_pl`.
    pub flat_ce: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub scene: String,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self { scene: presets::ENDOVIS_LIKE_12.to_string(), size: 32, train: 3500, val: 700, seed: 0 }
    }
}

fn default_curvature() -> Curvature {
    Curvature::new(3.0).expect("positive")
}

fn default_train_per_step() -> usize {
    500
}

fn default_val_per_step() -> usize {
    100
}

/// The single JSON document describing a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Schedule preset name or path to a schedule JSON file.
    pub schedule: String,
    /// Taxonomy preset name or JSON path; defaults to the schedule preset's.
    #[serde(default)]
    pub taxonomy: Option<String>,
    /// Dataset directory written by `gen`; generated in memory when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticSource,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_curvature")]
    pub curvature: Curvature,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub thresholds: LevelThresholds,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_train_per_step")]
    pub train_per_step: usize,
    #[serde(default = "default_val_per_step")]
    pub val_per_step: usize,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Experiment settings after applying ablation flags.
    pub fn experiment(&self) -> ExperimentConfig {
        let mut train = self.train.clone();
        train.seed = self.seed;
        let mut loss = self.loss.clone();
        if self.ablation.uniform_pl {
            train.pseudo_label = PseudoLabelMode::Uniform;
        }
        if self.ablation.no_pl {
            train.pseudo_label = PseudoLabelMode::None;
        }
        if self.ablation.no_dice {
            loss.beta = 0.0;
        }
        if self.ablation.flat_ce {
            train.objective = Objective::Flat;
            train.pseudo_label = PseudoLabelMode::None;
        }
        ExperimentConfig {
            name: self.name.clone(),
            backbone: self.backbone.clone(),
            curvature: self.curvature,
            loss,
            thresholds: self.thresholds.clone(),
            train,
            train_per_step: self.train_per_step,
            val_per_step: self.val_per_step,
            steps: self.steps,
        }
    }

    pub fn resolve_schedule(&self) -> Result<TaskSchedule> {
        let (cfg, preset_tax) = if is_path(&self.schedule) {
            (ScheduleConfig::from_file(Path::new(&self.schedule))?, None)
        } else {
            let (c, t) = presets::schedule(&self.schedule)?;
            (c, Some(t))
        };
        let tax = match (&self.taxonomy, preset_tax) {
            (Some(t), _) if is_path(t) => Taxonomy::from_file(Path::new(t))?,
            (Some(t), _) => presets::taxonomy(t)?,
            (None, Some(t)) => presets::taxonomy(t)?,
            (None, None) => return Err(Error::Config("a schedule file needs an explicit taxonomy".into())),
        };
        build_schedule(&cfg, &tax)
    }

    pub fn resolve_data(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(dir) => synth::load_dataset(dir),
            None => {
                let s = &self.synthetic;
                let spec = resolve_spec(&s.scene, s.size)?;
                Dataset::generate(&spec, s.train, s.val, s.seed)
            }
        }
    }
}

fn is_path(s: &str) -> bool {
    s.ends_with(".json") || s.contains('/') || Path::new(s).exists()
}

/// Scene preset name or path to a scene spec JSON.
pub fn resolve_spec(spec: &str, size: usize) -> Result<SceneSpec> {
    if is_path(spec) {
        let path = Path::new(spec);
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
        let s: SceneSpec = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    } else {
        presets::scene_spec(spec, size, size)
    }
}

pub fn cmd_gen(spec: &str, size: usize, n: usize, val: usize, seed: u64, out: &Path) -> Result<synth::Manifest> {
    let spec = resolve_spec(spec, size)?;
    let data = Dataset::generate(&spec, n, val, seed)?;
    synth::save_dataset(out, &data)
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default, Args)]
pub struct RunOverrides {
    /// Drop the Dice term.
    #[arg(long)]
    pub no_dice: bool,
    /// Leaf-only pseudo-labels at a uniform 0.5 threshold.
    #[arg(long)]
    pub uniform_pl: bool,
    /// Disable pseudo-labels.
    #[arg(long)]
    pub no_pl: bool,
    /// Flat cross-entropy fine-tuning baseline.
    #[arg(long)]
    pub flat_ce: bool,
    #[arg(long)]
    pub curvature: Option<f64>,
    /// Run only the first N steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
}

/// Applies environment then flag overrides (flags win).
pub fn apply_overrides(cfg: &mut RunConfig, env_seed: Option<&str>, o: &RunOverrides) -> Result<()> {
    if let Some(s) = env_seed {
        cfg.seed = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
    }
    cfg.ablation.no_dice |= o.no_dice;
    cfg.ablation.uniform_pl |= o.uniform_pl;
    cfg.ablation.no_pl |= o.no_pl;
    cfg.ablation.flat_ce |= o.flat_ce;
    if let Some(c) = o.curvature {
        cfg.curvature = Curvature::new(c)?;
    }
    if o.steps.is_some() {
        cfg.steps = o.steps;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(p) = &o.output {
        cfg.output_dir = p.clone();
    }
    if let Some(n) = &o.name {
        cfg.name = n.clone();
    }
    Ok(())
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    let schedule = cfg.resolve_schedule()?;
    let data = cfg.resolve_data()?;
    let exp = cfg.experiment();
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    experiment::run(&exp, &schedule, &data.train, &data.val, Some(&cfg.output_dir), false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub schedule: String,
    pub last: SummaryRow,
}

fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(SUMMARY_CSV).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.join(SUMMARY_CSV).is_file() {
                out.push(p);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::MissingRun(dir.to_path_buf()));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RunInfo {
    name: String,
    schedule: String,
}

pub fn collect_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for run in run_dirs(dir)? {
        let summary = read_summary(&run.join(SUMMARY_CSV))?;
        let last = summary.last().cloned().ok_or_else(|| Error::MissingRun(run.join(SUMMARY_CSV)))?;
        let info: Option<RunInfo> =
            fs::read_to_string(run.join(RUN_JSON)).ok().and_then(|t| serde_json::from_str(&t).ok());
        let fallback = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (name, schedule) = match info {
            Some(i) => (i.name, i.schedule),
            None => (fallback, String::new()),
        };
        rows.push(ReportRow { name, schedule, last });
    }
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(rows)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max("config".len());
    let sched = rows.iter().map(|r| r.schedule.len()).max().unwrap_or(0).max("tasks".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:<sched$}  {:>8}  {:>8}  {:>8}", "config", "tasks", "base", "novel", "all");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<sched$}  {:>8}  {:>8}  {:>8}",
            r.name,
            r.schedule,
            fmt(r.last.miou_base),
            fmt(r.last.miou_novel),
            fmt(r.last.miou_all)
        );
    }
    out
}

pub fn report_table_csv(rows: &[ReportRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::from("config,tasks,step,miou_base,miou_novel,miou_all\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name,
            r.schedule,
            r.last.step,
            cell(r.last.miou_base),
            cell(r.last.miou_novel),
            cell(r.last.miou_all)
        );
    }
    out
}

/// Prints and writes `report.csv` next to the runs.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let rows = collect_report(dir)?;
    fs::write(dir.join("report_table.csv"), report_table_csv(&rows))?;
    Ok(render_table(&rows))
}

#[derive(Debug, Parser)]
#[command(name = "hyciss", version, about = "Hierarchical class-incremental segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Scene preset name or scene spec JSON file.
        #[arg(long, default_value = presets::ENDOVIS_LIKE_12)]
        spec: String,
        #[arg(long, default_value_t = 3500)]
        n: usize,
        #[arg(long, default_value_t = 700)]
        val: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every step of a run config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Tabulate final-step results of one run or a directory of runs.
    Report { dir: PathBuf },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, n, val, size, seed, out } => {
            let m = cmd_gen(&spec, size, n, val, seed, &out)?;
            println!("wrote {} train / {} val scenes to {}", m.splits[0].count, m.splits[1].count, out.display());
        }
        Command::Run { config, overrides } => {
            let mut cfg = RunConfig::from_file(&config)?;
            let env = std::env::var(SEED_ENV).ok();
            apply_overrides(&mut cfg, env.as_deref(), &overrides)?;
            let out = cmd_run(&cfg)?;
            for r in &out.reports {
                println!(
                    "step {}: base {} novel {} all {}",
                    r.step,
                    fmt(r.miou_base),
                    fmt(r.miou_novel),
                    fmt(r.miou_all)
                );
            }
        }
        Command::Report { dir } => print!("{}", cmd_report(&dir)?),
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
