//! Command-line experiment runner: configs, checkpoints, reports.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cells::{CellKind, ModelConfig};
use crate::constraints::{verify_cell, ConstraintReport, StabilityMargin};
use crate::datasets::{
    generate_synthetic_dataset, load_and_normalize, write_atomic, NormalizationStats, SyntheticDatasetConfig,
};
use crate::error::{Error, Result};
use crate::measurement::{
    aggregate_runs, amplitude_db, dataset_mae, db_serde, export_trace, measure_noise, EnergyReport, NoiseProtocolConfig,
    ScheduleKind,
};
use crate::numerics::{RngState, SeededRng};
use crate::training::{train, AdamState, EpochRecord, TrainConfig, TrainableModel};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Gate-bound samples drawn by `verify`.
pub const VERIFY_GATE_SAMPLES: usize = 100_000;

// ------------------------------------------------------------------ config

fn default_model() -> ModelConfig {
    ModelConfig::new(CellKind::Gru, 16, 2, false)
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Where training data comes from: existing manifests, or a synthetic
/// dataset generated into `<out>/data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDatasetConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_manifest: None,
            eval_manifest: None,
            synthetic: Some(SyntheticDatasetConfig::default()),
        }
    }
}

/// One experiment. `seed` is the master seed: it overrides the training and
/// synthetic-data seeds when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub margin: StabilityMargin,
    #[serde(default)]
    pub protocol: NoiseProtocolConfig,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: default_model(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            margin: StabilityMargin::default(),
            protocol: NoiseProtocolConfig::default(),
            out_dir: default_out(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Propagates the master seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        if let Some(s) = self.data.synthetic.as_mut() {
            s.seed = self.seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.margin.validate()?;
        self.protocol.validate()?;
        let d = &self.data;
        match (&d.train_manifest, &d.eval_manifest, &d.synthetic) {
            (Some(_), Some(_), _) => {}
            (None, None, Some(s)) => {
                s.validate()?;
                if self.model.controls != 2 {
                    return Err(Error::config("the synthetic device has 2 controls; set model.controls = 2"));
                }
            }
            _ => {
                return Err(Error::config(
                    "data needs both train_manifest and eval_manifest, or a synthetic config",
                ))
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

// -------------------------------------------------------------- checkpoint

/// Everything needed to resume training or run the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub model: TrainableModel,
    pub optimizer: AdamState,
    pub stats: NormalizationStats,
    pub rng: RngState,
    pub epochs_completed: usize,
    pub best_eval_mae: f64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let h: Header = serde_json::from_str(text)?;
        if h.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: h.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let c: Checkpoint = serde_json::from_str(text)?;
        c.model.config.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}

// ------------------------------------------------------------------ clap

#[derive(Debug, Parser)]
#[command(name = "stable-rnn-va", version, about = "Train and measure stability-constrained conditioned RNN audio models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    Smooth,
    Random,
    Both,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/eval manifests and WAVs).
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes checkpoints, a loss CSV and a report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train through the stability parametrization.
        #[arg(long)]
        stable: bool,
        #[arg(long, value_enum)]
        cell: Option<CellKind>,
        /// Independent runs with seeds seed, seed+1, ...; adds an aggregate report.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// MAE_dB of a checkpoint on a dataset manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Output energy under the zero-input conditioning-noise protocol.
    Measure {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Scenario::Both)]
        scenario: Scenario,
        /// Also write per-sample trace CSVs.
        #[arg(long)]
        trace: bool,
    },
    /// Re-check the stability constraints of a checkpoint.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

// --------------------------------------------------------------- helpers

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::validation(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn checkpoint_out_dir(common: &Common, checkpoint: &Path) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
}

/// Loss history as CSV.
pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,steps,train_mae,eval_mae,eval_mae_db,constraints\n");
    for r in history {
        let status = match r.constraints_pass {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "n/a",
        };
        s.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e},{}\n",
            r.epoch, r.steps, r.train_mae, r.eval_mae, r.eval_mae_db, status
        ));
    }
    s
}

// -------------------------------------------------------------- commands

pub fn cmd_synth_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?.resolve()?;
    let synth = cfg
        .data
        .synthetic
        .clone()
        .ok_or_else(|| Error::config("config has no data.synthetic section"))?;
    prepare_out_dir(&cfg.out_dir, common.force)?;
    let ds = generate_synthetic_dataset(&synth, &cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join("config.json"), cfg.to_json()?.as_bytes())?;
    println!(
        "wrote {} train and {} eval samples ({} samples each) to {}",
        ds.train.samples.len(),
        ds.eval.samples.len(),
        synth.sample_len + 2 * synth.silence_pad,
        cfg.out_dir.display()
    );
    Ok(())
}

/// Final summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub cell: CellKind,
    pub stable: bool,
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub best_eval_mae: f64,
    #[serde(with = "db_serde")]
    pub best_eval_mae_db: f64,
    pub constraints_pass: Option<bool>,
}

fn resolve_manifests(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    match (&cfg.data.train_manifest, &cfg.data.eval_manifest) {
        (Some(t), Some(e)) => Ok((t.clone(), e.clone())),
        _ => {
            let synth = cfg.data.synthetic.as_ref().expect("validated data config");
            let dir = cfg.out_dir.join("data");
            let ds = generate_synthetic_dataset(synth, &dir)?;
            Ok((ds.train_manifest, ds.eval_manifest))
        }
    }
}

/// One training run into `dir`. Returns the best eval MAE.
fn train_one(cfg: &ExperimentConfig, dir: &Path) -> Result<f64> {
    let (train_manifest, eval_manifest) = resolve_manifests(cfg)?;
    let (train_set, stats) = load_and_normalize(&train_manifest, None)?;
    let (eval_set, _) = load_and_normalize(&eval_manifest, Some(stats))?;
    write_atomic(&dir.join("config.json"), cfg.to_json()?.as_bytes())?;
    let outcome = match train(&cfg.model, cfg.margin, &train_set, &eval_set, &cfg.train) {
        Ok(o) => o,
        Err(e) => {
            write_atomic(&dir.join("loss.csv"), loss_csv(&e.history).as_bytes())?;
            return Err(e.source);
        }
    };
    write_atomic(&dir.join("loss.csv"), loss_csv(&outcome.history).as_bytes())?;
    let ckpt = |model: &TrainableModel| Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        model: model.clone(),
        optimizer: outcome.optimizer.clone(),
        stats,
        rng: outcome.rng.state(),
        epochs_completed: outcome.history.len(),
        best_eval_mae: outcome.best_eval_mae,
    };
    ckpt(&outcome.best).save(&dir.join("checkpoint_best.json"))?;
    ckpt(&outcome.model).save(&dir.join("checkpoint_final.json"))?;
    let mut best = outcome.best.clone();
    let m = best.materialize();
    let constraints_pass = cfg.model.stable.then(|| {
        let mut rng = SeededRng::new(cfg.seed).split(7);
        verify_cell(&m.cell, m.mode, &cfg.margin, VERIFY_GATE_SAMPLES, &mut rng).all_passed()
    });
    let report = TrainReport {
        cell: cfg.model.cell,
        stable: cfg.model.stable,
        seed: cfg.seed,
        epochs: outcome.history.len(),
        steps: outcome.optimizer.step,
        best_eval_mae: outcome.best_eval_mae,
        best_eval_mae_db: amplitude_db(outcome.best_eval_mae),
        constraints_pass,
    };
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "{} {}: best eval MAE {:.6} ({:.2} dB) after {} epochs -> {}",
        if cfg.model.stable { "stable" } else { "unconstrained" },
        cfg.model.cell,
        report.best_eval_mae,
        report.best_eval_mae_db,
        report.epochs,
        dir.display()
    );
    Ok(outcome.best_eval_mae)
}

pub fn cmd_train(
    common: &Common,
    stable: bool,
    cell: Option<CellKind>,
    runs: usize,
    epochs: Option<usize>,
    max_steps: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if stable {
        cfg.model.stable = true;
    }
    if let Some(c) = cell {
        cfg.model.cell = c;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
    if runs == 0 {
        return Err(Error::config("--runs must be >= 1"));
    }
    let cfg = cfg.resolve()?;
    prepare_out_dir(&cfg.out_dir, common.force)?;
    if runs == 1 {
        train_one(&cfg, &cfg.out_dir)?;
        return Ok(());
    }
    // Synthetic data is shared by all runs and generated once.
    let mut base = cfg.clone();
    if base.data.train_manifest.is_none() {
        let (t, e) = resolve_manifests(&base)?;
        base.data = DataConfig {
            train_manifest: Some(t),
            eval_manifest: Some(e),
            synthetic: None,
        };
    }
    write_atomic(&cfg.out_dir.join("config.json"), base.to_json()?.as_bytes())?;
    let mut losses = Vec::with_capacity(runs);
    for k in 0..runs {
        let mut run_cfg = base.clone();
        run_cfg.seed = base.seed + k as u64;
        let dir = cfg.out_dir.join(format!("run_{k:02}"));
        run_cfg.out_dir = dir.clone();
        let run_cfg = run_cfg.resolve()?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        losses.push(train_one(&run_cfg, &dir)?);
    }
    let agg = aggregate_runs(&losses, 0.95)?;
    write_json(&cfg.out_dir.join("aggregate.json"), &agg)?;
    println!("MAE_dB over {runs} runs: {agg}");
    Ok(())
}

/// Output of `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub manifest: PathBuf,
    pub n_samples: usize,
    pub mae: f64,
    #[serde(with = "db_serde")]
    pub mae_db: f64,
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, manifest: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::load(checkpoint)?;
    let (samples, _) = load_and_normalize(manifest, Some(ckpt.stats))?;
    let model = ckpt.model.materialize();
    let mae = dataset_mae(&model, &samples)?;
    let report = EvalReport {
        manifest: manifest.to_path_buf(),
        n_samples: samples.len(),
        mae,
        mae_db: amplitude_db(mae),
    };
    let out = checkpoint_out_dir(common, checkpoint);
    write_json(&out.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Output of `measure`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub cell: CellKind,
    pub stable: bool,
    pub seed: u64,
    pub protocol: NoiseProtocolConfig,
    pub scenarios: Vec<EnergyReport>,
}

pub fn cmd_measure(common: &Common, checkpoint: &Path, scenario: Scenario, trace: bool) -> Result<()> {
    let mut ckpt = Checkpoint::load(checkpoint)?;
    let protocol = match &common.config {
        Some(p) => ExperimentConfig::load(p)?.protocol,
        None => ckpt.config.protocol,
    };
    let seed = common.seed.unwrap_or(ckpt.config.seed);
    let model = ckpt.model.materialize();
    let kinds: &[ScheduleKind] = match scenario {
        Scenario::Smooth => &[ScheduleKind::SmoothSweep],
        Scenario::Random => &[ScheduleKind::RandomUniform],
        Scenario::Both => &[ScheduleKind::SmoothSweep, ScheduleKind::RandomUniform],
    };
    let out = checkpoint_out_dir(common, checkpoint);
    let mut reports = Vec::new();
    for &kind in kinds {
        let mut r = measure_noise(&model, kind, &protocol, seed, trace)?;
        if trace {
            export_trace(&r, &out.join(format!("trace_{}.csv", r.scenario)))?;
            r.output = None;
            r.conditioning = None;
        }
        println!("{}: {} dBFS", r.scenario, fmt_db(r.energy_dbfs));
        reports.push(r);
    }
    let report = MeasureReport {
        cell: ckpt.model.config.cell,
        stable: ckpt.model.config.stable,
        seed,
        protocol,
        scenarios: reports,
    };
    write_json(&out.join("measure.json"), &report)
}

fn fmt_db(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.2}")
    }
}

/// Output of `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub stable: bool,
    pub passed: bool,
    pub report: ConstraintReport,
}

/// Returns whether the command should exit successfully.
pub fn cmd_verify(common: &Common, checkpoint: &Path) -> Result<bool> {
    let mut ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model.materialize();
    let margin = ckpt.model.margin;
    let mut rng = SeededRng::new(ckpt.config.seed).split(7);
    let report = verify_cell(&model.cell, model.mode, &margin, VERIFY_GATE_SAMPLES, &mut rng);
    let stable = ckpt.model.config.stable;
    let passed = report.all_passed();
    print!("{report}");
    if stable {
        println!("{}", if passed { "PASS" } else { "FAIL" });
    } else {
        println!("unconstrained model: values are informational");
    }
    let out = checkpoint_out_dir(common, checkpoint);
    write_json(
        &out.join("verify.json"),
        &VerifyReport {
            stable,
            passed,
            report,
        },
    )?;
    Ok(passed || !stable)
}

/// Runs a parsed command line. `Ok(false)` means a verification failure.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SynthData { common } => cmd_synth_data(&common).map(|_| true),
        Command::Train {
            common,
            stable,
            cell,
            runs,
            epochs,
            max_steps,
        } => cmd_train(&common, stable, cell, runs, epochs, max_steps).map(|_| true),
        Command::Eval {
            common,
            checkpoint,
            manifest,
        } => cmd_eval(&common, &checkpoint, &manifest).map(|_| true),
        Command::Measure {
            common,
            checkpoint,
            scenario,
            trace,
        } => cmd_measure(&common, &checkpoint, scenario, trace).map(|_| true),
        Command::Verify { common, checkpoint } => cmd_verify(&common, &checkpoint),
    }
}

/// Process exit code for a command outcome: 0 success, 1 runtime failure,
/// 2 usage or validation error.
pub fn exit_code(result: &Result<bool>) -> i32 {
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn seed_propagates() {
        let c = ExperimentConfig {
            seed: 9,
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.data.synthetic.unwrap().seed, 9);
    }

    #[test]
    fn data_section_must_be_complete() {
        let mut c = ExperimentConfig::default();
        c.data = DataConfig {
            train_manifest: Some("t.json".into()),
            eval_manifest: None,
            synthetic: None,
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn loss_csv_format() {
        let h = vec![EpochRecord {
            epoch: 0,
            steps: 3,
            train_mae: 0.5,
            eval_mae: 0.25,
            eval_mae_db: -12.0,
            constraints_pass: Some(true),
        }];
        assert_eq!(
            loss_csv(&h),
            "epoch,steps,train_mae,eval_mae,eval_mae_db,constraints\n\
             0,3,5.0000000000000000e-1,2.5000000000000000e-1,-1.2000000000000000e1,pass\n"
        );
    }

    #[test]
    fn version_mismatch() {
        assert!(matches!(
            Checkpoint::from_json(r#"{"version": 99}"#),
            Err(Error::Version { found: 99, .. })
        ));
    }
}
