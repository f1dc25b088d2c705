//! Conditioning schedules, the zero-input noise protocol, energy and MAE
//! metrics in dB, multi-run confidence intervals and trace export.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cells::{ControlTrajectory, Model, Runner};
use crate::datasets::{write_atomic, Sample};
use crate::error::{Error, Result};
use crate::numerics::{OnePole, SeededRng};

/// Serde for dB values that may be infinite: finite values are numbers,
/// infinities are the strings `"-inf"` / `"inf"`.
pub mod db_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom("NaN has no dB representation"))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("expected a number or \"-inf\", got {s:?}"))),
        }
    }
}

/// `20·log₁₀(v)` for amplitude-like quantities; `−∞` at 0.
pub fn amplitude_db(v: f64) -> f64 {
    20.0 * v.log10()
}

/// `10·log₁₀(v)` for power-like quantities; `−∞` at 0.
pub fn power_db(v: f64) -> f64 {
    10.0 * v.log10()
}

// ---------------------------------------------------------------- schedules

pub const SMOOTH_CUTOFF_HZ: f64 = 10.0;

/// Three equal-duration linear ramps `0 → 1 → −1 → 0`, before smoothing.
pub fn ramp_waypoints(length: usize) -> Vec<f64> {
    let third = length as f64 / 3.0;
    (0..length)
        .map(|t| {
            let s = t as f64 / third;
            if s < 1.0 {
                s
            } else if s < 2.0 {
                1.0 - 2.0 * (s - 1.0)
            } else {
                -1.0 + (s - 2.0)
            }
        })
        .collect()
}

/// Ramps through a one-pole lowpass with `a = exp(−2π·cutoff/sr)`, shared by
/// all `p` controls.
pub fn smooth_schedule(length: usize, p: usize, sample_rate: f64, cutoff_hz: f64) -> Result<ControlTrajectory> {
    if length == 0 {
        return Err(Error::config("schedule length must be >= 1"));
    }
    if !(cutoff_hz > 0.0 && sample_rate > 0.0) {
        return Err(Error::config("cutoff and sample rate must be positive"));
    }
    let mut lp = OnePole::time_constant(cutoff_hz, sample_rate);
    let values: Vec<f64> = ramp_waypoints(length).into_iter().map(|u| lp.process(u)).collect();
    Ok(ControlTrajectory::shared(&values, p))
}

/// I.i.d. `U(−1, 1)` per sample and per control.
pub fn random_schedule(length: usize, p: usize, seed: u64) -> Result<ControlTrajectory> {
    if length == 0 {
        return Err(Error::config("schedule length must be >= 1"));
    }
    let mut rng = SeededRng::new(seed);
    let data = rng.uniform_vec(length * p, -1.0, 1.0).0;
    if p == 0 {
        return Ok(ControlTrajectory::constant(&[], length));
    }
    ControlTrajectory::from_rows(p, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    SmoothSweep,
    RandomUniform,
    Constant { value: f64 },
}

impl ScheduleKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ScheduleKind::SmoothSweep => "smooth",
            ScheduleKind::RandomUniform => "random",
            ScheduleKind::Constant { .. } => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSchedule {
    pub kind: ScheduleKind,
    pub length: usize,
    pub controls: usize,
    pub seed: u64,
    pub cutoff_hz: f64,
    pub sample_rate: f64,
}

impl ConditioningSchedule {
    pub fn generate(&self) -> Result<ControlTrajectory> {
        match self.kind {
            ScheduleKind::SmoothSweep => smooth_schedule(self.length, self.controls, self.sample_rate, self.cutoff_hz),
            ScheduleKind::RandomUniform => random_schedule(self.length, self.controls, self.seed),
            ScheduleKind::Constant { value } => {
                if self.length == 0 {
                    return Err(Error::config("schedule length must be >= 1"));
                }
                Ok(ControlTrajectory::constant(&vec![value; self.controls], self.length))
            }
        }
    }
}

// ------------------------------------------------------------ noise protocol

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseProtocolConfig {
    pub sample_rate: u32,
    pub init_noise_s: f64,
    pub settle_s: f64,
    pub measure_s: f64,
    pub noise_amplitude: f64,
    pub init_control: f64,
    pub smooth_cutoff_hz: f64,
}

impl Default for NoiseProtocolConfig {
    fn default() -> Self {
        NoiseProtocolConfig {
            sample_rate: 48_000,
            init_noise_s: 0.2,
            settle_s: 1.0,
            measure_s: 1.0,
            noise_amplitude: 1.0,
            init_control: 0.0,
            smooth_cutoff_hz: SMOOTH_CUTOFF_HZ,
        }
    }
}

impl NoiseProtocolConfig {
    fn samples(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate as f64).round() as usize
    }

    pub fn init_samples(&self) -> usize {
        self.samples(self.init_noise_s)
    }

    pub fn settle_samples(&self) -> usize {
        self.samples(self.settle_s)
    }

    pub fn measure_samples(&self) -> usize {
        self.samples(self.measure_s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("protocol sample rate must be positive"));
        }
        for (name, v) in [
            ("init_noise_s", self.init_noise_s),
            ("settle_s", self.settle_s),
            ("measure_s", self.measure_s),
        ] {
            if !(v > 0.0 && v.is_finite()) || self.samples(v) == 0 {
                return Err(Error::config(format!("{name} must be positive (got {v})")));
            }
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return Err(Error::config("noise_amplitude must be finite and >= 0"));
        }
        if !self.init_control.is_finite() || !(self.smooth_cutoff_hz > 0.0) {
            return Err(Error::config("init_control must be finite and smooth_cutoff_hz positive"));
        }
        Ok(())
    }
}

/// Energy of the modulated phase of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub scenario: String,
    /// `10·log₁₀(variance)`; `−∞` exactly when the variance is 0.
    #[serde(with = "db_serde")]
    pub energy_dbfs: f64,
    pub variance: f64,
    pub sample_rate: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Vec<f64>>,
    /// Row-major `len × controls`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<Vec<f64>>,
    pub controls: usize,
}

/// Population variance. Values are shifted by the first sample before the
/// two-pass sum, so a constant signal yields exactly 0.
pub fn variance(y: &[f64]) -> f64 {
    let Some(&y0) = y.first() else {
        return 0.0;
    };
    let n = y.len() as f64;
    let mean = y.iter().map(|v| v - y0).sum::<f64>() / n;
    y.iter().map(|v| (v - y0 - mean).powi(2)).sum::<f64>() / n
}

fn run_phase(
    runner: &mut Runner<'_>,
    x: impl Iterator<Item = f64>,
    ctrl: &ControlTrajectory,
    phase: &'static str,
    offset: usize,
    mut sink: impl FnMut(f64),
) -> Result<()> {
    for (t, xt) in x.enumerate() {
        let y = runner.step(xt, ctrl.row(t))?;
        if !y.is_finite() {
            return Err(Error::Instability {
                index: offset + t,
                phase,
            });
        }
        sink(y);
    }
    Ok(())
}

/// Runs the three-phase protocol: white-noise initialization with controls at
/// `init_control`, a zero-input settle at the same controls, then zero input
/// while the controls follow the schedule. Energy is measured over the last
/// phase only. `keep_traces` retains the phase-3 output and conditioning.
pub fn measure_noise(
    model: &Model,
    kind: ScheduleKind,
    protocol: &NoiseProtocolConfig,
    seed: u64,
    keep_traces: bool,
) -> Result<EnergyReport> {
    protocol.validate()?;
    model.validate()?;
    let p = model.control_count();
    let sr = protocol.sample_rate as f64;
    // Noise uses stream 1 of the seed; the random schedule uses stream 0.
    let mut noise_rng = SeededRng::new(seed).split(0);
    let (n_init, n_settle, n_meas) = (protocol.init_samples(), protocol.settle_samples(), protocol.measure_samples());
    let rest = ControlTrajectory::constant(&vec![protocol.init_control; p], n_init.max(n_settle));
    let schedule = ConditioningSchedule {
        kind,
        length: n_meas,
        controls: p,
        seed,
        cutoff_hz: protocol.smooth_cutoff_hz,
        sample_rate: sr,
    }
    .generate()?;

    let mut runner = Runner::new(model, model.zero_state());
    let amp = protocol.noise_amplitude;
    let noise = (0..n_init).map(|_| noise_rng.uniform(-amp, amp)).collect::<Vec<_>>();
    run_phase(&mut runner, noise.into_iter(), &rest, "noise initialization", 0, |_| {})?;
    run_phase(&mut runner, std::iter::repeat_n(0.0, n_settle), &rest, "settle", n_init, |_| {})?;
    let mut out = Vec::with_capacity(n_meas);
    run_phase(
        &mut runner,
        std::iter::repeat_n(0.0, n_meas),
        &schedule,
        "modulated",
        n_init + n_settle,
        |y| out.push(y),
    )?;

    let var = variance(&out);
    let conditioning = keep_traces.then(|| (0..n_meas).flat_map(|t| schedule.row(t).to_vec()).collect());
    Ok(EnergyReport {
        scenario: kind.tag().to_string(),
        energy_dbfs: power_db(var),
        variance: var,
        sample_rate: protocol.sample_rate,
        output: keep_traces.then_some(out),
        conditioning,
        controls: p,
    })
}

// ------------------------------------------------------------------ MAE

/// Per-sample `(Σ|y − ŷ|, count)`; each sample starts from the zero state
/// with its controls held constant.
fn sample_abs_error(model: &Model, s: &Sample) -> Result<(f64, usize)> {
    if s.target.len() != s.input.len() {
        return Err(Error::validation("input and target lengths differ"));
    }
    if s.controls.len() != model.control_count() {
        return Err(Error::validation(format!(
            "sample has {} controls, model expects {}",
            s.controls.len(),
            model.control_count()
        )));
    }
    let mut runner = Runner::new(model, model.zero_state());
    let mut sum = 0.0;
    for (&x, &y) in s.input.iter().zip(&s.target) {
        sum += (runner.step(x, &s.controls)? - y).abs();
    }
    Ok((sum, s.input.len()))
}

/// MAE over the concatenation of all per-sample errors.
pub fn dataset_mae(model: &Model, samples: &[Sample]) -> Result<f64> {
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("evaluation dataset is empty"));
    }
    let parts: Vec<Result<(f64, usize)>> = samples.par_iter().map(|s| sample_abs_error(model, s)).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for p in parts {
        let (s, n) = p?;
        sum += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::validation("evaluation dataset has no audio"));
    }
    Ok(sum / count as f64)
}

/// `20·log₁₀(MAE)` over the dataset.
pub fn evaluate_mae_db(model: &Model, samples: &[Sample]) -> Result<f64> {
    dataset_mae(model, samples).map(amplitude_db)
}

// ------------------------------------------------------------ aggregation

/// Mean and Student-t interval of linear MAE values, reported in dB with the
/// interval as offsets from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub n: usize,
    pub confidence: f64,
    pub mean_linear: f64,
    pub ci_low_linear: f64,
    pub ci_high_linear: f64,
    #[serde(with = "db_serde")]
    pub mean_db: f64,
    /// `dB(low) − dB(mean)`, ≤ 0.
    #[serde(with = "db_serde")]
    pub ci_low_db: f64,
    /// `dB(high) − dB(mean)`, ≥ 0.
    #[serde(with = "db_serde")]
    pub ci_high_db: f64,
}

impl fmt::Display for RunAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:+.2}, {:+.2})", self.mean_db, self.ci_low_db, self.ci_high_db)
    }
}

pub fn aggregate_runs(losses: &[f64], confidence: f64) -> Result<RunAggregate> {
    let n = losses.len();
    if n < 2 {
        return Err(Error::validation(format!("need at least 2 runs to aggregate, got {n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    if losses.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::validation("run losses must be finite and non-negative"));
    }
    let nf = n as f64;
    // Shifted by the first run so identical runs give an exact mean.
    let x0 = losses[0];
    let mean = x0 + losses.iter().map(|v| v - x0).sum::<f64>() / nf;
    let var = losses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::config(e.to_string()))?
        .inverse_cdf(0.5 + confidence / 2.0);
    let half = t * (var / nf).sqrt();
    let (lo, hi) = (mean - half, mean + half);
    let mean_db = amplitude_db(mean);
    let offset = |v: f64| {
        if v == mean {
            0.0
        } else {
            amplitude_db(v.max(0.0)) - mean_db
        }
    };
    Ok(RunAggregate {
        n,
        confidence,
        mean_linear: mean,
        ci_low_linear: lo,
        ci_high_linear: hi,
        mean_db,
        ci_low_db: offset(lo),
        ci_high_db: offset(hi),
    })
}

// ---------------------------------------------------------------- traces

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text of a report's traces: `time_s, control_0.., output, output_dbfs`.
/// `output_dbfs` is `20·log₁₀|y|`, left empty where the output is exactly 0.
pub fn trace_csv(report: &EnergyReport) -> Result<String> {
    let (Some(out), Some(cond)) = (&report.output, &report.conditioning) else {
        return Err(Error::validation("report carries no traces"));
    };
    let p = report.controls;
    if cond.len() != out.len() * p {
        return Err(Error::validation("conditioning trace does not match the output length"));
    }
    let mut s = String::from("time_s");
    for k in 0..p {
        s.push_str(&format!(",control_{k}"));
    }
    s.push_str(",output,output_dbfs\n");
    let sr = report.sample_rate as f64;
    for (t, &y) in out.iter().enumerate() {
        s.push_str(&fmt_f(t as f64 / sr));
        for c in &cond[t * p..(t + 1) * p] {
            s.push(',');
            s.push_str(&fmt_f(*c));
        }
        s.push(',');
        s.push_str(&fmt_f(y));
        s.push(',');
        let db = amplitude_db(y.abs());
        if db.is_finite() {
            s.push_str(&fmt_f(db));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_trace(report: &EnergyReport, path: &Path) -> Result<()> {
    write_atomic(path, trace_csv(report)?.as_bytes())
}

/// Parsed trace CSV: `(time, controls row-major, output)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub time_s: Vec<f64>,
    pub controls: Vec<f64>,
    pub output: Vec<f64>,
    pub output_dbfs: Vec<f64>,
}

pub fn parse_trace_csv(text: &str) -> Result<ParsedTrace> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::validation("empty trace"))?;
    let cols = header.split(',').count();
    if cols < 3 {
        return Err(Error::validation("trace header too short"));
    }
    let p = cols - 3;
    let mut t = ParsedTrace {
        time_s: Vec::new(),
        controls: Vec::new(),
        output: Vec::new(),
        output_dbfs: Vec::new(),
    };
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::validation(format!("bad number {s:?}: {e}")));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols {
            return Err(Error::validation(format!("row has {} fields, header {cols}", f.len())));
        }
        t.time_s.push(num(f[0])?);
        for c in &f[1..1 + p] {
            t.controls.push(num(c)?);
        }
        t.output.push(num(f[1 + p])?);
        let db = f[2 + p];
        t.output_dbfs.push(if db.is_empty() { f64::NEG_INFINITY } else { num(db)? });
    }
    Ok(t)
}
