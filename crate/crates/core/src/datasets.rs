//! Dataset manifests, mono WAV I/O, max-abs normalization and a synthetic
//! conditioned distortion device that stands in for hardware recordings.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{OnePole, SeededRng, Vector};

/// Sample rate every dataset must use.
pub const SAMPLE_RATE: u32 = 48_000;

/// One (input, target, controls) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub controls: Vector,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub input: String,
    pub target: String,
    pub controls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sample_rate: u32,
    /// Control names, one per control dimension.
    pub controls: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::validation(format!(
                "manifest sample rate {} (expected {SAMPLE_RATE})",
                self.sample_rate
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::validation("manifest lists no samples"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.controls.len() != self.controls.len() {
                return Err(Error::validation(format!(
                    "sample {i} has {} control values, manifest declares {}",
                    s.controls.len(),
                    self.controls.len()
                )));
            }
            if s.controls.iter().any(|c| !c.is_finite()) {
                return Err(Error::validation(format!("sample {i} has a non-finite control")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub max_abs: f64,
}

// ---------------------------------------------------------------- WAV I/O

/// Decoded mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Wav {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

fn wav_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(wav_err(
                self.path,
                self.buf.len() as u64,
                format!("truncated while reading {what} (needed {n} bytes at offset {})", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Reads a mono RIFF/WAVE file: 16/24/32-bit PCM or 32/64-bit float.
/// PCM is scaled to `[−1, 1)` (16-bit divides by 32768).
pub fn wav_read(path: &Path) -> Result<Wav> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0, path };
    if cur.take(4, "RIFF tag")? != b"RIFF" {
        return Err(wav_err(path, 0, "missing RIFF tag"));
    }
    cur.u32("RIFF size")?;
    if cur.take(4, "WAVE tag")? != b"WAVE" {
        return Err(wav_err(path, 8, "missing WAVE tag"));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    loop {
        let chunk_at = cur.pos as u64;
        let id = cur.take(4, "chunk id")?;
        let size = cur.u32("chunk size")? as usize;
        match id {
            b"fmt " => {
                let body_at = cur.pos;
                let mut format = cur.u16("format tag")?;
                let channels = cur.u16("channel count")?;
                let rate = cur.u32("sample rate")?;
                cur.u32("byte rate")?;
                cur.u16("block align")?;
                let bits = cur.u16("bits per sample")?;
                if format == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(wav_err(path, chunk_at, "extensible fmt chunk too short"));
                    }
                    cur.u16("extension size")?;
                    cur.u16("valid bits")?;
                    cur.u32("channel mask")?;
                    format = cur.u16("subformat")?;
                }
                if channels != 1 {
                    return Err(wav_err(path, body_at as u64 + 2, format!("{channels} channels; only mono is supported")));
                }
                fmt = Some((format, channels, rate, bits));
                let end = body_at + size + (size & 1);
                if end > buf.len() {
                    return Err(wav_err(path, buf.len() as u64, "truncated fmt chunk"));
                }
                cur.pos = end;
            }
            b"data" => {
                let (format, _, rate, bits) =
                    fmt.ok_or_else(|| wav_err(path, chunk_at, "data chunk before fmt chunk"))?;
                let data_at = cur.pos as u64;
                let bytes = cur.take(size, "sample data")?;
                let samples = decode(bytes, format, bits).map_err(|d| wav_err(path, data_at, d))?;
                return Ok(Wav {
                    sample_rate: rate,
                    samples,
                });
            }
            _ => {
                cur.take(size + (size & 1), "skipped chunk")?;
            }
        }
    }
}

fn decode(bytes: &[u8], format: u16, bits: u16) -> std::result::Result<Vec<f64>, String> {
    let width = (bits / 8) as usize;
    if width == 0 || bytes.len() % width != 0 {
        return Err(format!("data size {} is not a multiple of {width}-byte frames", bytes.len()));
    }
    let out = match (format, bits) {
        (FORMAT_PCM, 16) => bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
            .collect(),
        (FORMAT_PCM, 24) => bytes
            .chunks_exact(3)
            .map(|b| (i32::from_le_bytes([0, b[0], b[1], b[2]]) >> 8) as f64 / 8_388_608.0)
            .collect(),
        (FORMAT_PCM, 32) => bytes
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64 / 2_147_483_648.0)
            .collect(),
        (FORMAT_FLOAT, 32) => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        (FORMAT_FLOAT, 64) => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect(),
        _ => return Err(format!("unsupported layout: format {format}, {bits} bits")),
    };
    Ok(out)
}

/// Encodes mono 32-bit float WAV bytes. Samples are rounded to `f32`.
pub fn wav_bytes(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 4) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_FLOAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 4).to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

pub fn wav_write(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    write_atomic(path, &wav_bytes(samples, sample_rate))
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ----------------------------------------------------------- synthetic device

/// Reference two-knob distortion: drive gain, then tanh, then a one-pole tone
/// filter, then a fixed output level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDeviceConfig {
    /// Drive range in dB for control 0 ∈ [0, 1].
    #[serde(default = "default_drive_db")]
    pub drive_db: f64,
    #[serde(default = "default_cutoff_min")]
    pub cutoff_min_hz: f64,
    #[serde(default = "default_cutoff_max")]
    pub cutoff_max_hz: f64,
    #[serde(default = "default_level")]
    pub output_level: f64,
}

fn default_drive_db() -> f64 {
    30.0
}
fn default_cutoff_min() -> f64 {
    500.0
}
fn default_cutoff_max() -> f64 {
    20_000.0
}
fn default_level() -> f64 {
    0.5
}

impl Default for SyntheticDeviceConfig {
    fn default() -> Self {
        SyntheticDeviceConfig {
            drive_db: default_drive_db(),
            cutoff_min_hz: default_cutoff_min(),
            cutoff_max_hz: default_cutoff_max(),
            output_level: default_level(),
        }
    }
}

impl SyntheticDeviceConfig {
    pub const CONTROL_NAMES: [&'static str; 2] = ["drive", "tone"];

    /// Linear drive gain `10^(p·drive_db/20)`.
    pub fn gain(&self, drive: f64) -> f64 {
        10f64.powf(drive * self.drive_db / 20.0)
    }

    /// Tone cutoff `f_min·(f_max/f_min)^p` in Hz.
    pub fn cutoff(&self, tone: f64) -> f64 {
        self.cutoff_min_hz * (self.cutoff_max_hz / self.cutoff_min_hz).powf(tone)
    }
}

/// Renders the synthetic device. Controls are `[drive, tone]` in `[0, 1]`.
pub fn synth_device_render(cfg: &SyntheticDeviceConfig, x: &[f64], controls: &[f64], sample_rate: u32) -> Result<Vec<f64>> {
    if controls.len() != 2 {
        return Err(Error::validation(format!("device takes 2 controls, got {}", controls.len())));
    }
    if controls.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::validation(format!("device controls must lie in [0, 1], got {controls:?}")));
    }
    if sample_rate != SAMPLE_RATE {
        return Err(Error::validation(format!("device runs at {SAMPLE_RATE} Hz, got {sample_rate}")));
    }
    let g = cfg.gain(controls[0]);
    let mut lp = OnePole::half_power(cfg.cutoff(controls[1]), sample_rate as f64);
    Ok(x.iter().map(|&v| cfg.output_level * lp.process((g * v).tanh())).collect())
}

// ----------------------------------------------------------- dataset synthesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    #[serde(default)]
    pub device: SyntheticDeviceConfig,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Samples per clip (default one second).
    #[serde(default = "default_len")]
    pub sample_len: usize,
    /// Silence before and after the audio segment, in samples.
    #[serde(default)]
    pub silence_pad: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_train() -> usize {
    64
}
fn default_n_eval() -> usize {
    16
}
fn default_len() -> usize {
    SAMPLE_RATE as usize
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        SyntheticDatasetConfig {
            device: SyntheticDeviceConfig::default(),
            n_train: default_n_train(),
            n_eval: default_n_eval(),
            sample_len: default_len(),
            silence_pad: 0,
            seed: 0,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 || self.sample_len == 0 {
            return Err(Error::config("n_train, n_eval and sample_len must be >= 1"));
        }
        Ok(())
    }
}

/// Control pairs on a `k×k` grid (`k² ≥ n`), corners first, with interior
/// coordinates jittered by up to a quarter grid step.
pub fn control_grid(n: usize, rng: &mut SeededRng) -> Vec<[f64; 2]> {
    let mut k = 2;
    while k * k < n {
        k += 1;
    }
    let step = 1.0 / (k - 1) as f64;
    let corners = [(0, 0), (0, k - 1), (k - 1, 0), (k - 1, k - 1)];
    let mut cells: Vec<(usize, usize)> = corners.to_vec();
    for a in 0..k {
        for b in 0..k {
            if !corners.contains(&(a, b)) {
                cells.push((a, b));
            }
        }
    }
    let jitter = |idx: usize, rng: &mut SeededRng| {
        let base = idx as f64 * step;
        if idx == 0 || idx == k - 1 {
            base
        } else {
            (base + rng.uniform(-0.25, 0.25) * step).clamp(0.0, 1.0)
        }
    };
    (0..n)
        .map(|i| {
            let (a, b) = cells[i % cells.len()];
            [jitter(a, rng), jitter(b, rng)]
        })
        .collect()
}

/// Synthetic source audio: band-limited noise bursts, exponential tone sweeps
/// and decaying plucked partials, peak below 1.
pub fn source_audio(len: usize, sample_rate: u32, rng: &mut SeededRng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut out = vec![0.0; len];
    let kind = rng.below(3);
    let amp = rng.uniform(0.1, 0.9);
    match kind {
        0 => {
            // Noise bursts through a random lowpass, gated on and off.
            let mut lp = OnePole::half_power(rng.uniform(800.0, 8000.0), sr);
            let burst = (rng.uniform(0.05, 0.3) * sr) as usize + 1;
            let gap = (rng.uniform(0.02, 0.2) * sr) as usize + 1;
            let mut t = 0;
            let mut on = true;
            while t < len {
                let n = if on { burst } else { gap };
                for k in 0..n.min(len - t) {
                    let env = if on {
                        let a = (k as f64 / (0.005 * sr)).min(1.0);
                        a * (-3.0 * k as f64 / n as f64).exp()
                    } else {
                        0.0
                    };
                    out[t + k] = env * lp.process(rng.uniform(-1.0, 1.0));
                }
                t += n;
                on = !on;
            }
        }
        1 => {
            // Exponential sine sweep.
            let f0 = rng.uniform(40.0, 400.0);
            let f1 = rng.uniform(1000.0, 6000.0);
            let dur = len as f64 / sr;
            let r = (f1 / f0).ln();
            for (t, o) in out.iter_mut().enumerate() {
                let ts = t as f64 / sr;
                let phase = std::f64::consts::TAU * f0 * dur / r * ((ts / dur * r).exp() - 1.0);
                *o = phase.sin();
            }
        }
        _ => {
            // Plucks: decaying harmonic stacks at random onsets.
            let n_notes = 1 + rng.below(6);
            for _ in 0..n_notes {
                let onset = rng.below(len.max(1));
                let f = 55.0 * 2f64.powf(rng.uniform(0.0, 4.0));
                let decay = rng.uniform(2.0, 12.0);
                let weight = rng.uniform(0.3, 1.0);
                for (k, o) in out[onset..].iter_mut().enumerate() {
                    let ts = k as f64 / sr;
                    let env = (-decay * ts).exp() * weight;
                    let mut s = 0.0;
                    for h in 1..=5 {
                        let fh = f * h as f64;
                        if fh < 0.45 * sr {
                            s += (std::f64::consts::TAU * fh * ts).sin() / h as f64;
                        }
                    }
                    *o += env * s;
                }
            }
        }
    }
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = amp / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}

fn quantize_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Renders one clip (input, target) at the given controls. Both are rounded
/// to `f32` so they survive the WAV round trip bit-exactly; the target is
/// rendered from the already-rounded input.
pub fn render_clip(
    cfg: &SyntheticDatasetConfig,
    controls: &[f64],
    rng: &mut SeededRng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut input = vec![0.0; cfg.silence_pad];
    input.extend(source_audio(cfg.sample_len, SAMPLE_RATE, rng));
    input.extend(std::iter::repeat_n(0.0, cfg.silence_pad));
    quantize_f32(&mut input);
    let mut target = synth_device_render(&cfg.device, &input, controls, SAMPLE_RATE)?;
    quantize_f32(&mut target);
    Ok((input, target))
}

/// Paths of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub train: DatasetManifest,
    pub eval: DatasetManifest,
}

fn synth_split(cfg: &SyntheticDatasetConfig, split: Split, out_dir: &Path) -> Result<DatasetManifest> {
    let root = SeededRng::new(cfg.seed);
    // Disjoint streams per split for controls and for source audio.
    let (ctrl_stream, audio_stream, n, tag) = match split {
        Split::Train => (10, 11, cfg.n_train, "train"),
        Split::Eval => (20, 21, cfg.n_eval, "eval"),
    };
    let grid = control_grid(n, &mut root.split(ctrl_stream));
    let mut audio_rng = root.split(audio_stream);
    let mut samples = Vec::with_capacity(n);
    for (i, c) in grid.iter().enumerate() {
        let (input, target) = render_clip(cfg, c, &mut audio_rng)?;
        let in_rel = format!("{tag}/{i:05}_input.wav");
        let tg_rel = format!("{tag}/{i:05}_target.wav");
        wav_write(&out_dir.join(&in_rel), &input, SAMPLE_RATE)?;
        wav_write(&out_dir.join(&tg_rel), &target, SAMPLE_RATE)?;
        samples.push(ManifestEntry {
            input: in_rel,
            target: tg_rel,
            controls: c.to_vec(),
        });
    }
    let manifest = DatasetManifest {
        sample_rate: SAMPLE_RATE,
        controls: SyntheticDeviceConfig::CONTROL_NAMES.iter().map(|s| s.to_string()).collect(),
        split: Some(split),
        samples,
    };
    write_atomic(&out_dir.join(format!("{tag}.json")), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

/// Writes `train.json`, `eval.json` and their WAV files under `out_dir`.
pub fn generate_synthetic_dataset(cfg: &SyntheticDatasetConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let train = synth_split(cfg, Split::Train, out_dir)?;
    let eval = synth_split(cfg, Split::Eval, out_dir)?;
    Ok(GeneratedDataset {
        train_manifest: out_dir.join("train.json"),
        eval_manifest: out_dir.join("eval.json"),
        train,
        eval,
    })
}

/// Loads every sample listed in a manifest (unnormalized).
pub fn load_samples(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let read = |rel: &str| -> Result<Vec<f64>> {
            let p = base.join(rel);
            let w = wav_read(&p)?;
            if w.sample_rate != manifest.sample_rate {
                return Err(Error::validation(format!(
                    "{} has sample rate {}, manifest says {}",
                    p.display(),
                    w.sample_rate,
                    manifest.sample_rate
                )));
            }
            Ok(w.samples)
        };
        let input = read(&e.input)?;
        let target = read(&e.target)?;
        if input.len() != target.len() {
            return Err(Error::validation(format!(
                "{}: input has {} samples, target {}",
                e.input,
                input.len(),
                target.len()
            )));
        }
        out.push(Sample {
            input,
            target,
            controls: Vector(e.controls.clone()),
        });
    }
    Ok((manifest, out))
}

/// Joint max-abs over inputs and targets.
pub fn compute_stats(samples: &[Sample]) -> Result<NormalizationStats> {
    let max_abs = samples
        .iter()
        .flat_map(|s| s.input.iter().chain(&s.target))
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(max_abs > 0.0 && max_abs.is_finite()) {
        return Err(Error::validation("dataset is silent (max |sample| = 0); cannot normalize"));
    }
    Ok(NormalizationStats { max_abs })
}

/// Divides inputs and targets by `stats.max_abs`.
pub fn normalize(samples: &mut [Sample], stats: &NormalizationStats) {
    for s in samples {
        s.input.iter_mut().for_each(|v| *v /= stats.max_abs);
        s.target.iter_mut().for_each(|v| *v /= stats.max_abs);
    }
}

/// Loads a manifest and normalizes it: with `stats = None` the statistics
/// are computed from this (training) split; otherwise the given training
/// statistics are applied unchanged.
pub fn load_and_normalize(
    manifest_path: &Path,
    stats: Option<NormalizationStats>,
) -> Result<(Vec<Sample>, NormalizationStats)> {
    let (_, mut samples) = load_samples(manifest_path)?;
    let stats = match stats {
        Some(s) => s,
        None => compute_stats(&samples)?,
    };
    normalize(&mut samples, &stats);
    Ok((samples, stats))
}
