//! Control-conditioned GRU and LSTM cells and the affine audio readout.
//!
//! Every gate pre-activation has the form `U h + W x + C p + b` where `h` is
//! the previous hidden state, `x` the (mono) audio sample and `p` the control
//! vector. With `x = 0` the cells are the autonomous systems whose stability
//! the [`constraints`](crate::constraints) module enforces.
//!
//! The `*_forward` kernels below are shared by inference and by the training
//! tape, so both paths produce bit-identical activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2, sigmoid_scalar, Matrix, Vector};

/// Parameters of one gate: recurrent `u` (hidden×hidden), audio input `w`
/// (hidden), conditioning `c` (hidden×controls) and bias `b` (hidden).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub u: Matrix,
    pub w: Vector,
    pub c: Matrix,
    pub b: Vector,
}

impl GateParams {
    pub fn zeros(hidden: usize, controls: usize) -> Self {
        GateParams {
            u: Matrix::zeros(hidden, hidden),
            w: Vector::zeros(hidden),
            c: Matrix::zeros(hidden, controls),
            b: Vector::zeros(hidden),
        }
    }

    fn check(&self, name: &str, hidden: usize, controls: usize) -> Result<()> {
        let ok = self.u.rows() == hidden
            && self.u.cols() == hidden
            && self.w.len() == hidden
            && self.c.rows() == hidden
            && self.c.cols() == controls
            && self.b.len() == hidden;
        if !ok {
            return Err(Error::config(format!(
                "gate {name}: blocks inconsistent with hidden={hidden}, controls={controls}"
            )));
        }
        if !(self.u.is_finite() && self.w.is_finite() && self.c.is_finite() && self.b.is_finite()) {
            return Err(Error::InvalidValue(format!("gate {name}: non-finite parameter")));
        }
        Ok(())
    }

    /// `out = b + w x + C p + U h`
    #[inline]
    fn preact(&self, h: &[f64], x: f64, p: &[f64], out: &mut [f64]) {
        for ((o, &b), &w) in out.iter_mut().zip(self.b.iter()).zip(self.w.iter()) {
            *o = b + w * x;
        }
        if !p.is_empty() {
            self.c.matvec_acc(p, out);
        }
        self.u.matvec_acc(h, out);
    }

    pub(crate) fn blocks(&self) -> [&[f64]; 4] {
        [self.u.data(), &self.w, self.c.data(), &self.b]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [self.u.data_mut(), &mut self.w.0, self.c.data_mut(), &mut self.b.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    /// Reset gate.
    pub r: GateParams,
    /// Update gate.
    pub z: GateParams,
    /// New (candidate) gate.
    pub n: GateParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub i: GateParams,
    pub f: GateParams,
    /// Cell candidate.
    pub g: GateParams,
    pub o: GateParams,
}

impl GruParams {
    pub fn zeros(hidden: usize, controls: usize) -> Self {
        GruParams {
            r: GateParams::zeros(hidden, controls),
            z: GateParams::zeros(hidden, controls),
            n: GateParams::zeros(hidden, controls),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.r.b.len()
    }

    pub fn control_count(&self) -> usize {
        self.r.c.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, p) = (self.hidden_size(), self.control_count());
        self.r.check("r", h, p)?;
        self.z.check("z", h, p)?;
        self.n.check("n", h, p)
    }

    pub fn gates(&self) -> [&GateParams; 3] {
        [&self.r, &self.z, &self.n]
    }

    pub fn gates_mut(&mut self) -> [&mut GateParams; 3] {
        [&mut self.r, &mut self.z, &mut self.n]
    }
}

impl LstmParams {
    pub fn zeros(hidden: usize, controls: usize) -> Self {
        LstmParams {
            i: GateParams::zeros(hidden, controls),
            f: GateParams::zeros(hidden, controls),
            g: GateParams::zeros(hidden, controls),
            o: GateParams::zeros(hidden, controls),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.i.b.len()
    }

    pub fn control_count(&self) -> usize {
        self.i.c.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, p) = (self.hidden_size(), self.control_count());
        self.i.check("i", h, p)?;
        self.f.check("f", h, p)?;
        self.g.check("g", h, p)?;
        self.o.check("o", h, p)
    }

    pub fn gates(&self) -> [&GateParams; 4] {
        [&self.i, &self.f, &self.g, &self.o]
    }

    pub fn gates_mut(&mut self) -> [&mut GateParams; 4] {
        [&mut self.i, &mut self.f, &mut self.g, &mut self.o]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruState {
    pub h: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl GruState {
    pub fn zeros(hidden: usize) -> Self {
        GruState { h: Vector::zeros(hidden) }
    }
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Vector::zeros(hidden),
            c: Vector::zeros(hidden),
        }
    }
}

/// How the LSTM input gate is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum GateMode {
    /// `i = σ(a_i)`.
    Standard,
    /// `i = (1 − ε)(1 − f) ⊙ σ(a_i)`, which keeps every component of `f + i`
    /// strictly below one for all states and controls.
    CoupledStable { margin: f64 },
}

impl GateMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GateMode::Standard => Ok(()),
            GateMode::CoupledStable { margin } if margin > 0.0 && margin < 1.0 => Ok(()),
            GateMode::CoupledStable { margin } => Err(Error::config(format!(
                "coupled gate margin must lie in (0, 1), got {margin}"
            ))),
        }
    }
}

/// `y = w_out · h + b_out + skip_gain · x`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayer {
    pub w_out: Vector,
    pub b_out: f64,
    /// Fixed (untrained) gain of the direct input path; 0 disables it.
    pub skip_gain: f64,
}

impl OutputLayer {
    pub fn zeros(hidden: usize, skip_gain: f64) -> Self {
        OutputLayer {
            w_out: Vector::zeros(hidden),
            b_out: 0.0,
            skip_gain,
        }
    }

    #[inline]
    pub fn apply(&self, h: &[f64], x: f64) -> f64 {
        let mut y = 0.0;
        for (a, b) in self.w_out.iter().zip(h) {
            y += a * b;
        }
        y + self.b_out + self.skip_gain * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

fn default_sample_rate() -> u32 {
    48_000
}

fn default_skip_gain() -> f64 {
    1.0
}

/// Architecture of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub hidden_size: usize,
    pub controls: usize,
    /// Train through the stability parametrization.
    #[serde(default)]
    pub stable: bool,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_skip_gain")]
    pub skip_gain: f64,
}

impl ModelConfig {
    pub fn new(cell: CellKind, hidden_size: usize, controls: usize, stable: bool) -> Self {
        ModelConfig {
            cell,
            hidden_size,
            controls,
            stable,
            sample_rate: default_sample_rate(),
            skip_gain: default_skip_gain(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::config("hidden_size must be >= 1"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if !self.skip_gain.is_finite() {
            return Err(Error::config("skip_gain must be finite"));
        }
        Ok(())
    }

    /// Gate mode implied by the config: stable LSTMs couple their gates.
    pub fn gate_mode(&self, gate_margin: f64) -> GateMode {
        match (self.cell, self.stable) {
            (CellKind::Lstm, true) => GateMode::CoupledStable { margin: gate_margin },
            _ => GateMode::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CellParams {
    Gru(GruParams),
    Lstm(LstmParams),
}

impl CellParams {
    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Gru(_) => CellKind::Gru,
            CellParams::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            CellParams::Gru(p) => p.hidden_size(),
            CellParams::Lstm(p) => p.hidden_size(),
        }
    }

    pub fn control_count(&self) -> usize {
        match self {
            CellParams::Gru(p) => p.control_count(),
            CellParams::Lstm(p) => p.control_count(),
        }
    }

    pub fn gates(&self) -> Vec<&GateParams> {
        match self {
            CellParams::Gru(p) => p.gates().to_vec(),
            CellParams::Lstm(p) => p.gates().to_vec(),
        }
    }

    pub fn gates_mut(&mut self) -> Vec<&mut GateParams> {
        match self {
            CellParams::Gru(p) => p.gates_mut().into_iter().collect(),
            CellParams::Lstm(p) => p.gates_mut().into_iter().collect(),
        }
    }

    pub fn zeros_like(&self) -> CellParams {
        let (h, p) = (self.hidden_size(), self.control_count());
        match self {
            CellParams::Gru(_) => CellParams::Gru(GruParams::zeros(h, p)),
            CellParams::Lstm(_) => CellParams::Lstm(LstmParams::zeros(h, p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CellState {
    Gru(GruState),
    Lstm(LstmState),
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        match kind {
            CellKind::Gru => CellState::Gru(GruState::zeros(hidden)),
            CellKind::Lstm => CellState::Lstm(LstmState::zeros(hidden)),
        }
    }

    pub fn hidden(&self) -> &[f64] {
        match self {
            CellState::Gru(s) => &s.h,
            CellState::Lstm(s) => &s.h,
        }
    }

    pub fn cell(&self) -> Option<&[f64]> {
        match self {
            CellState::Gru(_) => None,
            CellState::Lstm(s) => Some(&s.c),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            CellState::Gru(s) => s.h.is_finite(),
            CellState::Lstm(s) => s.h.is_finite() && s.c.is_finite(),
        }
    }
}

/// A complete model: cell, readout and gate mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cell: CellParams,
    pub output: OutputLayer,
    pub mode: GateMode,
}

impl Model {
    pub fn hidden_size(&self) -> usize {
        self.cell.hidden_size()
    }

    pub fn control_count(&self) -> usize {
        self.cell.control_count()
    }

    pub fn kind(&self) -> CellKind {
        self.cell.kind()
    }

    pub fn validate(&self) -> Result<()> {
        match &self.cell {
            CellParams::Gru(p) => {
                p.validate()?;
                if self.mode != GateMode::Standard {
                    return Err(Error::config("GRU cells only support the standard gate mode"));
                }
            }
            CellParams::Lstm(p) => p.validate()?,
        }
        self.mode.validate()?;
        if self.output.w_out.len() != self.hidden_size() {
            return Err(Error::config("readout length differs from hidden size"));
        }
        if !(self.output.w_out.is_finite() && self.output.b_out.is_finite() && self.output.skip_gain.is_finite()) {
            return Err(Error::InvalidValue("non-finite readout".into()));
        }
        Ok(())
    }

    pub fn zero_state(&self) -> CellState {
        CellState::zeros(self.kind(), self.hidden_size())
    }

    fn check_state(&self, state: &CellState) -> Result<()> {
        let h = self.hidden_size();
        let ok = match (&self.cell, state) {
            (CellParams::Gru(_), CellState::Gru(s)) => s.h.len() == h,
            (CellParams::Lstm(_), CellState::Lstm(s)) => s.h.len() == h && s.c.len() == h,
            _ => false,
        };
        if !ok {
            return Err(Error::config("state does not match the model's cell kind or hidden size"));
        }
        if !state.is_finite() {
            return Err(Error::InvalidValue("non-finite state".into()));
        }
        Ok(())
    }
}

/// Gate activations of one GRU step, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct GruGates {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// `r ⊙ h_prev`
    pub q: Vec<f64>,
}

impl GruGates {
    pub fn new(hidden: usize) -> Self {
        GruGates {
            r: vec![0.0; hidden],
            z: vec![0.0; hidden],
            n: vec![0.0; hidden],
            q: vec![0.0; hidden],
        }
    }
}

/// Gate activations of one LSTM step.
#[derive(Debug, Clone, Default)]
pub struct LstmGates {
    /// Raw input-gate sigmoid `σ(a_i)`.
    pub si: Vec<f64>,
    /// Effective input gate (equals `si` in standard mode).
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    /// `tanh(c_new)`
    pub tc: Vec<f64>,
}

impl LstmGates {
    pub fn new(hidden: usize) -> Self {
        LstmGates {
            si: vec![0.0; hidden],
            i: vec![0.0; hidden],
            f: vec![0.0; hidden],
            g: vec![0.0; hidden],
            o: vec![0.0; hidden],
            tc: vec![0.0; hidden],
        }
    }
}

/// One GRU step into preallocated buffers. Dimensions are not checked.
#[inline]
pub(crate) fn gru_forward(
    p: &GruParams,
    h_prev: &[f64],
    x: f64,
    ctrl: &[f64],
    gates: &mut GruGates,
    h_out: &mut [f64],
) {
    p.r.preact(h_prev, x, ctrl, &mut gates.r);
    p.z.preact(h_prev, x, ctrl, &mut gates.z);
    gates.r.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    gates.z.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    for ((q, &r), &h) in gates.q.iter_mut().zip(&gates.r).zip(h_prev) {
        *q = r * h;
    }
    p.n.preact(&gates.q, x, ctrl, &mut gates.n);
    gates.n.iter_mut().for_each(|v| *v = v.tanh());
    for (k, out) in h_out.iter_mut().enumerate() {
        let z = gates.z[k];
        *out = (1.0 - z) * gates.n[k] + z * h_prev[k];
    }
}

/// One LSTM step into preallocated buffers. Dimensions are not checked.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_forward(
    p: &LstmParams,
    mode: GateMode,
    h_prev: &[f64],
    c_prev: &[f64],
    x: f64,
    ctrl: &[f64],
    gates: &mut LstmGates,
    h_out: &mut [f64],
    c_out: &mut [f64],
) {
    p.i.preact(h_prev, x, ctrl, &mut gates.si);
    p.f.preact(h_prev, x, ctrl, &mut gates.f);
    p.g.preact(h_prev, x, ctrl, &mut gates.g);
    p.o.preact(h_prev, x, ctrl, &mut gates.o);
    match mode {
        GateMode::Standard => {
            for k in 0..gates.i.len() {
                let s = sigmoid_scalar(gates.si[k]);
                gates.si[k] = s;
                gates.i[k] = s;
                gates.f[k] = sigmoid_scalar(gates.f[k]);
            }
        }
        GateMode::CoupledStable { margin } => {
            let keep = 1.0 - margin;
            for k in 0..gates.i.len() {
                let s = sigmoid_scalar(gates.si[k]);
                let f = sigmoid_scalar(gates.f[k]);
                gates.si[k] = s;
                gates.f[k] = f;
                gates.i[k] = keep * (1.0 - f) * s;
            }
        }
    }
    gates.g.iter_mut().for_each(|v| *v = v.tanh());
    gates.o.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    for k in 0..h_out.len() {
        let c = gates.f[k] * c_prev[k] + gates.i[k] * gates.g[k];
        let tc = c.tanh();
        c_out[k] = c;
        gates.tc[k] = tc;
        h_out[k] = gates.o[k] * tc;
    }
}

fn check_controls(p: &GruParamsOrLstm<'_>, ctrl: &[f64]) -> Result<()> {
    if ctrl.len() != p.controls() {
        return Err(Error::config(format!(
            "expected {} control values, got {}",
            p.controls(),
            ctrl.len()
        )));
    }
    if ctrl.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite control value".into()));
    }
    Ok(())
}

enum GruParamsOrLstm<'a> {
    Gru(&'a GruParams),
    Lstm(&'a LstmParams),
}

impl GruParamsOrLstm<'_> {
    fn controls(&self) -> usize {
        match self {
            GruParamsOrLstm::Gru(p) => p.control_count(),
            GruParamsOrLstm::Lstm(p) => p.control_count(),
        }
    }
}

/// One GRU step. Returns the new state and its hidden vector.
pub fn gru_step(params: &GruParams, state: &GruState, x: f64, ctrl: &[f64]) -> Result<(GruState, Vector)> {
    let (s, _) = gru_step_gates(params, state, x, ctrl)?;
    let h = s.h.clone();
    Ok((s, h))
}

/// [`gru_step`] that also returns the gate activations.
pub fn gru_step_gates(params: &GruParams, state: &GruState, x: f64, ctrl: &[f64]) -> Result<(GruState, GruGates)> {
    params.validate()?;
    check_controls(&GruParamsOrLstm::Gru(params), ctrl)?;
    let h = params.hidden_size();
    if state.h.len() != h {
        return Err(Error::config(format!("state has {} entries, hidden size is {h}", state.h.len())));
    }
    if !x.is_finite() || !state.h.is_finite() {
        return Err(Error::InvalidValue("non-finite input or state".into()));
    }
    let mut gates = GruGates::new(h);
    let mut out = Vector::zeros(h);
    gru_forward(params, &state.h, x, ctrl, &mut gates, &mut out);
    Ok((GruState { h: out }, gates))
}

/// One LSTM step. Returns the new state and its hidden vector.
pub fn lstm_step(
    params: &LstmParams,
    state: &LstmState,
    x: f64,
    ctrl: &[f64],
    mode: GateMode,
) -> Result<(LstmState, Vector)> {
    let (s, _) = lstm_step_gates(params, state, x, ctrl, mode)?;
    let h = s.h.clone();
    Ok((s, h))
}

/// [`lstm_step`] that also returns the gate activations.
pub fn lstm_step_gates(
    params: &LstmParams,
    state: &LstmState,
    x: f64,
    ctrl: &[f64],
    mode: GateMode,
) -> Result<(LstmState, LstmGates)> {
    params.validate()?;
    mode.validate()?;
    check_controls(&GruParamsOrLstm::Lstm(params), ctrl)?;
    let h = params.hidden_size();
    if state.h.len() != h || state.c.len() != h {
        return Err(Error::config("state size differs from hidden size"));
    }
    if !x.is_finite() || !state.h.is_finite() || !state.c.is_finite() {
        return Err(Error::InvalidValue("non-finite input or state".into()));
    }
    let mut gates = LstmGates::new(h);
    let mut h_out = Vector::zeros(h);
    let mut c_out = Vector::zeros(h);
    lstm_forward(params, mode, &state.h, &state.c, x, ctrl, &mut gates, &mut h_out, &mut c_out);
    Ok((LstmState { h: h_out, c: c_out }, gates))
}

/// One step of cell plus readout.
pub fn model_step(model: &Model, state: &CellState, x: f64, ctrl: &[f64]) -> Result<(CellState, f64)> {
    model.validate()?;
    model.check_state(state)?;
    let mut runner = Runner::new(model, state.clone());
    let y = runner.step(x, ctrl)?;
    Ok((runner.into_state(), y))
}

/// Per-sample control vectors over time. A constant trajectory stores its
/// single row once.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    len: usize,
    controls: usize,
    stride: usize,
    data: Vec<f64>,
}

impl ControlTrajectory {
    pub fn constant(values: &[f64], len: usize) -> Self {
        ControlTrajectory {
            len,
            controls: values.len(),
            stride: 0,
            data: values.to_vec(),
        }
    }

    /// Row-major `len × controls` data.
    pub fn from_rows(controls: usize, data: Vec<f64>) -> Result<Self> {
        if controls == 0 {
            return Ok(ControlTrajectory {
                len: data.len(),
                controls: 0,
                stride: 0,
                data: Vec::new(),
            });
        }
        if data.len() % controls != 0 {
            return Err(Error::config("trajectory data is not a whole number of rows"));
        }
        Ok(ControlTrajectory {
            len: data.len() / controls,
            controls,
            stride: controls,
            data,
        })
    }

    /// A trajectory of `len` rows where every control follows `values`.
    pub fn shared(values: &[f64], controls: usize) -> Self {
        let mut data = Vec::with_capacity(values.len() * controls);
        for &v in values {
            data.extend(std::iter::repeat_n(v, controls));
        }
        let stride = if controls == 0 { 0 } else { controls };
        ControlTrajectory {
            len: values.len(),
            controls,
            stride,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn controls(&self) -> usize {
        self.controls
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        let start = t * self.stride;
        &self.data[start..start + self.controls]
    }

    /// Rows `[start, start + len)` as a new trajectory.
    pub fn slice(&self, start: usize, len: usize) -> ControlTrajectory {
        if self.stride == 0 {
            return ControlTrajectory::constant(&self.data, len);
        }
        ControlTrajectory {
            len,
            controls: self.controls,
            stride: self.stride,
            data: self.data[start * self.stride..(start + len) * self.stride].to_vec(),
        }
    }
}

/// Allocation-free stepping of a model from a given state.
#[derive(Debug, Clone)]
pub struct Runner<'a> {
    model: &'a Model,
    state: CellState,
    gru: GruGates,
    lstm: LstmGates,
    h_next: Vec<f64>,
    c_next: Vec<f64>,
}

impl<'a> Runner<'a> {
    /// The model and state must already be validated against each other.
    pub fn new(model: &'a Model, state: CellState) -> Self {
        let h = model.hidden_size();
        Runner {
            model,
            state,
            gru: GruGates::new(h),
            lstm: LstmGates::new(h),
            h_next: vec![0.0; h],
            c_next: vec![0.0; h],
        }
    }

    pub fn state(&self) -> &CellState {
        &self.state
    }

    pub fn into_state(self) -> CellState {
        self.state
    }

    #[inline]
    pub fn step(&mut self, x: f64, ctrl: &[f64]) -> Result<f64> {
        if ctrl.len() != self.model.control_count() {
            return Err(Error::config(format!(
                "expected {} control values, got {}",
                self.model.control_count(),
                ctrl.len()
            )));
        }
        match (&self.model.cell, &mut self.state) {
            (CellParams::Gru(p), CellState::Gru(s)) => {
                gru_forward(p, &s.h, x, ctrl, &mut self.gru, &mut self.h_next);
                std::mem::swap(&mut s.h.0, &mut self.h_next);
            }
            (CellParams::Lstm(p), CellState::Lstm(s)) => {
                lstm_forward(
                    p,
                    self.model.mode,
                    &s.h,
                    &s.c,
                    x,
                    ctrl,
                    &mut self.lstm,
                    &mut self.h_next,
                    &mut self.c_next,
                );
                std::mem::swap(&mut s.h.0, &mut self.h_next);
                std::mem::swap(&mut s.c.0, &mut self.c_next);
            }
            _ => return Err(Error::config("state does not match the model's cell kind")),
        }
        Ok(self.model.output.apply(self.state.hidden(), x))
    }
}

/// Runs the model over an audio buffer with a control trajectory of equal
/// length. Returns the output buffer and the final state.
pub fn run_sequence(
    model: &Model,
    initial: &CellState,
    x: &[f64],
    ctrl: &ControlTrajectory,
) -> Result<(Vec<f64>, CellState)> {
    model.validate()?;
    model.check_state(initial)?;
    if x.len() != ctrl.len() {
        return Err(Error::config(format!(
            "input has {} samples but the control trajectory has {}",
            x.len(),
            ctrl.len()
        )));
    }
    if ctrl.controls() != model.control_count() {
        return Err(Error::config("trajectory control count differs from the model"));
    }
    let mut runner = Runner::new(model, initial.clone());
    let mut out = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        out.push(runner.step(xt, ctrl.row(t))?);
    }
    Ok((out, runner.into_state()))
}

/// Norm traces of an autonomous (zero-input) run.
#[derive(Debug, Clone, PartialEq)]
pub struct AutonomousTrace {
    /// `‖h_t‖₂` after each step.
    pub hidden_norms: Vec<f64>,
    /// `‖c_t‖₂` after each step (LSTM only).
    pub cell_norms: Option<Vec<f64>>,
    pub output: Vec<f64>,
    pub final_state: CellState,
}

/// Runs the model with zero audio input, recording state norms per step.
pub fn autonomous_run(model: &Model, initial: &CellState, ctrl: &ControlTrajectory) -> Result<AutonomousTrace> {
    model.validate()?;
    model.check_state(initial)?;
    if ctrl.controls() != model.control_count() {
        return Err(Error::config("trajectory control count differs from the model"));
    }
    let mut runner = Runner::new(model, initial.clone());
    let n = ctrl.len();
    let mut hidden_norms = Vec::with_capacity(n);
    let mut cell_norms = matches!(model.cell, CellParams::Lstm(_)).then(|| Vec::with_capacity(n));
    let mut output = Vec::with_capacity(n);
    for t in 0..n {
        output.push(runner.step(0.0, ctrl.row(t))?);
        hidden_norms.push(l2(runner.state().hidden()));
        if let (Some(cn), Some(c)) = (cell_norms.as_mut(), runner.state().cell()) {
            cn.push(l2(c));
        }
    }
    Ok(AutonomousTrace {
        hidden_norms,
        cell_norms,
        output,
        final_state: runner.into_state(),
    })
}
