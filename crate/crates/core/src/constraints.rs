//! Stability parametrizations and independent constraint checks.
//!
//! A stable GRU has `C_n = O`, `b_n = 0` and `‖U_n‖₂ < 1`; a stable LSTM has
//! `C_g = O`, `b_g = 0`, `‖U_g‖₂ < 1` and per-component `f + i < 1`. The
//! parametrizations here map unconstrained (trainable) parameters onto that
//! set on every materialization:
//!
//! * the conditioning matrix and bias of the candidate gate are emitted as
//!   fresh zeros, whatever the free parameters hold;
//! * the candidate recurrent matrix is rescaled by
//!   `min(1, (1 − ε_spec) / ‖Ũ‖₂)`, with `‖Ũ‖₂` from warm-started power
//!   iteration;
//! * the LSTM gate-sum bound is structural: the materialized model runs in
//!   [`GateMode::CoupledStable`].
//!
//! The `verify_*` functions re-check a parameter set from scratch and never
//! consult a parametrization.

use serde::{Deserialize, Serialize};

use crate::cells::{lstm_forward, CellKind, CellParams, GateMode, GruParams, LstmGates, LstmParams};
use crate::error::{Error, Result};
use crate::numerics::{spectral_norm_exact, Matrix, PowerIteration, SeededRng, Vector};

/// Slack used to realize the strict inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityMargin {
    /// Materialized candidate matrices satisfy `‖U‖₂ ≤ 1 − spectral`.
    #[serde(default = "default_margin")]
    pub spectral: f64,
    /// LSTM gate coupling slack.
    #[serde(default = "default_margin")]
    pub gate: f64,
}

fn default_margin() -> f64 {
    1e-3
}

impl Default for StabilityMargin {
    fn default() -> Self {
        StabilityMargin {
            spectral: default_margin(),
            gate: default_margin(),
        }
    }
}

impl StabilityMargin {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("spectral", self.spectral), ("gate", self.gate)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} margin must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn spectral_bound(&self) -> f64 {
        1.0 - self.spectral
    }
}

/// Power-iteration budget used while materializing. Warm starts make the
/// typical call converge in a handful of iterations.
const MATERIALIZE_ITERS: usize = 1000;
const MATERIALIZE_TOL: f64 = 1e-14;

/// Outcome of one spectral rescale, kept for the gradient pullback.
#[derive(Debug, Clone, PartialEq)]
struct Rescale {
    sigma: f64,
    scale: f64,
    clipped: bool,
}

/// `Ũ · min(1, bound / ‖Ũ‖₂)`
fn rescale(free: &Matrix, bound: f64, power: &mut PowerIteration) -> (Matrix, Rescale) {
    let sigma = power.estimate(free, MATERIALIZE_ITERS, MATERIALIZE_TOL);
    if sigma > bound {
        let scale = bound / sigma;
        (
            free.scaled(scale),
            Rescale {
                sigma,
                scale,
                clipped: true,
            },
        )
    } else {
        (
            free.clone(),
            Rescale {
                sigma,
                scale: 1.0,
                clipped: false,
            },
        )
    }
}

/// Gradient of the loss w.r.t. `Ũ` given the gradient w.r.t. the rescaled
/// matrix. Singular vectors are held constant, so `∂‖Ũ‖₂/∂Ũ = u vᵀ`.
fn rescale_pullback(free: &Matrix, grad: &Matrix, info: &Rescale, bound: f64, power: &PowerIteration) -> Matrix {
    if !info.clipped {
        return grad.clone();
    }
    let mut out = grad.scaled(info.scale);
    let coeff = -bound / (info.sigma * info.sigma) * grad.dot(free);
    out.add_outer(coeff, &power.u, &power.v);
    out
}

/// Free parameters of a stable GRU. `free.n.c` and `free.n.b` are never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableGruParametrization {
    pub free: GruParams,
    pub margin: StabilityMargin,
    #[serde(default)]
    pub power: PowerIteration,
    #[serde(skip)]
    last: Option<Rescale>,
}

impl StableGruParametrization {
    pub fn new(free: GruParams, margin: StabilityMargin) -> Self {
        StableGruParametrization {
            free,
            margin,
            power: PowerIteration::new(),
            last: None,
        }
    }

    /// Constraint-satisfying GRU parameters. Updates the persisted power
    /// iteration vectors.
    pub fn materialize(&mut self) -> GruParams {
        let (h, p) = (self.free.hidden_size(), self.free.control_count());
        let (u_n, info) = rescale(&self.free.n.u, self.margin.spectral_bound(), &mut self.power);
        self.last = Some(info);
        let mut out = self.free.clone();
        out.n.u = u_n;
        out.n.c = Matrix::zeros(h, p);
        out.n.b = Vector::zeros(h);
        out
    }

    /// Maps a gradient w.r.t. materialized parameters back onto the free
    /// parameters. Uses the state of the latest [`materialize`](Self::materialize).
    pub fn pullback(&self, grad: &GruParams) -> GruParams {
        let mut out = grad.clone();
        let (h, p) = (grad.hidden_size(), grad.control_count());
        out.n.c = Matrix::zeros(h, p);
        out.n.b = Vector::zeros(h);
        if let Some(info) = &self.last {
            out.n.u = rescale_pullback(&self.free.n.u, &grad.n.u, info, self.margin.spectral_bound(), &self.power);
        }
        out
    }
}

/// Free parameters of a stable LSTM. `free.g.c` and `free.g.b` are never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableLstmParametrization {
    pub free: LstmParams,
    pub margin: StabilityMargin,
    #[serde(default)]
    pub power: PowerIteration,
    #[serde(skip)]
    last: Option<Rescale>,
}

impl StableLstmParametrization {
    pub fn new(free: LstmParams, margin: StabilityMargin) -> Self {
        StableLstmParametrization {
            free,
            margin,
            power: PowerIteration::new(),
            last: None,
        }
    }

    pub fn gate_mode(&self) -> GateMode {
        GateMode::CoupledStable {
            margin: self.margin.gate,
        }
    }

    pub fn materialize(&mut self) -> (LstmParams, GateMode) {
        let (h, p) = (self.free.hidden_size(), self.free.control_count());
        let (u_g, info) = rescale(&self.free.g.u, self.margin.spectral_bound(), &mut self.power);
        self.last = Some(info);
        let mut out = self.free.clone();
        out.g.u = u_g;
        out.g.c = Matrix::zeros(h, p);
        out.g.b = Vector::zeros(h);
        (out, self.gate_mode())
    }

    pub fn pullback(&self, grad: &LstmParams) -> LstmParams {
        let mut out = grad.clone();
        let (h, p) = (grad.hidden_size(), grad.control_count());
        out.g.c = Matrix::zeros(h, p);
        out.g.b = Vector::zeros(h);
        if let Some(info) = &self.last {
            out.g.u = rescale_pullback(&self.free.g.u, &grad.g.u, info, self.margin.spectral_bound(), &self.power);
        }
        out
    }
}

/// Any cell parametrization: identity for unconstrained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "parametrization", rename_all = "snake_case")]
pub enum CellParametrization {
    Unconstrained(CellParams),
    StableGru(StableGruParametrization),
    StableLstm(StableLstmParametrization),
}

impl CellParametrization {
    pub fn new(free: CellParams, stable: bool, margin: StabilityMargin) -> Self {
        match (free, stable) {
            (p, false) => CellParametrization::Unconstrained(p),
            (CellParams::Gru(p), true) => CellParametrization::StableGru(StableGruParametrization::new(p, margin)),
            (CellParams::Lstm(p), true) => CellParametrization::StableLstm(StableLstmParametrization::new(p, margin)),
        }
    }

    pub fn is_stable(&self) -> bool {
        !matches!(self, CellParametrization::Unconstrained(_))
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellParametrization::Unconstrained(p) => p.kind(),
            CellParametrization::StableGru(_) => CellKind::Gru,
            CellParametrization::StableLstm(_) => CellKind::Lstm,
        }
    }

    /// Free parameters in the same shape as the materialized cell.
    pub fn free(&self) -> CellParams {
        match self {
            CellParametrization::Unconstrained(p) => p.clone(),
            CellParametrization::StableGru(s) => CellParams::Gru(s.free.clone()),
            CellParametrization::StableLstm(s) => CellParams::Lstm(s.free.clone()),
        }
    }

    /// Mutable access to the free blocks, one per gate.
    pub fn free_gates_mut(&mut self) -> Vec<&mut crate::cells::GateParams> {
        match self {
            CellParametrization::Unconstrained(p) => p.gates_mut(),
            CellParametrization::StableGru(s) => s.free.gates_mut().into_iter().collect(),
            CellParametrization::StableLstm(s) => s.free.gates_mut().into_iter().collect(),
        }
    }

    /// Materialized cell parameters and the gate mode they run under.
    pub fn materialize(&mut self) -> (CellParams, GateMode) {
        match self {
            CellParametrization::Unconstrained(p) => (p.clone(), GateMode::Standard),
            CellParametrization::StableGru(s) => (CellParams::Gru(s.materialize()), GateMode::Standard),
            CellParametrization::StableLstm(s) => {
                let (p, mode) = s.materialize();
                (CellParams::Lstm(p), mode)
            }
        }
    }

    pub fn pullback(&self, grad: &CellParams) -> Result<CellParams> {
        match (self, grad) {
            (CellParametrization::Unconstrained(_), g) => Ok(g.clone()),
            (CellParametrization::StableGru(s), CellParams::Gru(g)) => Ok(CellParams::Gru(s.pullback(g))),
            (CellParametrization::StableLstm(s), CellParams::Lstm(g)) => Ok(CellParams::Lstm(s.pullback(g))),
            _ => Err(Error::config("gradient cell kind differs from the parametrization")),
        }
    }
}

/// One checked constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub name: String,
    pub measured: f64,
    /// Upper limit the measured value must not exceed (`< limit` for strict
    /// checks, `≤ limit` otherwise).
    pub limit: f64,
    pub strict: bool,
    pub passed: bool,
}

impl ConstraintCheck {
    fn at_most(name: &str, measured: f64, limit: f64) -> Self {
        ConstraintCheck {
            name: name.to_string(),
            measured,
            limit,
            strict: false,
            passed: measured <= limit,
        }
    }

    fn below(name: &str, measured: f64, limit: f64) -> Self {
        ConstraintCheck {
            name: name.to_string(),
            measured,
            limit,
            strict: true,
            passed: measured < limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub cell: CellKind,
    pub checks: Vec<ConstraintCheck>,
}

impl ConstraintReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ConstraintCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for ConstraintReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} stability constraints:", self.cell)?;
        for c in &self.checks {
            let op = if c.strict { "<" } else { "<=" };
            writeln!(
                f,
                "  [{}] {:<28} measured {:.12e} {op} {:.12e}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.measured,
                c.limit
            )?;
        }
        Ok(())
    }
}

/// Tolerance on the spectral bound that absorbs estimator round-off.
pub const SPECTRAL_SLACK: f64 = 1e-9;

fn candidate_checks(prefix: &str, u: &Matrix, c: &Matrix, b: &[f64], margin: &StabilityMargin) -> Vec<ConstraintCheck> {
    let b_max = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    vec![
        ConstraintCheck::at_most(&format!("C_{prefix} = O (max |entry|)"), c.max_abs(), 0.0),
        ConstraintCheck::at_most(&format!("b_{prefix} = 0 (max |entry|)"), b_max, 0.0),
        ConstraintCheck::at_most(
            &format!("||U_{prefix}||_2"),
            spectral_norm_exact(u),
            margin.spectral_bound() + SPECTRAL_SLACK,
        ),
    ]
}

/// Re-checks the stable-GRU constraints on raw parameters.
pub fn verify_gru(params: &GruParams, margin: &StabilityMargin) -> ConstraintReport {
    ConstraintReport {
        cell: CellKind::Gru,
        checks: candidate_checks("n", &params.n.u, &params.n.c, &params.n.b, margin),
    }
}

/// Largest `‖f + i‖_∞` over `n_samples` random draws of `h ∈ (−1, 1)ⁿ`,
/// `p ∈ [−1, 1]ᵖ`, `x ∈ [−1, 1]`.
pub fn verify_lstm_gate_bound(params: &LstmParams, mode: GateMode, n_samples: usize, rng: &mut SeededRng) -> f64 {
    let h = params.hidden_size();
    let p = params.control_count();
    let mut gates = LstmGates::new(h);
    let (mut ho, mut co) = (vec![0.0; h], vec![0.0; h]);
    let c = vec![0.0; h];
    let mut worst = 0.0_f64;
    for _ in 0..n_samples.max(1) {
        let hs = rng.uniform_vec(h, -1.0, 1.0);
        let ctl = rng.uniform_vec(p, -1.0, 1.0);
        let x = rng.uniform(-1.0, 1.0);
        lstm_forward(params, mode, &hs, &c, x, &ctl, &mut gates, &mut ho, &mut co);
        for k in 0..h {
            worst = worst.max(gates.f[k] + gates.i[k]);
        }
    }
    worst
}

/// Re-checks the stable-LSTM constraints, including a sampled gate-sum bound.
pub fn verify_lstm(
    params: &LstmParams,
    mode: GateMode,
    margin: &StabilityMargin,
    n_samples: usize,
    rng: &mut SeededRng,
) -> ConstraintReport {
    let mut checks = candidate_checks("g", &params.g.u, &params.g.c, &params.g.b, margin);
    let worst = verify_lstm_gate_bound(params, mode, n_samples, rng);
    checks.push(ConstraintCheck::below("||f + i||_inf (sampled max)", worst, 1.0));
    ConstraintReport {
        cell: CellKind::Lstm,
        checks,
    }
}

/// Verifies whichever cell `params` holds.
pub fn verify_cell(
    params: &CellParams,
    mode: GateMode,
    margin: &StabilityMargin,
    n_samples: usize,
    rng: &mut SeededRng,
) -> ConstraintReport {
    match params {
        CellParams::Gru(p) => verify_gru(p, margin),
        CellParams::Lstm(p) => verify_lstm(p, mode, margin, n_samples, rng),
    }
}
