#![allow(dead_code)]

use stable_rnn_va::cells::{CellKind, CellState, ControlTrajectory, GruState, LstmState, ModelConfig};
use stable_rnn_va::constraints::StabilityMargin;
use stable_rnn_va::numerics::{spectral_norm_exact, SeededRng, Vector};
use stable_rnn_va::training::{init_params, TrainableModel};

/// A model whose free parameters are all random, so every gradient path is
/// exercised. Recurrent matrices are uniform draws rescaled to spectral norm `u_scale`.
pub fn random_model(kind: CellKind, stable: bool, hidden: usize, controls: usize, u_scale: f64, rng: &mut SeededRng) -> TrainableModel {
    let config = ModelConfig::new(kind, hidden, controls, stable);
    let mut m = init_params(&config, StabilityMargin::default(), rng).unwrap();
    for g in m.cell.free_gates_mut() {
        let u = rng.uniform_matrix(hidden, hidden, -1.0, 1.0);
        g.u = u.scaled(u_scale / spectral_norm_exact(&u));
        g.w = rng.uniform_vec(hidden, -1.0, 1.0);
        g.c = rng.uniform_matrix(hidden, controls, -1.0, 1.0);
        g.b = rng.uniform_vec(hidden, -0.5, 0.5);
    }
    m.output.w_out = rng.uniform_vec(hidden, -1.0, 1.0);
    m.output.b_out = rng.uniform(-0.2, 0.2);
    m
}

pub fn random_state(kind: CellKind, hidden: usize, scale: f64, rng: &mut SeededRng) -> CellState {
    match kind {
        CellKind::Gru => CellState::Gru(GruState {
            h: rng.uniform_vec(hidden, -scale, scale),
        }),
        CellKind::Lstm => {
            // A reachable state: h = o ⊙ tanh(c) for some output gate o.
            let c = rng.uniform_vec(hidden, -scale, scale);
            let h = c.0.iter().map(|v| rng.uniform(0.0, 1.0) * v.tanh()).collect();
            CellState::Lstm(LstmState { h: Vector(h), c })
        }
    }
}

pub fn random_controls(len: usize, p: usize, lo: f64, hi: f64, rng: &mut SeededRng) -> ControlTrajectory {
    ControlTrajectory::from_rows(p, rng.uniform_vec(len * p, lo, hi).0).unwrap()
}

pub fn random_signal(len: usize, amp: f64, rng: &mut SeededRng) -> Vec<f64> {
    rng.uniform_vec(len, -amp, amp).0
}

pub fn zeros(n: usize) -> Vector {
    Vector::zeros(n)
}

/// Targets offset from the model's own output by 0.3 to 0.6 in a random
/// direction, so no residual sits near the MAE kink.
pub fn kink_free_target(model: &mut TrainableModel, initial: &CellState, x: &[f64], ctrl: &ControlTrajectory, rng: &mut SeededRng) -> Vec<f64> {
    let m = model.materialize();
    let (y, _) = stable_rnn_va::cells::run_sequence(&m, initial, x, ctrl).unwrap();
    y.iter()
        .map(|v| {
            let d = rng.uniform(0.3, 0.6);
            if rng.uniform(0.0, 1.0) < 0.5 {
                v - d
            } else {
                v + d
            }
        })
        .collect()
}

/// Worst relative gradient error over all blocks for one random case.
pub fn grad_check_case(kind: CellKind, stable: bool, seed: u64, hidden: usize, len: usize) -> f64 {
    let mut rng = SeededRng::new(seed);
    let u_scale = if stable { 1.5 } else { 0.9 };
    let mut m = random_model(kind, stable, hidden, 2, u_scale, &mut rng);
    let init = random_state(kind, hidden, 0.5, &mut rng);
    let x = random_signal(len, 0.8, &mut rng);
    let ctrl = random_controls(len, 2, 0.0, 1.0, &mut rng);
    let target = kink_free_target(&mut m, &init, &x, &ctrl, &mut rng);
    stable_rnn_va::training::grad_check(&m, &init, &x, &ctrl, &target, 1e-3)
        .unwrap()
        .max_error()
}
