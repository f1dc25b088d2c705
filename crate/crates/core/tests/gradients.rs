//! Analytic gradients against finite differences of the loss.

mod common;

use common::*;
use stable_rnn_va::cells::{CellKind, CellState};
use stable_rnn_va::numerics::SeededRng;

const TOL: f64 = 1e-4;

fn sweep(kind: CellKind, stable: bool) {
    for seed in 0..10 {
        let hidden = 2 + (seed as usize % 7);
        let len = 8 + 3 * seed as usize;
        let err = grad_check_case(kind, stable, seed, hidden, len);
        assert!(err < TOL, "{kind} stable={stable} seed {seed}: {err:e}");
    }
}

#[test]
fn gru_unconstrained() {
    sweep(CellKind::Gru, false);
}

#[test]
fn gru_stable() {
    sweep(CellKind::Gru, true);
}

#[test]
fn lstm_unconstrained() {
    sweep(CellKind::Lstm, false);
}

#[test]
fn lstm_coupled_stable() {
    sweep(CellKind::Lstm, true);
}

#[test]
fn hidden_8_length_32_gru() {
    assert!(grad_check_case(CellKind::Gru, false, 99, 8, 32) < TOL);
}

#[test]
fn single_step_segment() {
    for kind in [CellKind::Gru, CellKind::Lstm] {
        for stable in [false, true] {
            assert!(grad_check_case(kind, stable, 3, 4, 1) < TOL);
        }
    }
}

#[test]
fn zero_readout_gives_zero_cell_gradient() {
    for kind in [CellKind::Gru, CellKind::Lstm] {
        let mut rng = SeededRng::new(11);
        let mut m = random_model(kind, false, 5, 2, 0.9, &mut rng);
        m.output.w_out = zeros(5);
        m.output.skip_gain = 0.0;
        let x = random_signal(20, 0.8, &mut rng);
        let ctrl = random_controls(20, 2, 0.0, 1.0, &mut rng);
        let target = random_signal(20, 0.8, &mut rng);
        let g = m.backward_segment(&CellState::zeros(kind, 5), &x, &ctrl, &target).unwrap().grad;
        for gate in g.cell.gates() {
            for block in [&gate.u.data()[..], &gate.w.0[..], gate.c.data(), &gate.b.0[..]] {
                assert!(block.iter().all(|v| *v == 0.0));
            }
        }
        // The readout itself still learns.
        assert!(g.w_out.0.iter().any(|v| *v != 0.0));
        assert!(g.b_out != 0.0);
    }
}
