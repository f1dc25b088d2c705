mod common;

use common::*;
use proptest::prelude::*;
use stable_rnn_va::cells::*;
use stable_rnn_va::constraints::{
    verify_cell, CellParametrization, StabilityMargin, StableGruParametrization, StableLstmParametrization,
};
use stable_rnn_va::datasets::{compute_stats, normalize, synth_device_render, Sample, SyntheticDeviceConfig};
use stable_rnn_va::measurement::{
    aggregate_runs, amplitude_db, measure_noise, power_db, variance, NoiseProtocolConfig, ScheduleKind,
};
use stable_rnn_va::numerics::*;

fn finite_vec(max_len: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, 1..=max_len)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn stable_model(kind: CellKind, hidden: usize, controls: usize, seed: u64) -> Model {
    let mut m = random_model(kind, true, hidden, controls, 3.0, &mut SeededRng::new(seed));
    m.materialize()
}

/// A stable model whose update gate (GRU) or forget and input gates (LSTM)
/// take the same value in every component under zero input.
fn uniform_gate_model(kind: CellKind, hidden: usize, controls: usize, seed: u64) -> Model {
    let mut rng = SeededRng::new(seed);
    let mut m = random_model(kind, true, hidden, controls, 3.0, &mut rng);
    let mut flatten = |g: &mut GateParams, rng: &mut SeededRng| {
        g.u = Matrix::zeros(hidden, hidden);
        g.c = Matrix::zeros(hidden, controls);
        g.b = Vector(vec![rng.uniform(-3.0, 3.0); hidden]);
    };
    match &mut m.cell {
        CellParametrization::StableGru(s) => flatten(&mut s.free.z, &mut rng),
        CellParametrization::StableLstm(s) => {
            flatten(&mut s.free.f, &mut rng);
            flatten(&mut s.free.i, &mut rng);
        }
        CellParametrization::Unconstrained(_) => unreachable!(),
    }
    m.materialize()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn sigmoid_in_open_unit_interval(v in finite_vec(8, 1e300)) {
        for s in sigmoid(&v).unwrap().iter() {
            prop_assert!(*s > 0.0 && *s < 1.0, "{s}");
        }
    }

    #[test]
    fn tanh_is_norm_contracting(v in finite_vec(16, 50.0)) {
        let t = tanh_elem(&v).unwrap();
        prop_assert!(l2(&t) <= l2(&v));
        prop_assert!(t.iter().all(|x| x.abs() <= 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn spectral_norm_is_homogeneous(m in matrix(6, 5), c in -10.0..10.0f64) {
        prop_assume!(c.abs() > 1e-3);
        let a = spectral_norm(&m, 10_000, 1e-13).unwrap();
        let b = spectral_norm(&m.scaled(c), 10_000, 1e-13).unwrap();
        prop_assert!((b - c.abs() * a).abs() <= 1e-6 * c.abs() * a.max(1e-300));
    }

    #[test]
    fn spectral_norm_bounds_every_direction(m in matrix(5, 5), x in prop::collection::vec(-1.0..1.0f64, 5)) {
        prop_assume!(l2(&x) > 1e-6);
        let tol = POWER_TOL_DEFAULT;
        let s = spectral_norm(&m, POWER_ITERS_DEFAULT, tol).unwrap();
        let gain = l2(&m.matvec(&x)) / l2(&x);
        prop_assert!(s >= gain - tol * s.max(1.0), "{s} < {gain}");
    }

    #[test]
    fn gru_step_is_convex_combination(seed in any::<u64>(), x in -1.0..1.0f64) {
        let mut rng = SeededRng::new(seed);
        let m = random_model(CellKind::Gru, false, 6, 2, 1.5, &mut rng).materialize();
        let CellParams::Gru(p) = &m.cell else { unreachable!() };
        let s = GruState { h: rng.uniform_vec(6, -3.0, 3.0) };
        let ctrl = rng.uniform_vec(2, -1.0, 1.0);
        let (next, gates) = gru_step_gates(p, &s, x, &ctrl).unwrap();
        for k in 0..6 {
            let bound = gates.n[k].abs().max(s.h[k].abs());
            prop_assert!(next.h[k].abs() <= bound * (1.0 + 1e-15));
        }
    }

    #[test]
    fn lstm_hidden_in_open_interval(seed in any::<u64>(), coupled in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let m = random_model(CellKind::Lstm, coupled, 6, 2, 1.5, &mut rng).materialize();
        let CellParams::Lstm(p) = &m.cell else { unreachable!() };
        let s = LstmState { h: rng.uniform_vec(6, -1.0, 1.0), c: rng.uniform_vec(6, -5.0, 5.0) };
        let ctrl = rng.uniform_vec(2, -1.0, 1.0);
        let (next, _) = lstm_step(p, &s, rng.uniform(-1.0, 1.0), &ctrl, m.mode).unwrap();
        prop_assert!(next.h.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn coupled_gate_sum_below_one(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let m = random_model(CellKind::Lstm, true, 4, 2, 1.0, &mut rng).materialize();
        let CellParams::Lstm(p) = &m.cell else { unreachable!() };
        let s = LstmState { h: rng.uniform_vec(4, -1.0, 1.0), c: rng.uniform_vec(4, -5.0, 5.0) };
        let ctrl = rng.uniform_vec(2, -1.0, 1.0);
        let (_, g) = lstm_step_gates(p, &s, rng.uniform(-1.0, 1.0), &ctrl, m.mode).unwrap();
        for k in 0..4 {
            prop_assert!(g.f[k] + g.i[k] < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stable_gru_decays_with_uniform_update_gate(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let m = uniform_gate_model(CellKind::Gru, 8, 2, seed);
        let s0 = random_state(CellKind::Gru, 8, 1.0, &mut rng);
        let ctrl = random_controls(300, 2, -1.0, 1.0, &mut rng);
        let trace = autonomous_run(&m, &s0, &ctrl).unwrap();
        let mut prev = l2(s0.hidden());
        for &n in &trace.hidden_norms {
            if prev <= 1e-300 { break; }
            prop_assert!(n < prev, "{n} >= {prev}");
            prev = n;
        }
    }

    #[test]
    fn stable_lstm_decays_with_uniform_forget_and_input_gates(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let m = uniform_gate_model(CellKind::Lstm, 8, 2, seed);
        let s0 = random_state(CellKind::Lstm, 8, 1.0, &mut rng);
        let ctrl = random_controls(300, 2, -1.0, 1.0, &mut rng);
        let trace = autonomous_run(&m, &s0, &ctrl).unwrap();
        let mut prev = l2(s0.cell().unwrap());
        for &n in trace.cell_norms.as_ref().unwrap() {
            if prev <= 1e-300 { break; }
            prop_assert!(n < prev, "{n} >= {prev}");
            prev = n;
        }
    }

    #[test]
    fn materialized_params_verify(seed in any::<u64>(), lstm in any::<bool>(), scale in 0.1..5.0f64) {
        let kind = if lstm { CellKind::Lstm } else { CellKind::Gru };
        let mut rng = SeededRng::new(seed);
        let mut tm = random_model(kind, true, 6, 2, scale, &mut rng);
        let m = tm.materialize();
        let report = verify_cell(&m.cell, m.mode, &StabilityMargin::default(), 500, &mut rng);
        prop_assert!(report.all_passed(), "{report}");
        // Structural zeros compare bit-equal to zero.
        let g = match &m.cell { CellParams::Gru(p) => &p.n, CellParams::Lstm(p) => &p.g };
        prop_assert!(g.c.data().iter().chain(g.b.iter()).all(|v| v.to_bits() == 0));
    }

    #[test]
    fn materialize_is_idempotent(seed in any::<u64>(), lstm in any::<bool>()) {
        let kind = if lstm { CellKind::Lstm } else { CellKind::Gru };
        let mut rng = SeededRng::new(seed);
        let mut tm = random_model(kind, true, 6, 2, 2.0, &mut rng);
        let once = tm.materialize();
        let mut again = CellParametrization::new(once.cell.clone(), true, StabilityMargin::default());
        let (twice, _) = again.materialize();
        let cand = |p: &CellParams| match p { CellParams::Gru(p) => p.n.u.clone(), CellParams::Lstm(p) => p.g.u.clone() };
        let (a, b) = (cand(&once.cell), cand(&twice));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300), "{x} vs {y}");
        }
    }

    #[test]
    fn run_sequence_is_deterministic(seed in any::<u64>(), lstm in any::<bool>()) {
        let kind = if lstm { CellKind::Lstm } else { CellKind::Gru };
        let mut rng = SeededRng::new(seed);
        let m = random_model(kind, false, 5, 2, 1.2, &mut rng).materialize();
        let s0 = random_state(kind, 5, 0.5, &mut rng);
        let x = random_signal(200, 1.0, &mut rng);
        let c = random_controls(200, 2, 0.0, 1.0, &mut rng);
        let a = run_sequence(&m, &s0, &x, &c).unwrap();
        let b = run_sequence(&m, &s0, &x, &c).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalization_is_idempotent(v in prop::collection::vec(-4.0..4.0f64, 2..64)) {
        prop_assume!(v.iter().any(|x| *x != 0.0));
        let mut s = vec![Sample { input: v.clone(), target: v.iter().map(|x| 0.5 * x).collect(), controls: Vector(vec![]) }];
        let st = compute_stats(&s).unwrap();
        normalize(&mut s, &st);
        let once = s.clone();
        let st2 = compute_stats(&s).unwrap();
        normalize(&mut s, &st2);
        for (a, b) in once[0].input.iter().chain(&once[0].target).zip(s[0].input.iter().chain(&s[0].target)) {
            prop_assert!((a - b).abs() <= f64::EPSILON * a.abs());
        }
        prop_assert!(once[0].input.iter().chain(&once[0].target).all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn device_is_a_pure_function(seed in any::<u64>(), drive in 0.0..=1.0f64, tone in 0.0..=1.0f64) {
        let mut rng = SeededRng::new(seed);
        let x = random_signal(500, 1.0, &mut rng);
        let cfg = SyntheticDeviceConfig::default();
        let a = synth_device_render(&cfg, &x, &[drive, tone], 48_000).unwrap();
        let b = synth_device_render(&cfg, &x, &[drive, tone], 48_000).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn variance_ignores_dc(v in prop::collection::vec(-1.0..1.0f64, 2..500), dc in -1.0..1.0f64) {
        let base = variance(&v);
        let shifted: Vec<f64> = v.iter().map(|x| x + dc).collect();
        let s = variance(&shifted);
        prop_assert!((s - base).abs() <= 1e-12 * base.max(1e-300) + 1e-15);
        if base > 1e-6 {
            prop_assert!((power_db(s) - power_db(base)).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_of_identical_runs_is_exact(v in 1e-6..1.0f64, n in 2usize..12) {
        let a = aggregate_runs(&vec![v; n], 0.95).unwrap();
        prop_assert_eq!(a.mean_db, amplitude_db(v));
        prop_assert_eq!((a.ci_low_db, a.ci_high_db), (0.0, 0.0));
    }
}

#[test]
fn rng_reproducible_over_a_million_draws() {
    let (mut a, mut b) = (SeededRng::new(2024), SeededRng::new(2024));
    for _ in 0..1_000_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
}

#[test]
fn protocol_is_deterministic() {
    let m = random_model(CellKind::Gru, false, 8, 2, 0.9, &mut SeededRng::new(3)).materialize();
    let p = NoiseProtocolConfig {
        init_noise_s: 0.01,
        settle_s: 0.02,
        measure_s: 0.02,
        ..Default::default()
    };
    for kind in [ScheduleKind::SmoothSweep, ScheduleKind::RandomUniform] {
        let a = measure_noise(&m, kind, &p, 11, true).unwrap();
        let b = measure_noise(&m, kind, &p, 11, true).unwrap();
        assert_eq!(a.energy_dbfs.to_bits(), b.energy_dbfs.to_bits());
        assert_eq!(a, b);
    }
}

#[test]
fn stable_settle_is_monotone() {
    // Drive a stable model with noise, then watch the zero-input settle.
    for (seed, kind) in [(1, CellKind::Gru), (2, CellKind::Lstm)] {
        let m = uniform_gate_model(kind, 8, 2, seed);
        let mut rng = SeededRng::new(seed);
        let x = random_signal(2000, 1.0, &mut rng);
        let (_, s) = run_sequence(&m, &m.zero_state(), &x, &ControlTrajectory::constant(&[0.0, 0.0], 2000)).unwrap();
        let trace = autonomous_run(&m, &s, &ControlTrajectory::constant(&[0.0, 0.0], 5000)).unwrap();
        let norms = match kind {
            CellKind::Gru => trace.hidden_norms.clone(),
            CellKind::Lstm => trace.cell_norms.clone().unwrap(),
        };
        let start = match kind {
            CellKind::Gru => l2(s.hidden()),
            CellKind::Lstm => l2(s.cell().unwrap()),
        };
        let mut prev = start;
        for n in norms {
            assert!(n <= prev);
            if prev > 1e-300 {
                assert!(n < prev);
            }
            prev = n;
        }
    }
}

/// Two-unit stable GRU whose norm grows for one step: the swap in U_n moves
/// energy into the unit whose update gate is open while the other unit holds.
#[test]
fn stable_gru_norm_can_grow_with_per_unit_gates() {
    let mut free = GruParams {
        r: GateParams::zeros(2, 1),
        z: GateParams::zeros(2, 1),
        n: GateParams::zeros(2, 1),
    };
    free.r.b = Vector(vec![40.0, 40.0]);
    free.z.b = Vector(vec![-40.0, 40.0]);
    free.n.u = Matrix::from_vec(2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
    let mut p = CellParametrization::StableGru(StableGruParametrization::new(free, StabilityMargin::default()));
    let (cell, mode) = p.materialize();
    let report = verify_cell(&cell, mode, &StabilityMargin::default(), 10_000, &mut SeededRng::new(1));
    assert!(report.all_passed(), "{report}");
    let model = Model { cell, output: OutputLayer::zeros(2, 0.0), mode };
    let s0 = CellState::Gru(GruState { h: Vector(vec![0.0, 1.0]) });
    let trace = autonomous_run(&model, &s0, &ControlTrajectory::constant(&[0.0], 1)).unwrap();
    let grown = trace.hidden_norms[0];
    let expected = (0.999f64.tanh().powi(2) + 1.0).sqrt();
    assert!((grown - expected).abs() < 1e-9, "{grown} vs {expected}");
    assert!(grown > 1.2);
}

/// Two-unit stable LSTM whose cell norm grows for one step: unit 0 keeps its
/// cell through the forget gate while unit 1 writes the swapped candidate.
#[test]
fn stable_lstm_cell_norm_can_grow_with_per_unit_gates() {
    let mut free = LstmParams {
        i: GateParams::zeros(2, 1),
        f: GateParams::zeros(2, 1),
        g: GateParams::zeros(2, 1),
        o: GateParams::zeros(2, 1),
    };
    free.i.b = Vector(vec![40.0, 40.0]);
    free.f.b = Vector(vec![12.0, -12.0]);
    free.o.b = Vector(vec![40.0, 40.0]);
    free.g.u = Matrix::from_vec(2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
    let mut p = CellParametrization::StableLstm(StableLstmParametrization::new(free, StabilityMargin::default()));
    let (cell, mode) = p.materialize();
    let report = verify_cell(&cell, mode, &StabilityMargin::default(), 10_000, &mut SeededRng::new(1));
    assert!(report.all_passed(), "{report}");
    let model = Model { cell, output: OutputLayer::zeros(2, 0.0), mode };
    let s0 = CellState::Lstm(LstmState { h: Vector(vec![1.0f64.tanh(), 0.0]), c: Vector(vec![1.0, 0.0]) });
    let trace = autonomous_run(&model, &s0, &ControlTrajectory::constant(&[0.0], 1)).unwrap();
    let grown = trace.cell_norms.unwrap()[0];
    assert!(grown > 1.15, "{grown}");
}
