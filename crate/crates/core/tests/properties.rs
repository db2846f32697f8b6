use proptest::prelude::*;

use spinbath::analytic::equal_coupling_trace;
use spinbath::engine::evolve_trace;
use spinbath::ensemble::CouplingDistribution;
use spinbath::model::CouplingMatrix;
use spinbath::noise::{ou_step, ou_trajectory, NoiseParams};
use spinbath::sequences::{
    average_hamiltonian, build_cpmg, build_spinlock, build_wahuha, build_xy8, nv_pair, pauli_decomposition_2spin,
    spin_half_pair, PulseSchedule,
};

const DT: f64 = 2.5e-4;

fn cluster() -> impl Strategy<Value = CouplingMatrix> {
    (2usize..=5).prop_flat_map(|n| {
        prop::collection::vec(0.0f64..100.0, n * (n - 1) / 2)
            .prop_map(move |pairs| CouplingMatrix::from_pairs(n, &pairs).unwrap())
    })
}

fn schedule(t: f64) -> impl Strategy<Value = PulseSchedule> {
    prop_oneof![
        Just(PulseSchedule::free(t).unwrap()),
        // finite pulses last a whole number of steps; shorter ones cannot be snapped
        (1usize..20, 0usize..4).prop_map(move |(k, m)| build_cpmg(k, t / k as f64, m as f64 * DT).unwrap()),
        (1usize..4).prop_map(move |r| build_xy8(r, t / (8 * r) as f64, 0.0).unwrap()),
        (1usize..4, -0.3f64..0.3).prop_map(move |(r, e)| build_wahuha(r, t / (6 * r) as f64, 0.0, e).unwrap()),
        (1.0f64..500.0).prop_map(move |w| build_spinlock(w, t).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn traces_start_polarized_stay_bounded_and_unitary(c in cluster(), sched in schedule(0.05)) {
        let tr = evolve_trace(&c, &sched, None, DT, 0.05, 0).unwrap();
        prop_assert!((tr.sx_mean[0] - 1.0).abs() < 1e-12);
        prop_assert!(tr.sx_mean.iter().all(|v| v.abs() <= 1.0 + 1e-9));
        prop_assert!(tr.max_norm_error < 1e-9);
    }

    #[test]
    fn noisy_traces_are_reproducible(c in cluster(), seed in any::<u64>()) {
        let p = NoiseParams::paper_bath();
        let sched = build_cpmg(4, 5e-6, 0.0).unwrap();
        let a = evolve_trace(&c, &sched, Some(&p), 2.5e-7, 2e-5, seed).unwrap();
        let b = evolve_trace(&c, &sched, Some(&p), 2.5e-7, 2e-5, seed).unwrap();
        prop_assert_eq!(a.sx_mean, b.sx_mean);
    }

    #[test]
    fn ideal_cpmg_is_invisible_to_dipolar_coupling(c in cluster(), k in 1usize..30) {
        let t = 0.04;
        let free = evolve_trace(&c, &PulseSchedule::free(t).unwrap(), None, 2e-4, t, 0).unwrap();
        let cpmg = evolve_trace(&c, &build_cpmg(k, t / k as f64, 0.0).unwrap(), None, 2e-4, t, 0).unwrap();
        for (a, b) in free.sx_mean.iter().zip(&cpmg.sx_mean) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_couplings_match_closed_form(n in 2usize..=6, w in 1.0f64..200.0) {
        let c = CouplingMatrix::equal(n, w).unwrap();
        let dt = 0.01 / w;
        let tr = evolve_trace(&c, &PulseSchedule::free(100.0 * dt).unwrap(), None, dt, 100.0 * dt, 0).unwrap();
        let exact = equal_coupling_trace(n, w, &tr.times).unwrap();
        for (a, b) in tr.sx_mean.iter().zip(&exact) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rescaling_couplings_and_time_is_exact(c in cluster(), s in 0.1f64..10.0) {
        let t = 0.05;
        let sched = build_wahuha(2, t / 12.0, 0.0, 0.0).unwrap();
        let a = evolve_trace(&c, &sched, None, t / 200.0, t, 0).unwrap();
        let b = evolve_trace(&c.scaled(s).unwrap(), &sched.time_scaled(1.0 / s).unwrap(), None, t / 200.0 / s, t / s, 0).unwrap();
        for (x, y) in a.sx_mean.iter().zip(&b.sx_mean) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn wahuha_average_hamiltonians(w in -5.0f64..5.0) {
        let sched = build_wahuha(1, 1.0, 0.0, 0.0).unwrap();
        let zero = average_hamiltonian(&sched, &spin_half_pair(w).unwrap()).unwrap();
        prop_assert!(zero.max_abs() < 1e-12 * w.abs().max(1.0));
        let nv = pauli_decomposition_2spin(&average_hamiltonian(&sched, &nv_pair(w).unwrap()).unwrap()).unwrap();
        for a in 1..4 {
            prop_assert!((nv[a][a] - w / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ou_step_without_kick_decays(b0 in -1e5f64..1e5, dt in 1e-9f64..1e-3) {
        let p = NoiseParams::paper_bath();
        let b = ou_step(b0, dt, &p, 0.0).unwrap();
        prop_assert!((b - b0 * (-dt / p.tau_c).exp()).abs() <= 1e-9 * b0.abs().max(1.0));
    }

    #[test]
    fn ou_trajectories_cover_the_window(t in 1e-6f64..1e-3, k in 1usize..50, seed in any::<u64>()) {
        let p = NoiseParams::paper_bath();
        let dt = t / k as f64;
        let tr = ou_trajectory(t, dt, &p, seed).unwrap();
        prop_assert_eq!(tr.len(), k + 1);
        prop_assert!(tr.values.iter().all(|v| v.is_finite()));
        prop_assert_eq!(tr.values, ou_trajectory(t, dt, &p, seed).unwrap().values);
    }

    #[test]
    fn distribution_cdf_is_monotone(probs in prop::collection::vec(0.0f64..1.0, 1..20)) {
        prop_assume!(probs.iter().sum::<f64>() > 0.0);
        let edges: Vec<f64> = (0..=probs.len()).map(|k| k as f64).collect();
        let d = CouplingDistribution::new(edges, probs.clone()).unwrap();
        let mut prev = 0.0;
        for k in 0..=4 * probs.len() {
            let v = d.cdf(k as f64 / 4.0);
            prop_assert!(v + 1e-12 >= prev);
            prev = v;
        }
        prop_assert!((d.cdf(probs.len() as f64) - 1.0).abs() < 1e-12);
    }
}
