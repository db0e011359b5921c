//! Propagation oracles: the fast segment exponential against a scaling-and-
//! squaring reference, the analytic gradient against central finite
//! differences, and the parallel/sequential ensemble paths against each
//! other.

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use spinloop_core::optimizers::checks::random_pulse;
use spinloop_core::propagator::{
    analytic_gradient, ensemble_fidelity, ensemble_fidelity_seq, propagate, segment_exponential,
    segment_exponential_reference, state_fidelity, Evolver, GradientVector,
};
use spinloop_core::pulse_lib::{rotation_unitary, two_tone_waveform, Axis, ControlPulse, Sign};
use spinloop_core::seeds::splitmix64;
use spinloop_core::spin_model::{
    build_hamiltonian, diagonalize, lorentzian_ensemble, EnsembleSpec, PauliState, SpinSystem,
};

type C64 = nalgebra::Complex<f64>;

/// Deterministic scalar stream in [-1, 1) derived from a seed counter.
fn stream(seed: u64) -> impl FnMut() -> f64 {
    let mut state = seed;
    move || {
        state = state.wrapping_add(1);
        let bits = splitmix64(state);
        ((bits >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn random_hermitian(n: usize, seed: u64, scale: f64) -> DMatrix<C64> {
    let mut next = stream(seed);
    let a = DMatrix::from_fn(n, n, |_, _| C64::new(next() * scale, next() * scale));
    (&a + a.adjoint()) * C64::new(0.5, 0.0)
}

fn assert_unitary(u: &DMatrix<C64>, tol: f64) {
    let n = u.nrows();
    let gram = u.adjoint() * u;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!(
                (gram[(i, j)].re - want).abs() < tol && gram[(i, j)].im.abs() < tol,
                "gram[{i},{j}] = {:?}",
                gram[(i, j)]
            );
        }
    }
}

#[test]
fn segment_exponential_matches_scaling_and_squaring() {
    for trial in 0..20 {
        // Angular frequencies up to ~500 rad/us at dt = 2 ns covers the
        // physical range (hyperfine ~ 2 pi * 72).
        let h = random_hermitian(4, 1000 + trial, 250.0);
        let fast = segment_exponential(&h, 0.002);
        let reference = segment_exponential_reference(&h, 0.002);
        assert!(
            (&fast - &reference).norm() < 1e-12,
            "trial {trial}: deviation {}",
            (&fast - &reference).norm()
        );
        assert_unitary(&fast, 1e-12);
    }
}

#[test]
fn segment_exponential_handles_large_steps() {
    // Long two-tone insertions integrate over hundreds of radians; the
    // exponential must stay accurate there too.
    let h = random_hermitian(4, 77, 400.0);
    let fast = segment_exponential(&h, 0.2);
    let reference = segment_exponential_reference(&h, 0.2);
    assert!((&fast - &reference).norm() < 1e-10);
}

#[test]
fn propagation_is_unitary_and_matches_total_unitary() {
    let sys = SpinSystem::new(66.0, 26.0, -14.5);
    let pulse = random_pulse(40, 8.0, 42, 0);
    let result = propagate(&sys, &pulse);
    assert_unitary(&result.total, 1e-10);
    let mut evolver = Evolver::from_system(&sys);
    let direct = evolver.total_unitary(&pulse);
    assert!((&result.total - &direct).norm() < 1e-12);
}

#[test]
fn state_fidelity_recovers_overlap_conventions() {
    let zi = PauliState::from_label("ZI").unwrap().matrix;
    let xi = PauliState::from_label("XI").unwrap().matrix;
    let id = DMatrix::<C64>::identity(4, 4);
    // Identity evolution: perfect self-overlap, orthogonal across labels.
    assert_relative_eq!(state_fidelity(&id, &zi, &zi).unwrap(), 1.0, epsilon = 1e-12);
    assert!(state_fidelity(&id, &zi, &xi).unwrap().abs() < 1e-12);
    // A pi rotation about x flips z: overlap -1.
    let rx = rotation_unitary(4, Axis::X, Sign::Plus, std::f64::consts::PI).unwrap();
    assert_relative_eq!(state_fidelity(&rx, &zi, &zi).unwrap(), -1.0, epsilon = 1e-12);
    // Dimension mismatch is an error, not a panic.
    let small = DMatrix::<C64>::identity(2, 2);
    assert!(state_fidelity(&small, &zi, &zi).is_err());
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let sys = SpinSystem::new(66.0, 26.0, -14.5);
    let zi = PauliState::from_label("ZI").unwrap().matrix;
    let zz = PauliState::from_label("ZZ").unwrap().matrix;
    let pulse = random_pulse(20, 6.0, 9, 3);
    let (f0, grad) = analytic_gradient(&sys, &pulse, &zi, &zz).unwrap();
    assert!(grad.is_finite());
    assert!(f0.abs() <= 1.0 + 1e-9);

    let h = 1e-5;
    let scale = grad.norm().max(1e-6);
    for k in [0usize, 7, 13, 19] {
        for axis in [Axis::X, Axis::Y] {
            let mut up = pulse.clone();
            let mut dn = pulse.clone();
            match axis {
                Axis::X => {
                    up.ux[k] += h;
                    dn.ux[k] -= h;
                }
                Axis::Y => {
                    up.uy[k] += h;
                    dn.uy[k] -= h;
                }
            }
            let fu = state_fidelity(&propagate(&sys, &up).total, &zi, &zz).unwrap();
            let fd = state_fidelity(&propagate(&sys, &dn).total, &zi, &zz).unwrap();
            let numeric = (fu - fd) / (2.0 * h);
            let analytic = match axis {
                Axis::X => grad.gx[k],
                Axis::Y => grad.gy[k],
            };
            assert!(
                (numeric - analytic).abs() / scale < 1e-6,
                "segment {k} axis {axis:?}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}

#[test]
fn gradient_vector_algebra() {
    let mut g = GradientVector::zeros(3);
    g.gx = vec![3.0, 0.0, 0.0];
    g.gy = vec![0.0, 4.0, 0.0];
    assert_relative_eq!(g.norm(), 5.0, epsilon = 1e-12);
    let mut h = GradientVector::zeros(3);
    h.gx = vec![3.0, 0.0, 0.0];
    h.gy = vec![0.0, 4.0, 0.0];
    assert_relative_eq!(g.cosine(&h), 1.0, epsilon = 1e-12);
    assert_relative_eq!(g.dot(&h), 25.0, epsilon = 1e-12);
    h.scale(-1.0);
    assert_relative_eq!(g.cosine(&h), -1.0, epsilon = 1e-12);
    assert_eq!(g.segments(), 3);
}

#[test]
fn ensemble_paths_agree_bit_for_bit() {
    let base = SpinSystem::new(72.0, 0.0, -14.5);
    let spec = EnsembleSpec::new(10.0, 21, 40.0).unwrap();
    let members = lorentzian_ensemble(&spec, &base);
    let zi = PauliState::from_label("ZI").unwrap().matrix;
    let zz = PauliState::from_label("ZZ").unwrap().matrix;
    for t in 0..3 {
        let pulse = random_pulse(100, 5.0, 100 + t, 1);
        let par = ensemble_fidelity(&members, &pulse, &zi, &zz).unwrap();
        let seq = ensemble_fidelity_seq(&members, &pulse, &zi, &zz).unwrap();
        assert_eq!(par.to_bits(), seq.to_bits(), "parallel and sequential reductions must agree exactly");
    }
}

#[test]
fn ensemble_fidelity_is_the_weighted_member_average() {
    let base = SpinSystem::new(72.0, 0.0, -14.5);
    let spec = EnsembleSpec::new(10.0, 5, 12.0).unwrap();
    let members = lorentzian_ensemble(&spec, &base);
    let zi = PauliState::from_label("ZI").unwrap().matrix;
    let zz = PauliState::from_label("ZZ").unwrap().matrix;
    let pulse = random_pulse(30, 4.0, 5, 2);
    let combined = ensemble_fidelity(&members, &pulse, &zi, &zz).unwrap();
    let manual: f64 = members
        .iter()
        .map(|(sys, w)| w * state_fidelity(&propagate(sys, &pulse).total, &zi, &zz).unwrap())
        .sum();
    assert_relative_eq!(combined, manual, epsilon = 1e-12);
}

#[test]
fn rotation_unitaries_behave_like_electron_rotations() {
    let quarter = std::f64::consts::FRAC_PI_2;
    for axis in [Axis::X, Axis::Y] {
        let plus = rotation_unitary(4, axis, Sign::Plus, quarter).unwrap();
        let minus = rotation_unitary(4, axis, Sign::Minus, quarter).unwrap();
        assert_unitary(&plus, 1e-12);
        // Opposite signs are inverses of each other.
        let prod = &plus * &minus;
        let id = DMatrix::<C64>::identity(4, 4);
        assert!((prod - &id).norm() < 1e-12);
        // Composing two quarter turns gives the half turn.
        let half = rotation_unitary(4, axis, Sign::Plus, std::f64::consts::PI).unwrap();
        assert!((&plus * &plus - half).norm() < 1e-12);
        // The rotation acts on the electron only: it commutes with any
        // purely nuclear operator.
        let nuclear = PauliState::from_label("IZ").unwrap().matrix;
        let comm = &plus * &nuclear - &nuclear * &plus;
        assert!(comm.norm() < 1e-12);
    }
    assert!(rotation_unitary(3, Axis::X, Sign::Plus, quarter).is_err());
}

#[test]
fn two_tone_waveform_is_bounded_and_selective_in_duration() {
    let eig = diagonalize(&SpinSystem::new(72.0, 0.0, -14.5));
    let wave = two_tone_waveform(&eig, 2.0, Axis::X, Sign::Plus, std::f64::consts::FRAC_PI_2, 200.0, 60.0)
        .unwrap();
    assert_eq!(wave.segments(), 100);
    assert_relative_eq!(wave.dt, 2.0, epsilon = 1e-12);
    for i in 0..wave.segments() {
        assert!(wave.ux[i].abs() <= 60.0 + 1e-9);
    }
    // The modulation alternates sign: a cosine at the transition offset is
    // not a DC envelope.
    let has_negative = wave.ux.iter().any(|&u| u < -1e-6);
    let has_positive = wave.ux.iter().any(|&u| u > 1e-6);
    assert!(has_negative && has_positive);
    // Halving the angle halves the drive amplitude.
    let half = two_tone_waveform(&eig, 2.0, Axis::X, Sign::Plus, std::f64::consts::FRAC_PI_4, 200.0, 60.0)
        .unwrap();
    let max_full = wave.ux.iter().fold(0.0_f64, |m, u| m.max(u.abs()));
    let max_half = half.ux.iter().fold(0.0_f64, |m, u| m.max(u.abs()));
    assert_relative_eq!(max_half / max_full, 0.5, max_relative = 1e-6);

    assert!(two_tone_waveform(&eig, 2.0, Axis::X, Sign::Plus, 1.0, 0.0, 60.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Any admissible segment drive produces a unitary step.
    #[test]
    fn segment_unitaries_are_unitary(
        ux in -40.0f64..40.0,
        uy in -40.0f64..40.0,
        dt_ns in 0.1f64..50.0,
        detuning in -20.0f64..20.0,
    ) {
        let sys = SpinSystem::new(66.0, 26.0, -14.5).with_detuning(detuning);
        let mut evolver = Evolver::from_system(&sys);
        let u = evolver.segment_unitary(ux, uy, dt_ns * 1e-3);
        let gram = u.adjoint() * &u;
        let id = DMatrix::<C64>::identity(4, 4);
        prop_assert!((gram - id).norm() < 1e-9);
    }

    /// Fidelity of any pulse against Pauli observables stays in [-1, 1].
    #[test]
    fn fidelity_is_bounded(seed in 0u64..5000) {
        let sys = SpinSystem::new(72.0, 0.0, -14.5);
        let zi = PauliState::from_label("ZI").unwrap().matrix;
        let zz = PauliState::from_label("ZZ").unwrap().matrix;
        let pulse = random_pulse(12, 10.0, seed, 4);
        let f = state_fidelity(&propagate(&sys, &pulse).total, &zi, &zz).unwrap();
        prop_assert!(f.abs() <= 1.0 + 1e-9);
    }
}

#[test]
fn evolver_rejects_bad_static_hamiltonians() {
    assert!(Evolver::new(DMatrix::<C64>::zeros(0, 0)).is_err());
    let mut evolver = Evolver::from_system(&SpinSystem::new(72.0, 0.0, -14.5));
    let wrong = DMatrix::<C64>::identity(3, 3);
    assert!(evolver.load_static(&wrong).is_err());
    let sane = build_hamiltonian(&SpinSystem::new(66.0, 26.0, -14.5));
    assert!(evolver.load_static(&sane).is_ok());
    let id = ControlPulse::square(2.0, 5, 0.0, 10.0).unwrap();
    assert_unitary(&evolver.total_unitary(&id), 1e-10);
}
