//! Scratch numerical probe used during development; not part of the test suite.

use spinloop_core::optimizers::{checks, grape_gradient, learning_rate_schedule, ModelSpec};
use spinloop_core::propagator::ensemble_fidelity;
use spinloop_core::pulse_lib::{
    make_canonical_basis, make_linear_basis, make_slepian_basis, update_pulse, ControlPulse,
    PulseProgram,
};
use spinloop_core::spin_model::{diagonalize, EnsembleSpec, SpinSystem};
use spinloop_core::virtual_spectrometer::{
    synthesize_transfer, Gate, MeasurementModel, TransferKind, VirtualSpectrometer,
};

fn main() {
    let sys = SpinSystem::new(72.0, 0.0, -14.5);
    let eig = diagonalize(&sys);
    println!(
        "A=72 B=0: omega12={:+.6} omega34={:+.6} offset={:+.6}",
        eig.omega12,
        eig.omega34,
        eig.allowed_transition_offset()
    );
    let sys2 = SpinSystem::new(66.0, 26.0, -14.5);
    let eig2 = diagonalize(&sys2);
    println!(
        "A=66 B=26: omega12={:+.6} omega34={:+.6} offset={:+.6} (sqrt511.25={:.6} sqrt2425.25={:.6})",
        eig2.omega12,
        eig2.omega34,
        eig2.allowed_transition_offset(),
        511.25f64.sqrt(),
        2425.25f64.sqrt()
    );

    // Gradient estimator quality: the headline empirical question.
    let t0 = std::time::Instant::now();
    let (hq, fd) = checks::estimator_cosines(&sys, 5, 20, 99).unwrap();
    println!(
        "estimator cosines over 5 random pulses (M=20): hqca_min={hq:.6} fd_min={fd:.6} [{:?}]",
        t0.elapsed()
    );
    let t0 = std::time::Instant::now();
    let (hq, fd) = checks::estimator_cosines(&sys, 3, 100, 7).unwrap();
    println!(
        "estimator cosines over 3 random pulses (M=100): hqca_min={hq:.6} fd_min={fd:.6} [{:?}]",
        t0.elapsed()
    );

    let rel = checks::fd_oracle_max_rel(&sys, Gate::Two, 5, 20, 1e-4, 1234).unwrap();
    println!("fd oracle max rel err (5 pulses, M=20): {rel:.3e}");
    let st = checks::sin_theta_max_err(&sys, 17, 5).unwrap();
    println!("sin-theta max err: {st:.3e}");
    let basis6 = make_slepian_basis(20, 0.12, 5).unwrap();
    let cr = checks::chain_rule_max_err(&sys, &basis6, 3, 31).unwrap();
    println!("chain-rule max err: {cr:.3e}");

    // Perfect-gate readout levels through the measured-like 130 MHz chain.
    let transfer = synthesize_transfer(TransferKind::MeasuredLike, 130.0).unwrap();
    let ens = EnsembleSpec::with_defaults(10.0).unwrap();
    let spect = VirtualSpectrometer::new(
        sys,
        Some(&ens),
        transfer.clone(),
        MeasurementModel::noiseless(1),
    )
    .unwrap();
    for gate in [Gate::One, Gate::Two] {
        let (_, rho_f) = spect.targets(gate);
        let pair = spect.signals_of_unitary(&rho_f_to_unitary(&rho_f, gate, &sys), gate).unwrap();
        println!(
            "{gate} perfect-gate signals: sL={:.6} sR={:.6} F_XI={:.6} F_ZZ={:.6}",
            pair.s_l,
            pair.s_r,
            pair.f_xi(),
            pair.f_zz()
        );
    }

    // Identity pulse baseline.
    let idle = ControlPulse::square(2.0, 100, 0.0, 60.0).unwrap();
    let pair = spect
        .ideal_signals(&PulseProgram::plain(idle.clone()), Gate::Two)
        .unwrap();
    println!(
        "idle pulse gate2: sL={:.6} sR={:.6} F_ZZ={:.6}",
        pair.s_l,
        pair.s_r,
        pair.f_zz()
    );

    // Gate-2 tie check: measured noiseless quality vs ensemble state fidelity.
    let pulse = checks::random_pulse(100, 5.0, 12345, 0);
    let q = spect.true_quality(&pulse, Gate::Two).unwrap();
    let (rho_i, rho_f) = spect.targets(Gate::Two);
    let distorted = spect.distorted(&pulse).unwrap();
    let f = ensemble_fidelity(spect.members(), &distorted, &rho_i, &rho_f).unwrap();
    println!("gate2 tie: measured={q:.12} fidelity={f:.12} diff={:.3e}", (q - f).abs());

    // Transfer magnitudes at the allowed lines.
    for (label, fwhm) in [("130", 130.0f64), ("70", 70.0f64)] {
        let t = synthesize_transfer(TransferKind::MeasuredLike, fwhm).unwrap();
        let at = |f: f64| t.interp(f).map(|c| c.norm()).unwrap_or(f64::NAN);
        println!(
            "measured-like {label}: |T(0)|={:.4} |T(+36)|={:.4} |T(-36)|={:.4} arg(T(36))={:+.4}",
            at(0.0),
            at(36.0),
            at(-36.0),
            t.interp(36.0).map(|c| c.arg()).unwrap_or(f64::NAN)
        );
    }

    // Quick convergence probe: open-loop model-gradient ascent matching the
    // true device (same transfer), noiseless.
    let t0 = std::time::Instant::now();
    let model = ModelSpec {
        system: sys,
        ensemble: Some(ens.clone()),
        design_transfer: Some(transfer.clone()),
    };
    let mut pulse = ControlPulse::square(2.0, 100, 1.0, 60.0).unwrap();
    for m in 0..pulse.segments() {
        pulse.uy[m] = 0.5;
    }
    let mut last_f = 0.0f64;
    for it in 0..200 {
        let (f, g) = grape_gradient(&model, &pulse, Gate::Two).unwrap();
        last_f = f;
        let rate = learning_rate_schedule(60.0, f);
        update_pulse(&mut pulse, &g.gx, &g.gy, rate).unwrap();
        if it % 25 == 0 {
            println!("  grape iter {it}: F={f:.5} |g|={:.4e} rate={rate}", g.norm());
        }
    }
    println!("grape noiseless 200 iters final F={last_f:.5} [{:?}]", t0.elapsed());
    let true_q = spect.true_quality(&pulse, Gate::Two).unwrap();
    println!("  true gate2 quality of designed pulse: {true_q:.5}");

    // Basis sanity.
    let lin = make_linear_basis(100).unwrap();
    let slep = make_slepian_basis(100, 0.12, 24).unwrap();
    let canon = make_canonical_basis(100).unwrap();
    println!(
        "bases: canonical {} linear {} slepian {} (concentrations head: {:?})",
        canon.vectors.len(),
        lin.vectors.len(),
        slep.vectors.len(),
        &slep
            .meta
            .as_ref()
            .map(|m| m.concentrations[..3].to_vec())
            .unwrap_or_default()
    );
}

/// The perfect gate for scoring readout levels: rotate the thermal state by
/// the target observable's generator. For these targets the final state IS
/// rho_f, so apply the unitary that maps rho_i to rho_f exactly; here we
/// cheat by scoring rho_f itself via a unitary that commutes: use identity
/// and substitute states directly instead.
fn rho_f_to_unitary(
    _rho_f: &nalgebra::DMatrix<spinloop_core::linalg::C64>,
    gate: Gate,
    sys: &SpinSystem,
) -> nalgebra::DMatrix<spinloop_core::linalg::C64> {
    use spinloop_core::linalg::{pauli, C64};
    let dim = sys.dim();
    let nuc_dim = dim / 2;
    match gate {
        // rho_th = Z x I is invariant under the block-diagonal V, so
        // U = V (exp(i pi/4 sigma_y) x I) V^dag maps it to V (X x I) V^dag.
        Gate::One => {
            let y = pauli('Y').unwrap();
            let e = expm_small(&(y * C64::new(0.0, std::f64::consts::FRAC_PI_4)));
            let nuc = nalgebra::DMatrix::<C64>::identity(nuc_dim, nuc_dim);
            let lifted = e.kronecker(&nuc);
            let v = &diagonalize(sys).eigenbasis;
            v * lifted * v.adjoint()
        }
        // Z x I -> eigen-ZZ: with level ordering (manifold, nuclear index),
        // D_ZI = diag(1,1,-1,-1) and D_ZZ = diag(1,-1,-1,1); the permutation
        // swapping levels 1 and 3 maps one diagonal to the other.
        Gate::Two => {
            let eig = diagonalize(sys);
            let v = &eig.eigenbasis;
            let mut p = nalgebra::DMatrix::<C64>::zeros(dim, dim);
            let one = C64::new(1.0, 0.0);
            if dim == 4 {
                p[(0, 0)] = one;
                p[(1, 3)] = one;
                p[(2, 2)] = one;
                p[(3, 1)] = one;
            } else {
                for k in 0..dim {
                    p[(k, k)] = one;
                }
            }
            v * p * v.adjoint()
        }
    }
}

fn expm_small(
    m: &nalgebra::DMatrix<spinloop_core::linalg::C64>,
) -> nalgebra::DMatrix<spinloop_core::linalg::C64> {
    // Tiny fixed-order Taylor; fine for pi/4-scale arguments in a probe.
    let dim = m.nrows();
    let mut term = nalgebra::DMatrix::<spinloop_core::linalg::C64>::identity(dim, dim);
    let mut acc = term.clone();
    for k in 1..24 {
        term = (&term * m) / spinloop_core::linalg::C64::new(k as f64, 0.0);
        acc += &term;
    }
    acc
}
