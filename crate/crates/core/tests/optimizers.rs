//! Optimizer-level tests: gradient estimators against the analytic
//! open-loop gradient, the shared self-check suite, loop bookkeeping
//! (records, stop rule, budget, monitor sources), and campaign plumbing.

use approx::assert_relative_eq;
use spinloop_core::campaign::{mean_std, run_campaign};
use spinloop_core::optimizers::checks::{self, random_pulse};
use spinloop_core::optimizers::{
    fd_gradient, fd_gradient_axis, grape_gradient, hqca_gradient, hqca_gradient_axis,
    learning_rate_schedule, model_quality, Method, ModelSpec, MonitorSource, OptimizerConfig,
};
use spinloop_core::pulse_lib::{
    make_canonical_basis, make_slepian_basis, Axis, ControlPulse, RotationModel,
};
use spinloop_core::spin_model::{EnsembleSpec, SpinSystem};
use spinloop_core::virtual_spectrometer::{
    Gate, MeasurementModel, TransferFunction, VirtualSpectrometer,
};

fn flat_spect(sigma: f64, seed: u64) -> VirtualSpectrometer {
    let mut meas = MeasurementModel::noiseless(seed);
    meas.sigma = sigma;
    VirtualSpectrometer::new(
        SpinSystem::new(72.0, 0.0, -14.5),
        None,
        TransferFunction::flat(),
        meas,
    )
    .unwrap()
}

#[test]
fn self_check_suite_is_green() {
    let sys = SpinSystem::new(66.0, 26.0, -14.5);
    let report = checks::run_all(&sys, 12, 3, 2, 999).unwrap();
    assert!(report.fd_oracle_max_rel < 1e-6, "fd oracle {}", report.fd_oracle_max_rel);
    assert!(report.hqca_cosine_min > 0.99, "hqca cosine {}", report.hqca_cosine_min);
    assert!(report.fd_cosine_min > 0.99, "fd cosine {}", report.fd_cosine_min);
    assert!(report.sin_theta_max_err < 1e-10, "sin-theta {}", report.sin_theta_max_err);
    assert!(report.chain_rule_max_err < 1e-8, "chain rule {}", report.chain_rule_max_err);
}

#[test]
fn canonical_finite_differences_reproduce_the_analytic_gradient() {
    let spect = flat_spect(0.0, 4);
    let model = ModelSpec::ideal(SpinSystem::new(72.0, 0.0, -14.5));
    let basis = make_canonical_basis(16).unwrap();
    let pulse = random_pulse(16, 5.0, 77, 0);

    let (_, analytic) = grape_gradient(&model, &pulse, Gate::Two).unwrap();
    let numeric = fd_gradient(&spect, &pulse, Gate::Two, &basis, 1e-3, 1).unwrap();
    assert!(analytic.cosine(&numeric) > 0.999_999);
    let scale = analytic.norm();
    for k in 0..16 {
        assert!(
            (analytic.gx[k] - numeric.gx[k]).abs() < 1e-4 * scale,
            "x[{k}]: {} vs {}",
            analytic.gx[k],
            numeric.gx[k]
        );
        assert!((analytic.gy[k] - numeric.gy[k]).abs() < 1e-4 * scale);
    }
}

#[test]
fn restricted_finite_differences_project_onto_the_basis_span() {
    // A band-limited basis measures the projection of the full gradient
    // onto its span; compare against the projected analytic gradient.
    let spect = flat_spect(0.0, 4);
    let model = ModelSpec::ideal(SpinSystem::new(72.0, 0.0, -14.5));
    let basis = make_slepian_basis(16, 0.2, 7).unwrap();
    let pulse = random_pulse(16, 5.0, 78, 1);

    let (_, analytic) = grape_gradient(&model, &pulse, Gate::Two).unwrap();
    let mut projected = spinloop_core::propagator::GradientVector::zeros(16);
    for v in &basis.vectors {
        let cx: f64 = (0..16).map(|i| v[i] * analytic.gx[i]).sum();
        let cy: f64 = (0..16).map(|i| v[i] * analytic.gy[i]).sum();
        for i in 0..16 {
            projected.gx[i] += cx * v[i];
            projected.gy[i] += cy * v[i];
        }
    }
    let numeric = fd_gradient(&spect, &pulse, Gate::Two, &basis, 1e-3, 1).unwrap();
    assert!(numeric.cosine(&projected) > 0.999_99);
    assert_relative_eq!(numeric.norm(), projected.norm(), max_relative = 1e-3);
}

#[test]
fn rotation_probes_align_with_the_analytic_gradient() {
    // Gate 2 reads real line populations, so the probe estimates the same
    // objective the analytic open-loop gradient differentiates.
    let spect = flat_spect(0.0, 4);
    let model = ModelSpec::ideal(SpinSystem::new(72.0, 0.0, -14.5));
    for t in 0..3 {
        let pulse = random_pulse(16, 5.0, 200 + t, 2);
        let (_, analytic) = grape_gradient(&model, &pulse, Gate::Two).unwrap();
        let probe = hqca_gradient(&spect, &pulse, Gate::Two, RotationModel::Ideal, 1).unwrap();
        let cos = probe.cosine(&analytic);
        assert!(cos > 0.99, "pulse {t}: cosine {cos}");
    }
}

#[test]
fn gate_one_probe_is_an_ascent_direction_of_the_measured_quality() {
    // Gate 1 detection takes line magnitudes, which is phase-insensitive
    // and therefore a different functional from the trace overlap; the
    // probe must still point uphill for the quality actually measured.
    let spect = flat_spect(0.0, 4);
    for t in 0..3 {
        let pulse = random_pulse(16, 5.0, 300 + t, 7);
        let grad = hqca_gradient(&spect, &pulse, Gate::One, RotationModel::Ideal, 1).unwrap();
        let norm = grad.norm();
        assert!(norm > 1e-9, "pulse {t}: degenerate gradient");
        let before = spect.true_quality(&pulse, Gate::One).unwrap();
        let mut stepped = pulse.clone();
        let eps = 1e-3 / norm;
        spinloop_core::pulse_lib::update_pulse(&mut stepped, &grad.gx, &grad.gy, eps).unwrap();
        let after = spect.true_quality(&stepped, Gate::One).unwrap();
        assert!(after > before, "pulse {t}: step went downhill ({before} -> {after})");
    }
}

#[test]
fn per_axis_gradients_assemble_the_combined_estimate() {
    // The split-axis entry points must draw the same noise streams as the
    // combined call, so the decomposition is exact even with noise on.
    let spect = flat_spect(0.07, 31);
    let pulse = random_pulse(12, 4.0, 55, 3);

    let combined = hqca_gradient(&spect, &pulse, Gate::Two, RotationModel::Ideal, 7).unwrap();
    let x = hqca_gradient_axis(&spect, &pulse, Gate::Two, RotationModel::Ideal, 7, Axis::X).unwrap();
    let y = hqca_gradient_axis(&spect, &pulse, Gate::Two, RotationModel::Ideal, 7, Axis::Y).unwrap();
    for k in 0..12 {
        assert_eq!(combined.gx[k].to_bits(), x[k].to_bits());
        assert_eq!(combined.gy[k].to_bits(), y[k].to_bits());
    }

    let basis = make_slepian_basis(12, 0.2, 5).unwrap();
    let fd_combined = fd_gradient(&spect, &pulse, Gate::Two, &basis, 20.0, 7).unwrap();
    let fd_x = fd_gradient_axis(&spect, &pulse, Gate::Two, &basis, 20.0, 7, Axis::X).unwrap();
    let fd_y = fd_gradient_axis(&spect, &pulse, Gate::Two, &basis, 20.0, 7, Axis::Y).unwrap();
    for k in 0..12 {
        assert_eq!(fd_combined.gx[k].to_bits(), fd_x[k].to_bits());
        assert_eq!(fd_combined.gy[k].to_bits(), fd_y[k].to_bits());
    }
}

#[test]
fn learning_rate_bands_halve_at_the_documented_thresholds() {
    let c0 = 200.0;
    assert_eq!(learning_rate_schedule(c0, 0.50), 200.0);
    assert_eq!(learning_rate_schedule(c0, 0.9499), 200.0);
    assert_eq!(learning_rate_schedule(c0, 0.95), 100.0);
    assert_eq!(learning_rate_schedule(c0, 0.9699), 100.0);
    assert_eq!(learning_rate_schedule(c0, 0.97), 50.0);
    assert_eq!(learning_rate_schedule(c0, 0.9799), 50.0);
    assert_eq!(learning_rate_schedule(c0, 0.98), 25.0);
    assert_eq!(learning_rate_schedule(c0, 0.999), 25.0);
}

#[test]
fn zero_iteration_budget_records_only_the_initial_point() {
    let spect = flat_spect(0.0, 1);
    let model = ModelSpec::ideal(SpinSystem::new(72.0, 0.0, -14.5));
    let config = OptimizerConfig { max_iters: 0, ..OptimizerConfig::default() };
    let initial = random_pulse(10, 3.0, 1, 0);
    let run = spinloop_core::optimizers::run_optimization(
        &spect,
        &Method::Grape(model.clone()),
        &config,
        Gate::Two,
        &initial,
    )
    .unwrap();
    assert_eq!(run.records.len(), 1);
    assert_eq!(run.records[0].iteration, 0);
    assert_eq!(run.experiments, 0);
    assert_relative_eq!(
        run.records[0].fidelity,
        model_quality(&model, &initial, Gate::Two).unwrap(),
        epsilon = 1e-12
    );
}

#[test]
fn plateau_stop_fires_after_the_window() {
    // A vanishing learning rate freezes the pulse; the five-iteration
    // plateau rule must then end the run at exactly the window length.
    let spect = flat_spect(0.0, 1);
    let model = ModelSpec::ideal(SpinSystem::new(72.0, 0.0, -14.5));
    let config = OptimizerConfig {
        learning_rate_c0: 1e-12,
        max_iters: 50,
        ..OptimizerConfig::default()
    };
    let run = spinloop_core::optimizers::run_optimization(
        &spect,
        &Method::Grape(model),
        &config,
        Gate::Two,
        &random_pulse(10, 3.0, 2, 1),
    )
    .unwrap();
    assert_eq!(run.records.last().unwrap().iteration, config.stop_window);
    assert_eq!(run.records.len(), config.stop_window + 1);
}

#[test]
fn experiment_budget_halts_closed_loop_runs() {
    let spect = flat_spect(0.0, 9);
    let config = OptimizerConfig {
        learning_rate_c0: 10.0,
        max_iters: 10,
        stop_window: 50, // keep the plateau rule out of the way
        budget: Some(800),
        ..OptimizerConfig::default()
    };
    let method = Method::Hqca { rotation: RotationModel::Ideal };
    let initial = ControlPulse::square(2.0, 100, 3.0, 60.0).unwrap();
    let run =
        spinloop_core::optimizers::run_optimization(&spect, &method, &config, Gate::Two, &initial)
            .unwrap();
    // 100 segments cost 400 experiments per iteration: two gradient steps
    // fit, the third is refused and recorded.
    assert_eq!(run.experiments, 800);
    let last = run.records.last().unwrap();
    assert_eq!(last.iteration, 3);
    assert!(last.note.as_deref().unwrap_or("").contains("stopped"));
    assert_eq!(run.records[2].cumulative_experiments, 800);
}

#[test]
fn closed_loop_records_carry_both_fidelity_series() {
    let spect = flat_spect(0.07, 21);
    let config = OptimizerConfig {
        learning_rate_c0: 50.0,
        max_iters: 4,
        stop_window: 50,
        ..OptimizerConfig::default()
    };
    let method = Method::Hqca { rotation: RotationModel::Ideal };
    let initial = random_pulse(20, 4.0, 3, 2);
    let run =
        spinloop_core::optimizers::run_optimization(&spect, &method, &config, Gate::Two, &initial)
            .unwrap();
    assert_eq!(run.records.len(), 5);
    for rec in &run.records {
        let exact = rec.true_fidelity.expect("closed-loop records carry the exact series");
        // Noisy mean of five repeats stays within a few noise widths.
        assert!((rec.fidelity - exact).abs() < 5.0 * 0.07);
    }
    // The recorded learning rate is the schedule applied to the monitor
    // series of the previous iteration (exact series by default).
    for q in 1..run.records.len() {
        let expect = learning_rate_schedule(
            config.learning_rate_c0,
            run.records[q - 1].true_fidelity.unwrap(),
        );
        assert_eq!(run.records[q].learning_rate, expect);
    }
}

#[test]
fn measured_monitor_drives_schedule_from_the_noisy_series() {
    let spect = flat_spect(0.14, 77);
    let config = OptimizerConfig {
        learning_rate_c0: 50.0,
        max_iters: 4,
        stop_window: 50,
        monitor: MonitorSource::Measured,
        ..OptimizerConfig::default()
    };
    let method = Method::Hqca { rotation: RotationModel::Ideal };
    let run = spinloop_core::optimizers::run_optimization(
        &spect,
        &method,
        &config,
        Gate::Two,
        &random_pulse(20, 4.0, 4, 3),
    )
    .unwrap();
    for q in 1..run.records.len() {
        let expect =
            learning_rate_schedule(config.learning_rate_c0, run.records[q - 1].fidelity);
        assert_eq!(run.records[q].learning_rate, expect);
    }
}

#[test]
fn optimization_runs_are_deterministic() {
    let config = OptimizerConfig {
        learning_rate_c0: 80.0,
        max_iters: 6,
        stop_window: 50,
        ..OptimizerConfig::default()
    };
    let method = Method::Hqca { rotation: RotationModel::Ideal };
    let initial = random_pulse(20, 4.0, 5, 4);
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let spect = flat_spect(0.07, 4242);
            spinloop_core::optimizers::run_optimization(
                &spect, &method, &config, Gate::Two, &initial,
            )
            .unwrap()
        })
        .collect();
    assert_eq!(runs[0].records.len(), runs[1].records.len());
    for (a, b) in runs[0].records.iter().zip(&runs[1].records) {
        assert_eq!(a.fidelity.to_bits(), b.fidelity.to_bits());
        assert_eq!(a.gradient_norm.to_bits(), b.gradient_norm.to_bits());
        assert_eq!(a.cumulative_experiments, b.cumulative_experiments);
    }
    for k in 0..20 {
        assert_eq!(runs[0].final_pulse.ux[k].to_bits(), runs[1].final_pulse.ux[k].to_bits());
        assert_eq!(runs[0].final_pulse.uy[k].to_bits(), runs[1].final_pulse.uy[k].to_bits());
    }
}

#[test]
fn open_loop_design_improves_model_fidelity_monotonically() {
    let model = ModelSpec::ideal(SpinSystem::new(72.0, 0.0, -14.5));
    let spect = flat_spect(0.0, 1);
    let config = OptimizerConfig {
        learning_rate_c0: 150.0,
        max_iters: 40,
        stop_window: 50,
        ..OptimizerConfig::default()
    };
    let run = spinloop_core::optimizers::run_optimization(
        &spect,
        &Method::Grape(model),
        &config,
        Gate::Two,
        &random_pulse(50, 2.0, 6, 5),
    )
    .unwrap();
    let first = run.records.first().unwrap().fidelity;
    let last = run.records.last().unwrap().fidelity;
    assert!(last > first + 0.2, "design made no progress: {first} -> {last}");
    // A fixed-rate ascent may overshoot locally; every such step must be
    // flagged on its record.
    for pair in run.records.windows(2) {
        if pair[1].fidelity < pair[0].fidelity - 1e-12 {
            let note = pair[1].note.as_deref().unwrap_or("");
            assert!(
                note.contains("decreased"),
                "unflagged decrease between iterations {} and {}",
                pair[0].iteration,
                pair[1].iteration
            );
        }
    }
}

#[test]
fn method_metadata_matches_costs() {
    let model = ModelSpec::ideal(SpinSystem::new(72.0, 0.0, -14.5));
    assert_eq!(Method::Grape(model).components_per_iteration(100), 0);
    let hqca = Method::Hqca { rotation: RotationModel::Ideal };
    assert_eq!(hqca.components_per_iteration(100), 200);
    assert_eq!(hqca.name(), "hqca");
    let basis = make_slepian_basis(100, 0.12, 24).unwrap();
    let fd = Method::Fd { basis, delta_u: 20.0 };
    assert_eq!(fd.components_per_iteration(100), 48);
    assert_eq!(fd.name(), "fd");
}

#[test]
fn optimizer_config_validation() {
    let mut cfg = OptimizerConfig::default();
    assert!(cfg.validate().is_ok());
    cfg.learning_rate_c0 = 0.0;
    assert!(cfg.validate().is_err());
    cfg.learning_rate_c0 = f64::NAN;
    assert!(cfg.validate().is_err());
    cfg.learning_rate_c0 = 60.0;
    cfg.stop_window = 0;
    assert!(cfg.validate().is_err());
    cfg.stop_window = 5;
    cfg.fidelity_repeats = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn campaigns_aggregate_independent_trials() {
    let ensemble = EnsembleSpec::new(10.0, 5, 20.0).unwrap();
    let build = |seed: u64| {
        VirtualSpectrometer::new(
            SpinSystem::new(72.0, 0.0, -14.5),
            Some(&ensemble),
            TransferFunction::flat(),
            MeasurementModel { sigma: 0.07, seed, averages: 1 },
        )
    };
    let method = Method::Hqca { rotation: RotationModel::Ideal };
    let config = OptimizerConfig {
        learning_rate_c0: 80.0,
        max_iters: 5,
        stop_window: 50,
        ..OptimizerConfig::default()
    };
    let initial = random_pulse(16, 4.0, 8, 6);
    let result =
        run_campaign(&build, &method, &config, Gate::Two, &initial, 3, 777).unwrap();
    assert_eq!(result.outcomes.len(), 3);

    // Distinct derived seeds, reproducible aggregate.
    let seeds: Vec<u64> = result.outcomes.iter().map(|o| o.seed).collect();
    assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2]);
    let (mean, std) = mean_std(&result.final_fidelities());
    assert_relative_eq!(result.mean_final, mean, epsilon = 1e-15);
    assert_relative_eq!(result.std_final, std, epsilon = 1e-15);

    let again = run_campaign(&build, &method, &config, Gate::Two, &initial, 3, 777).unwrap();
    assert_eq!(result.mean_final.to_bits(), again.mean_final.to_bits());

    // A different master seed reshuffles the noise.
    let other = run_campaign(&build, &method, &config, Gate::Two, &initial, 3, 778).unwrap();
    assert!(other.mean_final != result.mean_final);

    assert!(run_campaign(&build, &method, &config, Gate::Two, &initial, 0, 777).is_err());
}

#[test]
fn mean_std_hand_checks() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_relative_eq!(m, 2.5, epsilon = 1e-15);
    // Sample standard deviation with n - 1: sqrt(5/3).
    assert_relative_eq!(s, (5.0_f64 / 3.0).sqrt(), epsilon = 1e-12);
    let (m1, s1) = mean_std(&[7.0]);
    assert_eq!(m1, 7.0);
    assert_eq!(s1, 0.0);
}
