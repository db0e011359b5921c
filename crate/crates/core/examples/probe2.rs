//! Scratch campaign-calibration probe; not part of the test suite.

use std::time::Instant;

use spinloop_core::campaign::run_campaign;
use spinloop_core::optimizers::{
    fd_gradient, hqca_gradient, Method, ModelSpec, OptimizerConfig,
};
use spinloop_core::pulse_lib::{
    make_linear_basis, make_slepian_basis, ControlPulse, RotationModel,
};
use spinloop_core::spin_model::{EnsembleSpec, SpinSystem};
use spinloop_core::virtual_spectrometer::{
    synthesize_transfer, Gate, MeasurementModel, TransferKind, VirtualSpectrometer,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("time");

    let sys = if std::env::var("SYS").map(|v| v == "66").unwrap_or(false) {
        SpinSystem::new(66.0, 26.0, -14.5)
    } else {
        SpinSystem::new(72.0, 0.0, -14.5)
    };
    let ens = EnsembleSpec::with_defaults(10.0).unwrap();
    let transfer = synthesize_transfer(TransferKind::MeasuredLike, 130.0).unwrap();
    let initial = ControlPulse::square(2.0, 100, 1.0, 60.0).unwrap();

    if mode == "grape-scan" {
        // args: grape-scan <c0> <max_iters> [amp] [kind] [stop_threshold]
        let c0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300.0);
        let max_iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(200);
        let amp: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5.0);
        let kind = args.get(5).map(String::as_str).unwrap_or("random");
        let stop: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.01);
        let init = match kind {
            "square" => ControlPulse::square(2.0, 100, amp, 60.0).unwrap(),
            _ => spinloop_core::optimizers::checks::random_pulse(100, amp, 2024, 0),
        };
        let spect = VirtualSpectrometer::new(
            sys,
            Some(&ens),
            transfer.clone(),
            MeasurementModel::noiseless(3),
        )
        .unwrap();
        let method = Method::Grape(ModelSpec {
            system: sys,
            ensemble: Some(ens.clone()),
            design_transfer: Some(transfer.clone()),
        });
        let config = OptimizerConfig {
            learning_rate_c0: c0,
            max_iters,
            stop_threshold: stop,
            ..OptimizerConfig::default()
        };
        let t0 = Instant::now();
        let run = spinloop_core::optimizers::run_optimization(
            &spect, &method, &config, Gate::Two, &init,
        )
        .unwrap();
        let recs = &run.records;
        let n = recs.len();
        let marks: Vec<String> = [0, 5, 10, 20, 40, 80, 120, 160, 200]
            .iter()
            .filter(|&&i| i < n)
            .map(|&i| format!("F{}={:.4}", i, recs[i].fidelity))
            .collect();
        println!(
            "grape {kind} amp={amp} c0={c0}: iters={} final={:.4} {} [{:?}]",
            recs.last().unwrap().iteration,
            recs.last().unwrap().fidelity,
            marks.join(" "),
            t0.elapsed()
        );
        let notes: Vec<&String> = recs.iter().filter_map(|r| r.note.as_ref()).collect();
        if !notes.is_empty() {
            println!("  notes: {:?}", &notes[..notes.len().min(3)]);
        }
        return;
    }

    if mode == "time" {
        let spect = VirtualSpectrometer::new(
            sys,
            Some(&ens),
            transfer.clone(),
            MeasurementModel { sigma: 0.03, seed: 42, averages: 1 },
        )
        .unwrap();
        let t0 = Instant::now();
        let g = hqca_gradient(&spect, &initial, Gate::Two, RotationModel::TwoTone { duration_ns: 200.0 }, 1)
            .unwrap();
        println!("hqca_gradient (two-tone, 21 members, M=100): {:?} |g|={:.3e}", t0.elapsed(), g.norm());

        let lin = make_linear_basis(100).unwrap();
        let t0 = Instant::now();
        let g = fd_gradient(&spect, &initial, Gate::Two, &lin, 1.0, 1).unwrap();
        println!("fd_gradient linear (21 members, M=100): {:?} |g|={:.3e}", t0.elapsed(), g.norm());

        let slep = make_slepian_basis(100, 0.12, 24).unwrap();
        let t0 = Instant::now();
        let g = fd_gradient(&spect, &initial, Gate::Two, &slep, 1.0, 1).unwrap();
        println!("fd_gradient slepian-24 (21 members, M=100): {:?} |g|={:.3e}", t0.elapsed(), g.norm());
        return;
    }

    if mode == "flowcheck" {
        // args: flowcheck <c0> <max_iters> <fwhm> [rot]
        use spinloop_core::optimizers::{grape_gradient, learning_rate_schedule};
        use spinloop_core::pulse_lib::update_pulse;
        let c0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300.0);
        let max_iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
        let fwhm: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(130.0);
        let rot = if args.get(5).map(String::as_str) == Some("twotone") {
            RotationModel::TwoTone { duration_ns: 200.0 }
        } else {
            RotationModel::Ideal
        };
        let tf = synthesize_transfer(TransferKind::MeasuredLike, fwhm).unwrap();
        let spect = VirtualSpectrometer::new(
            sys,
            Some(&ens),
            tf.clone(),
            MeasurementModel::noiseless(7),
        )
        .unwrap();
        let truth = ModelSpec {
            system: sys,
            ensemble: Some(ens.clone()),
            design_transfer: Some(tf.clone()),
        };
        let mut pulse = spinloop_core::optimizers::checks::random_pulse(100, 5.0, 2024, 0);
        let mut f_prev = spect.true_quality(&pulse, Gate::Two).unwrap();
        for q in 1..=max_iters {
            let gm = hqca_gradient(&spect, &pulse, Gate::Two, rot, q as u64).unwrap();
            let (_, gt) = grape_gradient(&truth, &pulse, Gate::Two).unwrap();
            let dot: f64 = gm
                .gx
                .iter()
                .zip(&gt.gx)
                .chain(gm.gy.iter().zip(&gt.gy))
                .map(|(a, b)| a * b)
                .sum();
            let cosine = dot / (gm.norm() * gt.norm());
            let rate = learning_rate_schedule(c0, f_prev);
            update_pulse(&mut pulse, &gm.gx, &gm.gy, rate).unwrap();
            let f = spect.true_quality(&pulse, Gate::Two).unwrap();
            if q % 5 == 0 || f < f_prev {
                println!(
                    "q={q:3} F={f:.4} dF={:+.4} cos(g_meas,g_true)={cosine:+.3} |gm|={:.2e} |gt|={:.2e}",
                    f - f_prev,
                    gm.norm(),
                    gt.norm()
                );
            }
            f_prev = f;
        }
        return;
    }

    if mode == "hqca-pb" {
        // args: hqca-pb <c0> <max_iters> <fwhm> [ideal]
        use spinloop_core::optimizers::{learning_rate_schedule, hqca_gradient as hg};
        use spinloop_core::pulse_lib::update_pulse;
        use spinloop_core::virtual_spectrometer::distort_adjoint;
        let c0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300.0);
        let max_iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(120);
        let fwhm: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(130.0);
        let rot = if args.get(5).map(String::as_str) == Some("ideal") {
            RotationModel::Ideal
        } else {
            RotationModel::TwoTone { duration_ns: 200.0 }
        };
        let tf = synthesize_transfer(TransferKind::MeasuredLike, fwhm).unwrap();
        let spect = VirtualSpectrometer::new(
            sys,
            Some(&ens),
            tf.clone(),
            MeasurementModel::noiseless(7),
        )
        .unwrap();
        let mut pulse = spinloop_core::optimizers::checks::random_pulse(100, 5.0, 2024, 0);
        let mut series = vec![spect.true_quality(&pulse, Gate::Two).unwrap()];
        for q in 1..=max_iters {
            let g = hg(&spect, &pulse, Gate::Two, rot, q as u64).unwrap();
            let packed = ControlPulse::new(pulse.dt, g.gx.clone(), g.gy.clone(), f64::INFINITY)
                .unwrap();
            let pulled = distort_adjoint(&packed, &tf).unwrap();
            let rate = learning_rate_schedule(c0, *series.last().unwrap());
            update_pulse(&mut pulse, &pulled.ux, &pulled.uy, rate).unwrap();
            series.push(spect.true_quality(&pulse, Gate::Two).unwrap());
        }
        let txt: Vec<String> = series.iter().map(|f| format!("{f:.3}")).collect();
        println!("hqca-pb c0={c0} fwhm={fwhm}: final={:.4}", series.last().unwrap());
        println!("  series: {}", txt.join(" "));
        return;
    }

    // mode == "campaign": short campaigns for calibration.
    // args: campaign <method> <sigma> <c0> <delta_u> <trials> <max_iters> [fwhm]
    let method_name = args.get(2).map(String::as_str).unwrap_or("hqca");
    let sigma: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.03);
    let c0: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(60.0);
    let delta_u: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let trials: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(3);
    let max_iters: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(80);
    let fwhm: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(130.0);
    let init_amp: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let init_kind = args.get(10).map(String::as_str).unwrap_or("square");
    let stop: f64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let max_amp: f64 = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(60.0);
    let initial = match init_kind {
        "random" => spinloop_core::optimizers::checks::random_pulse(100, init_amp, 2024, 0),
        "sqjit" => {
            let mut p = ControlPulse::square(2.0, 100, init_amp, 1e6).unwrap();
            let j = spinloop_core::optimizers::checks::random_pulse(100, 0.5, 2024, 0);
            for i in 0..100 {
                p.ux[i] += j.ux[i];
                p.uy[i] += j.uy[i];
            }
            p
        }
        "xysquare" => {
            let a = init_amp / std::f64::consts::SQRT_2;
            ControlPulse::new(2.0, vec![a; 100], vec![a; 100], max_amp).unwrap()
        }
        _ => ControlPulse::square(2.0, 100, init_amp, max_amp).unwrap(),
    };

    let method = match method_name {
        "hqca" => Method::Hqca { rotation: RotationModel::TwoTone { duration_ns: 200.0 } },
        "hqca-ideal" => Method::Hqca { rotation: RotationModel::Ideal },
        "fd-linear" => Method::Fd { basis: make_linear_basis(100).unwrap(), delta_u },
        "fd-slepian" => Method::Fd { basis: make_slepian_basis(100, 0.12, 24).unwrap(), delta_u },
        "grape" => Method::Grape(ModelSpec {
            system: sys,
            ensemble: Some(ens.clone()),
            design_transfer: if fwhm <= 0.0 {
                None
            } else {
                Some(synthesize_transfer(TransferKind::MeasuredLike, fwhm).unwrap())
            },
        }),
        other => panic!("unknown method {other}"),
    };
    let config = OptimizerConfig {
        learning_rate_c0: c0,
        max_iters,
        stop_threshold: stop,
        ..OptimizerConfig::default()
    };
    let ens2 = ens.clone();
    let mut transfer2 = if fwhm <= 0.0 {
        spinloop_core::virtual_spectrometer::TransferFunction::flat()
    } else {
        synthesize_transfer(TransferKind::MeasuredLike, fwhm).unwrap()
    };
    if std::env::var("NOPHASE").is_ok() {
        let csv = transfer2.to_csv();
        let stripped: String = csv
            .lines()
            .map(|l| {
                if l.starts_with('#') {
                    l.to_string()
                } else {
                    let c: Vec<&str> = l.split(',').collect();
                    let re: f64 = c[1].parse().unwrap();
                    let im: f64 = c[2].parse().unwrap();
                    format!("{},{:.16e},0.0", c[0], (re * re + im * im).sqrt())
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        transfer2 =
            spinloop_core::virtual_spectrometer::TransferFunction::from_csv(&stripped).unwrap();
    }
    let t0 = Instant::now();
    let result = run_campaign(
        |seed| {
            VirtualSpectrometer::new(
                sys,
                Some(&ens2),
                transfer2.clone(),
                MeasurementModel { sigma, seed, averages: 1 },
            )
        },
        &method,
        &config,
        Gate::Two,
        &initial,
        trials,
        777,
    )
    .unwrap();
    println!(
        "{method_name} sigma={sigma} c0={c0} du={delta_u} fwhm={fwhm}: mean={:.4} std={:.4} [{:?}]",
        result.mean_final,
        result.std_final,
        t0.elapsed()
    );
    for o in &result.outcomes {
        let f10 = o.records.get(10).map(|r| r.fidelity).unwrap_or(f64::NAN);
        let f25 = o.records.get(25).map(|r| r.fidelity).unwrap_or(f64::NAN);
        let f50 = o.records.get(50).map(|r| r.fidelity).unwrap_or(f64::NAN);
        println!(
            "  trial {}: final={:.4} iters={} exp={} F10={:.3} F25={:.3} F50={:.3}",
            o.trial, o.final_fidelity, o.iterations, o.experiments, f10, f25, f50
        );
    }
    if std::env::var("TRACE").is_ok() {
        let o = &result.outcomes[0];
        let series: Vec<String> =
            o.records.iter().map(|r| format!("{:.3}", r.fidelity)).collect();
        println!("  trial 0 series: {}", series.join(" "));
        let gseries: Vec<String> = o
            .records
            .iter()
            .map(|r| format!("{:.4}", r.gradient_norm))
            .collect();
        println!("  trial 0 |g|: {}", gseries.join(" "));
    }
}
