//! Scratch open-loop design / proton calibration probe; not part of the test suite.

use std::time::Instant;

use spinloop_core::optimizers::{run_optimization, Method, ModelSpec, OptimizerConfig};
use spinloop_core::pulse_lib::{make_slepian_basis, ControlPulse};
use spinloop_core::spin_model::{EnsembleSpec, SpinSystem};
use spinloop_core::virtual_spectrometer::{
    synthesize_transfer, Gate, MeasurementModel, TransferFunction, TransferKind,
    VirtualSpectrometer,
};

fn spect(
    sys: SpinSystem,
    ens: &EnsembleSpec,
    tf: &TransferFunction,
) -> VirtualSpectrometer {
    VirtualSpectrometer::new(sys, Some(ens), tf.clone(), MeasurementModel::noiseless(1))
        .unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("design");
    let ens = EnsembleSpec::with_defaults(10.0).unwrap();
    let flat = TransferFunction::flat();
    let t130 = synthesize_transfer(TransferKind::MeasuredLike, 130.0).unwrap();
    let t70 = synthesize_transfer(TransferKind::MeasuredLike, 70.0).unwrap();
    let truth_sys = SpinSystem::new(66.0, 26.0, -14.5);

    if mode == "design" {
        // args: design <A> <B> <flat|130> <1|2> <c0> <iters> [rand|square]
        let a: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(66.0);
        let b: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(26.0);
        let tf_name = args.get(4).map(String::as_str).unwrap_or("130");
        let gate = if args.get(5).map(String::as_str) == Some("1") { Gate::One } else { Gate::Two };
        let c0: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(200.0);
        let iters: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(600);
        let init_kind = args.get(8).map(String::as_str).unwrap_or("rand");

        let model_sys = SpinSystem::new(a, b, -14.5);
        let design_tf = if tf_name == "flat" { flat.clone() } else { t130.clone() };
        let method = Method::Grape(ModelSpec {
            system: model_sys,
            ensemble: Some(ens.clone()),
            design_transfer: if tf_name == "flat" { None } else { Some(design_tf.clone()) },
        });
        let config = OptimizerConfig {
            learning_rate_c0: c0,
            max_iters: iters,
            stop_threshold: -1e9, // never stop on plateau
            ..OptimizerConfig::default()
        };
        let init = match init_kind {
            "square" => ControlPulse::square(2.0, 100, 3.0, 60.0).unwrap(),
            _ => spinloop_core::optimizers::checks::random_pulse(100, 3.0, 2024, 0),
        };
        // Design spectrometer = the model's own condition (used only for run bookkeeping).
        let own = spect(model_sys, &ens, &design_tf);
        let t0 = Instant::now();
        let run = run_optimization(&own, &method, &config, gate, &init).unwrap();
        let pulse = &run.final_pulse;
        let model_f = run.records.last().unwrap().fidelity;
        // Own-condition simulated quality (design condition == evaluation condition).
        let f_own = own.true_quality(pulse, gate).unwrap();
        // Cross evaluations.
        let f_truth130 = spect(truth_sys, &ens, &t130).true_quality(pulse, gate).unwrap();
        let f_truth70 = spect(truth_sys, &ens, &t70).true_quality(pulse, gate).unwrap();
        let f_own70 = spect(model_sys, &ens, &t70).true_quality(pulse, gate).unwrap();
        let marks: Vec<String> = [50usize, 100, 200, 300, 400, 500, 600]
            .iter()
            .filter(|&&i| i < run.records.len())
            .map(|&i| format!("F{}={:.4}", i, run.records[i].fidelity))
            .collect();
        println!(
            "design A={a} B={b} T={tf_name} gate={:?} c0={c0} iters={iters} init={init_kind}:",
            gate
        );
        println!(
            "  model={model_f:.4} own={f_own:.4} truth(66,26)@130={f_truth130:.4} truth@70={f_truth70:.4} own-sys@70={f_own70:.4}"
        );
        println!("  {} [{:?}]", marks.join(" "), t0.elapsed());
        return;
    }

    if mode == "proton" {
        // args: proton [c0] [du] — noiseless FD-Slepian, fixed stopping rule,
        // base (66,26) vs extra proton (0,4) and (4,0).
        let c0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300.0);
        let du: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20.0);
        let basis = make_slepian_basis(100, 0.12, 24).unwrap();
        let config = OptimizerConfig {
            learning_rate_c0: c0,
            max_iters: 80,
            ..OptimizerConfig::default()
        };
        let init = ControlPulse::square(2.0, 100, 3.0, 60.0).unwrap();
        for (label, sys) in [
            ("base (66,26)", truth_sys),
            ("extra (A2=0,B2=4)", truth_sys.with_extra_proton(0.0, 4.0)),
            ("extra (A2=4,B2=0)", truth_sys.with_extra_proton(4.0, 0.0)),
        ] {
            let s = spect(sys, &ens, &t130);
            let method = Method::Fd { basis: basis.clone(), delta_u: du };
            let t0 = Instant::now();
            let run = run_optimization(&s, &method, &config, Gate::Two, &init).unwrap();
            let f = s.true_quality(&run.final_pulse, Gate::Two).unwrap();
            println!(
                "proton {label}: F={f:.5} iters={} [{:?}]",
                run.records.last().unwrap().iteration,
                t0.elapsed()
            );
        }
        return;
    }

    eprintln!("unknown mode {mode}");
}
