//! Parallel-vs-sequential throughput on the two hot paths: ensemble
//! fidelity evaluation and a closed-loop gradient's measurement sweep.
//!
//! Run with `cargo bench -p spinloop-core`; add
//! `--no-default-features` to measure the purely sequential build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use spinloop_core::optimizers::hqca_gradient;
use spinloop_core::propagator::{ensemble_fidelity, ensemble_fidelity_seq};
use spinloop_core::pulse_lib::{ControlPulse, RotationModel};
use spinloop_core::spin_model::{lorentzian_ensemble, EnsembleSpec, SpinSystem};
use spinloop_core::virtual_spectrometer::{
    gate_targets, synthesize_transfer, Gate, MeasurementModel, TransferKind, VirtualSpectrometer,
};

fn bench_ensemble_fidelity(c: &mut Criterion) {
    let sys = SpinSystem::new(66.0, 26.0, -14.5);
    let spec = EnsembleSpec::new(10.0, 21, 40.0).unwrap();
    let members = lorentzian_ensemble(&spec, &sys);
    let pulse = ControlPulse::square(2.0, 100, 0.5, 25.0).unwrap();
    let (rho_i, rho_f) = gate_targets(&sys, Gate::Two);

    let mut group = c.benchmark_group("ensemble_fidelity");
    group.bench_function(BenchmarkId::new("members", "parallel"), |b| {
        b.iter(|| ensemble_fidelity(&members, &pulse, &rho_i, &rho_f).unwrap())
    });
    group.bench_function(BenchmarkId::new("members", "sequential"), |b| {
        b.iter(|| ensemble_fidelity_seq(&members, &pulse, &rho_i, &rho_f).unwrap())
    });
    group.finish();
}

fn bench_hqca_sweep(c: &mut Criterion) {
    let sys = SpinSystem::new(66.0, 26.0, -14.5);
    let spec = EnsembleSpec::new(10.0, 21, 40.0).unwrap();
    let transfer = synthesize_transfer(TransferKind::MeasuredLike, 130.0).unwrap();
    let spect = VirtualSpectrometer::new(
        sys,
        Some(&spec),
        transfer,
        MeasurementModel { sigma: 0.03, seed: 11, averages: 1 },
    )
    .unwrap();
    let pulse = ControlPulse::square(2.0, 100, 0.5, 25.0).unwrap();

    let mut group = c.benchmark_group("hqca_gradient");
    group.sample_size(10);
    group.bench_function("m100_n21", |b| {
        b.iter(|| {
            hqca_gradient(&spect, &pulse, Gate::Two, RotationModel::default(), 1).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_ensemble_fidelity, bench_hqca_sweep);
criterion_main!(benches);
