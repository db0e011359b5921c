//! Gradient-ascent pulse optimization: one model-based open-loop method and
//! two measurement-based closed-loop methods, sharing a single update loop.
//!
//! * `Grape` - analytic ensemble gradient of a device model; consumes no
//!   experiments. The model may deviate from the instrument (that is the
//!   point: open-loop quality is bounded by model quality).
//! * `Hqca` - per-segment gradient from pairs of experiments with `+/- pi/2`
//!   electron rotations spliced in after the segment:
//!   `g_m = 2 pi dt (F+ - F-)` per MHz of amplitude.
//! * `Fd` - central finite differences along a basis of pulse-shaped
//!   directions, two experiments per basis vector and channel.
//!
//! All closed-loop measurements derive their noise streams from
//! `(iteration, component)` keys, so trajectories are bit-identical across
//! serial and parallel execution and across reruns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::propagator::{analytic_gradient_ensemble, ensemble_fidelity, GradientVector};
use crate::pulse_lib::{
    perturb_along, update_pulse, Axis, BasisSet, ControlPulse, RotationModel, Sign,
};
use crate::spin_model::{lorentzian_ensemble, EnsembleSpec, SpinSystem};
use crate::virtual_spectrometer::{
    charge_budget, control_quality, distort, distort_adjoint, gate_targets, Gate,
    ExperimentBudget, StreamKey, TransferFunction, VirtualSpectrometer,
};

const TWO_PI: f64 = std::f64::consts::TAU;

/// Noise-stream namespace for fidelity-monitor repeats, far above any
/// gradient component index.
pub const FID_STREAM_BASE: u64 = 1 << 40;

/// Stream component of an HQCA measurement: four per segment.
pub fn hqca_component(m: usize, axis: Axis, sign: Sign) -> u64 {
    4 * (m as u64 - 1) + 2 * u64::from(axis == Axis::Y) + u64::from(sign == Sign::Minus)
}

/// Stream component of a finite-difference measurement; `offset` is the
/// basis size of the channels scanned before this one.
pub fn fd_component(offset: usize, k: usize, sign: Sign) -> u64 {
    2 * (offset + k) as u64 + u64::from(sign == Sign::Minus)
}

/// Device model available to the open-loop optimizer.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub system: SpinSystem,
    pub ensemble: Option<EnsembleSpec>,
    /// Transfer function assumed during design; `None` models an ideal
    /// chain.
    pub design_transfer: Option<TransferFunction>,
}

impl ModelSpec {
    pub fn ideal(system: SpinSystem) -> Self {
        ModelSpec { system, ensemble: None, design_transfer: None }
    }

    fn members(&self) -> Vec<(SpinSystem, f64)> {
        match &self.ensemble {
            Some(spec) => lorentzian_ensemble(spec, &self.system),
            None => vec![(self.system, 1.0)],
        }
    }
}

/// Gradient estimation strategy.
#[derive(Debug, Clone)]
pub enum Method {
    Grape(ModelSpec),
    Hqca {
        rotation: RotationModel,
    },
    Fd {
        basis: BasisSet,
        /// Probe displacement along each basis vector, in MHz.
        delta_u: f64,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Grape(_) => "grape",
            Method::Hqca { .. } => "hqca",
            Method::Fd { .. } => "fd",
        }
    }

    /// Gradient components measured per iteration (basis vectors times
    /// channels); zero for the open-loop method.
    pub fn components_per_iteration(&self, segments: usize) -> usize {
        match self {
            Method::Grape(_) => 0,
            Method::Hqca { .. } => 2 * segments,
            Method::Fd { basis, .. } => 2 * basis.len(),
        }
    }
}

/// Which fidelity series drives the stop rule and the learning-rate
/// schedule for closed-loop runs.
///
/// The sweep campaigns inject measurement noise into the gradient probes
/// while the convergence bookkeeping tracks the simulator's exact quality;
/// `Measured` instead feeds the recorded noisy series back into the loop,
/// which is what a run on real hardware would have to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorSource {
    TrueFidelity,
    Measured,
}

/// Shared optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Base learning rate (MHz of amplitude per unit gradient).
    pub learning_rate_c0: f64,
    pub max_iters: usize,
    /// Plateau window for the stop rule.
    pub stop_window: usize,
    /// Stop once the fidelity gain over the window drops below this.
    pub stop_threshold: f64,
    /// Quality-monitor measurements averaged per iteration (not charged to
    /// the experiment budget; the monitor rides along with the reference
    /// experiments).
    pub fidelity_repeats: usize,
    /// Series consulted by the stop rule and the rate schedule.
    pub monitor: MonitorSource,
    /// Optional cap on gradient experiments.
    pub budget: Option<u64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate_c0: 60.0,
            max_iters: 80,
            stop_window: 5,
            stop_threshold: 0.01,
            fidelity_repeats: 5,
            monitor: MonitorSource::TrueFidelity,
            budget: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate_c0 > 0.0 && self.learning_rate_c0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate_c0 must be finite and > 0, got {}",
                self.learning_rate_c0
            )));
        }
        if self.stop_window == 0 {
            return Err(Error::InvalidArgument("stop_window must be >= 1".into()));
        }
        if self.fidelity_repeats == 0 {
            return Err(Error::InvalidArgument("fidelity_repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of an optimization trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Recorded quality: mean of the repeated noisy measurements for
    /// closed-loop methods, model fidelity for the open-loop method.
    pub fidelity: f64,
    /// Simulator's exact quality of the same pulse (closed-loop runs only;
    /// diagnostic, not available on hardware).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub true_fidelity: Option<f64>,
    pub gradient_norm: f64,
    pub learning_rate: f64,
    /// Budgeted experiments consumed so far.
    pub cumulative_experiments: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// Completed optimization: trajectory, final pulse, experiments consumed.
#[derive(Debug, Clone)]
pub struct OptimizationRun {
    pub records: Vec<IterationRecord>,
    pub final_pulse: ControlPulse,
    pub experiments: u64,
}

/// Fidelity-dependent learning rate: the base rate is halved as the quality
/// crosses 0.95, 0.97, and 0.98.
pub fn learning_rate_schedule(c0: f64, fidelity: f64) -> f64 {
    if fidelity < 0.95 {
        c0
    } else if fidelity < 0.97 {
        0.5 * c0
    } else if fidelity < 0.98 {
        0.25 * c0
    } else {
        0.125 * c0
    }
}

/// Open-loop fidelity of a pulse under a device model (with the model's
/// design transfer applied when present).
pub fn model_quality(model: &ModelSpec, pulse: &ControlPulse, gate: Gate) -> Result<f64> {
    let (rho_i, rho_f) = gate_targets(&model.system, gate);
    let played = match &model.design_transfer {
        Some(tf) => distort(pulse, tf)?,
        None => pulse.clone(),
    };
    ensemble_fidelity(&model.members(), &played, &rho_i, &rho_f)
}

/// Model fidelity and gradient with respect to the undistorted amplitudes.
/// With a design transfer the gradient is pulled back through the chain by
/// the transpose-Jacobian of the distortion.
pub fn grape_gradient(
    model: &ModelSpec,
    pulse: &ControlPulse,
    gate: Gate,
) -> Result<(f64, GradientVector)> {
    let (rho_i, rho_f) = gate_targets(&model.system, gate);
    let members = model.members();
    match &model.design_transfer {
        None => analytic_gradient_ensemble(&members, pulse, &rho_i, &rho_f),
        Some(tf) => {
            let played = distort(pulse, tf)?;
            let (f, g) = analytic_gradient_ensemble(&members, &played, &rho_i, &rho_f)?;
            let packed = ControlPulse::new(pulse.dt, g.gx, g.gy, f64::INFINITY)?;
            let pulled = distort_adjoint(&packed, tf)?;
            Ok((f, GradientVector { gx: pulled.ux, gy: pulled.uy }))
        }
    }
}

/// Measured gradient from `+/- pi/2` rotations spliced into the pulse at
/// the addressed segment's midpoint, one segment and axis at a time:
/// `g = 2 pi dt (F+ - F-)` per MHz.
pub fn hqca_gradient(
    spect: &VirtualSpectrometer,
    pulse: &ControlPulse,
    gate: Gate,
    rotation: RotationModel,
    iteration: u64,
) -> Result<GradientVector> {
    let cache =
        spect.prepare_insertions(pulse, gate, std::f64::consts::FRAC_PI_2, rotation)?;
    let m_count = pulse.segments();
    let scale = TWO_PI * pulse.dt_us();
    let per: Vec<Result<f64>> = exec::map_range(2 * m_count, |idx| {
        let m = idx / 2 + 1;
        let axis = if idx % 2 == 0 { Axis::X } else { Axis::Y };
        let mut signed = [0.0; 2];
        for (slot, sign) in [(0usize, Sign::Plus), (1, Sign::Minus)] {
            let key = StreamKey { iteration, component: hqca_component(m, axis, sign) };
            let pair = spect.measure_cached(&cache, m, axis, sign, key)?;
            signed[slot] = control_quality(pair, gate);
        }
        Ok(scale * (signed[0] - signed[1]))
    });
    let mut grad = GradientVector::zeros(m_count);
    for (idx, r) in per.into_iter().enumerate() {
        let m = idx / 2;
        let val = r?;
        if idx % 2 == 0 {
            grad.gx[m] = val;
        } else {
            grad.gy[m] = val;
        }
    }
    Ok(grad)
}

/// Single-channel variant of [`hqca_gradient`]: measures only the given
/// axis. Used by the sequential per-channel sweep in [`run_optimization`],
/// where the y-phase gradient is measured on the already x-updated pulse.
pub fn hqca_gradient_axis(
    spect: &VirtualSpectrometer,
    pulse: &ControlPulse,
    gate: Gate,
    rotation: RotationModel,
    iteration: u64,
    axis: Axis,
) -> Result<Vec<f64>> {
    let cache =
        spect.prepare_insertions(pulse, gate, std::f64::consts::FRAC_PI_2, rotation)?;
    let m_count = pulse.segments();
    let scale = TWO_PI * pulse.dt_us();
    let per: Vec<Result<f64>> = exec::map_range(m_count, |idx| {
        let m = idx + 1;
        let mut signed = [0.0; 2];
        for (slot, sign) in [(0usize, Sign::Plus), (1, Sign::Minus)] {
            let key = StreamKey { iteration, component: hqca_component(m, axis, sign) };
            let pair = spect.measure_cached(&cache, m, axis, sign, key)?;
            signed[slot] = control_quality(pair, gate);
        }
        Ok(scale * (signed[0] - signed[1]))
    });
    per.into_iter().collect()
}

/// Single-channel variant of [`fd_gradient`], mirroring
/// [`hqca_gradient_axis`] for the sequential sweep.
pub fn fd_gradient_axis(
    spect: &VirtualSpectrometer,
    pulse: &ControlPulse,
    gate: Gate,
    basis: &BasisSet,
    delta_u: f64,
    iteration: u64,
    axis: Axis,
) -> Result<Vec<f64>> {
    if basis.segments() != pulse.segments() {
        return Err(Error::DimensionMismatch(format!(
            "basis vectors cover {} segments, pulse has {}",
            basis.segments(),
            pulse.segments()
        )));
    }
    if !(delta_u > 0.0 && delta_u.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be finite and > 0, got {delta_u}"
        )));
    }
    let k_count = basis.len();
    let offset = match axis {
        Axis::X => 0usize,
        Axis::Y => k_count,
    };
    let per: Vec<Result<f64>> = exec::map_range(k_count, |k| {
        let v = &basis.vectors[k];
        let mut signed = [0.0; 2];
        for (slot, sign) in [(0usize, Sign::Plus), (1, Sign::Minus)] {
            let probe = perturb_along(pulse, v, sign.as_f64() * delta_u, axis)?;
            let key = StreamKey { iteration, component: fd_component(offset, k, sign) };
            let pair = spect.measure_pulse(&probe, gate, key)?;
            signed[slot] = control_quality(pair, gate);
        }
        Ok((signed[0] - signed[1]) / (2.0 * delta_u))
    });
    let mut channel = vec![0.0; pulse.segments()];
    for (k, r) in per.into_iter().enumerate() {
        let d = r?;
        for (g, v) in channel.iter_mut().zip(basis.vectors[k].iter()) {
            *g += d * v;
        }
    }
    Ok(channel)
}

/// Measured gradient from central finite differences along basis vectors,
/// x channel first, then y, reconstructed in amplitude space.
pub fn fd_gradient(
    spect: &VirtualSpectrometer,
    pulse: &ControlPulse,
    gate: Gate,
    basis: &BasisSet,
    delta_u: f64,
    iteration: u64,
) -> Result<GradientVector> {
    if basis.segments() != pulse.segments() {
        return Err(Error::DimensionMismatch(format!(
            "basis vectors cover {} segments, pulse has {}",
            basis.segments(),
            pulse.segments()
        )));
    }
    if !(delta_u > 0.0 && delta_u.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be finite and > 0, got {delta_u}"
        )));
    }
    let k_count = basis.len();
    let per: Vec<Result<f64>> = exec::map_range(2 * k_count, |idx| {
        let (axis, offset, k) = if idx < k_count {
            (Axis::X, 0usize, idx)
        } else {
            (Axis::Y, k_count, idx - k_count)
        };
        let v = &basis.vectors[k];
        let mut signed = [0.0; 2];
        for (slot, sign) in [(0usize, Sign::Plus), (1, Sign::Minus)] {
            let probe = perturb_along(pulse, v, sign.as_f64() * delta_u, axis)?;
            let key = StreamKey { iteration, component: fd_component(offset, k, sign) };
            let pair = spect.measure_pulse(&probe, gate, key)?;
            signed[slot] = control_quality(pair, gate);
        }
        Ok((signed[0] - signed[1]) / (2.0 * delta_u))
    });
    let mut grad = GradientVector::zeros(pulse.segments());
    for (idx, r) in per.into_iter().enumerate() {
        let d = r?;
        let (channel, k) = if idx < k_count {
            (&mut grad.gx, idx)
        } else {
            (&mut grad.gy, idx - k_count)
        };
        for (g, v) in channel.iter_mut().zip(basis.vectors[k].iter()) {
            *g += d * v;
        }
    }
    Ok(grad)
}

/// Quality monitor for one iteration: the mean of `repeats` noisy
/// measurements on a dedicated stream.
fn measure_quality(
    spect: &VirtualSpectrometer,
    pulse: &ControlPulse,
    gate: Gate,
    iteration: u64,
    repeats: usize,
) -> Result<f64> {
    let mut acc = 0.0;
    for r in 0..repeats {
        let key = StreamKey { iteration, component: FID_STREAM_BASE + r as u64 };
        acc += control_quality(spect.measure_pulse(pulse, gate, key)?, gate);
    }
    Ok(acc / repeats as f64)
}

/// Run gradient ascent until the plateau rule, the iteration cap, or the
/// experiment budget ends it. Records one row per iteration, starting with
/// the unmodified initial pulse.
pub fn run_optimization(
    spect: &VirtualSpectrometer,
    method: &Method,
    config: &OptimizerConfig,
    gate: Gate,
    initial: &ControlPulse,
) -> Result<OptimizationRun> {
    config.validate()?;
    let mut budget = match config.budget {
        Some(limit) => ExperimentBudget::with_limit(limit),
        None => ExperimentBudget::unlimited(),
    };
    let mut pulse = initial.clone();
    let components = method.components_per_iteration(pulse.segments());

    // Recorded quality and the (possibly distinct) series consulted by the
    // stop rule and the rate schedule.
    let quality_of = |p: &ControlPulse, iter: u64| -> Result<(f64, Option<f64>, f64)> {
        match method {
            Method::Grape(model) => {
                let f = model_quality(model, p, gate)?;
                Ok((f, None, f))
            }
            _ => {
                let measured = measure_quality(spect, p, gate, iter, config.fidelity_repeats)?;
                let exact = spect.true_quality(p, gate)?;
                let monitor = match config.monitor {
                    MonitorSource::TrueFidelity => exact,
                    MonitorSource::Measured => measured,
                };
                Ok((measured, Some(exact), monitor))
            }
        }
    };

    let mut records = Vec::with_capacity(config.max_iters + 1);
    let mut monitors = Vec::with_capacity(config.max_iters + 1);
    let (f0, exact0, m0) = quality_of(&pulse, 0)?;
    records.push(IterationRecord {
        iteration: 0,
        fidelity: f0,
        true_fidelity: exact0,
        gradient_norm: 0.0,
        learning_rate: 0.0,
        cumulative_experiments: 0,
        note: None,
    });
    monitors.push(m0);
    if !m0.is_finite() || !f0.is_finite() {
        records.last_mut().unwrap().note =
            Some("aborted: initial fidelity is not finite".into());
        return Ok(OptimizationRun { records, final_pulse: pulse, experiments: budget.used() });
    }

    for q in 1..=config.max_iters {
        if components > 0 {
            if let Err(e) = charge_budget(&mut budget, components) {
                let mut rec = records.last().unwrap().clone();
                rec.iteration = q;
                rec.note = Some(format!("stopped: {e}"));
                records.push(rec);
                break;
            }
        }
        let grad = match method {
            Method::Grape(model) => grape_gradient(model, &pulse, gate)?.1,
            Method::Hqca { rotation } => {
                hqca_gradient(spect, &pulse, gate, *rotation, q as u64)?
            }
            Method::Fd { basis, delta_u } => {
                fd_gradient(spect, &pulse, gate, basis, *delta_u, q as u64)?
            }
        };
        let rate = learning_rate_schedule(config.learning_rate_c0, monitors[q - 1]);
        if !grad.is_finite() {
            records.push(IterationRecord {
                iteration: q,
                fidelity: records[q - 1].fidelity,
                true_fidelity: records[q - 1].true_fidelity,
                gradient_norm: f64::NAN,
                learning_rate: rate,
                cumulative_experiments: budget.used(),
                note: Some("aborted: gradient is not finite".into()),
            });
            break;
        }
        update_pulse(&mut pulse, &grad.gx, &grad.gy, rate)?;
        let (f, exact, m) = quality_of(&pulse, q as u64)?;
        let mut note = None;
        if !f.is_finite() || !m.is_finite() {
            note = Some("aborted: fidelity is not finite".into());
        } else if matches!(method, Method::Grape(_)) && f < records[q - 1].fidelity - 1e-12 {
            note = Some("warning: model fidelity decreased; consider lowering the rate".into());
        }
        let aborted = !f.is_finite() || !m.is_finite();
        records.push(IterationRecord {
            iteration: q,
            fidelity: f,
            true_fidelity: exact,
            gradient_norm: grad.norm(),
            learning_rate: rate,
            cumulative_experiments: budget.used(),
            note,
        });
        monitors.push(m);
        if aborted {
            break;
        }
        if q >= config.stop_window {
            let gain = monitors[q] - monitors[q - config.stop_window];
            if gain < config.stop_threshold {
                break;
            }
        }
    }
    Ok(OptimizationRun { records, final_pulse: pulse, experiments: budget.used() })
}

/// Self-checks relating the three gradient estimators to each other and to
/// first principles. Used by the `gradcheck` command and the test suite.
pub mod checks {
    use super::*;
    use crate::propagator::{analytic_gradient, propagate, state_fidelity};
    use crate::seeds::child_rng;
    use crate::virtual_spectrometer::MeasurementModel;
    use rand::Rng;

    /// Uniform random pulse in `[-amp, amp]` MHz on both channels.
    pub fn random_pulse(segments: usize, amp: f64, seed: u64, tag: u64) -> ControlPulse {
        let mut rng = child_rng(seed, tag, 0);
        let ux = (0..segments).map(|_| rng.gen_range(-amp..amp)).collect();
        let uy = (0..segments).map(|_| rng.gen_range(-amp..amp)).collect();
        ControlPulse::new(2.0, ux, uy, 1e6).unwrap()
    }

    /// Worst relative deviation between the analytic gradient and a central
    /// finite difference of the exact fidelity, over random pulses.
    pub fn fd_oracle_max_rel(
        sys: &SpinSystem,
        gate: Gate,
        n_pulses: usize,
        segments: usize,
        delta: f64,
        seed: u64,
    ) -> Result<f64> {
        let (rho_i, rho_f) = gate_targets(sys, gate);
        let mut worst: f64 = 0.0;
        for p in 0..n_pulses {
            let pulse = random_pulse(segments, 2.0, seed, p as u64);
            let (_, g) = analytic_gradient(sys, &pulse, &rho_i, &rho_f)?;
            let mut g_fd = GradientVector::zeros(segments);
            let eval = |probe: &ControlPulse| -> Result<f64> {
                state_fidelity(&propagate(sys, probe).total, &rho_i, &rho_f)
            };
            for m in 0..segments {
                for axis in [Axis::X, Axis::Y] {
                    let mut probe = pulse.clone();
                    match axis {
                        Axis::X => probe.ux[m] += delta,
                        Axis::Y => probe.uy[m] += delta,
                    }
                    let fp = eval(&probe)?;
                    match axis {
                        Axis::X => probe.ux[m] -= 2.0 * delta,
                        Axis::Y => probe.uy[m] -= 2.0 * delta,
                    }
                    let fm = eval(&probe)?;
                    let d = (fp - fm) / (2.0 * delta);
                    match axis {
                        Axis::X => g_fd.gx[m] = d,
                        Axis::Y => g_fd.gy[m] = d,
                    }
                }
            }
            let scale = g_fd
                .gx
                .iter()
                .chain(&g_fd.gy)
                .fold(0.0f64, |a, &b| a.max(b.abs()))
                .max(1e-12);
            let dev = g
                .gx
                .iter()
                .zip(&g_fd.gx)
                .chain(g.gy.iter().zip(&g_fd.gy))
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            worst = worst.max(dev / scale);
        }
        Ok(worst)
    }

    /// Noiseless spectrometer with a flat chain: the measured gate-2 quality
    /// coincides with the model fidelity, isolating estimator bias.
    fn ideal_spectrometer(sys: &SpinSystem) -> Result<VirtualSpectrometer> {
        VirtualSpectrometer::new(
            *sys,
            None,
            TransferFunction::flat(),
            MeasurementModel::noiseless(0),
        )
    }

    /// Minimum cosine similarity of the two closed-loop estimators against
    /// the exact gradient of the measured quality, over random pulses, with
    /// noise off and ideal rotations.
    pub fn estimator_cosines(
        sys: &SpinSystem,
        n_pulses: usize,
        segments: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        let spect = ideal_spectrometer(sys)?;
        let model = ModelSpec::ideal(*sys);
        let basis = crate::pulse_lib::make_canonical_basis(segments)?;
        let mut hqca_min = f64::INFINITY;
        let mut fd_min = f64::INFINITY;
        for p in 0..n_pulses {
            let pulse = random_pulse(segments, 2.0, seed, 1000 + p as u64);
            let (_, reference) = grape_gradient(&model, &pulse, Gate::Two)?;
            let h = hqca_gradient(&spect, &pulse, Gate::Two, RotationModel::Ideal, p as u64)?;
            let f = fd_gradient(&spect, &pulse, Gate::Two, &basis, 1e-4, p as u64)?;
            hqca_min = hqca_min.min(reference.cosine(&h));
            fd_min = fd_min.min(reference.cosine(&f));
        }
        Ok((hqca_min, fd_min))
    }

    /// Largest deviation from the sin(theta) scaling of signed insertion
    /// differences: `F(+theta) - F(-theta) = sin(theta) * [F(+pi/2) - F(-pi/2)]`.
    pub fn sin_theta_max_err(sys: &SpinSystem, segments: usize, seed: u64) -> Result<f64> {
        let spect = ideal_spectrometer(sys)?;
        let pulse = random_pulse(segments, 2.0, seed, 7);
        let mut worst: f64 = 0.0;
        for &axis in &[Axis::X, Axis::Y] {
            for m in [1usize, segments / 2 + 1, segments] {
                let diff_at = |theta: f64| -> Result<f64> {
                    let cache =
                        spect.prepare_insertions(&pulse, Gate::Two, theta, RotationModel::Ideal)?;
                    let kp = StreamKey { iteration: 0, component: 0 };
                    let km = StreamKey { iteration: 0, component: 1 };
                    let fp = control_quality(
                        spect.measure_cached(&cache, m, axis, Sign::Plus, kp)?,
                        Gate::Two,
                    );
                    let fm = control_quality(
                        spect.measure_cached(&cache, m, axis, Sign::Minus, km)?,
                        Gate::Two,
                    );
                    Ok(fp - fm)
                };
                let half_pi = diff_at(std::f64::consts::FRAC_PI_2)?;
                for &theta in &[0.1, 0.4, 0.9, 1.3] {
                    let got = diff_at(theta)?;
                    worst = worst.max((got - theta.sin() * half_pi).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Largest deviation of basis-direction derivatives from the chain rule
    /// `dF/d delta = sum_m v_m dF/du_m`, using the analytic gradient and an
    /// exact-fidelity central difference.
    pub fn chain_rule_max_err(
        sys: &SpinSystem,
        basis: &BasisSet,
        n_pulses: usize,
        seed: u64,
    ) -> Result<f64> {
        let (rho_i, rho_f) = gate_targets(sys, Gate::Two);
        let segments = basis.segments();
        let delta = 1e-4;
        let mut worst: f64 = 0.0;
        for p in 0..n_pulses {
            let pulse = random_pulse(segments, 2.0, seed, 2000 + p as u64);
            let (_, g) = analytic_gradient(sys, &pulse, &rho_i, &rho_f)?;
            for (k, v) in basis.vectors.iter().enumerate() {
                let axis = if k % 2 == 0 { Axis::X } else { Axis::Y };
                let channel = match axis {
                    Axis::X => &g.gx,
                    Axis::Y => &g.gy,
                };
                let predicted: f64 =
                    channel.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                let fp = state_fidelity(
                    &propagate(sys, &perturb_along(&pulse, v, delta, axis)?).total,
                    &rho_i,
                    &rho_f,
                )?;
                let fm = state_fidelity(
                    &propagate(sys, &perturb_along(&pulse, v, -delta, axis)?).total,
                    &rho_i,
                    &rho_f,
                )?;
                let measured = (fp - fm) / (2.0 * delta);
                worst = worst.max((predicted - measured).abs());
            }
        }
        Ok(worst)
    }

    /// Summary of all gradient self-checks.
    #[derive(Debug, Clone, Serialize)]
    pub struct GradCheckReport {
        pub fd_oracle_max_rel: f64,
        pub hqca_cosine_min: f64,
        pub fd_cosine_min: f64,
        pub sin_theta_max_err: f64,
        pub chain_rule_max_err: f64,
    }

    /// Run every check at the given size. `n_pulses` controls the costliest
    /// loops; the acceptance suite uses 100 for the oracle and 50 for the
    /// cosines.
    pub fn run_all(
        sys: &SpinSystem,
        segments: usize,
        oracle_pulses: usize,
        cosine_pulses: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let basis = crate::pulse_lib::make_slepian_basis(segments, 0.12, 6.min(segments))?;
        let (hqca_cos, fd_cos) = estimator_cosines(sys, cosine_pulses, segments, seed)?;
        Ok(GradCheckReport {
            fd_oracle_max_rel: fd_oracle_max_rel(sys, Gate::Two, oracle_pulses, segments, 1e-4, seed)?,
            hqca_cosine_min: hqca_cos,
            fd_cosine_min: fd_cos,
            sin_theta_max_err: sin_theta_max_err(sys, segments, seed)?,
            chain_rule_max_err: chain_rule_max_err(sys, &basis, 3, seed)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_brackets() {
        let c0 = 48.0;
        assert_eq!(learning_rate_schedule(c0, 0.10), 48.0);
        assert_eq!(learning_rate_schedule(c0, 0.9499), 48.0);
        assert_eq!(learning_rate_schedule(c0, 0.95), 24.0);
        assert_eq!(learning_rate_schedule(c0, 0.9699), 24.0);
        assert_eq!(learning_rate_schedule(c0, 0.97), 12.0);
        assert_eq!(learning_rate_schedule(c0, 0.9799), 12.0);
        assert_eq!(learning_rate_schedule(c0, 0.98), 6.0);
        assert_eq!(learning_rate_schedule(c0, 1.05), 6.0);
    }

    #[test]
    fn stream_components_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for m in 1..=10 {
            for axis in [Axis::X, Axis::Y] {
                for sign in [Sign::Plus, Sign::Minus] {
                    assert!(seen.insert(hqca_component(m, axis, sign)));
                }
            }
        }
        assert!(seen.iter().all(|&c| c < FID_STREAM_BASE));
    }
}
