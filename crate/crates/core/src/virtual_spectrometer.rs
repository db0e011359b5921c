//! Simulated spectrometer: hardware transfer-function distortion, ensemble
//! readout with detection weighting, measurement noise, and experiment
//! accounting.
//!
//! The spectrometer is the only place where pulses meet hardware
//! imperfections. Every waveform sent to the sample is first filtered by a
//! complex transfer function (resonator plus excitation chain); signals come
//! back as a pair of line amplitudes `(sL, sR)` - the two allowed electron
//! transitions - with Gaussian noise of calibrated standard deviation.
//! Rotations inserted for closed-loop gradient measurements are distorted as
//! standalone waveforms and spliced between the distorted segments of the
//! base pulse, which keeps insertion sweeps linear in the segment count.

use std::cell::RefCell;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pauli, C64};
use crate::propagator::Evolver;
use crate::pulse_lib::{
    two_tone_waveform, rotation_unitary, Axis, ControlPulse, PulseProgram, RotationModel, Sign,
};
use crate::seeds::child_rng;
use crate::spin_model::{
    build_hamiltonian, diagonalize, lorentzian_ensemble, Eigenstructure, EnsembleSpec, SpinSystem,
};

const TWO_PI: f64 = std::f64::consts::TAU;

// ---------------------------------------------------------------------------
// Transfer functions
// ---------------------------------------------------------------------------

/// Complex frequency response of the excitation chain, tabulated on an
/// ascending frequency grid (MHz) and interpolated linearly in between.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    freq_grid: Vec<f64>,
    response: Vec<C64>,
    /// Nominal bandwidth tag carried for reporting (MHz), if known.
    pub fwhm_label: Option<f64>,
}

impl TransferFunction {
    pub fn new(freq_grid: Vec<f64>, response: Vec<C64>) -> Result<Self> {
        if freq_grid.len() != response.len() {
            return Err(Error::DimensionMismatch(format!(
                "transfer grid has {} frequencies but {} response samples",
                freq_grid.len(),
                response.len()
            )));
        }
        if freq_grid.len() < 2 {
            return Err(Error::InvalidArgument(
                "transfer function needs at least two grid points".into(),
            ));
        }
        if !freq_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "transfer frequency grid must be strictly ascending".into(),
            ));
        }
        if response.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("transfer response contains non-finite samples".into()));
        }
        Ok(TransferFunction { freq_grid, response, fwhm_label: None })
    }

    /// Identity response over an effectively unbounded band.
    pub fn flat() -> Self {
        TransferFunction {
            freq_grid: vec![-1e9, 1e9],
            response: vec![C64::new(1.0, 0.0); 2],
            fwhm_label: None,
        }
    }

    pub fn freq_grid(&self) -> &[f64] {
        &self.freq_grid
    }

    pub fn response(&self) -> &[C64] {
        &self.response
    }

    /// Linear interpolation; `None` outside the tabulated band.
    pub fn interp(&self, f: f64) -> Option<C64> {
        let grid = &self.freq_grid;
        if f < grid[0] || f > *grid.last().unwrap() {
            return None;
        }
        let idx = match grid.binary_search_by(|g| g.partial_cmp(&f).unwrap()) {
            Ok(i) => return Some(self.response[i]),
            Err(i) => i,
        };
        let (f0, f1) = (grid[idx - 1], grid[idx]);
        let t = (f - f0) / (f1 - f0);
        Some(self.response[idx - 1] * C64::new(1.0 - t, 0.0) + self.response[idx] * C64::new(t, 0.0))
    }

    /// Write as CSV rows `freq_mhz,re,im` with a comment header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# freq_mhz,re,im\n");
        for (f, z) in self.freq_grid.iter().zip(&self.response) {
            out.push_str(&format!("{f:.16e},{:.16e},{:.16e}\n", z.re, z.im));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut grid = Vec::new();
        let mut resp = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!(
                    "line {}: transfer CSV rows need freq,re,im - got {line:?}",
                    lineno + 1
                )));
            }
            let mut nums = [0.0f64; 3];
            for (slot, col) in nums.iter_mut().zip(&cols) {
                *slot = col.parse().map_err(|e| {
                    Error::Parse(format!("line {}: bad number {col:?}: {e}", lineno + 1))
                })?;
            }
            grid.push(nums[0]);
            resp.push(C64::new(nums[1], nums[2]));
        }
        TransferFunction::new(grid, resp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TransferFunction::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Built-in transfer-function shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    /// Symmetric single-resonator response: Lorentzian magnitude with the
    /// matching arctangent phase.
    Lorentzian,
    /// Flat-top response of a tuned multi-stage chain: near-unit magnitude
    /// and small phase across the middle of the band, falling off sharply
    /// around the half-amplitude point, with a mild width asymmetry.
    MeasuredLike,
}

/// Tabulate a transfer function of the given amplitude FWHM (MHz) on a
/// +/-500 MHz grid with 1 MHz spacing. `|T(0)| = 1` and
/// `|T(+/-fwhm/2)| = 0.5`, exactly for the symmetric Lorentzian and up to
/// the measured-like width asymmetry (about 0.02, averaging out across the
/// +/- pair) for the flat-top shape.
pub fn synthesize_transfer(kind: TransferKind, fwhm: f64) -> Result<TransferFunction> {
    if !(fwhm > 0.0) {
        return Err(Error::InvalidArgument(format!("transfer fwhm must be > 0 MHz, got {fwhm}")));
    }
    let n = 1001usize;
    let mut grid = Vec::with_capacity(n);
    let mut resp = Vec::with_capacity(n);
    for i in 0..n {
        let f = -500.0 + i as f64;
        let (mag, phase) = match kind {
            TransferKind::Lorentzian => {
                let x = 2.0 * f / fwhm;
                (1.0 / (1.0 + x * x), -x.atan())
            }
            TransferKind::MeasuredLike => {
                let width = fwhm * (1.0 + 0.02 * (f / 20.0).tanh());
                let x = 2.0 * f / width;
                let x2 = x * x;
                (1.0 / (1.0 + x2 * x2), -0.6 * x * x2 / (1.0 + x2))
            }
        };
        grid.push(f);
        resp.push(C64::from_polar(mag, phase));
    }
    let mut tf = TransferFunction::new(grid, resp)?;
    tf.fwhm_label = Some(fwhm);
    Ok(tf)
}

// ---------------------------------------------------------------------------
// Waveform distortion
// ---------------------------------------------------------------------------

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// FFT length for an `m`-segment pulse: four-fold zero padding rounded up to
/// a power of two, so the circular convolution cannot wrap the pulse onto
/// itself and bin spacing resolves the transfer grid.
fn padded_len(m: usize) -> usize {
    (4 * m).next_power_of_two()
}

/// Frequency of FFT bin `j` out of `l`, in MHz (`dt_us` in us).
fn bin_freq(j: usize, l: usize, dt_us: f64) -> f64 {
    let df = 1.0 / (l as f64 * dt_us);
    if j <= (l - 1) / 2 {
        j as f64 * df
    } else {
        (j as f64 - l as f64) * df
    }
}

fn apply_response(
    pulse: &ControlPulse,
    transfer: &TransferFunction,
    conjugate: bool,
) -> Result<ControlPulse> {
    let m = pulse.segments();
    let l = padded_len(m);
    let dt_us = pulse.dt_us();
    let mut buf: Vec<Complex64> = Vec::with_capacity(l);
    for (&x, &y) in pulse.ux.iter().zip(&pulse.uy) {
        buf.push(Complex64::new(x, y));
    }
    buf.resize(l, Complex64::new(0.0, 0.0));

    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(l)).process(&mut buf);

    // Bins outside the tabulated band are dropped; that is only legitimate
    // while the pulse carries no meaningful energy there.
    let total_energy: f64 = buf.iter().map(|z| z.norm_sqr()).sum();
    let mut out_of_band = 0.0;
    for (j, z) in buf.iter_mut().enumerate() {
        let f = bin_freq(j, l, dt_us);
        match transfer.interp(f) {
            Some(t) => {
                let t = if conjugate { t.conj() } else { t };
                *z *= t;
            }
            None => {
                out_of_band += z.norm_sqr();
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }
    if !conjugate && total_energy > 0.0 && out_of_band > 1e-6 * total_energy {
        return Err(Error::TransferGrid(format!(
            "pulse has {:.2e} of its spectral energy outside the tabulated transfer band \
             [{:.1}, {:.1}] MHz; extend the grid",
            out_of_band / total_energy,
            transfer.freq_grid[0],
            transfer.freq_grid.last().unwrap()
        )));
    }

    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(l)).process(&mut buf);
    let scale = 1.0 / l as f64;
    let mut out = pulse.clone();
    for k in 0..m {
        out.ux[k] = buf[k].re * scale;
        out.uy[k] = buf[k].im * scale;
    }
    Ok(out)
}

/// Filter a pulse through the transfer function: the complex envelope
/// `ux + i uy` is multiplied by `T(f)` in the frequency domain.
pub fn distort(pulse: &ControlPulse, transfer: &TransferFunction) -> Result<ControlPulse> {
    apply_response(pulse, transfer, false)
}

/// Transpose-Jacobian of [`distort`] as a map on `(ux, uy)` pairs: the same
/// pipeline with the conjugated response. Used to pull measured or modeled
/// gradients back through the hardware chain.
pub fn distort_adjoint(pulse: &ControlPulse, transfer: &TransferFunction) -> Result<ControlPulse> {
    apply_response(pulse, transfer, true)
}

// ---------------------------------------------------------------------------
// Measurement model, signals, budget
// ---------------------------------------------------------------------------

/// Gaussian readout-noise model. Each returned line signal carries
/// independent noise of standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    /// Noise standard deviation per normalized line signal. This is the
    /// level after whatever on-instrument averaging produced the signal.
    pub sigma: f64,
    /// Master seed; every measurement derives its own stream from this.
    pub seed: u64,
    /// Nominal shots averaged per point. Informational only: it is carried
    /// through configs and reports but does not scale `sigma` or the
    /// experiment accounting.
    pub averages: usize,
}

impl MeasurementModel {
    pub fn noiseless(seed: u64) -> Self {
        MeasurementModel { sigma: 0.0, seed, averages: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "measurement sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.averages == 0 {
            return Err(Error::InvalidArgument("averages must be >= 1".into()));
        }
        Ok(())
    }
}

/// The two line amplitudes returned by one readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalPair {
    pub s_l: f64,
    pub s_r: f64,
}

impl SignalPair {
    /// Two-spin-order quality: antiphase line pattern.
    pub fn f_zz(&self) -> f64 {
        (self.s_l - self.s_r) / 2.0
    }

    /// Electron-coherence quality: in-phase line pattern.
    pub fn f_xi(&self) -> f64 {
        (self.s_l + self.s_r) / 2.0
    }
}

/// Identifies the noise stream of one measurement so that repeated runs,
/// parallel schedules, and serial schedules all draw identical noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub iteration: u64,
    pub component: u64,
}

/// Experiment budget: a hard cap on the number of spectrometer shots an
/// optimization may consume.
#[derive(Debug, Clone)]
pub struct ExperimentBudget {
    used: u64,
    limit: Option<u64>,
}

impl ExperimentBudget {
    pub fn unlimited() -> Self {
        ExperimentBudget { used: 0, limit: None }
    }

    pub fn with_limit(limit: u64) -> Self {
        ExperimentBudget { used: 0, limit: Some(limit) }
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn remaining(&self) -> Option<u64> {
        self.limit.map(|l| l.saturating_sub(self.used))
    }

    /// Record `n` experiments; fails without charging when the cap would be
    /// exceeded.
    pub fn charge(&mut self, n: u64) -> Result<()> {
        if let Some(limit) = self.limit {
            if self.used + n > limit {
                return Err(Error::Aborted(format!(
                    "experiment budget exhausted: {} used, {n} requested, limit {limit}",
                    self.used
                )));
            }
        }
        self.used += n;
        Ok(())
    }
}

/// Experiments consumed by one closed-loop gradient evaluation: two signed
/// measurements per basis component. One experiment is one state
/// preparation, pulse, and readout.
pub fn gradient_experiment_cost(components: usize) -> u64 {
    2 * components as u64
}

/// Charge one gradient evaluation to the budget.
pub fn charge_budget(budget: &mut ExperimentBudget, components: usize) -> Result<()> {
    budget.charge(gradient_experiment_cost(components))
}

// ---------------------------------------------------------------------------
// Gates and targets
// ---------------------------------------------------------------------------

/// Target operation of a control experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    /// Broadband electron flip: in-phase coherence on both allowed lines.
    #[serde(rename = "gate1")]
    One,
    /// Electron-nuclear two-spin order: antiphase line pattern.
    #[serde(rename = "gate2")]
    Two,
}

impl std::fmt::Display for Gate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gate::One => write!(f, "gate1"),
            Gate::Two => write!(f, "gate2"),
        }
    }
}

/// Initial and target deviation states of a gate experiment, in the product
/// basis. The initial state is always thermal electron polarization; targets
/// are defined in the level (eigen)basis and rotated back.
pub fn gate_targets(sys: &SpinSystem, gate: Gate) -> (DMatrix<C64>, DMatrix<C64>) {
    let eig = diagonalize(sys);
    gate_targets_for(&eig, sys.dim(), gate)
}

fn gate_targets_for(eig: &Eigenstructure, dim: usize, gate: Gate) -> (DMatrix<C64>, DMatrix<C64>) {
    let nuc = DMatrix::<C64>::identity(dim / 2, dim / 2);
    let rho_i = pauli('Z').unwrap().kronecker(&nuc);
    let level_target = match gate {
        Gate::One => pauli('X').unwrap().kronecker(&nuc),
        Gate::Two => {
            // Antiphase populations of the primary nucleus: ZZ on the
            // electron-nucleus pair, identity on any spectator.
            let spect = DMatrix::<C64>::identity(dim / 4, dim / 4);
            pauli('Z').unwrap().kronecker(&pauli('Z').unwrap()).kronecker(&spect)
        }
    };
    let v = &eig.eigenbasis;
    let rho_f = v * level_target * v.adjoint();
    (rho_i, rho_f)
}

// ---------------------------------------------------------------------------
// The spectrometer
// ---------------------------------------------------------------------------

/// Level index pairs of the two allowed lines: `(upper, lower)` per
/// sub-transition.
fn line_transitions(dim: usize) -> [Vec<(usize, usize)>; 2] {
    match dim {
        4 => [vec![(0, 2)], vec![(1, 3)]],
        8 => [vec![(0, 4), (1, 5)], vec![(2, 6), (3, 7)]],
        _ => unreachable!("spectrometer dimensions are 4 or 8"),
    }
}

/// Per-member data cached when a base pulse is prepared for an insertion
/// sweep. Probe rotations are spliced at the midpoint of the addressed
/// segment — the segment is played as two half-duration slices with the
/// rotation between them — which samples the segment-averaged response to
/// second order in `dt` instead of first. The cache stores the state
/// evolved to each midpoint and the line observables conjugated back to the
/// same point, so insertion `m` costs a handful of dim x dim products
/// instead of a full re-propagation.
pub struct ProgramCache {
    gate: Gate,
    segments: usize,
    /// `mid_states[i][m - 1]` = member `i`'s state at the midpoint of
    /// segment `m` (1-based).
    mid_states: Vec<Vec<DMatrix<C64>>>,
    /// `mid_ops[i][line][m - 1]` = the line observable (populations for
    /// gate2, coherence for gate1) conjugated back to the same midpoint.
    mid_ops: Vec<[Vec<DMatrix<C64>>; 2]>,
    /// `rotations[i][2 * axis + sign]`, axis x = 0 / y = 1, sign + = 0.
    rotations: Vec<[DMatrix<C64>; 4]>,
}

impl ProgramCache {
    pub fn segments(&self) -> usize {
        self.segments
    }
}

/// The simulated instrument: spin ensemble, transfer function, readout
/// model, and an experiment counter.
pub struct VirtualSpectrometer {
    sys: SpinSystem,
    members: Vec<(SpinSystem, f64)>,
    transfer: TransferFunction,
    measurement: MeasurementModel,
    eig: Eigenstructure,
    h0s: Vec<DMatrix<C64>>,
    /// Diagonal line-population observables in the level basis.
    pop_l: DVector<f64>,
    pop_r: DVector<f64>,
    /// Reference amplitude of the thermal state through an ideal readout.
    ref_pop: f64,
    /// Gate-1 detection weights per line per member, from a simulated
    /// distorted selective readout pulse.
    det_weights: [Vec<f64>; 2],
    /// Gate-1 reference amplitudes per line (thermal state through the same
    /// weighted detection).
    det_refs: [f64; 2],
    counter: AtomicU64,
}

impl VirtualSpectrometer {
    /// Build the instrument. `ensemble: None` gives a single on-resonance
    /// member of weight one.
    pub fn new(
        sys: SpinSystem,
        ensemble: Option<&EnsembleSpec>,
        transfer: TransferFunction,
        measurement: MeasurementModel,
    ) -> Result<Self> {
        measurement.validate()?;
        let members = match ensemble {
            Some(spec) => lorentzian_ensemble(spec, &sys),
            None => vec![(sys, 1.0)],
        };
        let eig = diagonalize(&sys);
        let dim = sys.dim();
        let h0s: Vec<DMatrix<C64>> = members.iter().map(|(s, _)| build_hamiltonian(s)).collect();

        let transitions = line_transitions(dim);
        let mut pop_l = DVector::zeros(dim);
        let mut pop_r = DVector::zeros(dim);
        for &(u, l) in &transitions[0] {
            pop_l[u] = 1.0;
            pop_l[l] = -1.0;
        }
        for &(u, l) in &transitions[1] {
            pop_r[u] = 1.0;
            pop_r[l] = -1.0;
        }
        // Thermal reference: <line populations> of rho_th is dim/2 per line.
        let ref_pop = dim as f64 / 2.0;

        let mut spect = VirtualSpectrometer {
            sys,
            members,
            transfer,
            measurement,
            eig,
            h0s,
            pop_l,
            pop_r,
            ref_pop,
            det_weights: [Vec::new(), Vec::new()],
            det_refs: [0.0, 0.0],
            counter: AtomicU64::new(0),
        };
        spect.calibrate_detection()?;
        Ok(spect)
    }

    /// Simulate the selective readout used by coherence (gate-1)
    /// experiments: a 200 ns single-tone pi/2 at each line frequency, passed
    /// through the transfer chain, applied to the thermal state of every
    /// member. The detection weight of a member is the line coherence this
    /// pulse achieves; the reference amplitude is the same experiment's echo
    /// of the thermal state (weight squared, ensemble averaged).
    fn calibrate_detection(&mut self) -> Result<()> {
        let dim = self.sys.dim();
        let transitions = line_transitions(dim);
        let v = &self.eig.eigenbasis;
        let nuc = DMatrix::<C64>::identity(dim / 2, dim / 2);
        let rho_th = pauli('Z').unwrap().kronecker(&nuc);
        let sx = pauli('X').unwrap().kronecker(&nuc);
        let sx_eig = v.adjoint() * &sx * v;

        let offset = self.eig.allowed_transition_offset();
        let dt_ns = 2.0;
        let duration_ns = 200.0;
        let segments = (duration_ns / dt_ns) as usize;
        let t_us = duration_ns * 1e-3;

        for (line, line_freq) in [(0usize, offset), (1, -offset)] {
            let mut mu = 0.0;
            for &(u, l) in &transitions[line] {
                mu += sx_eig[(u, l)].norm();
            }
            mu /= transitions[line].len() as f64;
            if mu < 1e-9 {
                return Err(Error::InvalidArgument(
                    "allowed-line matrix element vanished; detection cannot be calibrated".into(),
                ));
            }
            let u0 = std::f64::consts::FRAC_PI_2 / (4.0 * std::f64::consts::PI * t_us * mu);
            let mut ux = vec![0.0; segments];
            let mut uy = vec![0.0; segments];
            for k in 0..segments {
                let t = (k as f64 + 0.5) * dt_ns * 1e-3;
                ux[k] = u0 * (TWO_PI * line_freq * t).cos();
                uy[k] = u0 * (TWO_PI * line_freq * t).sin();
            }
            let wave = ControlPulse::new(dt_ns, ux, uy, f64::INFINITY)?;
            let played = distort(&wave, &self.transfer)?;

            let mut weights = Vec::with_capacity(self.members.len());
            let mut reference = 0.0;
            for (i, (_, w)) in self.members.iter().enumerate() {
                let mut ev = Evolver::new(self.h0s[i].clone())?;
                let u = ev.propagate(&played).total;
                let rho = &u * &rho_th * u.adjoint();
                let rho_lvl = v.adjoint() * rho * v;
                let mut coh = 0.0;
                for &(up, lo) in &transitions[line] {
                    coh += rho_lvl[(up, lo)].norm();
                }
                coh /= transitions[line].len() as f64;
                weights.push(coh);
                reference += w * coh * coh;
            }
            if reference < 1e-12 {
                return Err(Error::InvalidArgument(
                    "detection reference vanished; transfer function kills the readout pulse"
                        .into(),
                ));
            }
            self.det_weights[line] = weights;
            self.det_refs[line] = reference;
        }
        Ok(())
    }

    pub fn system(&self) -> &SpinSystem {
        &self.sys
    }

    pub fn members(&self) -> &[(SpinSystem, f64)] {
        &self.members
    }

    pub fn transfer(&self) -> &TransferFunction {
        &self.transfer
    }

    pub fn measurement(&self) -> &MeasurementModel {
        &self.measurement
    }

    pub fn eigenstructure(&self) -> &Eigenstructure {
        &self.eig
    }

    /// Total shots fired so far (includes noiseless budget-free calls made
    /// for reporting only when they model a real measurement).
    pub fn measurements(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }

    /// The pulse as the sample sees it.
    pub fn distorted(&self, pulse: &ControlPulse) -> Result<ControlPulse> {
        distort(pulse, &self.transfer)
    }

    /// Initial and target states of a gate on this spectrometer's nominal
    /// system.
    pub fn targets(&self, gate: Gate) -> (DMatrix<C64>, DMatrix<C64>) {
        gate_targets_for(&self.eig, self.sys.dim(), gate)
    }

    /// Distorted unitary of an inserted rotation for one member.
    fn rotation_unitary_for(
        &self,
        member: usize,
        axis: Axis,
        sign: Sign,
        angle: f64,
        model: RotationModel,
        dt_ns: f64,
    ) -> Result<DMatrix<C64>> {
        match model {
            RotationModel::Ideal => rotation_unitary(self.sys.dim(), axis, sign, angle),
            RotationModel::TwoTone { duration_ns } => {
                let wave =
                    two_tone_waveform(&self.eig, dt_ns, axis, sign, angle, duration_ns, f64::INFINITY)?;
                let played = distort(&wave, &self.transfer)?;
                let mut ev = Evolver::new(self.h0s[member].clone())?;
                Ok(ev.propagate(&played).total)
            }
        }
    }

    /// Final deviation states of a program, one per ensemble member. The
    /// base pulse is distorted as a single waveform; rotations are distorted
    /// standalone and spliced between the distorted base segments.
    pub fn simulate_program(&self, program: &PulseProgram) -> Result<Vec<DMatrix<C64>>> {
        let played = self.distorted(&program.base)?;
        let dim = self.sys.dim();
        let nuc = DMatrix::<C64>::identity(dim / 2, dim / 2);
        let rho_th = pauli('Z').unwrap().kronecker(&nuc);

        let mut insertions = program.insertions.clone();
        insertions.sort_by_key(|ins| ins.after_segment);
        if let Some(ins) = insertions.last() {
            if ins.after_segment == 0 || ins.after_segment > played.segments() {
                return Err(Error::InvalidArgument(format!(
                    "insertion after segment {} is outside 1..={}",
                    ins.after_segment,
                    played.segments()
                )));
            }
        }

        let mut states = Vec::with_capacity(self.members.len());
        if insertions.is_empty() {
            let mut ev = Evolver::new(self.h0s[0].clone())?;
            for h0 in &self.h0s {
                ev.load_static(h0)?;
                let u = ev.total_unitary(&played);
                states.push(&u * &rho_th * u.adjoint());
            }
            return Ok(states);
        }
        for i in 0..self.members.len() {
            let mut ev = Evolver::new(self.h0s[i].clone())?;
            let segs = ev.propagate(&played).segments;
            let mut total = DMatrix::<C64>::identity(dim, dim);
            let mut next = insertions.iter().peekable();
            for (m, seg) in segs.iter().enumerate() {
                total = seg * total;
                while next.peek().is_some_and(|ins| ins.after_segment == m + 1) {
                    let ins = next.next().unwrap();
                    let r = self.rotation_unitary_for(
                        i,
                        ins.axis,
                        ins.sign,
                        ins.angle,
                        ins.model,
                        program.base.dt,
                    )?;
                    total = r * total;
                }
            }
            states.push(&total * &rho_th * total.adjoint());
        }
        Ok(states)
    }

    /// Noiseless line signals of a set of per-member final states.
    fn line_signals(&self, states: &[DMatrix<C64>], gate: Gate) -> SignalPair {
        let v = &self.eig.eigenbasis;
        let dim = self.sys.dim();
        let transitions = line_transitions(dim);
        match gate {
            Gate::Two => {
                let mut s = [0.0; 2];
                for (i, (_, w)) in self.members.iter().enumerate() {
                    let rho_lvl = v.adjoint() * &states[i] * v;
                    for (line, pop) in [(0usize, &self.pop_l), (1, &self.pop_r)] {
                        let mut val = 0.0;
                        for k in 0..dim {
                            val += pop[k] * rho_lvl[(k, k)].re;
                        }
                        s[line] += w * val;
                    }
                }
                SignalPair { s_l: s[0] / self.ref_pop, s_r: s[1] / self.ref_pop }
            }
            Gate::One => {
                let mut s = [C64::new(0.0, 0.0); 2];
                for (i, (_, w)) in self.members.iter().enumerate() {
                    let rho_lvl = v.adjoint() * &states[i] * v;
                    for line in 0..2 {
                        let mut coh = C64::new(0.0, 0.0);
                        for &(up, lo) in &transitions[line] {
                            coh += rho_lvl[(up, lo)];
                        }
                        coh /= C64::new(transitions[line].len() as f64, 0.0);
                        s[line] += C64::new(w * self.det_weights[line][i], 0.0) * coh;
                    }
                }
                SignalPair {
                    s_l: s[0].norm() / self.det_refs[0],
                    s_r: s[1].norm() / self.det_refs[1],
                }
            }
        }
    }

    fn add_noise(&self, clean: SignalPair, key: StreamKey) -> SignalPair {
        self.counter.fetch_add(1, Ordering::Relaxed);
        let mut rng = child_rng(self.measurement.seed, key.iteration, key.component);
        let sigma = self.measurement.sigma;
        let n_l: f64 = rng.sample(StandardNormal);
        let n_r: f64 = rng.sample(StandardNormal);
        SignalPair { s_l: clean.s_l + sigma * n_l, s_r: clean.s_r + sigma * n_r }
    }

    /// Run a program and read out both lines with noise.
    pub fn measure_program(
        &self,
        program: &PulseProgram,
        gate: Gate,
        key: StreamKey,
    ) -> Result<SignalPair> {
        let states = self.simulate_program(program)?;
        Ok(self.add_noise(self.line_signals(&states, gate), key))
    }

    /// Run a plain pulse (no insertions) and read out with noise.
    pub fn measure_pulse(
        &self,
        pulse: &ControlPulse,
        gate: Gate,
        key: StreamKey,
    ) -> Result<SignalPair> {
        self.measure_program(&PulseProgram::plain(pulse.clone()), gate, key)
    }

    /// Noiseless signals of a program; does not count as an experiment.
    pub fn ideal_signals(&self, program: &PulseProgram, gate: Gate) -> Result<SignalPair> {
        let states = self.simulate_program(program)?;
        Ok(self.line_signals(&states, gate))
    }

    /// Noiseless signals for externally prepared per-member final states
    /// (e.g. to score an ideal target unitary against the readout chain).
    pub fn signals_of_states(&self, states: &[DMatrix<C64>], gate: Gate) -> Result<SignalPair> {
        if states.len() != self.members.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} states for {} ensemble members",
                states.len(),
                self.members.len()
            )));
        }
        Ok(self.line_signals(states, gate))
    }

    /// Noiseless signals of one unitary applied uniformly to every member's
    /// thermal state.
    pub fn signals_of_unitary(&self, u: &DMatrix<C64>, gate: Gate) -> Result<SignalPair> {
        let dim = self.sys.dim();
        if u.nrows() != dim || u.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "unitary is {}x{} for dimension {dim}",
                u.nrows(),
                u.ncols()
            )));
        }
        let nuc = DMatrix::<C64>::identity(dim / 2, dim / 2);
        let rho_th = pauli('Z').unwrap().kronecker(&nuc);
        let state = u * &rho_th * u.adjoint();
        let states = vec![state; self.members.len()];
        Ok(self.line_signals(&states, gate))
    }

    /// Noiseless control quality of a plain pulse: what the experiment would
    /// converge to with infinite averaging.
    pub fn true_quality(&self, pulse: &ControlPulse, gate: Gate) -> Result<f64> {
        let signals = self.ideal_signals(&PulseProgram::plain(pulse.clone()), gate)?;
        Ok(control_quality(signals, gate))
    }

    /// Prepare an insertion sweep over one base pulse: one full propagation
    /// per member plus four rotation unitaries, after which any insertion
    /// position is a constant-cost readout.
    pub fn prepare_insertions(
        &self,
        pulse: &ControlPulse,
        gate: Gate,
        angle: f64,
        model: RotationModel,
    ) -> Result<ProgramCache> {
        let played = self.distorted(pulse)?;
        let dim = self.sys.dim();
        let m_count = played.segments();
        let v = &self.eig.eigenbasis;
        let nuc = DMatrix::<C64>::identity(dim / 2, dim / 2);
        let rho_th = pauli('Z').unwrap().kronecker(&nuc);
        let transitions = line_transitions(dim);

        // Product-basis line operators.
        let mut line_base: [DMatrix<C64>; 2] =
            [DMatrix::zeros(dim, dim), DMatrix::zeros(dim, dim)];
        for line in 0..2 {
            let mut lvl = DMatrix::<C64>::zeros(dim, dim);
            match gate {
                Gate::Two => {
                    let pop = if line == 0 { &self.pop_l } else { &self.pop_r };
                    for k in 0..dim {
                        lvl[(k, k)] = C64::new(pop[k], 0.0);
                    }
                }
                Gate::One => {
                    // Tr[rho |lo><up|] picks the (up, lo) coherence.
                    let scale = C64::new(1.0 / transitions[line].len() as f64, 0.0);
                    for &(up, lo) in &transitions[line] {
                        lvl[(lo, up)] = scale;
                    }
                }
            }
            line_base[line] = v * lvl * v.adjoint();
        }

        let n_members = self.members.len();
        let half_dt = played.dt_us() / 2.0;
        let mut mid_states = Vec::with_capacity(n_members);
        let mut mid_ops = Vec::with_capacity(n_members);
        let mut rotations = Vec::with_capacity(n_members);
        for i in 0..n_members {
            let mut ev = Evolver::new(self.h0s[i].clone())?;
            let segs = ev.propagate(&played).segments;
            let halves: Vec<DMatrix<C64>> = played
                .ux
                .iter()
                .zip(&played.uy)
                .map(|(&x, &y)| ev.segment_unitary(x, y, half_dt))
                .collect();

            let mut mids = Vec::with_capacity(m_count);
            let mut state = rho_th.clone();
            for m in 0..m_count {
                mids.push(&halves[m] * &state * halves[m].adjoint());
                state = &segs[m] * &state * segs[m].adjoint();
            }

            let mut ops_l = vec![DMatrix::<C64>::zeros(dim, dim); m_count];
            let mut ops_r = ops_l.clone();
            let mut op_l = line_base[0].clone();
            let mut op_r = line_base[1].clone();
            for m in (0..m_count).rev() {
                ops_l[m] = halves[m].adjoint() * &op_l * &halves[m];
                ops_r[m] = halves[m].adjoint() * &op_r * &halves[m];
                op_l = segs[m].adjoint() * &op_l * &segs[m];
                op_r = segs[m].adjoint() * &op_r * &segs[m];
            }

            let mut rots = Vec::with_capacity(4);
            for axis in [Axis::X, Axis::Y] {
                for sign in [Sign::Plus, Sign::Minus] {
                    rots.push(self.rotation_unitary_for(i, axis, sign, angle, model, pulse.dt)?);
                }
            }
            let rots: [DMatrix<C64>; 4] =
                rots.try_into().map_err(|_| Error::InvalidArgument("rotation set".into()))?;

            mid_states.push(mids);
            mid_ops.push([ops_l, ops_r]);
            rotations.push(rots);
        }
        Ok(ProgramCache { gate, segments: m_count, mid_states, mid_ops, rotations })
    }

    /// Noiseless signals with one rotation spliced at the midpoint of
    /// segment `m` (1-based), from a prepared cache.
    fn cached_signals(&self, cache: &ProgramCache, m: usize, axis: Axis, sign: Sign) -> SignalPair {
        let rot_idx = 2 * usize::from(axis == Axis::Y) + usize::from(sign == Sign::Minus);
        match cache.gate {
            Gate::Two => {
                let mut s = [0.0; 2];
                for (i, (_, w)) in self.members.iter().enumerate() {
                    let r = &cache.rotations[i][rot_idx];
                    let rotated = r * &cache.mid_states[i][m - 1] * r.adjoint();
                    for line in 0..2 {
                        let val =
                            crate::linalg::trace_product(&rotated, &cache.mid_ops[i][line][m - 1]);
                        s[line] += w * val.re;
                    }
                }
                SignalPair { s_l: s[0] / self.ref_pop, s_r: s[1] / self.ref_pop }
            }
            Gate::One => {
                let mut s = [C64::new(0.0, 0.0); 2];
                for (i, (_, w)) in self.members.iter().enumerate() {
                    let r = &cache.rotations[i][rot_idx];
                    let rotated = r * &cache.mid_states[i][m - 1] * r.adjoint();
                    for line in 0..2 {
                        let val =
                            crate::linalg::trace_product(&rotated, &cache.mid_ops[i][line][m - 1]);
                        s[line] += C64::new(w * self.det_weights[line][i], 0.0) * val;
                    }
                }
                SignalPair {
                    s_l: s[0].norm() / self.det_refs[0],
                    s_r: s[1].norm() / self.det_refs[1],
                }
            }
        }
    }

    /// Measure one midpoint insertion from a prepared cache; equivalent to
    /// splitting segment `m` in half, inserting the rotation between the
    /// halves, and measuring the resulting program with the same stream
    /// key, at constant rather than linear cost.
    pub fn measure_cached(
        &self,
        cache: &ProgramCache,
        m: usize,
        axis: Axis,
        sign: Sign,
        key: StreamKey,
    ) -> Result<SignalPair> {
        if m == 0 || m > cache.segments {
            return Err(Error::InvalidArgument(format!(
                "insertion position {m} outside 1..={}",
                cache.segments
            )));
        }
        Ok(self.add_noise(self.cached_signals(cache, m, axis, sign), key))
    }
}

/// Project a signal pair onto the quality figure of the given gate.
pub fn control_quality(signals: SignalPair, gate: Gate) -> f64 {
    match gate {
        Gate::One => signals.f_xi(),
        Gate::Two => signals.f_zz(),
    }
}

// ---------------------------------------------------------------------------
// Error propagation
// ---------------------------------------------------------------------------

/// One line's raw readout: signal and reference amplitudes with their
/// standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineReading {
    pub signal: f64,
    pub reference: f64,
    pub signal_sigma: f64,
    pub reference_sigma: f64,
}

/// Uncertainty of a two-line quality figure from raw line readings:
///
/// ```text
/// dF = sqrt( sum_lines  (dS/R)^2 + (S dR / R^2)^2 )
/// ```
///
/// i.e. each normalized line amplitude `s = S/R` contributes
/// `s^2 [(dS/S)^2 + (dR/R)^2]` in quadrature.
pub fn propagate_error(left: &LineReading, right: &LineReading) -> Result<f64> {
    let mut acc = 0.0;
    for line in [left, right] {
        if line.reference == 0.0 || !line.reference.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "line reference must be finite and nonzero, got {}",
                line.reference
            )));
        }
        if line.signal_sigma < 0.0 || line.reference_sigma < 0.0 {
            return Err(Error::InvalidArgument("sigmas must be >= 0".into()));
        }
        let r = line.reference;
        let ds = line.signal_sigma / r;
        let dr = line.signal * line.reference_sigma / (r * r);
        acc += ds * ds + dr * dr;
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_hits_nodes_and_midpoints() {
        let tf = TransferFunction::new(
            vec![-1.0, 0.0, 2.0],
            vec![C64::new(0.0, 0.0), C64::new(1.0, 1.0), C64::new(3.0, -1.0)],
        )
        .unwrap();
        assert_eq!(tf.interp(0.0).unwrap(), C64::new(1.0, 1.0));
        let mid = tf.interp(1.0).unwrap();
        assert!((mid - C64::new(2.0, 0.0)).norm() < 1e-14);
        assert!(tf.interp(2.5).is_none());
    }

    #[test]
    fn transfer_csv_round_trip() {
        let tf = synthesize_transfer(TransferKind::MeasuredLike, 130.0).unwrap();
        let back = TransferFunction::from_csv(&tf.to_csv()).unwrap();
        assert_eq!(tf.freq_grid(), back.freq_grid());
        for (a, b) in tf.response().iter().zip(back.response()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn budget_caps_and_counts() {
        let mut b = ExperimentBudget::with_limit(500);
        charge_budget(&mut b, 200).unwrap();
        assert_eq!(b.used(), 400);
        assert_eq!(b.remaining(), Some(100));
        assert!(charge_budget(&mut b, 200).is_err());
        assert_eq!(b.used(), 400, "failed charge must not consume budget");
    }

    #[test]
    fn error_propagation_matches_hand_calculation() {
        let left = LineReading { signal: 1.0, reference: 1.0, signal_sigma: 0.03, reference_sigma: 0.02 };
        let right =
            LineReading { signal: 0.94, reference: 1.0, signal_sigma: 0.0188, reference_sigma: 0.02 };
        let df = propagate_error(&left, &right).unwrap();
        let expect = (1.0f64 * (0.0009 + 0.0004) + 0.94f64.powi(2) * 2.0 * 0.0004).sqrt();
        assert!((df - expect).abs() < 1e-12);
        assert!((df - 0.0448).abs() < 0.001);
    }
}
