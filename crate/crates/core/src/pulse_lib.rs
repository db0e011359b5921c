//! Piecewise-constant control pulses, parameterization bases, and the
//! rotation model used by closed-loop gradient measurements.
//!
//! A pulse is `M` segments of fixed duration with an (x, y) amplitude pair
//! per segment, both in MHz. The text format is line-oriented and bit-exact
//! under round-trip (amplitudes are printed with 17 significant digits).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{herm_eig, pauli, C64};
use crate::spin_model::Eigenstructure;

const TWO_PI: f64 = std::f64::consts::TAU;

/// Control axis of an inserted rotation or a basis perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Sign of an inserted rotation or perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// A piecewise-constant two-channel pulse. Segment duration `dt` is in ns,
/// amplitudes in MHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPulse {
    /// Segment duration in ns.
    pub dt: f64,
    /// In-phase amplitudes, one per segment (MHz).
    pub ux: Vec<f64>,
    /// Quadrature amplitudes, one per segment (MHz).
    pub uy: Vec<f64>,
    /// Hardware amplitude ceiling (MHz); updates clamp each channel to
    /// `[-max_amp, max_amp]`.
    pub max_amp: f64,
}

impl ControlPulse {
    pub fn new(dt: f64, ux: Vec<f64>, uy: Vec<f64>, max_amp: f64) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::InvalidArgument(format!("segment duration must be > 0 ns, got {dt}")));
        }
        if ux.len() != uy.len() {
            return Err(Error::DimensionMismatch(format!(
                "pulse channels disagree on segment count: ux has {}, uy has {}",
                ux.len(),
                uy.len()
            )));
        }
        if ux.is_empty() {
            return Err(Error::InvalidArgument("pulse needs at least one segment".into()));
        }
        if max_amp <= 0.0 {
            return Err(Error::InvalidArgument(format!("max_amp must be > 0 MHz, got {max_amp}")));
        }
        Ok(ControlPulse { dt, ux, uy, max_amp })
    }

    /// Constant-amplitude pulse on the x channel.
    pub fn square(dt: f64, segments: usize, amp_x: f64, max_amp: f64) -> Result<Self> {
        ControlPulse::new(dt, vec![amp_x; segments], vec![0.0; segments], max_amp)
    }

    pub fn segments(&self) -> usize {
        self.ux.len()
    }

    /// Segment duration in us (propagation works in rad/us).
    pub fn dt_us(&self) -> f64 {
        self.dt * 1e-3
    }

    /// Total duration in us.
    pub fn duration_us(&self) -> f64 {
        self.dt_us() * self.segments() as f64
    }

    /// Serialize to the pulse text format:
    /// a header line `# dt_ns=<dt> segments=<M>`, then one `ux uy` pair per
    /// line. Round-trips bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# dt_ns={:.16e} segments={}", self.dt, self.segments());
        let _ = writeln!(out, "# max_amp={:.16e}", self.max_amp);
        for (x, y) in self.ux.iter().zip(&self.uy) {
            let _ = writeln!(out, "{x:.16e} {y:.16e}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut dt = None;
        let mut declared_segments = None;
        let mut max_amp = None;
        let mut ux = Vec::new();
        let mut uy = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    if let Some((key, value)) = field.split_once('=') {
                        match key {
                            "dt_ns" => dt = Some(parse_field(value, lineno, "dt_ns")?),
                            "segments" => {
                                declared_segments =
                                    Some(value.parse::<usize>().map_err(|e| {
                                        Error::Parse(format!(
                                            "line {}: bad segments count {value:?}: {e}",
                                            lineno + 1
                                        ))
                                    })?)
                            }
                            "max_amp" => max_amp = Some(parse_field(value, lineno, "max_amp")?),
                            _ => {}
                        }
                    }
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let (x, y) = match (parts.next(), parts.next(), parts.next()) {
                (Some(x), Some(y), None) => (x, y),
                _ => {
                    return Err(Error::Parse(format!(
                        "line {}: expected two amplitudes, got {line:?}",
                        lineno + 1
                    )))
                }
            };
            ux.push(parse_field(x, lineno, "ux")?);
            uy.push(parse_field(y, lineno, "uy")?);
        }
        let dt = dt.ok_or_else(|| Error::Parse("pulse text is missing the dt_ns header".into()))?;
        if let Some(m) = declared_segments {
            if m != ux.len() {
                return Err(Error::Parse(format!(
                    "header declares {m} segments but {} amplitude rows follow",
                    ux.len()
                )));
            }
        }
        ControlPulse::new(dt, ux, uy, max_amp.unwrap_or(f64::INFINITY))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ControlPulse::from_text(&text)
    }
}

fn parse_field(value: &str, lineno: usize, what: &str) -> Result<f64> {
    value.parse::<f64>().map_err(|e| {
        Error::Parse(format!("line {}: bad {what} value {value:?}: {e}", lineno + 1))
    })
}

/// Flavor of a parameterization basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    /// Per-segment delta functions (the canonical basis).
    Canonical,
    /// Orthonormal piecewise-constant functions built from Hadamard blocks.
    Linear,
    /// Discrete prolate spheroidal sequences.
    Slepian,
}

/// Concentration metadata attached to a Slepian basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlepianMeta {
    /// Half-bandwidth in cycles per segment, in `(0, 0.5]`.
    pub half_bandwidth: f64,
    /// In-band energy concentration per vector, non-increasing.
    pub concentrations: Vec<f64>,
}

/// A set of basis vectors over the `M` pulse segments, one vector per row
/// of the matrix-like `vectors` list.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub kind: BasisKind,
    /// Each vector has one entry per pulse segment, unit Euclidean norm.
    pub vectors: Vec<DVector<f64>>,
    /// Present for Slepian bases.
    pub meta: Option<SlepianMeta>,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn segments(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }
}

/// The canonical per-segment basis: `M` unit vectors.
pub fn make_canonical_basis(segments: usize) -> Result<BasisSet> {
    if segments == 0 {
        return Err(Error::InvalidArgument("basis needs at least one segment".into()));
    }
    let vectors = (0..segments)
        .map(|k| DVector::from_fn(segments, |i, _| if i == k { 1.0 } else { 0.0 }))
        .collect();
    Ok(BasisSet { kind: BasisKind::Canonical, vectors, meta: None })
}

/// Orthonormal piecewise-constant basis from Hadamard blocks.
///
/// The segment count is decomposed into powers of two (largest first); each
/// power-of-two block carries a Sylvester-Hadamard basis supported on a
/// contiguous run of segments. Rows are normalized to unit Euclidean norm,
/// giving an orthonormal basis of the full `M`-dimensional space whose
/// vectors are still "linear-like": piecewise constant with few sign flips
/// for the leading rows of each block.
pub fn make_linear_basis(segments: usize) -> Result<BasisSet> {
    if segments == 0 {
        return Err(Error::InvalidArgument("basis needs at least one segment".into()));
    }
    // Decompose M into descending powers of two, assign contiguous spans.
    let mut vectors = Vec::with_capacity(segments);
    let mut offset = 0usize;
    let mut remaining = segments;
    while remaining > 0 {
        let block = 1usize << (usize::BITS - 1 - remaining.leading_zeros());
        let h = sylvester_hadamard(block);
        let norm = 1.0 / (block as f64).sqrt();
        for row in h {
            vectors.push(DVector::from_fn(segments, |i, _| {
                if i >= offset && i < offset + block {
                    row[i - offset] * norm
                } else {
                    0.0
                }
            }));
        }
        offset += block;
        remaining -= block;
    }
    Ok(BasisSet { kind: BasisKind::Linear, vectors, meta: None })
}

/// Rows of the order-`n` Sylvester-Hadamard matrix (`n` a power of two),
/// entries in `{-1, +1}`. Row `r`, column `c` is `(-1)^{popcount(r & c)}`.
fn sylvester_hadamard(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|r| {
            (0..n)
                .map(|c| if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
                .collect()
        })
        .collect()
}

/// Default number of Slepian vectors: the Shannon count `round(2 N W)`.
pub fn default_slepian_count(segments: usize, half_bandwidth: f64) -> usize {
    ((2.0 * segments as f64 * half_bandwidth).round() as usize).clamp(1, segments)
}

/// Discrete prolate spheroidal (Slepian) basis: the `count` leading
/// eigenvectors of the N x N sinc concentration kernel
/// `K[l, m] = sin(2 pi W (l - m)) / (pi (l - m))`, `K[l, l] = 2 W`,
/// ordered by decreasing in-band concentration.
pub fn make_slepian_basis(segments: usize, half_bandwidth: f64, count: usize) -> Result<BasisSet> {
    if segments == 0 {
        return Err(Error::InvalidArgument("basis needs at least one segment".into()));
    }
    if !(half_bandwidth > 0.0 && half_bandwidth <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "slepian half-bandwidth must lie in (0, 0.5], got {half_bandwidth}"
        )));
    }
    if count == 0 || count > segments {
        return Err(Error::InvalidArgument(format!(
            "slepian count must lie in 1..={segments}, got {count}"
        )));
    }
    let n = segments;
    let w = half_bandwidth;
    let kernel = DMatrix::<C64>::from_fn(n, n, |l, m| {
        if l == m {
            C64::new(2.0 * w, 0.0)
        } else {
            let d = l as f64 - m as f64;
            C64::new((TWO_PI * w * d).sin() / (std::f64::consts::PI * d), 0.0)
        }
    });
    let (vals, vecs) = herm_eig(&kernel);
    // herm_eig sorts ascending; take the top `count`, descending.
    let mut vectors = Vec::with_capacity(count);
    let mut concentrations = Vec::with_capacity(count);
    for k in 0..count {
        let col = vecs.column(n - 1 - k);
        let mut v = DVector::from_fn(n, |i, _| col[i].re);
        let norm = v.norm();
        v /= norm;
        // Deterministic sign: make the largest-magnitude entry positive.
        let lead = v
            .iter()
            .cloned()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            v = -v;
        }
        vectors.push(v);
        concentrations.push(vals[n - 1 - k]);
    }
    Ok(BasisSet {
        kind: BasisKind::Slepian,
        vectors,
        meta: Some(SlepianMeta { half_bandwidth: w, concentrations }),
    })
}

/// Apply a gradient step: `u <- clamp(u + rate * g)` per channel.
pub fn update_pulse(pulse: &mut ControlPulse, gx: &[f64], gy: &[f64], rate: f64) -> Result<()> {
    if gx.len() != pulse.segments() || gy.len() != pulse.segments() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {}/{} components for a {}-segment pulse",
            gx.len(),
            gy.len(),
            pulse.segments()
        )));
    }
    let cap = pulse.max_amp;
    for (u, g) in pulse.ux.iter_mut().zip(gx) {
        *u = (*u + rate * g).clamp(-cap, cap);
    }
    for (u, g) in pulse.uy.iter_mut().zip(gy) {
        *u = (*u + rate * g).clamp(-cap, cap);
    }
    Ok(())
}

/// Shift one channel along a basis vector: `u_axis <- u_axis + delta * v`.
/// Unlike gradient updates this does not clamp - finite-difference probes
/// must displace by exactly `delta` for the quotient to be meaningful.
pub fn perturb_along(
    pulse: &ControlPulse,
    vector: &DVector<f64>,
    delta: f64,
    axis: Axis,
) -> Result<ControlPulse> {
    if vector.len() != pulse.segments() {
        return Err(Error::DimensionMismatch(format!(
            "basis vector has {} entries for a {}-segment pulse",
            vector.len(),
            pulse.segments()
        )));
    }
    if delta == 0.0 || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "perturbation size must be finite and nonzero, got {delta}"
        )));
    }
    let mut out = pulse.clone();
    let channel = match axis {
        Axis::X => &mut out.ux,
        Axis::Y => &mut out.uy,
    };
    for (u, v) in channel.iter_mut().zip(vector.iter()) {
        *u += delta * v;
    }
    Ok(out)
}

/// How inserted rotations are realized by the spectrometer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum RotationModel {
    /// Instantaneous ideal electron rotation.
    Ideal,
    /// Finite-duration two-tone selective pulse driving both allowed
    /// transitions simultaneously.
    TwoTone {
        /// Duration of the square rotation pulse in ns.
        duration_ns: f64,
    },
}

impl Default for RotationModel {
    fn default() -> Self {
        RotationModel::TwoTone { duration_ns: 200.0 }
    }
}

/// A rotation spliced into the pulse sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    /// Insert after this 1-based segment of the base pulse (`1..=M`).
    pub after_segment: usize,
    pub axis: Axis,
    pub sign: Sign,
    /// Rotation angle in radians (pi/2 for gradient measurements).
    pub angle: f64,
    pub model: RotationModel,
}

/// A base pulse plus zero or more inserted rotations.
///
/// The spectrometer treats the base pulse as a single waveform (it is
/// distorted as one unit) and splices the rotations between its distorted
/// segments; each rotation waveform is distorted on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseProgram {
    pub base: ControlPulse,
    pub insertions: Vec<Insertion>,
}

impl PulseProgram {
    pub fn plain(base: ControlPulse) -> Self {
        PulseProgram { base, insertions: Vec::new() }
    }
}

/// Build a program with one rotation inserted after segment `m` (1-based).
pub fn insert_rotation(
    pulse: &ControlPulse,
    m: usize,
    axis: Axis,
    sign: Sign,
    angle: f64,
    model: RotationModel,
) -> Result<PulseProgram> {
    if m == 0 || m > pulse.segments() {
        return Err(Error::InvalidArgument(format!(
            "insertion point must lie in 1..={}, got {m}",
            pulse.segments()
        )));
    }
    Ok(PulseProgram {
        base: pulse.clone(),
        insertions: vec![Insertion { after_segment: m, axis, sign, angle, model }],
    })
}

/// Ideal electron rotation `exp(-i sign angle sigma_axis / 2)` lifted to the
/// full Hilbert space (identity on the nuclei).
pub fn rotation_unitary(dim: usize, axis: Axis, sign: Sign, angle: f64) -> Result<DMatrix<C64>> {
    if dim % 2 != 0 || dim < 2 {
        return Err(Error::DimensionMismatch(format!(
            "rotation requires an even dimension >= 2, got {dim}"
        )));
    }
    let half = sign.as_f64() * angle / 2.0;
    let (s, c) = half.sin_cos();
    // exp(-i t sigma) = cos t - i sin t sigma for any Pauli sigma.
    let sigma = match axis {
        Axis::X => pauli('X').unwrap(),
        Axis::Y => pauli('Y').unwrap(),
    };
    let e2 = pauli('I').unwrap() * C64::new(c, 0.0) + sigma * Complex64::new(0.0, -s);
    let nuc = DMatrix::<C64>::identity(dim / 2, dim / 2);
    Ok(e2.kronecker(&nuc))
}

/// Transition-selective two-tone rotation waveform.
///
/// Drives both allowed electron transitions (at `+/- offset` from the
/// carrier, where `offset` is [`Eigenstructure::allowed_transition_offset`])
/// with a square envelope of the given duration. The base amplitude is set
/// from the transition matrix element so that the noiseless rotation angle
/// is `angle`; the two tones combine to a cosine envelope
/// `2 u0 cos(2 pi offset t)` on the axis channel, sampled at segment
/// midpoints.
///
/// Only the single-nucleus (4-dimensional) system has the two clean allowed
/// lines this construction relies on; larger systems are rejected.
pub fn two_tone_waveform(
    eig: &Eigenstructure,
    dt_ns: f64,
    axis: Axis,
    sign: Sign,
    angle: f64,
    duration_ns: f64,
    max_amp: f64,
) -> Result<ControlPulse> {
    if eig.dim() != 4 {
        return Err(Error::DimensionMismatch(format!(
            "two-tone rotations are only defined for the 4-dimensional system, got dim {}",
            eig.dim()
        )));
    }
    if duration_ns <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "rotation duration must be > 0 ns, got {duration_ns}"
        )));
    }
    let segments = (duration_ns / dt_ns).round().max(1.0) as usize;
    let t_us = dt_ns * 1e-3 * segments as f64;
    let offset = eig.allowed_transition_offset();

    // Transition matrix element of sigma_x^e between the two levels of each
    // allowed line, in the eigenbasis: |<1| sigma_x |3>| (levels 1,3 are the
    // first level of each electron manifold).
    let sx = pauli('X').unwrap().kronecker(&pauli('I').unwrap());
    let v = &eig.eigenbasis;
    let sx_eig = v.adjoint() * sx * v;
    let mu = sx_eig[(0, 2)].norm();
    if mu < 1e-9 {
        return Err(Error::InvalidArgument(
            "allowed transition matrix element vanished; cannot calibrate rotation amplitude".into(),
        ));
    }
    // Rotating-wave calibration: the cosine envelope 2 u0 cos(2 pi f0 t)
    // leaves each allowed line a resonant component of amplitude u0, whose
    // coupling element under Hc = 2 pi u sigma_x is 2 pi u0 mu. The flip
    // angle after time t is therefore 2 (2 pi u0 mu) t, so
    // u0 = angle / (4 pi t mu).
    let u0 = angle / (4.0 * std::f64::consts::PI * t_us * mu);

    let mut ux = vec![0.0; segments];
    let mut uy = vec![0.0; segments];
    for k in 0..segments {
        let t = (k as f64 + 0.5) * dt_ns * 1e-3;
        let env = sign.as_f64() * 2.0 * u0 * (TWO_PI * offset * t).cos();
        match axis {
            Axis::X => ux[k] = env,
            Axis::Y => uy[k] = env,
        }
    }
    ControlPulse::new(dt_ns, ux, uy, max_amp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_bit_exact() {
        let pulse = ControlPulse::new(
            2.0,
            vec![0.1234567890123456, -3.0e-7, 1.0 / 3.0],
            vec![0.0, 5.5, -0.25],
            25.0,
        )
        .unwrap();
        let back = ControlPulse::from_text(&pulse.to_text()).unwrap();
        assert_eq!(pulse, back);
        for (a, b) in pulse.ux.iter().zip(&back.ux) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn text_parser_reports_line_numbers() {
        let err = ControlPulse::from_text("# dt_ns=2.0\n0.1 0.2\nnot numbers\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "unhelpful parse error: {msg}");
    }

    #[test]
    fn hadamard_rows_are_orthogonal() {
        let h = sylvester_hadamard(8);
        for r in 0..8 {
            for s in 0..8 {
                let dot: f64 = (0..8).map(|c| h[r][c] * h[s][c]).sum();
                let expect = if r == s { 8.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_unitary_matches_half_angle_form() {
        let u = rotation_unitary(4, Axis::X, Sign::Plus, std::f64::consts::PI).unwrap();
        // exp(-i pi sigma_x / 2) = -i sigma_x (x identity).
        let sx = pauli('X').unwrap().kronecker(&pauli('I').unwrap());
        let expect = sx * C64::new(0.0, -1.0);
        assert!((&u - &expect).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn perturb_rejects_zero_delta() {
        let pulse = ControlPulse::square(2.0, 4, 0.5, 25.0).unwrap();
        let v = DVector::from_element(4, 0.5);
        assert!(perturb_along(&pulse, &v, 0.0, Axis::X).is_err());
        assert!(perturb_along(&pulse, &v, f64::NAN, Axis::Y).is_err());
    }
}
