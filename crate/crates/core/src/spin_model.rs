//! Two-spin (optionally three-spin) Hamiltonian model: an electron coupled
//! to one strongly hyperfine-coupled nucleus, and optionally to a second,
//! weakly coupled one.
//!
//! The static Hamiltonian in the electron rotating frame is
//!
//! ```text
//! H0 = wI Iz + A Sz Iz + B Sz Ix + d Sz   (+ wI Iz' + A2 Sz Iz' + B2 Sz Ix')
//! ```
//!
//! with `S`, `I` spin-1/2 operators (sigma/2), all coefficients in MHz and
//! the matrix returned in angular MHz (rad/us); the factor 2*pi enters here
//! and nowhere else. `d` is the per-member electron detuning used to build
//! inhomogeneous ensembles.
//!
//! Because every term contains at most `Sz` on the electron, `H0` is block
//! diagonal in the electron projection, and the eigenbasis is independent
//! of the detuning `d` - all ensemble members share one change-of-basis
//! matrix. Levels are labelled per electron manifold, ordered by
//! continuation from the `B = 0` product states (each eigenvector is
//! assigned to the nuclear basis state that dominates it), which reproduces
//! the conventional level diagram and makes the `B = 0` eigenbasis exactly
//! the identity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pauli, C64};

const TWO_PI: f64 = std::f64::consts::TAU;

/// Static parameters of the spin system. All frequencies in MHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    /// Secular hyperfine coupling of the primary nucleus.
    pub a: f64,
    /// Pseudo-secular hyperfine coupling of the primary nucleus.
    pub b: f64,
    /// Nuclear Zeeman frequency (signed; shared by all nuclei).
    pub omega_i: f64,
    /// Electron Larmor offset from the carrier.
    #[serde(default)]
    pub detuning: f64,
    /// Optional weakly coupled extra nucleus `(A2, B2)` in MHz.
    #[serde(default)]
    pub extra_proton: Option<(f64, f64)>,
}

impl SpinSystem {
    pub fn new(a: f64, b: f64, omega_i: f64) -> Self {
        SpinSystem { a, b, omega_i, detuning: 0.0, extra_proton: None }
    }

    pub fn with_detuning(mut self, detuning: f64) -> Self {
        self.detuning = detuning;
        self
    }

    pub fn with_extra_proton(mut self, a2: f64, b2: f64) -> Self {
        self.extra_proton = Some((a2, b2));
        self
    }

    /// Hilbert-space dimension: 4 without the extra nucleus, 8 with it.
    pub fn dim(&self) -> usize {
        if self.extra_proton.is_some() {
            8
        } else {
            4
        }
    }
}

/// Eigenstructure of `H0`: transition frequencies, the shared change-of-basis
/// matrix, and the diagonal Hamiltonian.
#[derive(Debug, Clone)]
pub struct Eigenstructure {
    /// Nuclear transition frequency |w12| of the electron-up manifold (MHz).
    pub omega12: f64,
    /// Nuclear transition frequency |w34| of the electron-down manifold (MHz).
    pub omega34: f64,
    /// Unitary with eigenvectors in columns: `H0 = V diag V^dagger`.
    pub eigenbasis: DMatrix<C64>,
    /// Diagonal of `H0` in the level ordering (angular MHz).
    pub diagonal_h0: DVector<f64>,
    /// Set when the level ordering hit a degeneracy (|w12 - w34| below
    /// 1e-9 MHz, or an exactly balanced nuclear mixing); ordering then falls
    /// back to deterministic index order.
    pub degenerate: bool,
}

impl Eigenstructure {
    /// Offset of the allowed (electron-flip) transitions from the carrier:
    /// the two strong lines sit at +/- this value (MHz).
    pub fn allowed_transition_offset(&self) -> f64 {
        0.5 * (self.omega12 + self.omega34)
    }

    pub fn dim(&self) -> usize {
        self.eigenbasis.nrows()
    }
}

/// A named Pauli string on the two-spin space (electron letter first),
/// in the deviation density matrix convention.
#[derive(Debug, Clone)]
pub struct PauliState {
    pub label: String,
    pub matrix: DMatrix<C64>,
}

impl PauliState {
    /// Build from a two-letter label over `{I, X, Y, Z}`, e.g. `"ZI"`.
    pub fn from_label(label: &str) -> Result<Self> {
        let chars: Vec<char> = label.chars().collect();
        if chars.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "Pauli label must have exactly two letters, got {label:?}"
            )));
        }
        let mut parts = Vec::new();
        for c in &chars {
            parts.push(pauli(*c).ok_or_else(|| {
                Error::InvalidArgument(format!("Pauli label letter {c:?} not in {{I,X,Y,Z}}"))
            })?);
        }
        Ok(PauliState {
            label: label.to_string(),
            matrix: parts[0].kronecker(&parts[1]),
        })
    }
}

/// Discretized Lorentzian detuning distribution.
///
/// Constructed through [`EnsembleSpec::new`] so the weight invariants
/// (positive, symmetric, normalized) hold for every instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    /// Lorentzian full width at half maximum (MHz).
    pub fwhm: f64,
    /// Odd number of grid points.
    pub n_points: usize,
    /// Total detuning span (MHz); the grid covers `[-span/2, span/2]`.
    pub span: f64,
    weights: Vec<f64>,
}

impl EnsembleSpec {
    /// Defaults: the span covers four full widths with 21 points.
    pub fn with_defaults(fwhm: f64) -> Result<Self> {
        EnsembleSpec::new(fwhm, 21, 4.0 * fwhm)
    }

    pub fn new(fwhm: f64, n_points: usize, span: f64) -> Result<Self> {
        if fwhm <= 0.0 {
            return Err(Error::InvalidArgument(format!("ensemble fwhm must be > 0, got {fwhm}")));
        }
        if span <= 0.0 {
            return Err(Error::InvalidArgument(format!("ensemble span must be > 0, got {span}")));
        }
        if n_points == 0 {
            return Err(Error::InvalidArgument("ensemble needs at least one point".into()));
        }
        if n_points % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "ensemble n_points must be odd so the grid has a center point, got {n_points}"
            )));
        }
        let half_width = fwhm / 2.0;
        let detunings = grid(n_points, span);
        let raw: Vec<f64> = detunings
            .iter()
            .map(|d| 1.0 / (1.0 + (d / half_width).powi(2)))
            .collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        Ok(EnsembleSpec { fwhm, n_points, span, weights })
    }

    /// Normalized weights, aligned with [`EnsembleSpec::detunings`].
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Detuning grid in MHz, symmetric about zero.
    pub fn detunings(&self) -> Vec<f64> {
        grid(self.n_points, self.span)
    }
}

fn grid(n_points: usize, span: f64) -> Vec<f64> {
    if n_points == 1 {
        return vec![0.0];
    }
    let step = span / (n_points - 1) as f64;
    (0..n_points).map(|i| -span / 2.0 + i as f64 * step).collect()
}

/// Materialize the ensemble: one detuned copy of `base` per grid point,
/// paired with its normalized weight.
pub fn lorentzian_ensemble(spec: &EnsembleSpec, base: &SpinSystem) -> Vec<(SpinSystem, f64)> {
    spec.detunings()
        .iter()
        .zip(spec.weights())
        .map(|(d, w)| (base.with_detuning(base.detuning + d), *w))
        .collect()
}

/// Static Hamiltonian in the product basis, in angular MHz (rad/us).
pub fn build_hamiltonian(sys: &SpinSystem) -> DMatrix<C64> {
    let i2 = pauli('I').unwrap();
    let half = C64::new(0.5, 0.0);
    let sz = pauli('Z').unwrap() * half;
    let sx = pauli('X').unwrap() * half;

    let mut h = match sys.extra_proton {
        None => {
            let iz = &sz;
            let ix = &sx;
            i2.kronecker(iz) * C64::new(sys.omega_i, 0.0)
                + sz.kronecker(iz) * C64::new(sys.a, 0.0)
                + sz.kronecker(ix) * C64::new(sys.b, 0.0)
                + sz.kronecker(&i2) * C64::new(sys.detuning, 0.0)
        }
        Some((a2, b2)) => {
            let lift =
                |e: &DMatrix<C64>, n1: &DMatrix<C64>, n2: &DMatrix<C64>| e.kronecker(n1).kronecker(n2);
            lift(&i2, &sz, &i2) * C64::new(sys.omega_i, 0.0)
                + lift(&i2, &i2, &sz) * C64::new(sys.omega_i, 0.0)
                + lift(&sz, &sz, &i2) * C64::new(sys.a, 0.0)
                + lift(&sz, &sx, &i2) * C64::new(sys.b, 0.0)
                + lift(&sz, &i2, &sz) * C64::new(a2, 0.0)
                + lift(&sz, &i2, &sx) * C64::new(b2, 0.0)
                + lift(&sz, &i2, &i2) * C64::new(sys.detuning, 0.0)
        }
    };
    h *= C64::new(TWO_PI, 0.0);
    h
}

/// One nuclear 2x2 block diagonalization: eigenvector assignment follows the
/// dominant product-basis component (continuation from `B = 0`).
struct Block2 {
    /// First column of the block rotation (level assigned to nuclear "up").
    v_first: [f64; 2],
    v_second: [f64; 2],
    lam_first: f64,
    lam_second: f64,
    tie: bool,
}

/// Diagonalize `[[p, q], [q, -p]]` (angular MHz) with continuation ordering.
fn eig2_continuation(p: f64, q: f64) -> Block2 {
    if q == 0.0 {
        return Block2 {
            v_first: [1.0, 0.0],
            v_second: [0.0, 1.0],
            lam_first: p,
            lam_second: -p,
            tie: false,
        };
    }
    let r = p.hypot(q);
    // Half-angle rotation: v1 = (cos phi, sin phi) carries eigenvalue +r.
    let phi = 0.5 * (2.0 * q).atan2(2.0 * p);
    let (s, c) = phi.sin_cos();
    let tie = (c.abs() - s.abs()).abs() < 1e-12;
    let first_is_plus = if tie { true } else { c.abs() > s.abs() };
    let (mut vf, lf, mut vs, ls) = if first_is_plus {
        ([c, s], r, [-s, c], -r)
    } else {
        ([-s, c], -r, [c, s], r)
    };
    // Deterministic sign: dominant components positive.
    if vf[0] < 0.0 {
        vf = [-vf[0], -vf[1]];
    }
    if vs[1] < 0.0 {
        vs = [-vs[0], -vs[1]];
    }
    Block2 { v_first: vf, v_second: vs, lam_first: lf, lam_second: ls, tie }
}

/// Per-nucleus block parameters for electron projection `s = +/- 1/2`:
/// the block Hamiltonian is `[[p, q], [q, -p]]` with
/// `p = pi (wI + s A_k)`, `q = pi s B_k` (angular MHz).
fn nuclear_block(omega_i: f64, a: f64, b: f64, s: f64) -> Block2 {
    eig2_continuation(std::f64::consts::PI * (omega_i + s * a), std::f64::consts::PI * s * b)
}

/// Diagonalize `H0` with the conventional level ordering: the electron-up
/// manifold first, nuclear levels within each manifold ordered by
/// continuation from the product states.
pub fn diagonalize(sys: &SpinSystem) -> Eigenstructure {
    let dim = sys.dim();
    let mut eigenbasis = DMatrix::<C64>::zeros(dim, dim);
    let mut diagonal = DVector::<f64>::zeros(dim);
    let mut tie = false;

    // Transition frequencies of the primary nucleus (MHz magnitudes).
    let up = nuclear_block(sys.omega_i, sys.a, sys.b, 0.5);
    let dn = nuclear_block(sys.omega_i, sys.a, sys.b, -0.5);
    let omega12 = (up.lam_first - up.lam_second).abs() / TWO_PI;
    let omega34 = (dn.lam_first - dn.lam_second).abs() / TWO_PI;

    for (blk, s) in [(0usize, 0.5f64), (1, -0.5)] {
        let shift = s * TWO_PI * sys.detuning;
        let b1 = nuclear_block(sys.omega_i, sys.a, sys.b, s);
        tie |= b1.tie;
        match sys.extra_proton {
            None => {
                let base = blk * 2;
                for (lvl, (v, lam)) in [
                    (&b1.v_first, b1.lam_first),
                    (&b1.v_second, b1.lam_second),
                ]
                .iter()
                .enumerate()
                {
                    diagonal[base + lvl] = shift + *lam;
                    for row in 0..2 {
                        eigenbasis[(base + row, base + lvl)] = C64::new(v[row], 0.0);
                    }
                }
            }
            Some((a2, b2)) => {
                let b2k = nuclear_block(sys.omega_i, a2, b2, s);
                tie |= b2k.tie;
                let base = blk * 4;
                let vecs1 = [&b1.v_first, &b1.v_second];
                let lams1 = [b1.lam_first, b1.lam_second];
                let vecs2 = [&b2k.v_first, &b2k.v_second];
                let lams2 = [b2k.lam_first, b2k.lam_second];
                for l1 in 0..2 {
                    for l2 in 0..2 {
                        let lvl = base + l1 * 2 + l2;
                        diagonal[lvl] = shift + lams1[l1] + lams2[l2];
                        for r1 in 0..2 {
                            for r2 in 0..2 {
                                eigenbasis[(base + r1 * 2 + r2, lvl)] =
                                    C64::new(vecs1[l1][r1] * vecs2[l2][r2], 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    let degenerate = tie || (omega12 - omega34).abs() < 1e-9;
    Eigenstructure { omega12, omega34, eigenbasis, diagonal_h0: diagonal, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detuning_leaves_eigenbasis_untouched() {
        let sys = SpinSystem::new(66.0, 26.0, -14.5);
        let e0 = diagonalize(&sys);
        let e1 = diagonalize(&sys.with_detuning(7.25));
        assert_eq!(e0.eigenbasis, e1.eigenbasis);
        // Eigenvalues shift by +/- pi * d between the manifolds.
        for k in 0..2 {
            let d = e1.diagonal_h0[k] - e0.diagonal_h0[k];
            assert!((d - std::f64::consts::PI * 7.25).abs() < 1e-10);
        }
        for k in 2..4 {
            let d = e1.diagonal_h0[k] - e0.diagonal_h0[k];
            assert!((d + std::f64::consts::PI * 7.25).abs() < 1e-10);
        }
    }

    #[test]
    fn pauli_labels_reject_garbage() {
        assert!(PauliState::from_label("ZI").is_ok());
        assert!(PauliState::from_label("Z").is_err());
        assert!(PauliState::from_label("ZQ").is_err());
        assert!(PauliState::from_label("ZZZ").is_err());
    }
}
