//! Small dense linear algebra: Pauli matrices, Hermitian eigendecomposition,
//! and fast matrix exponentials for the 4x4 / 8x8 Hamiltonians that dominate
//! the simulation cost.
//!
//! The exponential `exp(-i dt H)` is evaluated with a degree-12 Taylor
//! polynomial under scaling-and-squaring. For the operator norms that occur
//! here (|H| dt of order one) the truncation error is below 1e-13, well
//! inside the 1e-12 budget, and the fixed-size 4x4/8x8 kernels run roughly
//! twice as fast as the general dynamic path.

use nalgebra::{DMatrix, DVector, SMatrix};
use num_complex::Complex64;

pub type C64 = Complex64;

/// Real scalar as a complex one, for scaling complex matrices.
#[inline(always)]
fn cr(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Reciprocal factorials 1/k! for k = 0..=12.
const INV_FACT: [f64; 13] = [
    1.0,
    1.0,
    0.5,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
    1.0 / 479001600.0,
];

/// 2x2 Pauli matrix for a label character (`I`, `X`, `Y`, `Z`).
pub fn pauli(label: char) -> Option<DMatrix<C64>> {
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    let m = match label {
        'I' => DMatrix::from_row_slice(2, 2, &[o, z, z, o]),
        'X' => DMatrix::from_row_slice(2, 2, &[z, o, o, z]),
        'Y' => DMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
        'Z' => DMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
        _ => return None,
    };
    Some(m)
}

/// Numerically stable sin(x)/x.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Tr[A B] without forming the product.
pub fn trace_product(a: &DMatrix<C64>, b: &DMatrix<C64>) -> C64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let n = a.nrows();
    let mut t = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..a.ncols() {
            t += a[(i, j)] * b[(j, i)];
        }
    }
    t
}

/// Hermitian eigendecomposition with eigenvalues sorted ascending; returns
/// `(eigenvalues, V)` with `H = V diag(w) V^dagger` and eigenvectors in the
/// columns of `V`.
pub fn herm_eig(h: &DMatrix<C64>) -> (DVector<f64>, DMatrix<C64>) {
    let se = nalgebra::SymmetricEigen::new(h.clone());
    let n = h.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[a]
            .partial_cmp(&se.eigenvalues[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let vals = DVector::from_iterator(n, order.iter().map(|&k| se.eigenvalues[k]));
    let mut vecs = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vecs.set_column(col, &se.eigenvectors.column(k));
    }
    (vals, vecs)
}

macro_rules! expm_fixed_impl {
    ($name:ident, $d:expr) => {
        fn $name(h: &SMatrix<C64, $d, $d>, dt: f64) -> SMatrix<C64, $d, $d> {
            // infinity-norm bound on |dt H| picks the scaling depth
            let mut theta: f64 = 0.0;
            for i in 0..$d {
                let mut row = 0.0;
                for j in 0..$d {
                    row += h[(i, j)].norm();
                }
                theta = theta.max(row);
            }
            theta *= dt.abs();
            let s: u32 = if theta > 0.5 {
                (theta / 0.5).log2().ceil() as u32
            } else {
                0
            };
            let a = h * C64::new(0.0, -dt / f64::from(1u32 << s));
            let a2 = a * a;
            let a3 = a2 * a;
            let a4 = a2 * a2;
            let a5 = a4 * a;
            let a6 = a4 * a2;
            let id = SMatrix::<C64, $d, $d>::identity();
            let lo = id * cr(INV_FACT[0])
                + a * cr(INV_FACT[1])
                + a2 * cr(INV_FACT[2])
                + a3 * cr(INV_FACT[3])
                + a4 * cr(INV_FACT[4])
                + a5 * cr(INV_FACT[5]);
            let hi = id * cr(INV_FACT[6])
                + a * cr(INV_FACT[7])
                + a2 * cr(INV_FACT[8])
                + a3 * cr(INV_FACT[9])
                + a4 * cr(INV_FACT[10])
                + a5 * cr(INV_FACT[11])
                + a6 * cr(INV_FACT[12]);
            let mut e = lo + a6 * hi;
            for _ in 0..s {
                e = e * e;
            }
            e
        }
    };
}

expm_fixed_impl!(expm_mih_4, 4);
expm_fixed_impl!(expm_mih_8, 8);

fn expm_mih_dyn(h: &DMatrix<C64>, dt: f64) -> DMatrix<C64> {
    let n = h.nrows();
    let mut theta: f64 = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += h[(i, j)].norm();
        }
        theta = theta.max(row);
    }
    theta *= dt.abs();
    let s: u32 = if theta > 0.5 {
        (theta / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let a = h * C64::new(0.0, -dt / f64::from(1u32 << s));
    let a2 = &a * &a;
    let a3 = &a2 * &a;
    let a4 = &a2 * &a2;
    let a5 = &a4 * &a;
    let a6 = &a4 * &a2;
    let id = DMatrix::<C64>::identity(n, n);
    let lo = &id * cr(INV_FACT[0])
        + &a * cr(INV_FACT[1])
        + &a2 * cr(INV_FACT[2])
        + &a3 * cr(INV_FACT[3])
        + &a4 * cr(INV_FACT[4])
        + &a5 * cr(INV_FACT[5]);
    let hi = &id * cr(INV_FACT[6])
        + &a * cr(INV_FACT[7])
        + &a2 * cr(INV_FACT[8])
        + &a3 * cr(INV_FACT[9])
        + &a4 * cr(INV_FACT[10])
        + &a5 * cr(INV_FACT[11])
        + &a6 * cr(INV_FACT[12]);
    let mut e = lo + &a6 * hi;
    for _ in 0..s {
        e = &e * &e;
    }
    e
}

/// `exp(-i dt H)` for Hermitian `H` (angular units; `dt` in matching time
/// units). Dimensions 4 and 8 dispatch to fixed-size kernels; any other
/// dimension falls back to the dynamic implementation.
pub fn expm_mih(h: &DMatrix<C64>, dt: f64) -> DMatrix<C64> {
    match h.nrows() {
        4 => {
            let hf = SMatrix::<C64, 4, 4>::from_fn(|i, j| h[(i, j)]);
            let e = expm_mih_4(&hf, dt);
            DMatrix::from_fn(4, 4, |i, j| e[(i, j)])
        }
        8 => {
            let hf = SMatrix::<C64, 8, 8>::from_fn(|i, j| h[(i, j)]);
            let e = expm_mih_8(&hf, dt);
            DMatrix::from_fn(8, 8, |i, j| e[(i, j)])
        }
        _ => expm_mih_dyn(h, dt),
    }
}
