//! Small dense complex kernels for per-bin covariance work. Matrices are
//! row-major `m x m` slices.

use num_complex::Complex64;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Pivots at or below this fraction of the largest diagonal entry count as a
/// failed factorization.
const PIVOT_FLOOR: f64 = 1e-13;

/// Lower-triangular Cholesky factor `L` with `A = L L^H`. Reads only the lower
/// triangle of `a`. Returns `None` if `a` is not numerically positive definite.
pub fn cholesky(a: &[Complex64], m: usize) -> Option<Vec<Complex64>> {
    let scale = (0..m).map(|i| a[i * m + i].re.abs()).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let mut l = vec![ZERO; m * m];
    for j in 0..m {
        let mut d = a[j * m + j].re;
        for k in 0..j {
            d -= l[j * m + k].norm_sqr();
        }
        if !(d > PIVOT_FLOOR * scale) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[j * m + j] = Complex64::new(d, 0.0);
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k].conj();
            }
            l[i * m + j] = s / d;
        }
    }
    Some(l)
}

/// Solves `L L^H X = B` in place for a row-major `m x cols` right-hand side.
pub fn cholesky_solve(l: &[Complex64], m: usize, b: &mut [Complex64], cols: usize) {
    for c in 0..cols {
        // Forward substitution with L.
        for i in 0..m {
            let mut s = b[i * cols + c];
            for k in 0..i {
                s -= l[i * m + k] * b[k * cols + c];
            }
            b[i * cols + c] = s / l[i * m + i].re;
        }
        // Back substitution with L^H.
        for i in (0..m).rev() {
            let mut s = b[i * cols + c];
            for k in i + 1..m {
                s -= l[k * m + i].conj() * b[k * cols + c];
            }
            b[i * cols + c] = s / l[i * m + i].re;
        }
    }
}

/// `C = A B` for `m x m` matrices.
#[cfg(test)]
pub fn matmul(a: &[Complex64], b: &[Complex64], m: usize) -> Vec<Complex64> {
    let mut c = vec![ZERO; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            for j in 0..m {
                c[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    c
}

/// Conjugate transpose.
#[cfg(test)]
pub fn adjoint(a: &[Complex64], m: usize) -> Vec<Complex64> {
    let mut out = vec![ZERO; m * m];
    for i in 0..m {
        for j in 0..m {
            out[j * m + i] = a[i * m + j].conj();
        }
    }
    out
}

pub fn trace(a: &[Complex64], m: usize) -> Complex64 {
    (0..m).map(|i| a[i * m + i]).sum()
}
