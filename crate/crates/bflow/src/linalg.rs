//! Small dense complex linear algebra for the pointwise n x n metrics (n <= 6).
//!
//! Matrices are stored row-major as `&[Complex64]` of length n*n, entry
//! `a[r*n + c]`.

use num_complex::Complex64;

pub type C64 = Complex64;

pub const ONE: C64 = Complex64 { re: 1.0, im: 0.0 };
pub const ZERO: C64 = Complex64 { re: 0.0, im: 0.0 };
pub const I: C64 = Complex64 { re: 0.0, im: 1.0 };

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det(a: &[C64], n: usize) -> C64 {
    debug_assert_eq!(a.len(), n * n);
    match n {
        1 => return a[0],
        2 => return a[0] * a[3] - a[1] * a[2],
        3 => {
            return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6]);
        }
        _ => {}
    }
    let mut m = a.to_vec();
    let mut d = ONE;
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].norm_sqr();
        for r in (col + 1)..n {
            let v = m[r * n + col].norm_sqr();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return ZERO;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            d = -d;
        }
        let p = m[col * n + col];
        d *= p;
        for r in (col + 1)..n {
            let f = m[r * n + col] / p;
            for c in col..n {
                let v = m[col * n + c];
                m[r * n + c] -= f * v;
            }
        }
    }
    d
}

/// Inverse by Gauss-Jordan with partial pivoting. Returns None if singular.
pub fn inverse(a: &[C64], n: usize) -> Option<Vec<C64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut inv = vec![ZERO; n * n];
    for i in 0..n {
        inv[i * n + i] = ONE;
    }
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].norm_sqr();
        for r in (col + 1)..n {
            let v = m[r * n + col].norm_sqr();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
                inv.swap(col * n + c, piv * n + c);
            }
        }
        let p = m[col * n + col];
        for c in 0..n {
            m[col * n + c] /= p;
            inv[col * n + c] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == ZERO {
                continue;
            }
            for c in 0..n {
                let mv = m[col * n + c];
                let iv = inv[col * n + c];
                m[r * n + c] -= f * mv;
                inv[r * n + c] -= f * iv;
            }
        }
    }
    Some(inv)
}

/// Adjugate adj(A)_{jk} = (-1)^{j+k} det(A with row k and column j removed),
/// so A adj(A) = det(A) I. Written into `out` (length n*n); `minor` is
/// caller-provided scratch of length (n-1)*(n-1).
pub fn adjugate_into(a: &[C64], n: usize, out: &mut [C64], minor: &mut [C64]) {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(out.len(), n * n);
    debug_assert_eq!(minor.len(), (n - 1) * (n - 1));
    for j in 0..n {
        for k in 0..n {
            let mut w = 0;
            for r in 0..n {
                if r == k {
                    continue;
                }
                for c in 0..n {
                    if c == j {
                        continue;
                    }
                    minor[w] = a[r * n + c];
                    w += 1;
                }
            }
            let sign = if (j + k) % 2 == 0 { 1.0 } else { -1.0 };
            out[j * n + k] = det(minor, n - 1) * sign;
        }
    }
}

/// Determinant of a Hermitian positive definite matrix via unpivoted
/// elimination. Returns None (with no NaNs produced) when the matrix is not
/// positive definite: for Hermitian matrices all elimination pivots are
/// positive iff the matrix is PD.
pub fn hermitian_pd_det(a: &[C64], n: usize) -> Option<f64> {
    let mut m = a.to_vec();
    hermitian_pd_det_in_place(&mut m, n)
}

/// Allocation-free variant of [`hermitian_pd_det`]; `m` is overwritten.
pub fn hermitian_pd_det_in_place(m: &mut [C64], n: usize) -> Option<f64> {
    debug_assert_eq!(m.len(), n * n);
    let mut d = 1.0;
    for col in 0..n {
        let p = m[col * n + col].re;
        if !(p > 0.0) {
            return None;
        }
        d *= p;
        for r in (col + 1)..n {
            let f = m[r * n + col] / p;
            for c in col..n {
                let v = m[col * n + c];
                m[r * n + c] -= f * v;
            }
        }
    }
    Some(d)
}

/// Eigenvalues of a Hermitian matrix by cyclic complex Jacobi rotations.
/// Returns eigenvalues sorted ascending.
pub fn hermitian_eigenvalues(a: &[C64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * n);
    if n == 1 {
        return vec![a[0].re];
    }
    let mut m = a.to_vec();
    for _sweep in 0..60 {
        let mut off = 0.0;
        for r in 0..n {
            for c in (r + 1)..n {
                off += m[r * n + c].norm_sqr();
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.norm_sqr() < 1e-32 {
                    continue;
                }
                let app = m[p * n + p].re;
                let aqq = m[q * n + q].re;
                // unitary 2x2 diagonalization: phase then real Jacobi angle
                let phase = apq / apq.norm();
                let g = apq.norm();
                let theta = 0.5 * (2.0 * g).atan2(app - aqq);
                let (s, c) = theta.sin_cos();
                // columns: col_p' = c*col_p - s*conj(phase)... apply as
                // A' = U^H A U with U[p,p]=c, U[q,p]=s*phase^*, U[p,q]=-s*phase, U[q,q]=c
                let upp = C64::new(c, 0.0);
                let uqp = phase.conj() * s;
                let upq = -phase * s;
                let uqq = C64::new(c, 0.0);
                // rows update: B = U^H A
                for col in 0..n {
                    let vp = m[p * n + col];
                    let vq = m[q * n + col];
                    m[p * n + col] = upp.conj() * vp + uqp.conj() * vq;
                    m[q * n + col] = upq.conj() * vp + uqq.conj() * vq;
                }
                // columns update: A' = B U
                for row in 0..n {
                    let vp = m[row * n + p];
                    let vq = m[row * n + q];
                    m[row * n + p] = vp * upp + vq * uqp;
                    m[row * n + q] = vp * upq + vq * uqq;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m[i * n + i].re).collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

/// Max |a[r][c] - conj(a[c][r])| over all entries.
pub fn hermitian_defect(a: &[C64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..n {
        for c in 0..n {
            worst = worst.max((a[r * n + c] - a[c * n + r].conj()).norm());
        }
    }
    worst
}

pub fn matmul(a: &[C64], b: &[C64], n: usize) -> Vec<C64> {
    let mut out = vec![ZERO; n * n];
    for r in 0..n {
        for k in 0..n {
            let av = a[r * n + k];
            if av == ZERO {
                continue;
            }
            for c in 0..n {
                out[r * n + c] += av * b[k * n + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(n: usize, seed: u64) -> Vec<C64> {
        // small deterministic LCG, test-local
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        (0..n * n).map(|_| C64::new(next(), next())).collect()
    }

    #[test]
    fn inverse_roundtrip() {
        for n in 1..=6 {
            let mut a = random_matrix(n, n as u64);
            for i in 0..n {
                a[i * n + i] += C64::new(3.0, 0.0);
            }
            let inv = inverse(&a, n).unwrap();
            let prod = matmul(&a, &inv, n);
            for r in 0..n {
                for c in 0..n {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((prod[r * n + c] - C64::new(expect, 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adjugate_times_matrix_is_det_identity() {
        for n in 2..=6 {
            let mut a = random_matrix(n, 17 + n as u64);
            for i in 0..n {
                a[i * n + i] += C64::new(2.0, 0.0);
            }
            let mut adj = vec![ZERO; n * n];
            let mut minor = vec![ZERO; (n - 1) * (n - 1)];
            adjugate_into(&a, n, &mut adj, &mut minor);
            let d = det(&a, n);
            let prod = matmul(&a, &adj, n);
            for r in 0..n {
                for c in 0..n {
                    let expect = if r == c { d } else { ZERO };
                    assert!((prod[r * n + c] - expect).norm() < 1e-10 * d.norm());
                }
            }
        }
    }

    #[test]
    fn det_matches_eigenvalue_product_for_hermitian() {
        for n in 2..=5 {
            let b = random_matrix(n, 100 + n as u64);
            // h = b b^H + 0.5 I, Hermitian positive definite
            let mut h = vec![ZERO; n * n];
            for r in 0..n {
                for c in 0..n {
                    for k in 0..n {
                        h[r * n + c] += b[r * n + k] * b[c * n + k].conj();
                    }
                }
                h[r * n + r] += C64::new(0.5, 0.0);
            }
            let d = det(&h, n);
            let eigs = hermitian_eigenvalues(&h, n);
            let prod: f64 = eigs.iter().product();
            assert!(d.im.abs() < 1e-10 * prod.abs());
            assert!((d.re - prod).abs() < 1e-9 * prod.abs());
            assert!(eigs[0] > 0.0);
        }
    }
}
