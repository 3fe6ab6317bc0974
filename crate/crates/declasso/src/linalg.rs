//! Dense symmetric eigensolvers sized for mixing matrices and Gram blocks.
//!
//! Everything here is pure Rust so results are identical across platforms.

use ndarray::{Array1, Array2};

const MAX_JACOBI_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns eigenvalues in ascending order together with the matrix whose
/// columns are the matching orthonormal eigenvectors. The input is only read
/// from its lower triangle mirrored; callers pass symmetric matrices.
pub fn symmetric_eigen(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "symmetric_eigen needs a square matrix");
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    if n <= 1 {
        let vals = Array1::from_iter((0..n).map(|i| a[[i, i]]));
        return (vals, v);
    }

    let fro_sq: f64 = a.iter().map(|x| x * x).sum();
    let stop = (1e-15 * fro_sq.sqrt()).powi(2).max(f64::MIN_POSITIVE);

    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut off_sq = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off_sq += 2.0 * a[[p, q]] * a[[p, q]];
            }
        }
        if off_sq <= stop {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                let app = a[[p, p]];
                let aqq = a[[q, q]];
                a[[p, p]] = app - t * apq;
                a[[q, q]] = aqq + t * apq;
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[p, k]] = a[[k, p]];
                    a[[k, q]] = s * akp + c * akq;
                    a[[q, k]] = a[[k, q]];
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    // Sort ascending, permuting eigenvector columns alongside.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].partial_cmp(&a[[j, j]]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs[[k, dst]] = v[[k, src]];
        }
    }
    (vals, vecs)
}

/// Largest eigenvalue of a symmetric positive-semidefinite matrix by power
/// iteration with Rayleigh-quotient convergence.
///
/// Independent of [`symmetric_eigen`]; the two routes cross-check each other
/// in tests. Stops when the Rayleigh quotient is stable to `rel_tol`.
pub fn max_eigenvalue_power(m: &Array2<f64>, rel_tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    assert_eq!(n, m.ncols());
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut prev = f64::NAN;
    for _ in 0..max_iter {
        let w = m.dot(&v);
        let rayleigh = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm < f64::MIN_POSITIVE {
            // v is annihilated; for a PSD matrix this pins the top eigenvalue
            // at zero unless mass lives elsewhere, which ones-start avoids.
            return 0.0;
        }
        v = w / norm;
        if (rayleigh - prev).abs() <= rel_tol * rayleigh.abs().max(f64::MIN_POSITIVE) {
            return rayleigh;
        }
        prev = rayleigh;
    }
    prev
}

/// Frobenius norm.
pub fn fro_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v = rng.random::<f64>() * 2.0 - 1.0;
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        m
    }

    #[test]
    fn eigen_diagonal_matrix() {
        let m = array![[4.0, 0.0], [0.0, 9.0]];
        let (vals, _) = symmetric_eigen(&m);
        assert!((vals[0] - 4.0).abs() < 1e-12);
        assert!((vals[1] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_input() {
        for seed in 0..5u64 {
            let m = random_symmetric(7, seed);
            let (vals, vecs) = symmetric_eigen(&m);
            let lam = Array2::from_diag(&vals);
            let rec = vecs.dot(&lam).dot(&vecs.t());
            let err = fro_norm(&(&rec - &m)) / fro_norm(&m).max(1.0);
            assert!(err < 1e-12, "reconstruction error {err}");
            // Orthonormality.
            let vtv = vecs.t().dot(&vecs);
            let eye = Array2::<f64>::eye(7);
            assert!(fro_norm(&(&vtv - &eye)) < 1e-12);
        }
    }

    #[test]
    fn power_iteration_matches_eigensolver() {
        for seed in 10..15u64 {
            let g = random_symmetric(12, seed);
            // Make it PSD: G^T G.
            let psd = g.t().dot(&g);
            let (vals, _) = symmetric_eigen(&psd);
            let lmax = vals[vals.len() - 1];
            let p = max_eigenvalue_power(&psd, 1e-13, 50_000);
            assert!(
                (p - lmax).abs() <= 1e-9 * lmax.max(1.0),
                "power {p} vs eigen {lmax}"
            );
        }
    }

    #[test]
    fn power_iteration_identity() {
        let m = Array2::<f64>::eye(6);
        let p = max_eigenvalue_power(&m, 1e-13, 1000);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let m = Array2::<f64>::zeros((4, 4));
        let (vals, _) = symmetric_eigen(&m);
        assert!(vals.iter().all(|v| *v == 0.0));
        assert_eq!(max_eigenvalue_power(&m, 1e-13, 100), 0.0);
    }
}
