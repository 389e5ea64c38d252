//! Small dense linear algebra kit: symmetric eigendecomposition (cyclic Jacobi)
//! and LU with partial pivoting. Deterministic and dependency-free; intended
//! for the desk-scale problems this crate works at (n up to a couple thousand).

use ndarray::{Array1, Array2};

use crate::error::{CoreError, Result};

/// Eigendecomposition of a symmetric matrix, `a = vecs * diag(vals) * vecs^T`,
/// eigenvalues ascending, eigenvectors orthonormal in the columns of `vecs`.
pub struct SymEigen {
    pub vals: Array1<f64>,
    pub vecs: Array2<f64>,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius mass drops below
/// `tol` times the matrix scale. Quadratically convergent; typically fewer
/// than a dozen sweeps.
pub fn sym_eigen(a: &Array2<f64>) -> SymEigen {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen needs a square matrix");
    let mut d = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-14 * scale;

    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += d[[p, q]] * d[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = d[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = d[[p, p]];
                let aqq = d[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    if i != p && i != q {
                        let dip = d[[i, p]];
                        let diq = d[[i, q]];
                        d[[i, p]] = c * dip - s * diq;
                        d[[p, i]] = d[[i, p]];
                        d[[i, q]] = s * dip + c * diq;
                        d[[q, i]] = d[[i, q]];
                    }
                }
                d[[p, p]] = app - t * apq;
                d[[q, q]] = aqq + t * apq;
                d[[p, q]] = 0.0;
                d[[q, p]] = 0.0;
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }

    // Sort eigenpairs ascending.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[[i, i]].total_cmp(&d[[j, j]]));
    let mut vals = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (k, &i) in order.iter().enumerate() {
        vals[k] = d[[i, i]];
        vecs.column_mut(k).assign(&v.column(i));
    }
    SymEigen { vals, vecs }
}

/// LU decomposition with partial pivoting, stored packed (L unit lower, U upper).
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU needs a square matrix");
        let mut lu: Vec<f64> = a.iter().cloned().collect();
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let mut p = k;
            let mut max = lu[k * n + k].abs();
            for i in (k + 1)..n {
                let v = lu[i * n + k].abs();
                if v > max {
                    max = v;
                    p = i;
                }
            }
            if max < 1e-300 {
                return Err(CoreError::SolveFailure {
                    step: 0,
                    time: 0.0,
                    report: format!("singular pivot at column {k}"),
                });
            }
            piv[k] = p;
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let m = lu[i * n + k] / pivot;
                lu[i * n + k] = m;
                if m != 0.0 {
                    let (upper, lower) = lu.split_at_mut(i * n);
                    let row_k = &upper[k * n..(k + 1) * n];
                    let row_i = &mut lower[..n];
                    for j in (k + 1)..n {
                        row_i[j] -= m * row_k[j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, piv })
    }

    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        let mut x = b.clone();
        for k in 0..n {
            x.swap(k, self.piv[k]);
        }
        // forward: L y = Pb
        for i in 1..n {
            let mut s = x[i];
            let row = &self.lu[i * n..i * n + i];
            for (j, lij) in row.iter().enumerate() {
                s -= lij * x[j];
            }
            x[i] = s;
        }
        // back: U x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            let row = &self.lu[i * n..(i + 1) * n];
            for j in (i + 1)..n {
                s -= row[j] * x[j];
            }
            x[i] = s / row[i];
        }
        x
    }
}

/// Least-squares line fit `y = a + b x`; returns (intercept, slope).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return (sy / n, 0.0);
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    (intercept, slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // [[-2, 2], [2, -2]] has eigenvalues {0, -4}.
        let a = array![[-2.0, 2.0], [2.0, -2.0]];
        let e = sym_eigen(&a);
        assert!((e.vals[0] + 4.0).abs() < 1e-12);
        assert!(e.vals[1].abs() < 1e-12);
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let mut a = Array2::<f64>::zeros((12, 12));
        let mut state = 0x9e3779b97f4a7c15u64;
        for i in 0..12 {
            for j in i..12 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                let v = ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        let e = sym_eigen(&a);
        // a == V diag V^T
        let lam = Array2::from_diag(&e.vals);
        let rec = e.vecs.dot(&lam).dot(&e.vecs.t());
        let err = (&rec - &a).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "reconstruction error {err}");
        // orthonormal columns
        let g = e.vecs.t().dot(&e.vecs);
        for i in 0..12 {
            for j in 0..12 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lu_solves_random_system() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, -1.0], [0.5, -1.0, 5.0]];
        let x_true = array![1.0, -2.0, 0.25];
        let b = a.dot(&x_true);
        let lu = Lu::factor(&a).unwrap();
        let x = lu.solve(&b);
        for i in 0..3 {
            assert!((x[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(Lu::factor(&a).is_err());
    }

    #[test]
    fn fit_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let (a, b) = linear_fit(&xs, &ys);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    }
}
