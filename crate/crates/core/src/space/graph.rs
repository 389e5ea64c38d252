//! Weighted-graph Dirichlet space backend.
//!
//! The generator is `(Δf)(x) = sum_y w(x,y)/m(x) (f(y) - f(x))`, symmetric in
//! `L^2(m)`; the heat semigroup is the exact matrix exponential cached as an
//! eigendecomposition of the symmetrized operator `M^{1/2} Δ M^{-1/2}`.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::linalg::sym_eigen;
use crate::rng::stream;

pub struct GraphSpace {
    pub weights: Array2<f64>,
    pub measure: Array1<f64>,
    /// Generator eigenvalues, ascending (all <= 0, largest is 0).
    pub evals: Array1<f64>,
    /// `basis * diag(g(evals)) * dual` applies a spectral function of Δ.
    basis: Array2<f64>,
    dual: Array2<f64>,
}

impl GraphSpace {
    pub fn new(weights: Array2<f64>, measure: Array1<f64>) -> Result<Self> {
        let n = weights.nrows();
        if n < 2 || weights.ncols() != n {
            return Err(CoreError::InvalidSpace(format!(
                "need a square weight matrix with n >= 2, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        if measure.len() != n {
            return Err(CoreError::SizeMismatch {
                expected: n,
                got: measure.len(),
            });
        }
        for i in 0..n {
            if weights[[i, i]] != 0.0 {
                return Err(CoreError::InvalidSpace(format!(
                    "weight diagonal must be zero (vertex {i})"
                )));
            }
            for j in 0..n {
                if weights[[i, j]] < 0.0 {
                    return Err(CoreError::InvalidSpace(format!(
                        "negative weight at ({i}, {j})"
                    )));
                }
                if weights[[i, j]] != weights[[j, i]] {
                    return Err(CoreError::AsymmetricWeights(i, j));
                }
            }
        }
        if measure.iter().any(|&m| m <= 0.0) {
            return Err(CoreError::InvalidSpace(
                "measure must be strictly positive".into(),
            ));
        }
        if !is_connected(&weights) {
            return Err(CoreError::Disconnected);
        }
        let total: f64 = measure.sum();
        let measure = measure.mapv(|m| m / total);

        // symmetrized generator A = M^{1/2} Δ M^{-1/2}
        let sqrt_m = measure.mapv(f64::sqrt);
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let deg: f64 = weights.row(i).sum();
            a[[i, i]] = -deg / measure[i];
            for j in 0..n {
                if j != i && weights[[i, j]] > 0.0 {
                    a[[i, j]] = weights[[i, j]] / (sqrt_m[i] * sqrt_m[j]);
                }
            }
        }
        let eig = sym_eigen(&a);
        let mut basis = eig.vecs.clone();
        let mut dual = eig.vecs.t().to_owned();
        for i in 0..n {
            for k in 0..n {
                basis[[i, k]] /= sqrt_m[i];
                dual[[k, i]] *= sqrt_m[i];
            }
        }
        Ok(GraphSpace {
            weights,
            measure,
            evals: eig.vals,
            basis,
            dual,
        })
    }

    /// Random connected instance: ring backbone plus random chords, random
    /// positive measure. Deterministic in `seed`.
    pub fn random(n: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0x67726170);
        let mut w = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let j = (i + 1) % n;
            let v = rng.gen_range(0.5..1.5);
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
        let chords = n.max(4);
        for _ in 0..chords {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i != j && w[[i, j]] == 0.0 {
                let v = rng.gen_range(0.1..0.6);
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
        let m = Array1::from_iter((0..n).map(|_| rng.gen_range(0.5..1.5)));
        GraphSpace::new(w, m)
    }

    pub fn states(&self) -> usize {
        self.measure.len()
    }

    pub fn generator(&self, f: &Array1<f64>) -> Array1<f64> {
        let n = self.states();
        let mut out = Array1::<f64>::zeros(n);
        for x in 0..n {
            let mut acc = 0.0;
            for y in 0..n {
                let w = self.weights[[x, y]];
                if w > 0.0 {
                    acc += w * (f[y] - f[x]);
                }
            }
            out[x] = acc / self.measure[x];
        }
        out
    }

    pub fn gamma(&self, f: &Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
        let n = self.states();
        let mut out = Array1::<f64>::zeros(n);
        for x in 0..n {
            let mut acc = 0.0;
            for y in 0..n {
                let w = self.weights[[x, y]];
                if w > 0.0 {
                    acc += w * (f[y] - f[x]) * (g[y] - g[x]);
                }
            }
            out[x] = 0.5 * acc / self.measure[x];
        }
        out
    }

    /// Applies `g(Δ)` through the cached eigendecomposition.
    pub fn spectral_apply(&self, f: &Array1<f64>, g: impl Fn(f64) -> f64) -> Array1<f64> {
        let mut coeffs = self.dual.dot(f);
        for (k, c) in coeffs.iter_mut().enumerate() {
            *c *= g(self.evals[k]);
        }
        self.basis.dot(&coeffs)
    }

    pub fn heat(&self, f: &Array1<f64>, t: f64) -> Array1<f64> {
        self.spectral_apply(f, |lam| (t * lam).exp())
    }

    /// Solves `Δ v = g - <g>` with the zero mode removed.
    pub fn solve_poisson(&self, g: &Array1<f64>) -> Array1<f64> {
        self.spectral_apply(g, |lam| if lam < -1e-12 { 1.0 / lam } else { 0.0 })
    }

    /// Eigenvector of the generator (function on states), k ascending from
    /// the most negative eigenvalue; the last one is constant.
    pub fn eigenfunction(&self, k: usize) -> Array1<f64> {
        self.basis.column(k).to_owned()
    }
}

fn is_connected(w: &Array2<f64>) -> bool {
    let n = w.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    while let Some(x) = stack.pop() {
        if seen[x] {
            continue;
        }
        seen[x] = true;
        for y in 0..n {
            if w[[x, y]] > 0.0 && !seen[y] {
                stack.push(y);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub fn two_state() -> GraphSpace {
        let w = array![[0.0, 1.0], [1.0, 0.0]];
        let m = array![0.5, 0.5];
        GraphSpace::new(w, m).unwrap()
    }

    #[test]
    fn two_state_spectrum() {
        let g = two_state();
        assert!((g.evals[0] + 4.0).abs() < 1e-12);
        assert!(g.evals[1].abs() < 1e-12);
    }

    #[test]
    fn two_state_heat_closed_form() {
        let g = two_state();
        let f = array![0.0, 1.0];
        let t = 0.25;
        let pf = g.heat(&f, t);
        let decay = (-4.0 * t).exp();
        let want = array![0.5 - 0.5 * decay, 0.5 + 0.5 * decay];
        assert!((pf[0] - want[0]).abs() < 1e-13);
        assert!((pf[1] - want[1]).abs() < 1e-13);
    }

    #[test]
    fn two_state_gamma() {
        let g = two_state();
        let f = array![0.0, 1.0];
        let gam = g.gamma(&f, &f);
        assert!((gam[0] - 1.0).abs() < 1e-14);
        assert!((gam[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_disconnected() {
        let w = array![
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0]
        ];
        let m = Array1::from_elem(4, 0.25);
        assert!(matches!(
            GraphSpace::new(w, m),
            Err(CoreError::Disconnected)
        ));
    }

    #[test]
    fn rejects_asymmetric() {
        let w = array![[0.0, 1.0], [0.5, 0.0]];
        let m = array![0.5, 0.5];
        assert!(matches!(
            GraphSpace::new(w, m),
            Err(CoreError::AsymmetricWeights(..))
        ));
    }

    #[test]
    fn semigroup_is_symmetric_and_conservative() {
        let g = GraphSpace::random(17, 3).unwrap();
        let ones = Array1::from_elem(17, 1.0);
        let p1 = g.heat(&ones, 0.7);
        for v in p1.iter() {
            assert!((v - 1.0).abs() < 1e-11);
        }
    }
}
