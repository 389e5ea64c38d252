//! Periodic torus grid backend (d = 1 or 2).
//!
//! Grid functions are treated as band-limited trigonometric polynomials.
//! The derivative along each axis is the Fourier multiplier `i k` with the
//! Nyquist mode annihilated, which makes each derivative matrix exactly
//! antisymmetric; the Laplacian is `sum_i D_i^2`, so the integration-by-parts
//! identity against the carré du champ holds to machine precision, and the
//! heat semigroup `exp(t Laplacian)` shares the same eigenbasis.

use std::sync::Arc;

use ndarray::Array1;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{CoreError, Result};

/// Spectral upsampling factor used when grid fields are evaluated off-grid.
pub const UPSAMPLE: usize = 4;

pub struct TorusSpace {
    pub d: usize,
    pub n_axis: usize,
    pub len: f64,
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    inv_up: Arc<dyn Fft<f64>>,
    /// Wavenumber for each axis mode index, Nyquist zeroed.
    k: Vec<f64>,
}

impl TorusSpace {
    pub fn new(d: usize, n_axis: usize, len: f64) -> Result<Self> {
        if !(d == 1 || d == 2) {
            return Err(CoreError::InvalidSpace(format!(
                "torus dimension must be 1 or 2, got {d}"
            )));
        }
        if n_axis < 8 || n_axis % 2 != 0 {
            return Err(CoreError::InvalidSpace(format!(
                "torus grid size must be even and >= 8, got {n_axis}"
            )));
        }
        if !(len > 0.0) {
            return Err(CoreError::InvalidSpace(format!(
                "torus period must be positive, got {len}"
            )));
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n_axis);
        let inv = planner.plan_fft_inverse(n_axis);
        let inv_up = planner.plan_fft_inverse(n_axis * UPSAMPLE);
        let k = (0..n_axis)
            .map(|j| {
                let jj = if j <= n_axis / 2 {
                    j as i64
                } else {
                    j as i64 - n_axis as i64
                };
                if j == n_axis / 2 {
                    0.0
                } else {
                    2.0 * std::f64::consts::PI * jj as f64 / len
                }
            })
            .collect();
        Ok(TorusSpace {
            d,
            n_axis,
            len,
            n: n_axis.pow(d as u32),
            fwd,
            inv,
            inv_up,
            k,
        })
    }

    pub fn states(&self) -> usize {
        self.n
    }

    /// Grid coordinates of a state index; the second entry is 0 when d = 1.
    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let h = self.len / self.n_axis as f64;
        if self.d == 1 {
            [idx as f64 * h, 0.0]
        } else {
            [(idx / self.n_axis) as f64 * h, (idx % self.n_axis) as f64 * h]
        }
    }

    fn fft_axes(&self, data: &mut [Complex<f64>], inverse: bool) {
        let n = self.n_axis;
        let plan = if inverse { &self.inv } else { &self.fwd };
        if self.d == 1 {
            plan.process(data);
            return;
        }
        // axis 1 (contiguous rows)
        for row in data.chunks_exact_mut(n) {
            plan.process(row);
        }
        // axis 0 (strided columns)
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = data[i * n + j];
            }
            plan.process(&mut col);
            for i in 0..n {
                data[i * n + j] = col[i];
            }
        }
    }

    /// Fourier coefficients (normalized so that `modes` of a constant c is
    /// c at the zero mode).
    pub fn modes(&self, f: &Array1<f64>) -> Vec<Complex<f64>> {
        let mut data: Vec<Complex<f64>> = f.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft_axes(&mut data, false);
        let scale = 1.0 / self.n as f64;
        for z in &mut data {
            *z *= scale;
        }
        data
    }

    pub fn values(&self, mut modes: Vec<Complex<f64>>) -> Array1<f64> {
        self.fft_axes(&mut modes, true);
        Array1::from_iter(modes.into_iter().map(|z| z.re))
    }

    /// Axis wavenumbers of a state index.
    fn mode_k(&self, idx: usize) -> (f64, f64) {
        if self.d == 1 {
            (self.k[idx], 0.0)
        } else {
            (self.k[idx / self.n_axis], self.k[idx % self.n_axis])
        }
    }

    pub fn apply_multiplier(&self, f: &Array1<f64>, mul: impl Fn(f64, f64) -> Complex<f64>) -> Array1<f64> {
        let mut modes = self.modes(f);
        for (idx, z) in modes.iter_mut().enumerate() {
            let (kx, ky) = self.mode_k(idx);
            *z *= mul(kx, ky);
        }
        self.values(modes)
    }

    /// Spectral partial derivative along `axis` (0 or 1).
    pub fn deriv(&self, f: &Array1<f64>, axis: usize) -> Array1<f64> {
        debug_assert!(axis < self.d);
        self.apply_multiplier(f, |kx, ky| {
            let k = if axis == 0 { kx } else { ky };
            Complex::new(0.0, k)
        })
    }

    pub fn laplacian(&self, f: &Array1<f64>) -> Array1<f64> {
        self.apply_multiplier(f, |kx, ky| Complex::new(-(kx * kx + ky * ky), 0.0))
    }

    pub fn heat(&self, f: &Array1<f64>, t: f64) -> Array1<f64> {
        self.apply_multiplier(f, |kx, ky| Complex::new((-t * (kx * kx + ky * ky)).exp(), 0.0))
    }

    /// Solves `laplacian(v) = g - mean(g)` with `mean(v) = 0`.
    pub fn solve_poisson(&self, g: &Array1<f64>) -> Array1<f64> {
        let mut modes = self.modes(g);
        for (idx, z) in modes.iter_mut().enumerate() {
            let (kx, ky) = self.mode_k(idx);
            let k2 = kx * kx + ky * ky;
            if k2 > 0.0 {
                *z /= -k2;
            } else {
                *z = Complex::new(0.0, 0.0);
            }
        }
        self.values(modes)
    }

    pub fn gamma(&self, f: &Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(self.n);
        for axis in 0..self.d {
            let df = self.deriv(f, axis);
            let dg = self.deriv(g, axis);
            out = out + &df * &dg;
        }
        out
    }

    /// Values of `f` on the `UPSAMPLE`-times finer grid (trigonometric
    /// interpolation; Nyquist coefficient split evenly between +-N/2 so the
    /// result stays real).
    pub fn upsample(&self, f: &Array1<f64>) -> Vec<f64> {
        let n = self.n_axis;
        let m = n * UPSAMPLE;
        let modes = self.modes(f);
        // fine-grid target indices with splitting weights; the Nyquist
        // coefficient is shared between +-N/2 to keep the result real
        let targets = |j: usize| -> Vec<(usize, f64)> {
            if j == n / 2 {
                vec![(n / 2, 0.5), (m - n / 2, 0.5)]
            } else if j <= n / 2 {
                vec![(j, 1.0)]
            } else {
                vec![(m - (n - j), 1.0)]
            }
        };
        let mut big = vec![Complex::new(0.0, 0.0); m.pow(self.d as u32)];
        if self.d == 1 {
            for (j, z) in modes.iter().enumerate() {
                for (tj, wgt) in targets(j) {
                    big[tj] += z * wgt;
                }
            }
            let mut data = big;
            self.inv_up.process(&mut data);
            data.into_iter().map(|z| z.re).collect()
        } else {
            for jx in 0..n {
                for jy in 0..n {
                    let z = modes[jx * n + jy];
                    for (tx, wx) in targets(jx) {
                        for (ty, wy) in targets(jy) {
                            big[tx * m + ty] += z * wx * wy;
                        }
                    }
                }
            }
            // 2D inverse on the fine grid
            let mut data = big;
            for row in data.chunks_exact_mut(m) {
                self.inv_up.process(row);
            }
            let mut col = vec![Complex::new(0.0, 0.0); m];
            for j in 0..m {
                for i in 0..m {
                    col[i] = data[i * m + j];
                }
                self.inv_up.process(&mut col);
                for i in 0..m {
                    data[i * m + j] = col[i];
                }
            }
            data.into_iter().map(|z| z.re).collect()
        }
    }
}

/// Periodic bilinear interpolation on a uniform grid covering `[0, len)^d`.
/// `values` is laid out like the torus state vector (`ix * n + iy` for d = 2).
pub fn interp_periodic(values: &[f64], n: usize, d: usize, len: f64, p: [f64; 2]) -> f64 {
    let h = len / n as f64;
    let wrap = |i: i64| -> usize { i.rem_euclid(n as i64) as usize };
    let locate = |x: f64| -> (usize, usize, f64) {
        let s = (x / h).floor();
        let frac = x / h - s;
        let i0 = wrap(s as i64);
        let i1 = wrap(s as i64 + 1);
        (i0, i1, frac)
    };
    if d == 1 {
        let (i0, i1, fx) = locate(p[0]);
        values[i0] * (1.0 - fx) + values[i1] * fx
    } else {
        let (ix0, ix1, fx) = locate(p[0]);
        let (iy0, iy1, fy) = locate(p[1]);
        let v00 = values[ix0 * n + iy0];
        let v01 = values[ix0 * n + iy1];
        let v10 = values[ix1 * n + iy0];
        let v11 = values[ix1 * n + iy1];
        v00 * (1.0 - fx) * (1.0 - fy) + v01 * (1.0 - fx) * fy + v10 * fx * (1.0 - fy) + v11 * fx * fy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(space: &TorusSpace, f: impl Fn(f64, f64) -> f64) -> Array1<f64> {
        Array1::from_iter((0..space.states()).map(|i| {
            let [x, y] = space.coords(i);
            f(x, y)
        }))
    }

    #[test]
    fn derivative_of_sine_is_cosine() {
        let sp = TorusSpace::new(1, 64, 2.0 * std::f64::consts::PI).unwrap();
        for k in [1.0, 2.0, 3.0] {
            let f = sample(&sp, |x, _| (k * x).sin());
            let df = sp.deriv(&f, 0);
            let want = sample(&sp, |x, _| k * (k * x).cos());
            let err = (&df - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "k={k}: err {err}");
        }
    }

    #[test]
    fn laplacian_eigenfunctions() {
        let sp = TorusSpace::new(1, 8, 2.0 * std::f64::consts::PI).unwrap();
        for k in [1.0, 2.0, 3.0] {
            let f = sample(&sp, |x, _| (k * x).sin());
            let lf = sp.laplacian(&f);
            let want = f.mapv(|v| -k * k * v);
            let err = (&lf - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-11, "k={k}: err {err}");
        }
    }

    #[test]
    fn heat_damps_modes_exactly() {
        let sp = TorusSpace::new(1, 32, 2.0 * std::f64::consts::PI).unwrap();
        let f = sample(&sp, |x, _| (2.0 * x).cos());
        let t = 0.3;
        let pf = sp.heat(&f, t);
        let want = f.mapv(|v| (-4.0 * t).exp() * v);
        let err = (&pf - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-13);
    }

    #[test]
    fn gamma_2d_matches_gradient_product() {
        let sp = TorusSpace::new(2, 16, 2.0 * std::f64::consts::PI).unwrap();
        let f = sample(&sp, |x, y| (x).sin() * (y).cos());
        let g = sp.gamma(&f, &f);
        let want = sample(&sp, |x, y| {
            let fx = x.cos() * y.cos();
            let fy = -x.sin() * y.sin();
            fx * fx + fy * fy
        });
        let err = (&g - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-11);
    }

    #[test]
    fn poisson_solve_inverts_laplacian() {
        let sp = TorusSpace::new(2, 16, 2.0 * std::f64::consts::PI).unwrap();
        let g = sample(&sp, |x, y| (x + 2.0 * y).sin());
        let v = sp.solve_poisson(&g);
        let lv = sp.laplacian(&v);
        let err = (&lv - &g).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-11);
    }

    #[test]
    fn upsample_agrees_on_coarse_points_1d() {
        let sp = TorusSpace::new(1, 16, 2.0 * std::f64::consts::PI).unwrap();
        let f = sample(&sp, |x, _| x.sin() + 0.3 * (3.0 * x).cos());
        let fine = sp.upsample(&f);
        for i in 0..16 {
            assert!((fine[i * UPSAMPLE] - f[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_agrees_on_coarse_points_2d() {
        let sp = TorusSpace::new(2, 8, 2.0 * std::f64::consts::PI).unwrap();
        let f = sample(&sp, |x, y| x.sin() * (2.0 * y).cos() + 0.1);
        let fine = sp.upsample(&f);
        let m = 8 * UPSAMPLE;
        for ix in 0..8 {
            for iy in 0..8 {
                let got = fine[(ix * UPSAMPLE) * m + iy * UPSAMPLE];
                let want = f[ix * 8 + iy];
                assert!((got - want).abs() < 1e-12, "({ix},{iy})");
            }
        }
    }

    #[test]
    fn interp_reproduces_linear_between_nodes() {
        let vals = vec![0.0, 1.0, 2.0, 1.0];
        let v = interp_periodic(&vals, 4, 1, 4.0, [0.5, 0.0]);
        assert!((v - 0.5).abs() < 1e-15);
        // wraps around the seam
        let v = interp_periodic(&vals, 4, 1, 4.0, [3.5, 0.0]);
        assert!((v - 0.5).abs() < 1e-15);
    }
}
