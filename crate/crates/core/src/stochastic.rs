//! Diffusion extension: the Kolmogorov operator `ℒ_t f = b_t(f) + ½ a_t Δf`,
//! its Fokker-Planck evolution (shared with the continuity driver, so the
//! `a ≡ 0` case degenerates to pure transport bit for bit), Euler-Maruyama
//! particle sampling with running `∫ ℒf` integrals, empirical
//! martingale-defect statistics, and the elliptic energy-uniqueness ladder.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::continuity::{solve, DensityPath, EvolutionProblem, PiecewisePath};
use crate::derivation::Derivation;
use crate::error::{CoreError, Result};
use crate::flow::FlowField;
use crate::rng::stream;
use crate::space::{interp_periodic, Observable, Space, TorusMode, UPSAMPLE};

pub struct KolmogorovOperator<'a> {
    pub space: &'a Space,
    pub drift: &'a Derivation,
    /// Diffusion coefficient path `a_t >= 0`.
    pub diffusion: PiecewisePath,
}

impl<'a> KolmogorovOperator<'a> {
    pub fn new(space: &'a Space, drift: &'a Derivation, diffusion: PiecewisePath) -> Result<Self> {
        drift.validate_on(space)?;
        let op = KolmogorovOperator {
            space,
            drift,
            diffusion,
        };
        let a0 = op.diffusion.at(0.0);
        if a0.len() != space.states() {
            return Err(CoreError::SizeMismatch {
                expected: space.states(),
                got: a0.len(),
            });
        }
        if a0.iter().any(|&v| v < 0.0) {
            return Err(CoreError::InvalidParameter(
                "diffusion coefficient must be nonnegative".into(),
            ));
        }
        Ok(op)
    }

    pub fn constant_diffusion(space: &'a Space, drift: &'a Derivation, level: f64) -> Result<Self> {
        KolmogorovOperator::new(
            space,
            drift,
            PiecewisePath::steady(Array1::from_elem(space.states(), level)),
        )
    }

    /// `ℒ_t f = b_t(f) + ½ a_t Δf`.
    pub fn apply(&self, f: &Observable, t: f64) -> Result<Observable> {
        let bf = self.drift.apply(self.space, f, t)?;
        let lap = self.space.generator(f);
        Ok(bf + &(self.diffusion.at(t) * &lap * 0.5))
    }
}

/// Very weak Fokker-Planck solve `d/dt <u, f> = <u, ℒ_t f>` via the shared
/// implicit-midpoint driver.
pub fn fokker_planck_solve(
    op: &KolmogorovOperator,
    initial: Observable,
    horizon: f64,
    dt: f64,
) -> Result<DensityPath> {
    let problem = EvolutionProblem::new(op.space, op.drift, initial, horizon, dt)?
        .with_diffusion(op.diffusion.clone());
    solve(&problem)
}

pub struct EnergyLadder {
    pub dts: Vec<f64>,
    /// `‖u^{dt} - u^{dt/2}‖_2` at the final time, one entry per rung.
    pub gaps: Vec<f64>,
    /// Consecutive gap ratios; second-order stepping gives ratios near 4.
    pub ratios: Vec<f64>,
    pub lambda: f64,
    /// Gronwall rate `c = (2 ‖|b|²‖_∞ + ‖Γ(a)‖_∞) / λ`.
    pub gronwall_rate: f64,
}

/// Elliptic energy-uniqueness ladder: two discretizations of the same datum
/// must converge together at the scheme's order. Rejects degenerate
/// coefficients (`min a = 0`); those are covered by the report-only
/// diagnostics in [`degenerate_coefficient_report`].
pub fn energy_uniqueness_check(
    op: &KolmogorovOperator,
    initial: &Observable,
    horizon: f64,
    dt0: f64,
    rungs: usize,
) -> Result<EnergyLadder> {
    let lambda = op
        .diffusion
        .at(0.0)
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(lambda > 0.0) {
        return Err(CoreError::InvalidParameter(format!(
            "energy uniqueness needs an elliptic coefficient: min a = {lambda}"
        )));
    }
    if rungs < 1 {
        return Err(CoreError::InvalidParameter("need at least one rung".into()));
    }
    let sp = op.space;
    let mut dts = Vec::with_capacity(rungs);
    let mut gaps = Vec::with_capacity(rungs);
    let mut dt = dt0;
    let mut coarse = fokker_planck_solve(op, initial.clone(), horizon, dt)?;
    for _ in 0..rungs {
        let fine = fokker_planck_solve(op, initial.clone(), horizon, dt / 2.0)?;
        let gap = sp.lp_norm(&(&coarse.last() - &fine.last()), 2.0);
        dts.push(dt);
        gaps.push(gap);
        coarse = fine;
        dt /= 2.0;
    }
    let ratios = gaps
        .windows(2)
        .map(|w| if w[1] > 0.0 { w[0] / w[1] } else { f64::INFINITY })
        .collect();

    let pw = op.drift.pointwise_norm(sp, 0.0)?;
    let b_sq_sup = pw.values.iter().map(|v| v * v).fold(0.0, f64::max);
    let gamma_a_sup = sp
        .gamma_diag(op.diffusion.at(0.0))?
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    Ok(EnergyLadder {
        dts,
        gaps,
        ratios,
        lambda,
        gronwall_rate: (2.0 * b_sq_sup + gamma_a_sup) / lambda,
    })
}

pub struct DegenerateReport {
    pub a_min: f64,
    pub a_l2: f64,
    pub sqrt_gamma_a_l2: f64,
    /// Lower bound for the deformation norm of the gradient derivation of
    /// `a`, standing in for a Hessian-size diagnostic.
    pub hessian_proxy_lower: f64,
}

/// Coefficient diagnostics for the degenerate (non-elliptic) regime; no
/// assertion is attached to them.
pub fn degenerate_coefficient_report(op: &KolmogorovOperator, seed: u64) -> Result<DegenerateReport> {
    let sp = op.space;
    let a = op.diffusion.at(0.0).clone();
    let grad_a = crate::derivation::gradient_field(sp, a.clone())?;
    let deformation = grad_a.dsym_norm_estimate(sp, 0.0, 4, seed)?;
    let sqrt_gamma = sp.gamma_diag(&a)?.mapv(|v| v.max(0.0).sqrt());
    Ok(DegenerateReport {
        a_min: a.iter().cloned().fold(f64::INFINITY, f64::min),
        a_l2: sp.lp_norm(&a, 2.0),
        sqrt_gamma_a_l2: sp.lp_norm(&sqrt_gamma, 2.0),
        hessian_proxy_lower: deformation.dsym_norm_lower,
    })
}

/// Analytic pieces of the dictionary mode needed along particle paths.
struct ModeEval {
    h: f64,
    mode: TorusMode,
}

impl ModeEval {
    fn value(&self, p: [f64; 2]) -> f64 {
        let theta =
            self.h * (self.mode.kx as f64 * p[0] + self.mode.ky as f64 * p[1]) + self.mode.phase;
        theta.sin() / self.mode.scale
    }

    fn k_sq(&self) -> f64 {
        self.h * self.h * ((self.mode.kx * self.mode.kx + self.mode.ky * self.mode.ky) as f64)
    }

    fn grad(&self, p: [f64; 2]) -> [f64; 2] {
        let theta =
            self.h * (self.mode.kx as f64 * p[0] + self.mode.ky as f64 * p[1]) + self.mode.phase;
        let c = theta.cos() / self.mode.scale;
        [
            self.h * self.mode.kx as f64 * c,
            self.h * self.mode.ky as f64 * c,
        ]
    }

    fn gamma(&self, p: [f64; 2]) -> f64 {
        let g = self.grad(p);
        g[0] * g[0] + g[1] * g[1]
    }
}

pub struct SdeEnsemble {
    pub times: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    /// positions[k][i]: wrapped particle positions at checkpoint k.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Unwrapped displacement `x_t - x_0` (for variance diagnostics).
    pub displacement: Vec<Vec<[f64; 2]>>,
    /// Dictionary indices whose `∫ ℒf` integrals are carried per path.
    pub observable_ids: Vec<usize>,
    /// integrals[o][k][i]: running `∫_0^{t_k} (ℒ f)(x_s) ds` for path i.
    pub integrals: Vec<Vec<Vec<f64>>>,
    /// qv_mean[o][k]: mean over paths of `∫_0^{t_k} a Γ(f)(x_s) ds`.
    pub qv_mean: Vec<Vec<f64>>,
}

impl SdeEnsemble {
    pub fn len(&self) -> usize {
        self.positions[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions[0].is_empty()
    }

    pub fn checkpoint_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (k, &tt) in self.times.iter().enumerate() {
            if (tt - t).abs() < dist {
                dist = (tt - t).abs();
                best = k;
            }
        }
        best
    }

    /// `M^f_t = f(x_t) - f(x_0) - ∫_0^t ℒf(x_s) ds` for carried observable
    /// slot `o`, path `i`, checkpoint `k`.
    pub fn martingale_value(&self, space: &Space, o: usize, k: usize, i: usize) -> Result<f64> {
        let idx = self.observable_ids[o];
        let f_t = space.eval_dictionary_at(idx, self.positions[k][i])?;
        let f_0 = space.eval_dictionary_at(idx, self.positions[0][i])?;
        Ok(f_t - f_0 - self.integrals[o][k][i])
    }
}

/// Euler-Maruyama sampler for `dx = b dt + sqrt(a) dW` on the torus, with
/// `∫ ℒf` accumulated by the midpoint rule for the carried observables.
pub fn sde_sample(
    op: &KolmogorovOperator,
    initial: &Observable,
    n_paths: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
    checkpoint_times: &[f64],
    n_observables: usize,
) -> Result<SdeEnsemble> {
    if n_paths < 1000 {
        return Err(CoreError::InvalidParameter(
            "the sampler needs at least 1000 paths".into(),
        ));
    }
    let sp = op.space;
    let tor = sp.torus_backend()?;
    let steps = (horizon / dt).round() as usize;
    if ((horizon / dt) - steps as f64).abs() > 1e-9 || steps == 0 {
        return Err(CoreError::InvalidParameter(
            "horizon / dt must be a positive integer".into(),
        ));
    }

    // checkpoint step indices (deduplicated, always containing 0 and T)
    let mut check_steps: Vec<usize> = checkpoint_times
        .iter()
        .map(|&t| ((t / dt).round() as usize).min(steps))
        .collect();
    check_steps.push(0);
    check_steps.push(steps);
    check_steps.sort_unstable();
    check_steps.dedup();
    let times: Vec<f64> = check_steps.iter().map(|&k| k as f64 * dt).collect();

    // drift/diffusion as interpolable grids, one per drift knot
    let drift_fields: Vec<(f64, FlowField)> = op
        .drift
        .knot_times()
        .iter()
        .map(|&t| {
            // rebuild the steady slice at knot time t
            let kind = op.drift.kind_at(t).clone();
            let steady = Derivation::steady(kind);
            FlowField::from_derivation(sp, &steady, 0.0).map(|f| (t, f))
        })
        .collect::<Result<_>>()?;
    let field_at = |t: f64| -> &FlowField {
        let mut current = &drift_fields[0].1;
        for (kt, f) in &drift_fields {
            if *kt <= t {
                current = f;
            }
        }
        current
    };
    let a_fine = tor.upsample(op.diffusion.at(0.0));
    let fine_n = tor.n_axis * UPSAMPLE;
    let a_at = |p: [f64; 2]| interp_periodic(&a_fine, fine_n, tor.d, tor.len, p).max(0.0);

    let modes: Vec<ModeEval> = (0..n_observables.min(sp.dictionary().len()))
        .map(|i| {
            sp.torus_mode(i).map(|mode| ModeEval {
                h: 2.0 * std::f64::consts::PI / tor.len,
                mode,
            })
        })
        .collect::<Result<_>>()?;

    let starts = crate::superposition::sample_density(sp, initial, n_paths, seed)?;

    struct PathOut {
        positions: Vec<[f64; 2]>,
        displacement: Vec<[f64; 2]>,
        integrals: Vec<Vec<f64>>,
        qv: Vec<Vec<f64>>,
        bad_diffusion: bool,
    }

    let results: Vec<PathOut> = starts
        .par_iter()
        .enumerate()
        .map(|(i, &x0)| {
            let mut rng = stream(seed ^ 0x5dee, i as u64);
            let mut x = x0;
            let mut disp = [0.0f64, 0.0];
            let mut integrals = vec![0.0f64; modes.len()];
            let mut qv = vec![0.0f64; modes.len()];
            let mut out = PathOut {
                positions: Vec::with_capacity(times.len()),
                displacement: Vec::with_capacity(times.len()),
                integrals: vec![Vec::with_capacity(times.len()); modes.len()],
                qv: vec![Vec::with_capacity(times.len()); modes.len()],
                bad_diffusion: false,
            };
            let record = |x: [f64; 2],
                          disp: [f64; 2],
                          ints: &[f64],
                          qvs: &[f64],
                          out: &mut PathOut| {
                out.positions.push(x);
                out.displacement.push(disp);
                for (o, v) in ints.iter().enumerate() {
                    out.integrals[o].push(*v);
                }
                for (o, v) in qvs.iter().enumerate() {
                    out.qv[o].push(*v);
                }
            };
            let mut next_check = 0usize;
            if check_steps[next_check] == 0 {
                record(x, disp, &integrals, &qv, &mut out);
                next_check += 1;
            }
            for k in 0..steps {
                let t = k as f64 * dt;
                let field = field_at(t);
                let v = field.velocity(t, x);
                let a_val = a_at(x);
                if a_val < 0.0 {
                    out.bad_diffusion = true;
                    break;
                }
                let noise_scale = (a_val * dt).sqrt();
                let mut delta = [v[0] * dt, v[1] * dt];
                for axis in 0..tor.d {
                    let xi: f64 = rng.sample(StandardNormal);
                    delta[axis] += noise_scale * xi;
                }
                let mut xn = [x[0] + delta[0], x[1] + delta[1]];
                for axis in 0..tor.d {
                    xn[axis] = xn[axis].rem_euclid(tor.len);
                }
                // midpoint-rule accumulation of ∫ℒf and ∫aΓ(f)
                let mid = [x[0] + 0.5 * delta[0], x[1] + 0.5 * delta[1]];
                let mid_wrapped = {
                    let mut m = mid;
                    for axis in 0..tor.d {
                        m[axis] = m[axis].rem_euclid(tor.len);
                    }
                    m
                };
                let v_mid = field.velocity(t + dt / 2.0, mid_wrapped);
                let a_mid = a_at(mid_wrapped);
                for (o, mode) in modes.iter().enumerate() {
                    let grad = mode.grad(mid_wrapped);
                    let fval = mode.value(mid_wrapped);
                    let lf = v_mid[0] * grad[0]
                        + v_mid[1] * grad[1]
                        + 0.5 * a_mid * (-mode.k_sq()) * fval;
                    integrals[o] += dt * lf;
                    qv[o] += dt * a_mid * mode.gamma(mid_wrapped);
                }
                disp = [disp[0] + delta[0], disp[1] + delta[1]];
                x = xn;
                if next_check < check_steps.len() && check_steps[next_check] == k + 1 {
                    record(x, disp, &integrals, &qv, &mut out);
                    next_check += 1;
                }
            }
            out
        })
        .collect();

    if let Some(bad) = results.iter().position(|r| r.bad_diffusion) {
        return Err(CoreError::FlowAborted(format!(
            "negative diffusion coefficient along path {bad}"
        )));
    }

    let n_checks = times.len();
    let mut positions = vec![Vec::with_capacity(n_paths); n_checks];
    let mut displacement = vec![Vec::with_capacity(n_paths); n_checks];
    let mut integrals = vec![vec![Vec::with_capacity(n_paths); n_checks]; modes.len()];
    let mut qv_mean = vec![vec![0.0f64; n_checks]; modes.len()];
    for r in &results {
        for k in 0..n_checks {
            positions[k].push(r.positions[k]);
            displacement[k].push(r.displacement[k]);
            for o in 0..modes.len() {
                integrals[o][k].push(r.integrals[o][k]);
                qv_mean[o][k] += r.qv[o][k] / n_paths as f64;
            }
        }
    }

    Ok(SdeEnsemble {
        times,
        dt,
        seed,
        positions,
        displacement,
        observable_ids: (0..modes.len()).collect(),
        integrals,
        qv_mean,
    })
}

pub struct MartingaleRow {
    pub observable: usize,
    pub s: f64,
    pub t: f64,
    pub bin: usize,
    pub count: usize,
    pub defect: f64,
    pub stderr: f64,
    pub low_power: bool,
}

pub struct MartingaleTable {
    pub rows: Vec<MartingaleRow>,
    /// Count-weighted mean |defect| over well-powered rows.
    pub summary_defect: f64,
    pub summary_stderr: f64,
    pub low_power_rows: usize,
}

/// Empirical conditional-expectation test of the martingale property:
/// paths are binned by their position at time `s`, and within each bin the
/// averages of `M^f_t` and `M^f_s` are compared.
pub fn martingale_defect(
    space: &Space,
    ens: &SdeEnsemble,
    s_grid: &[f64],
    t_grid: &[f64],
    bins: usize,
) -> Result<MartingaleTable> {
    if bins == 0 {
        return Err(CoreError::InvalidParameter("bins must be positive".into()));
    }
    let tor = space.torus_backend()?;
    let n_cells = bins.pow(tor.d as u32);
    let mut rows = Vec::new();
    for &s in s_grid {
        for &t in t_grid {
            if s >= t {
                continue;
            }
            let ks = ens.checkpoint_index(s);
            let kt = ens.checkpoint_index(t);
            for (o, _) in ens.observable_ids.iter().enumerate() {
                let mut sums = vec![(0usize, 0.0f64, 0.0f64); n_cells];
                for i in 0..ens.len() {
                    let p = ens.positions[ks][i];
                    let per = |x: f64| {
                        (((x / tor.len) * bins as f64).floor() as usize).min(bins - 1)
                    };
                    let cell = if tor.d == 1 {
                        per(p[0])
                    } else {
                        per(p[0]) * bins + per(p[1])
                    };
                    let diff = ens.martingale_value(space, o, kt, i)?
                        - ens.martingale_value(space, o, ks, i)?;
                    sums[cell].0 += 1;
                    sums[cell].1 += diff;
                    sums[cell].2 += diff * diff;
                }
                for (cell, &(count, sum, sum_sq)) in sums.iter().enumerate() {
                    if count == 0 {
                        continue;
                    }
                    let mean = sum / count as f64;
                    let var = (sum_sq / count as f64 - mean * mean).max(0.0);
                    let stderr = (var / count as f64).sqrt();
                    rows.push(MartingaleRow {
                        observable: ens.observable_ids[o],
                        s,
                        t,
                        bin: cell,
                        count,
                        defect: mean.abs(),
                        stderr,
                        low_power: count < 30,
                    });
                }
            }
        }
    }
    let mut weighted = 0.0;
    let mut weighted_se = 0.0;
    let mut total = 0usize;
    let mut low = 0usize;
    for row in &rows {
        if row.low_power {
            low += 1;
            continue;
        }
        weighted += row.count as f64 * row.defect;
        weighted_se += row.count as f64 * row.stderr;
        total += row.count;
    }
    Ok(MartingaleTable {
        rows,
        summary_defect: weighted / total.max(1) as f64,
        summary_stderr: weighted_se / total.max(1) as f64,
        low_power_rows: low,
    })
}

pub struct QuadraticVariationRow {
    pub observable: usize,
    pub s: f64,
    pub t: f64,
    pub empirical_var: f64,
    pub expected_qv: f64,
}

/// Variance of martingale increments against the accumulated
/// `∫ a Γ(f)(x_s) ds` (the predictable quadratic variation).
pub fn quadratic_variation_check(
    space: &Space,
    ens: &SdeEnsemble,
    s: f64,
    t: f64,
) -> Result<Vec<QuadraticVariationRow>> {
    let ks = ens.checkpoint_index(s);
    let kt = ens.checkpoint_index(t);
    let mut out = Vec::new();
    for (o, &idx) in ens.observable_ids.iter().enumerate() {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let n = ens.len();
        for i in 0..n {
            let diff = ens.martingale_value(space, o, kt, i)?
                - ens.martingale_value(space, o, ks, i)?;
            sum += diff;
            sum_sq += diff * diff;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        out.push(QuadraticVariationRow {
            observable: idx,
            s: ens.times[ks],
            t: ens.times[kt],
            empirical_var: var,
            expected_qv: ens.qv_mean[o][kt] - ens.qv_mean[o][ks],
        });
    }
    Ok(out)
}

/// Max over the dictionary of `|mean f(x_t) - <u_t, f>|` at the requested
/// checkpoints: the ensemble marginal against the Fokker-Planck solution.
pub fn fp_empirical_consistency(
    space: &Space,
    ens: &SdeEnsemble,
    fp_path: &DensityPath,
    t_checkpoints: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(t_checkpoints.len());
    for &t in t_checkpoints {
        let ke = ens.checkpoint_index(t);
        let kp = fp_path.index_of(t);
        let u = fp_path.density_at(kp);
        let mut worst = 0.0f64;
        for i in 0..space.dictionary().len() {
            let mut emp = 0.0;
            for p in &ens.positions[ke] {
                emp += space.eval_dictionary_at(i, *p)?;
            }
            emp /= ens.len() as f64;
            let expected = space.inner(&u, &space.dictionary()[i]);
            worst = worst.max((emp - expected).abs());
        }
        out.push((t, worst));
    }
    Ok(out)
}
