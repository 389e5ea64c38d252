//! Lifting density evolutions to measures on path space.
//!
//! A solved density path is lifted to an ensemble of trajectories by
//! mollifying both the momentum `b_t u_t` and the density `u_t` with the heat
//! semigroup at scale ε and integrating the regularized velocity
//! `b^ε_t = (b_t u_t)^ε / u_t^ε` from samples of `u_0 m`. Diagnostics check
//! the time marginals against the solver (sorted-sample `W_1` in 1D, a
//! dictionary dual gap in 2D), the metric-speed identity along paths, and the
//! dyadic no-splitting concentration statistic.

use rand::Rng;
use rayon::prelude::*;

use crate::continuity::DensityPath;
use crate::derivation::{torus_components, Derivation};
use crate::error::{CoreError, Result};
use crate::flow::FlowDomain;
use crate::rng::stream;
use crate::space::{interp_periodic, Observable, Space, UPSAMPLE};

#[derive(Clone, Copy, Debug)]
pub struct Provenance {
    pub eps: f64,
    pub dt: f64,
    pub seed: u64,
}

pub struct PathEnsemble {
    pub domain: FlowDomain,
    pub times: Vec<f64>,
    /// positions[k][i] is path i at checkpoint k.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Uniform weights summing to one.
    pub weights: Vec<f64>,
    pub provenance: Provenance,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
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
}

/// Upsampled velocity snapshot at one solver time.
struct StepField {
    fine_n: usize,
    d: usize,
    len: f64,
    components: Vec<Vec<f64>>,
}

impl StepField {
    fn velocity(&self, x: [f64; 2]) -> [f64; 2] {
        let mut v = [0.0, 0.0];
        for axis in 0..self.d {
            v[axis] = interp_periodic(&self.components[axis], self.fine_n, self.d, self.len, x);
        }
        v
    }
}

/// Mollified velocity `(b_t u_t)^ε / u_t^ε` on the upsampled grid.
fn mollified_field(
    space: &Space,
    b: &Derivation,
    u: &Observable,
    t: f64,
    eps: f64,
) -> Result<StepField> {
    let tor = space.torus_backend()?;
    let rho = space.heat(u, eps)?;
    let floor = rho.iter().cloned().fold(f64::INFINITY, f64::min);
    if floor < 1e-12 {
        return Err(CoreError::SamplingFailure(format!(
            "mollified density not strictly positive (min {floor:.3e}); increase ε"
        )));
    }
    let comps = torus_components(space, b.kind_at(t))?;
    let mut fields = Vec::with_capacity(comps.len());
    for comp in &comps {
        let momentum = comp * u;
        let smoothed = space.heat(&momentum, eps)?;
        let ratio = &smoothed / &rho;
        fields.push(tor.upsample(&ratio));
    }
    Ok(StepField {
        fine_n: tor.n_axis * UPSAMPLE,
        d: tor.d,
        len: tor.len,
        components: fields,
    })
}

/// Samples `n` points from the density `u` against the uniform grid measure:
/// cell chosen by inverse CDF, position jittered uniformly inside the cell.
pub fn sample_density(
    space: &Space,
    u: &Observable,
    n: usize,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    let tor = space.torus_backend()?;
    let mass: f64 = u.iter().map(|v| v.max(0.0)).sum::<f64>();
    if mass <= 0.0 || space.integral(u) < 0.5 {
        return Err(CoreError::SamplingFailure(
            "initial datum is not a probability density".into(),
        ));
    }
    let mut cum = Vec::with_capacity(u.len());
    let mut acc = 0.0;
    for v in u.iter() {
        acc += v.max(0.0) / mass;
        cum.push(acc);
    }
    let h = tor.len / tor.n_axis as f64;
    let samples: Vec<[f64; 2]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let r: f64 = rng.gen();
            let cell = cum.partition_point(|&c| c < r).min(u.len() - 1);
            if tor.d == 1 {
                [(cell as f64 + rng.gen::<f64>()) * h, 0.0]
            } else {
                let ix = cell / tor.n_axis;
                let iy = cell % tor.n_axis;
                [
                    (ix as f64 + rng.gen::<f64>()) * h,
                    (iy as f64 + rng.gen::<f64>()) * h,
                ]
            }
        })
        .collect();
    Ok(samples)
}

/// Lifts a solved density path to a path ensemble; checkpoints are taken
/// every `stride` solver steps.
pub fn lift_solution(
    space: &Space,
    path: &DensityPath,
    b: &Derivation,
    eps: f64,
    n_paths: usize,
    seed: u64,
    stride: usize,
) -> Result<PathEnsemble> {
    if !(eps > 0.0) {
        return Err(CoreError::InvalidParameter(
            "the lift needs a positive mollification scale".into(),
        ));
    }
    if n_paths < 1000 {
        return Err(CoreError::InvalidParameter(
            "the lift needs at least 1000 paths".into(),
        ));
    }
    let tor = space.torus_backend()?;
    let stride = stride.max(1);
    let steps = path.times.len() - 1;
    let dt = if steps > 0 {
        path.times[1] - path.times[0]
    } else {
        return Err(CoreError::InvalidParameter(
            "density path has no time steps".into(),
        ));
    };

    let mut positions = sample_density(space, &path.density_at(0), n_paths, seed)?;
    let mut checkpoints = vec![positions.clone()];
    let mut times = vec![0.0];

    let mut field_left = mollified_field(space, b, &path.density_at(0), path.times[0], eps)?;
    for k in 0..steps {
        let field_right =
            mollified_field(space, b, &path.density_at(k + 1), path.times[k + 1], eps)?;
        // RK4 with the field linearly interpolated across the step
        positions.par_iter_mut().for_each(|x| {
            let eval = |theta: f64, p: [f64; 2]| -> [f64; 2] {
                let vl = field_left.velocity(p);
                let vr = field_right.velocity(p);
                [
                    (1.0 - theta) * vl[0] + theta * vr[0],
                    (1.0 - theta) * vl[1] + theta * vr[1],
                ]
            };
            let s = *x;
            let k1 = eval(0.0, s);
            let k2 = eval(0.5, [s[0] + dt / 2.0 * k1[0], s[1] + dt / 2.0 * k1[1]]);
            let k3 = eval(0.5, [s[0] + dt / 2.0 * k2[0], s[1] + dt / 2.0 * k2[1]]);
            let k4 = eval(1.0, [s[0] + dt * k3[0], s[1] + dt * k3[1]]);
            let mut next = [
                s[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                s[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            ];
            for axis in 0..tor.d {
                next[axis] = next[axis].rem_euclid(tor.len);
            }
            *x = next;
        });
        field_left = field_right;
        if (k + 1) % stride == 0 || k + 1 == steps {
            checkpoints.push(positions.clone());
            times.push(path.times[k + 1]);
        }
    }

    Ok(PathEnsemble {
        domain: FlowDomain::Torus {
            d: tor.d,
            len: tor.len,
        },
        times,
        positions: checkpoints,
        weights: vec![1.0 / n_paths as f64; n_paths],
        provenance: Provenance { eps, dt, seed },
    })
}

/// Ensemble view of the closed-form square-root flow (uniform weights).
pub fn ensemble_from_sqrt_flow(flow: &crate::flow::SqrtFlow) -> PathEnsemble {
    let n = flow.c.len();
    let lo = -flow.c_max * flow.c_max;
    let hi = flow
        .positions
        .iter()
        .flat_map(|row| row.iter().cloned())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    PathEnsemble {
        domain: FlowDomain::Line { lo, hi },
        times: flow.times.clone(),
        positions: flow
            .positions
            .iter()
            .map(|row| row.iter().map(|&x| [x, 0.0]).collect())
            .collect(),
        weights: vec![1.0 / n as f64; n],
        provenance: Provenance {
            eps: 0.0,
            dt: if flow.times.len() > 1 {
                flow.times[1] - flow.times[0]
            } else {
                0.0
            },
            seed: 0,
        },
    }
}

/// Marginal discrepancy at requested checkpoints: circular `W_1` between the
/// empirical sample and the grid density in 1D, maximal dictionary dual gap
/// in 2D.
pub fn marginal_consistency(
    space: &Space,
    ensemble: &PathEnsemble,
    path: &DensityPath,
    t_checkpoints: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let tor = space.torus_backend()?;
    let mut out = Vec::with_capacity(t_checkpoints.len());
    for &t in t_checkpoints {
        let ke = ensemble.checkpoint_index(t);
        let kp = path.index_of(t);
        let u = path.density_at(kp);
        let disc = if tor.d == 1 {
            circular_w1(space, &ensemble.positions[ke], &ensemble.weights, &u)?
        } else {
            let mut worst = 0.0f64;
            for i in 0..space.dictionary().len() {
                let mut emp = 0.0;
                for (p, w) in ensemble.positions[ke].iter().zip(&ensemble.weights) {
                    emp += w * space.eval_dictionary_at(i, *p)?;
                }
                let expected = space.inner(&u, &space.dictionary()[i]);
                worst = worst.max((emp - expected).abs());
            }
            worst
        };
        out.push((t, disc));
    }
    Ok(out)
}

/// Exact-to-quadrature circular `W_1` between a weighted sample and a grid
/// density: `min_θ ∫ |F_emp - F_dens - θ| dx` with the median shift.
fn circular_w1(
    space: &Space,
    points: &[[f64; 2]],
    weights: &[f64],
    u: &Observable,
) -> Result<f64> {
    let tor = space.torus_backend()?;
    let n = tor.n_axis;
    let h = tor.len / n as f64;
    // cumulative density mass up to each cell boundary
    let cell_mass: Vec<f64> = (0..n).map(|i| u[i] * space.measure()[i]).collect();
    let total: f64 = cell_mass.iter().sum();
    // empirical mass per cell
    let mut emp = vec![0.0f64; n];
    for (p, w) in points.iter().zip(weights) {
        let cell = ((p[0] / h).floor() as usize).min(n - 1);
        emp[cell] += w;
    }
    let mut diffs = Vec::with_capacity(n);
    let mut gap = 0.0;
    for i in 0..n {
        gap += emp[i] - cell_mass[i] / total;
        diffs.push(gap);
    }
    let mut sorted = diffs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[n / 2];
    Ok(diffs.iter().map(|g| (g - median).abs()).sum::<f64>() * h)
}

pub struct SpeedReport {
    pub mean_abs_deviation: f64,
    pub samples: usize,
}

/// Deviation between finite-difference path speed and the mollified field
/// speed along the ensemble; first-order in the checkpoint spacing.
pub fn metric_speed_check(
    space: &Space,
    ensemble: &PathEnsemble,
    path: &DensityPath,
    b: &Derivation,
    eps: f64,
) -> Result<SpeedReport> {
    let _ = space.torus_backend()?;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for k in 0..ensemble.times.len() - 1 {
        let t0 = ensemble.times[k];
        let t1 = ensemble.times[k + 1];
        let field = mollified_field(space, b, &path.density_at(path.index_of(t0)), t0, eps)?;
        for i in 0..ensemble.len() {
            let a = ensemble.positions[k][i];
            let bpt = ensemble.positions[k + 1][i];
            let speed_fd = ensemble.domain.distance(a, bpt) / (t1 - t0);
            let v = field.velocity(a);
            let speed_field = (v[0] * v[0] + v[1] * v[1]).sqrt();
            acc += (speed_fd - speed_field).abs();
            count += 1;
        }
    }
    Ok(SpeedReport {
        mean_abs_deviation: acc / count.max(1) as f64,
        samples: count,
    })
}

pub struct ConcentrationBin {
    pub bin: usize,
    pub mass: f64,
    pub concentration: f64,
}

pub struct ConcentrationTable {
    pub bins: Vec<ConcentrationBin>,
    /// Mass-weighted mean concentration over occupied initial bins.
    pub summary: f64,
    pub empty_bins: usize,
}

fn bin_index(domain: &FlowDomain, p: [f64; 2], bins: usize, line_range: (f64, f64)) -> usize {
    match domain {
        FlowDomain::Torus { d, len } => {
            let per = |x: f64| (((x / len) * bins as f64).floor() as usize).min(bins - 1);
            if *d == 1 {
                per(p[0])
            } else {
                per(p[0]) * bins + per(p[1])
            }
        }
        FlowDomain::Line { .. } => {
            let (lo, hi) = line_range;
            let w = (hi - lo).max(1e-300);
            ((((p[0] - lo) / w) * bins as f64).floor() as usize).min(bins - 1)
        }
    }
}

/// Dyadic no-splitting diagnostic: condition paths on their initial bin and
/// measure how concentrated the time-`t` positions are across target bins.
/// Deterministic flows concentrate to 1 as the ladder refines; genuinely
/// split ensembles stay near the largest sub-population fraction.
pub fn no_splitting_diagnostic(
    ensemble: &PathEnsemble,
    t: f64,
    initial_bins: usize,
    target_bins: usize,
) -> Result<ConcentrationTable> {
    if initial_bins == 0 || target_bins == 0 {
        return Err(CoreError::InvalidParameter(
            "bin counts must be positive".into(),
        ));
    }
    let k = ensemble.checkpoint_index(t);
    let d = match ensemble.domain {
        FlowDomain::Torus { d, .. } => d,
        FlowDomain::Line { .. } => 1,
    };
    let cells = |bins: usize| bins.pow(d as u32);

    let line_range = {
        let xs: Vec<f64> = ensemble.positions[0]
            .iter()
            .chain(ensemble.positions[k].iter())
            .map(|p| p[0])
            .collect();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi + 1e-12)
    };

    let n_init = cells(initial_bins);
    let n_target = cells(target_bins);
    let mut mass = vec![0.0f64; n_init];
    let mut table = vec![0.0f64; n_init * n_target];
    for i in 0..ensemble.len() {
        let b0 = bin_index(&ensemble.domain, ensemble.positions[0][i], initial_bins, line_range);
        let bt = bin_index(&ensemble.domain, ensemble.positions[k][i], target_bins, line_range);
        mass[b0] += ensemble.weights[i];
        table[b0 * n_target + bt] += ensemble.weights[i];
    }

    let mut bins = Vec::new();
    let mut summary = 0.0;
    let mut total_mass = 0.0;
    let mut empty = 0usize;
    for b0 in 0..n_init {
        if mass[b0] <= 0.0 {
            empty += 1;
            continue;
        }
        let peak = table[b0 * n_target..(b0 + 1) * n_target]
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        let conc = peak / mass[b0];
        summary += mass[b0] * conc;
        total_mass += mass[b0];
        bins.push(ConcentrationBin {
            bin: b0,
            mass: mass[b0],
            concentration: conc,
        });
    }
    Ok(ConcentrationTable {
        bins,
        summary: summary / total_mass.max(1e-300),
        empty_bins: empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use crate::continuity::{solve, EvolutionProblem};
    use crate::derivation::constant_field;
    use crate::flow::{sqrt_example_flow, SelectionRule};

    fn torus_1d() -> Space {
        Space::torus(1, 64, 2.0 * std::f64::consts::PI, 16, 0).unwrap()
    }

    fn smooth_density(sp: &Space) -> Observable {
        let tor = sp.torus_backend().unwrap();
        let u = Array1::from_iter((0..sp.states()).map(|i| {
            let [x, y] = tor.coords(i);
            1.0 + 0.5 * x.sin() + if tor.d == 2 { 0.25 * (2.0 * y).cos() } else { 0.0 }
        }));
        let mass = sp.integral(&u);
        u.mapv(|v| v / mass)
    }

    #[test]
    fn sampler_matches_density_moments() {
        let sp = torus_1d();
        let u = smooth_density(&sp);
        let pts = sample_density(&sp, &u, 200_000, 11).unwrap();
        // E[sin x] under u m
        let tor = sp.torus_backend().unwrap();
        let sinx = Array1::from_iter((0..64).map(|i| tor.coords(i)[0].sin()));
        let want = sp.inner(&u, &sinx);
        let got: f64 = pts.iter().map(|p| p[0].sin()).sum::<f64>() / pts.len() as f64;
        assert!((want - got).abs() < 0.01, "{want} vs {got}");
    }

    #[test]
    fn zero_drift_lift_has_constant_paths() {
        let sp = torus_1d();
        let b = constant_field(&sp, [0.0, 0.0]).unwrap();
        let u0 = smooth_density(&sp);
        let problem = EvolutionProblem::new(&sp, &b, u0, 0.2, 0.02).unwrap();
        let path = solve(&problem).unwrap();
        let ens = lift_solution(&sp, &path, &b, 0.01, 2000, 5, 2).unwrap();
        for k in 0..ens.times.len() {
            for i in 0..ens.len() {
                let d = ens.domain.distance(ens.positions[0][i], ens.positions[k][i]);
                assert!(d < 1e-12, "path moved by {d}");
            }
        }
    }

    #[test]
    fn constant_drift_marginals_translate() {
        let sp = torus_1d();
        let b = constant_field(&sp, [1.0, 0.0]).unwrap();
        let u0 = smooth_density(&sp);
        let problem = EvolutionProblem::new(&sp, &b, u0, 0.5, 0.01).unwrap();
        let path = solve(&problem).unwrap();
        let ens = lift_solution(&sp, &path, &b, 0.02, 20_000, 3, 10).unwrap();
        let checks: Vec<f64> = vec![0.0, 0.25, 0.5];
        let discs = marginal_consistency(&sp, &ens, &path, &checks).unwrap();
        for (t, d) in discs {
            assert!(d < 0.02, "t = {t}: W1 {d}");
        }
    }

    #[test]
    fn lifted_marginal_close_to_direct_resampling() {
        let sp = torus_1d();
        let b = constant_field(&sp, [1.0, 0.0]).unwrap();
        let u0 = smooth_density(&sp);
        let problem = EvolutionProblem::new(&sp, &b, u0, 0.25, 0.0125).unwrap();
        let path = solve(&problem).unwrap();
        let n = 20_000usize;
        let ens = lift_solution(&sp, &path, &b, 0.02, n, 3, 5).unwrap();
        let t = 0.25;
        let lifted = marginal_consistency(&sp, &ens, &path, &[t]).unwrap()[0].1;
        // direct resampling oracle at the same sample size
        let resampled = sample_density(&sp, &path.density_at(path.index_of(t)), n, 77).unwrap();
        let w = vec![1.0 / n as f64; n];
        let direct = circular_w1(&sp, &resampled, &w, &path.density_at(path.index_of(t))).unwrap();
        assert!(
            lifted < 6.0 * direct.max(1e-3),
            "lifted {lifted} vs resampled {direct}"
        );
    }

    #[test]
    fn metric_speed_deviation_halves_with_dt() {
        let sp = Space::torus(2, 32, 2.0 * std::f64::consts::PI, 16, 0).unwrap();
        let b = crate::derivation::shear_field(&sp, 1.0).unwrap();
        let u0 = smooth_density(&sp);
        let mut devs = Vec::new();
        for dt in [0.05, 0.025] {
            let problem =
                EvolutionProblem::new(&sp, &b, u0.clone(), 0.2, dt).unwrap();
            let path = solve(&problem).unwrap();
            let ens = lift_solution(&sp, &path, &b, 0.02, 2000, 9, 1).unwrap();
            let report = metric_speed_check(&sp, &ens, &path, &b, 0.02).unwrap();
            devs.push(report.mean_abs_deviation);
        }
        let ratio = devs[1] / devs[0];
        assert!(
            ratio < 0.7,
            "metric-speed deviation should drop ~linearly in dt: {devs:?}"
        );
    }

    #[test]
    fn constant_speed_matches_field_exactly() {
        let sp = torus_1d();
        let b = constant_field(&sp, [0.8, 0.0]).unwrap();
        let u0 = smooth_density(&sp);
        let problem = EvolutionProblem::new(&sp, &b, u0, 0.2, 0.02).unwrap();
        let path = solve(&problem).unwrap();
        let ens = lift_solution(&sp, &path, &b, 0.02, 2000, 5, 2).unwrap();
        let report = metric_speed_check(&sp, &ens, &path, &b, 0.02).unwrap();
        assert!(
            report.mean_abs_deviation < 5e-3,
            "constant-speed deviation {}",
            report.mean_abs_deviation
        );
    }

    #[test]
    fn no_splitting_constant_paths_fully_concentrate() {
        let sp = torus_1d();
        let b = constant_field(&sp, [0.0, 0.0]).unwrap();
        let u0 = smooth_density(&sp);
        let problem = EvolutionProblem::new(&sp, &b, u0, 0.2, 0.02).unwrap();
        let path = solve(&problem).unwrap();
        let ens = lift_solution(&sp, &path, &b, 0.01, 4000, 5, 5).unwrap();
        let table = no_splitting_diagnostic(&ens, 0.2, 8, 8).unwrap();
        assert!(
            (table.summary - 1.0).abs() < 1e-12,
            "constant paths must concentrate, got {}",
            table.summary
        );
    }

    #[test]
    fn no_splitting_detects_two_populations() {
        let flow = sqrt_example_flow(
            &SelectionRule::TwoPopulation { tau: 1.0 },
            4.0,
            0.5,
            40_000,
            1.0,
            13,
        )
        .unwrap();
        let ens = ensemble_from_sqrt_flow(&flow);
        let table = no_splitting_diagnostic(&ens, 4.0, 16, 16).unwrap();
        assert!(
            table.summary <= 0.75,
            "split ensemble should not concentrate: {}",
            table.summary
        );
    }

    #[test]
    fn concentration_bounded_below_by_uniform() {
        let flow = sqrt_example_flow(&SelectionRule::Zero, 1.0, 0.25, 5000, 1.0, 3).unwrap();
        let ens = ensemble_from_sqrt_flow(&flow);
        let table = no_splitting_diagnostic(&ens, 1.0, 8, 8).unwrap();
        for bin in &table.bins {
            assert!(bin.concentration >= 1.0 / 8.0 - 1e-12);
            assert!(bin.concentration <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn lift_rejects_small_ensembles_and_zero_eps() {
        let sp = torus_1d();
        let b = constant_field(&sp, [0.0, 0.0]).unwrap();
        let u0 = smooth_density(&sp);
        let problem = EvolutionProblem::new(&sp, &b, u0, 0.1, 0.05).unwrap();
        let path = solve(&problem).unwrap();
        assert!(lift_solution(&sp, &path, &b, 0.01, 10, 5, 1).is_err());
        assert!(lift_solution(&sp, &path, &b, 0.0, 2000, 5, 1).is_err());
    }
}
