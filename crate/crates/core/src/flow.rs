//! Particle flows of (mollified) vector fields on the line and torus:
//! RK4 trajectories with the volume-distortion ODE `J' = (div b)(X) J`
//! integrated alongside, the closed-form square-root selection study with its
//! push-forward absolute-continuity detector, and pathwise stability probes.

use rand::Rng;
use rayon::prelude::*;

use crate::derivation::{torus_components, Derivation};
use crate::error::{CoreError, Result};
use crate::rng::stream;
use crate::space::{interp_periodic, Observable, Space, UPSAMPLE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowDomain {
    /// Interval with clamping at the ends (escaping particles are counted).
    Line { lo: f64, hi: f64 },
    Torus { d: usize, len: f64 },
}

impl FlowDomain {
    /// Distance respecting periodicity on torus domains.
    pub fn distance(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        match self {
            FlowDomain::Line { .. } => (a[0] - b[0]).abs(),
            FlowDomain::Torus { d, len } => {
                let mut acc = 0.0;
                for axis in 0..*d {
                    let mut diff = (a[axis] - b[axis]).rem_euclid(*len);
                    if diff > *len / 2.0 {
                        diff = *len - diff;
                    }
                    acc += diff * diff;
                }
                acc.sqrt()
            }
        }
    }

    fn confine(&self, x: [f64; 2], clamped: &mut bool) -> [f64; 2] {
        match self {
            FlowDomain::Line { lo, hi } => {
                let mut out = x;
                if out[0] < *lo {
                    out[0] = *lo;
                    *clamped = true;
                } else if out[0] > *hi {
                    out[0] = *hi;
                    *clamped = true;
                }
                out
            }
            FlowDomain::Torus { d, len } => {
                let mut out = x;
                for axis in 0..*d {
                    out[axis] = out[axis].rem_euclid(*len);
                }
                out
            }
        }
    }
}

enum FieldEval {
    Zero,
    Constant([f64; 2]),
    /// Line field `b = -rate x`.
    LinearCompress { rate: f64 },
    /// Line field `b = sqrt(|x|)` (not Lipschitz; used only where the
    /// closed-form study would be, kept for probing mollified ladders).
    SqrtAbs,
    /// Torus field sampled on the upsampled grid with bilinear lookup.
    Grid {
        d: usize,
        len: f64,
        fine_n: usize,
        components: Vec<Vec<f64>>,
        divergence: Vec<f64>,
    },
}

/// Velocity field for particle integration, optionally heat-mollified at
/// scale ε (torus backends reuse the space's semigroup as the mollifier).
pub struct FlowField {
    pub domain: FlowDomain,
    pub eps: f64,
    eval: FieldEval,
}

impl FlowField {
    pub fn zero_line(lo: f64, hi: f64) -> Self {
        FlowField {
            domain: FlowDomain::Line { lo, hi },
            eps: 0.0,
            eval: FieldEval::Zero,
        }
    }

    /// `b = -rate x` on the line (globally Lipschitz, compressive).
    pub fn compress_line(lo: f64, hi: f64, rate: f64) -> Self {
        FlowField {
            domain: FlowDomain::Line { lo, hi },
            eps: 0.0,
            eval: FieldEval::LinearCompress { rate },
        }
    }

    pub fn sqrt_abs_line(lo: f64, hi: f64) -> Self {
        FlowField {
            domain: FlowDomain::Line { lo, hi },
            eps: 0.0,
            eval: FieldEval::SqrtAbs,
        }
    }

    /// Torus field from a (steady) derivation, heat-mollified at time `eps`
    /// and spectrally upsampled for off-grid evaluation.
    pub fn from_derivation(space: &Space, b: &Derivation, eps: f64) -> Result<Self> {
        if eps < 0.0 {
            return Err(CoreError::InvalidParameter(format!(
                "mollification scale must be nonnegative, got {eps}"
            )));
        }
        let tor = space.torus_backend()?;
        let comps = torus_components(space, b.kind_at(0.0))?;
        let mut mollified = Vec::with_capacity(comps.len());
        for c in &comps {
            let smoothed = if eps > 0.0 { space.heat(c, eps)? } else { c.clone() };
            mollified.push(tor.upsample(&smoothed));
        }
        let div = b.divergence(space, 0.0)?;
        let div_smoothed = if eps > 0.0 { space.heat(&div, eps)? } else { div };
        let divergence = tor.upsample(&div_smoothed);
        Ok(FlowField {
            domain: FlowDomain::Torus {
                d: tor.d,
                len: tor.len,
            },
            eps,
            eval: FieldEval::Grid {
                d: tor.d,
                len: tor.len,
                fine_n: tor.n_axis * UPSAMPLE,
                components: mollified,
                divergence,
            },
        })
    }

    pub fn velocity(&self, _t: f64, x: [f64; 2]) -> [f64; 2] {
        match &self.eval {
            FieldEval::Zero => [0.0, 0.0],
            FieldEval::Constant(v) => *v,
            FieldEval::LinearCompress { rate } => [-rate * x[0], 0.0],
            FieldEval::SqrtAbs => [x[0].abs().sqrt(), 0.0],
            FieldEval::Grid {
                d,
                len,
                fine_n,
                components,
                ..
            } => {
                let mut v = [0.0, 0.0];
                for axis in 0..*d {
                    v[axis] = interp_periodic(&components[axis], *fine_n, *d, *len, x);
                }
                v
            }
        }
    }

    pub fn div_at(&self, _t: f64, x: [f64; 2]) -> f64 {
        match &self.eval {
            FieldEval::Zero | FieldEval::Constant(_) => 0.0,
            FieldEval::LinearCompress { rate } => -rate,
            FieldEval::SqrtAbs => {
                let ax = x[0].abs();
                if ax < 1e-12 {
                    0.0
                } else {
                    0.5 * x[0].signum() / ax.sqrt()
                }
            }
            FieldEval::Grid {
                d,
                len,
                fine_n,
                divergence,
                ..
            } => interp_periodic(divergence, *fine_n, *d, *len, x),
        }
    }

    pub fn constant_torus(d: usize, len: f64, v: [f64; 2]) -> Self {
        FlowField {
            domain: FlowDomain::Torus { d, len },
            eps: 0.0,
            eval: FieldEval::Constant(v),
        }
    }

    fn is_lipschitz(&self) -> bool {
        !matches!(self.eval, FieldEval::SqrtAbs)
    }
}

pub struct FlowMap {
    pub domain: FlowDomain,
    pub times: Vec<f64>,
    pub initial: Vec<[f64; 2]>,
    /// positions[k][i] is particle i at checkpoint k.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Volume distortion along each trajectory.
    pub jacobian: Vec<Vec<f64>>,
    pub clamped: usize,
}

impl FlowMap {
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

/// Classical RK4 per particle on `x' = b(t, x)` coupled with
/// `J' = (div b)(t, x) J`, `J(0) = 1`; checkpoints every `stride` steps.
pub fn integrate_flow(
    field: &FlowField,
    starts: &[[f64; 2]],
    horizon: f64,
    dt: f64,
    stride: usize,
) -> Result<FlowMap> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(CoreError::InvalidParameter(
            "flow integration needs positive dt and horizon".into(),
        ));
    }
    if field.eps == 0.0 && !field.is_lipschitz() {
        return Err(CoreError::InvalidParameter(
            "field is not Lipschitz; integrate a mollified version instead".into(),
        ));
    }
    let steps = (horizon / dt).round() as usize;
    if ((horizon / dt) - steps as f64).abs() > 1e-9 {
        return Err(CoreError::InvalidParameter(
            "horizon / dt must be an integer".into(),
        ));
    }
    let stride = stride.max(1);

    struct Track {
        checkpoints: Vec<([f64; 2], f64)>,
        clamped: bool,
        failed: bool,
    }

    let tracks: Vec<Track> = starts
        .par_iter()
        .map(|&x0| {
            let mut x = x0;
            let mut jac = 1.0f64;
            let mut clamped = false;
            let mut checkpoints = Vec::with_capacity(steps / stride + 2);
            checkpoints.push((x, jac));
            let mut failed = false;
            for k in 0..steps {
                let t = k as f64 * dt;
                let deriv = |tt: f64, state: ([f64; 2], f64)| -> ([f64; 2], f64) {
                    let v = field.velocity(tt, state.0);
                    let dj = field.div_at(tt, state.0) * state.1;
                    (v, dj)
                };
                let add = |s: ([f64; 2], f64), d: ([f64; 2], f64), h: f64| -> ([f64; 2], f64) {
                    (
                        [s.0[0] + h * d.0[0], s.0[1] + h * d.0[1]],
                        s.1 + h * d.1,
                    )
                };
                let s0 = (x, jac);
                let k1 = deriv(t, s0);
                let k2 = deriv(t + dt / 2.0, add(s0, k1, dt / 2.0));
                let k3 = deriv(t + dt / 2.0, add(s0, k2, dt / 2.0));
                let k4 = deriv(t + dt, add(s0, k3, dt));
                x = [
                    x[0] + dt / 6.0 * (k1.0[0] + 2.0 * k2.0[0] + 2.0 * k3.0[0] + k4.0[0]),
                    x[1] + dt / 6.0 * (k1.0[1] + 2.0 * k2.0[1] + 2.0 * k3.0[1] + k4.0[1]),
                ];
                jac += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
                if !x[0].is_finite() || !x[1].is_finite() || !jac.is_finite() {
                    failed = true;
                    break;
                }
                x = field.domain.confine(x, &mut clamped);
                if (k + 1) % stride == 0 || k + 1 == steps {
                    checkpoints.push((x, jac));
                }
            }
            Track {
                checkpoints,
                clamped,
                failed,
            }
        })
        .collect();

    if tracks.iter().any(|t| t.failed) {
        return Err(CoreError::FlowAborted(
            "non-finite trajectory values".into(),
        ));
    }

    let mut times = vec![0.0];
    for k in 0..steps {
        if (k + 1) % stride == 0 || k + 1 == steps {
            times.push((k + 1) as f64 * dt);
        }
    }
    let n_checks = times.len();
    let mut positions = vec![Vec::with_capacity(starts.len()); n_checks];
    let mut jacobian = vec![Vec::with_capacity(starts.len()); n_checks];
    for track in &tracks {
        debug_assert_eq!(track.checkpoints.len(), n_checks);
        for (k, &(pos, j)) in track.checkpoints.iter().enumerate() {
            positions[k].push(pos);
            jacobian[k].push(j);
        }
    }
    Ok(FlowMap {
        domain: field.domain,
        times,
        initial: starts.to_vec(),
        positions,
        jacobian,
        clamped: tracks.iter().filter(|t| t.clamped).count(),
    })
}

/// Compares the exact change-of-variables density `ū(x) / J(t, x)` carried by
/// the particles against a grid solution interpolated along the flow; 1D
/// torus domains only (where `J` is a scalar volume factor).
pub fn explicit_density_check(
    space: &Space,
    flow: &FlowMap,
    initial_density: &Observable,
    path: &crate::continuity::DensityPath,
) -> Result<Vec<f64>> {
    let tor = space.torus_backend()?;
    if tor.d != 1 {
        return Err(CoreError::InvalidParameter(
            "density comparison is defined on 1D domains".into(),
        ));
    }
    let fine = tor.upsample(initial_density);
    let fine_n = tor.n_axis * UPSAMPLE;
    let mut residuals = Vec::with_capacity(flow.times.len());
    for (k, &t) in flow.times.iter().enumerate() {
        let u_solver = path.density_at(path.index_of(t));
        let u_fine = tor.upsample(&u_solver);
        let mut worst = 0.0f64;
        for (i, x0) in flow.initial.iter().enumerate() {
            let jac = flow.jacobian[k][i];
            if jac <= 0.0 {
                return Err(CoreError::FlowAborted(format!(
                    "non-positive volume factor {jac} at particle {i}"
                )));
            }
            let u_formula = interp_periodic(&fine, fine_n, 1, tor.len, *x0) / jac;
            let xt = flow.positions[k][i];
            let u_grid = interp_periodic(&u_fine, fine_n, 1, tor.len, xt);
            worst = worst.max((u_formula - u_grid).abs());
        }
        residuals.push(worst);
    }
    Ok(residuals)
}

/// Waiting-time selection rules for the square-root example.
#[derive(Clone, Debug)]
pub enum SelectionRule {
    Zero,
    Constant(f64),
    Infinite,
    /// Waiting time 0 or `tau`, an independent fair coin per particle.
    Randomized { tau: f64, seed: u64 },
    /// First half of the particles waits 0, second half waits `tau`.
    TwoPopulation { tau: f64 },
}

impl SelectionRule {
    fn waiting_time(&self, index: usize, total: usize) -> f64 {
        match self {
            SelectionRule::Zero => 0.0,
            SelectionRule::Constant(tau) => *tau,
            SelectionRule::Infinite => f64::INFINITY,
            SelectionRule::Randomized { tau, seed } => {
                let mut rng = stream(*seed, index as u64);
                if rng.gen::<bool>() {
                    *tau
                } else {
                    0.0
                }
            }
            SelectionRule::TwoPopulation { tau } => {
                if index < total / 2 {
                    0.0
                } else {
                    *tau
                }
            }
        }
    }
}

/// Closed-form trajectory of `x' = sqrt(|x|)` started at `-c²`: falls into
/// the origin at time `2c`, waits `2 T`, then leaves on the positive branch.
pub fn sqrt_trajectory(t: f64, c: f64, wait: f64) -> f64 {
    if t <= 2.0 * c {
        let s = t / 2.0 - c;
        -s * s
    } else if wait.is_infinite() || t <= 2.0 * c + 2.0 * wait {
        0.0
    } else {
        let s = t / 2.0 - c - wait;
        s * s
    }
}

pub struct SqrtFlow {
    pub c: Vec<f64>,
    pub wait: Vec<f64>,
    /// Normalized weights making particle statistics estimate Lebesgue
    /// measure on `[-c_max², 0]` (density of `x = -c²` against uniform `c`).
    pub weight: Vec<f64>,
    pub c_max: f64,
    pub times: Vec<f64>,
    /// positions[k][i]
    pub positions: Vec<Vec<f64>>,
}

/// Exact piecewise trajectories of the square-root example under a selection
/// rule; no numerical integration is involved.
pub fn sqrt_example_flow(
    rule: &SelectionRule,
    horizon: f64,
    dt: f64,
    particles: usize,
    c_max: f64,
    seed: u64,
) -> Result<SqrtFlow> {
    if particles == 0 || !(c_max > 0.0) || !(dt > 0.0) || !(horizon > 0.0) {
        return Err(CoreError::InvalidParameter(
            "square-root study needs particles > 0, c_max > 0, dt > 0, horizon > 0".into(),
        ));
    }
    let mut c = Vec::with_capacity(particles);
    for i in 0..particles {
        let mut rng = stream(seed, i as u64);
        let u: f64 = rng.gen::<f64>();
        c.push((1.0 - u) * c_max); // uniform in (0, c_max]
    }
    let wait: Vec<f64> = (0..particles)
        .map(|i| rule.waiting_time(i, particles))
        .collect();
    let total: f64 = c.iter().map(|ci| 2.0 * ci).sum();
    let weight: Vec<f64> = c.iter().map(|ci| 2.0 * ci / total).collect();

    let steps = (horizon / dt).round() as usize;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let positions: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| {
            (0..particles)
                .map(|i| sqrt_trajectory(t, c[i], wait[i]))
                .collect()
        })
        .collect();
    Ok(SqrtFlow {
        c,
        wait,
        weight,
        c_max,
        times,
        positions,
    })
}

pub struct PushforwardReport {
    pub atom_mass: f64,
    pub bin_width: f64,
    /// (bin center, mass) over the covered range.
    pub histogram: Vec<(f64, f64)>,
    /// Max over bins of pushforward mass relative to the reference mass on
    /// the same bins (bins without reference mass are skipped).
    pub max_density_ratio: f64,
    pub mass_outside_reference: f64,
}

/// Histogram detector for the push-forward measure at one time slice:
/// the atom estimate is the mass within `bin_width / 2` of the origin, and
/// the density ratio compares against the initial-time histogram.
pub fn pushforward_ac_test(
    positions: &[f64],
    initial: &[f64],
    weights: Option<&[f64]>,
    bin_width: f64,
) -> Result<PushforwardReport> {
    if !(bin_width > 0.0) {
        return Err(CoreError::InvalidParameter(
            "bin width must be positive".into(),
        ));
    }
    if positions.is_empty() || positions.len() != initial.len() {
        return Err(CoreError::InvalidParameter(
            "positions and initial slices must be equal-length and nonempty".into(),
        ));
    }
    let n = positions.len();
    let w = |i: usize| weights.map_or(1.0 / n as f64, |ws| ws[i]);

    let lo = positions
        .iter()
        .chain(initial.iter())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = positions
        .iter()
        .chain(initial.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let bins = (((hi - lo) / bin_width).ceil() as usize + 1).max(1);
    let idx_of = |x: f64| (((x - lo) / bin_width).floor() as usize).min(bins - 1);

    let mut mass = vec![0.0f64; bins];
    let mut ref_mass = vec![0.0f64; bins];
    let mut atom = 0.0f64;
    for i in 0..n {
        mass[idx_of(positions[i])] += w(i);
        ref_mass[idx_of(initial[i])] += w(i);
        if positions[i].abs() < bin_width / 2.0 {
            atom += w(i);
        }
    }
    let mut max_ratio = 0.0f64;
    let mut outside = 0.0f64;
    for b in 0..bins {
        if ref_mass[b] > 0.0 {
            max_ratio = max_ratio.max(mass[b] / ref_mass[b]);
        } else {
            outside += mass[b];
        }
    }
    let histogram = (0..bins)
        .map(|b| (lo + (b as f64 + 0.5) * bin_width, mass[b]))
        .collect();
    Ok(PushforwardReport {
        atom_mass: atom,
        bin_width,
        histogram,
        max_density_ratio: max_ratio,
        mass_outside_reference: outside,
    })
}

/// One ladder rung: sup over particles and checkpoints of the pathwise gap
/// between the `(ε_i, dt_i)` and `(ε_{i+1}, dt_i / 2)` flows.
pub fn pathwise_ladder(
    fields: &[FlowField],
    starts: &[[f64; 2]],
    horizon: f64,
    dt0: f64,
    stride: usize,
) -> Result<Vec<f64>> {
    if fields.len() < 2 {
        return Err(CoreError::InvalidParameter(
            "a ladder needs at least two rungs".into(),
        ));
    }
    let mut gaps = Vec::with_capacity(fields.len() - 1);
    let mut dt = dt0;
    for pair in fields.windows(2) {
        let coarse = integrate_flow(&pair[0], starts, horizon, dt, stride)?;
        let fine = integrate_flow(&pair[1], starts, horizon, dt / 2.0, stride * 2)?;
        let mut sup = 0.0f64;
        for k in 0..coarse.times.len() {
            for i in 0..starts.len() {
                sup = sup.max(
                    pair[0]
                        .domain
                        .distance(coarse.positions[k][i], fine.positions[k][i]),
                );
            }
        }
        gaps.push(sup);
        dt /= 2.0;
    }
    Ok(gaps)
}

pub struct SelectionGap {
    pub max_gap: f64,
    pub fraction_diverged: f64,
    pub threshold: f64,
}

/// Pathwise gap between two selection rules of the square-root example on a
/// shared particle population.
pub fn sqrt_selection_gap(
    rule_a: &SelectionRule,
    rule_b: &SelectionRule,
    horizon: f64,
    dt: f64,
    particles: usize,
    c_max: f64,
    seed: u64,
) -> Result<SelectionGap> {
    let flow_a = sqrt_example_flow(rule_a, horizon, dt, particles, c_max, seed)?;
    let flow_b = sqrt_example_flow(rule_b, horizon, dt, particles, c_max, seed)?;
    let threshold = 0.01;
    let mut max_gap = 0.0f64;
    let mut diverged = 0usize;
    for i in 0..particles {
        let mut gap = 0.0f64;
        for k in 0..flow_a.times.len() {
            gap = gap.max((flow_a.positions[k][i] - flow_b.positions[k][i]).abs());
        }
        max_gap = max_gap.max(gap);
        if gap > threshold {
            diverged += 1;
        }
    }
    Ok(SelectionGap {
        max_gap,
        fraction_diverged: diverged as f64 / particles as f64,
        threshold,
    })
}

/// Closed-form Lebesgue measure of `{x in [-c_max², 0] : |X(t, x)| < δ/2}`
/// for the square-root flow with constant waiting time; the oracle behind the
/// atom-mass assertions.
pub fn sqrt_atom_oracle(t: f64, wait: f64, c_max: f64, bin_width: f64) -> f64 {
    let delta = bin_width / 2.0;
    let s = delta.sqrt();
    let total = c_max * c_max;
    if wait.is_infinite() {
        // at rest for c <= t/2, falling branch |x| < δ for c < t/2 + s
        let upper = (t / 2.0 + s).min(c_max);
        (upper * upper).min(total) / total
    } else {
        // |X| < δ around the passage time: particles with |c - (t/2 - wait·χ)| ...
        // for constant waiting time `wait`, a particle is within δ of the
        // origin iff c in (t/2 - wait - s, t/2 - wait + s) (positive branch)
        // or c in (t/2 - s, t/2 + s) (falling branch) or it currently waits:
        // 2c <= t <= 2c + 2 wait  <=>  (t - 2 wait)/2 <= c <= t/2.
        let mut intervals: Vec<(f64, f64)> = Vec::new();
        intervals.push(((t / 2.0 - wait - s).max(0.0), (t / 2.0 - wait + s).max(0.0)));
        intervals.push(((t / 2.0 - s).max(0.0), (t / 2.0 + s).max(0.0)));
        intervals.push((((t - 2.0 * wait) / 2.0).max(0.0), (t / 2.0).max(0.0)));
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut measure = 0.0;
        let mut cursor = 0.0f64;
        for (a, b) in intervals {
            let a = a.max(cursor).min(c_max);
            let b = b.min(c_max);
            if b > a {
                measure += b * b - a * a;
                cursor = b;
            }
        }
        measure / total
    }
}
