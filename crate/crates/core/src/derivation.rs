//! Derivations: abstract time-dependent vector fields acting on observables.
//!
//! Three concrete kinds cover the backends:
//! * `Gradient(V)` — `b(f) = Γ(V, f)`, available on both backends;
//! * `TorusField(components)` — `b(f) = v · ∇f` with spectral derivatives;
//! * `GraphFlow(c)` — `b(f)(x) = Σ_y c(x,y)(f(y) − f(x)) / m(x)` with
//!   antisymmetric edge coefficients, so `b(1) = 0` holds structurally.
//!
//! The divergence is the exact finite-dimensional adjoint against the
//! measure; the deformation functional pairs `b` against generator values per
//! its defining integral. Time dependence is piecewise constant on knots.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng::stream;
use crate::space::{Backend, Observable, Space};

#[derive(Clone)]
pub enum DerivationKind {
    /// `b(f) = Γ(V, f)`.
    Gradient(Observable),
    /// One component per axis, sampled on the grid.
    TorusField(Vec<Observable>),
    /// Antisymmetric edge coefficients `c(x, y) = -c(y, x)` supported on
    /// edges of the graph.
    GraphFlow(Array2<f64>),
}

#[derive(Clone)]
pub struct Derivation {
    /// (time, kind) knots, strictly increasing times; evaluation is
    /// piecewise constant (last knot at or before `t`).
    knots: Vec<(f64, DerivationKind)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum BoundKind {
    Exact,
    Lower,
}

pub struct PointwiseNorm {
    pub values: Observable,
    pub bound_kind: BoundKind,
}

/// Deformation diagnostics: sampled pairings and the resulting certified
/// lower bound for `‖D^sym b‖_2`.
pub struct DeformationReport {
    pub samples: Vec<(String, String, f64)>,
    pub dsym_norm_lower: f64,
    pub div_l2: f64,
    pub div_linf: f64,
    pub leibniz_defect: f64,
    pub bound_kind: BoundKind,
}

impl Derivation {
    pub fn steady(kind: DerivationKind) -> Self {
        Derivation {
            knots: vec![(0.0, kind)],
        }
    }

    pub fn time_dependent(knots: Vec<(f64, DerivationKind)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(CoreError::InvalidParameter(
                "a derivation needs at least one knot".into(),
            ));
        }
        for w in knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CoreError::InvalidParameter(
                    "knot times must be strictly increasing".into(),
                ));
            }
        }
        Ok(Derivation { knots })
    }

    pub fn kind_at(&self, t: f64) -> &DerivationKind {
        let mut current = &self.knots[0].1;
        for (knot_t, kind) in &self.knots {
            if *knot_t <= t {
                current = kind;
            } else {
                break;
            }
        }
        current
    }

    pub fn knot_times(&self) -> Vec<f64> {
        self.knots.iter().map(|(t, _)| *t).collect()
    }

    fn validate(&self, space: &Space, kind: &DerivationKind) -> Result<()> {
        let n = space.states();
        match (kind, &space.backend) {
            (DerivationKind::Gradient(v), _) => {
                if v.len() != n {
                    return Err(CoreError::SizeMismatch {
                        expected: n,
                        got: v.len(),
                    });
                }
            }
            (DerivationKind::TorusField(comps), Backend::Torus(t)) => {
                if comps.len() != t.d {
                    return Err(CoreError::BackendMismatch(format!(
                        "field has {} components on a {}-dimensional torus",
                        comps.len(),
                        t.d
                    )));
                }
                for c in comps {
                    if c.len() != n {
                        return Err(CoreError::SizeMismatch {
                            expected: n,
                            got: c.len(),
                        });
                    }
                }
            }
            (DerivationKind::GraphFlow(c), Backend::Graph(g)) => {
                if c.nrows() != n || c.ncols() != n {
                    return Err(CoreError::SizeMismatch {
                        expected: n,
                        got: c.nrows(),
                    });
                }
                for x in 0..n {
                    for y in 0..n {
                        if c[[x, y]] != -c[[y, x]] {
                            return Err(CoreError::InvalidParameter(format!(
                                "edge coefficients not antisymmetric at ({x}, {y})"
                            )));
                        }
                        if c[[x, y]] != 0.0 && g.weights[[x, y]] == 0.0 {
                            return Err(CoreError::InvalidParameter(format!(
                                "flow coefficient off the edge set at ({x}, {y})"
                            )));
                        }
                    }
                }
            }
            (DerivationKind::TorusField(_), Backend::Graph(_)) => {
                return Err(CoreError::BackendMismatch(
                    "torus field on a graph space".into(),
                ));
            }
            (DerivationKind::GraphFlow(_), Backend::Torus(_)) => {
                return Err(CoreError::BackendMismatch(
                    "graph flow on a torus space".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn validate_on(&self, space: &Space) -> Result<()> {
        for (_, kind) in &self.knots {
            self.validate(space, kind)?;
        }
        Ok(())
    }

    /// `b_t(f)`.
    pub fn apply(&self, space: &Space, f: &Observable, t: f64) -> Result<Observable> {
        let kind = self.kind_at(t);
        self.validate(space, kind)?;
        if f.len() != space.states() {
            return Err(CoreError::SizeMismatch {
                expected: space.states(),
                got: f.len(),
            });
        }
        Ok(match (kind, &space.backend) {
            (DerivationKind::Gradient(v), _) => space.gamma(v, f)?,
            (DerivationKind::TorusField(comps), Backend::Torus(tor)) => {
                let mut out = Array1::<f64>::zeros(space.states());
                for (axis, comp) in comps.iter().enumerate() {
                    out = out + &(comp * &tor.deriv(f, axis));
                }
                out
            }
            (DerivationKind::GraphFlow(c), Backend::Graph(g)) => {
                let n = space.states();
                let mut out = Array1::<f64>::zeros(n);
                for x in 0..n {
                    let mut acc = 0.0;
                    for y in 0..n {
                        let cv = c[[x, y]];
                        if cv != 0.0 {
                            acc += cv * (f[y] - f[x]);
                        }
                    }
                    out[x] = acc / g.measure[x];
                }
                out
            }
            _ => unreachable!("validated above"),
        })
    }

    /// The adjoint `b_t^* u` with respect to `m`; `-b^*(u)` is the
    /// conservative-form transport operator `div(u b)`.
    pub fn adjoint_apply(&self, space: &Space, u: &Observable, t: f64) -> Result<Observable> {
        let kind = self.kind_at(t);
        self.validate(space, kind)?;
        Ok(match (kind, &space.backend) {
            (DerivationKind::TorusField(comps), Backend::Torus(tor)) => {
                let mut out = Array1::<f64>::zeros(space.states());
                for (axis, comp) in comps.iter().enumerate() {
                    out = out - &tor.deriv(&(comp * u), axis);
                }
                out
            }
            (DerivationKind::Gradient(v), Backend::Torus(tor)) => {
                let mut out = Array1::<f64>::zeros(space.states());
                for axis in 0..tor.d {
                    let comp = tor.deriv(v, axis);
                    out = out - &tor.deriv(&(&comp * u), axis);
                }
                out
            }
            (kind, Backend::Graph(g)) => {
                let c = graph_coefficients(space, kind)?;
                let n = space.states();
                let mut out = Array1::<f64>::zeros(n);
                for x in 0..n {
                    let mut row = 0.0;
                    let mut rho = 0.0;
                    for y in 0..n {
                        let cv = c[[x, y]];
                        if cv != 0.0 {
                            row += cv * u[y];
                            rho += cv;
                        }
                    }
                    out[x] = -(row + u[x] * rho) / g.measure[x];
                }
                out
            }
            _ => unreachable!("validated above"),
        })
    }

    /// `div b_t`, the exact adjoint divergence: `∫ b(f) dm = -∫ (div b) f dm`.
    pub fn divergence(&self, space: &Space, t: f64) -> Result<Observable> {
        let kind = self.kind_at(t);
        self.validate(space, kind)?;
        Ok(match (kind, &space.backend) {
            (DerivationKind::Gradient(v), _) => space.generator(v),
            (DerivationKind::TorusField(comps), Backend::Torus(tor)) => {
                let mut out = Array1::<f64>::zeros(space.states());
                for (axis, comp) in comps.iter().enumerate() {
                    out = out + &tor.deriv(comp, axis);
                }
                out
            }
            (DerivationKind::GraphFlow(c), Backend::Graph(g)) => {
                let n = space.states();
                Array1::from_iter((0..n).map(|x| {
                    let rho: f64 = (0..n).map(|y| c[[x, y]]).sum();
                    2.0 * rho / g.measure[x]
                }))
            }
            _ => unreachable!("validated above"),
        })
    }

    /// Pointwise norm `|b_t|`: exact Euclidean norm of the components on the
    /// torus, dictionary supremum `sup |b(f)| / √Γ(f)` (a certified lower
    /// bound) on the graph.
    pub fn pointwise_norm(&self, space: &Space, t: f64) -> Result<PointwiseNorm> {
        let kind = self.kind_at(t);
        self.validate(space, kind)?;
        match (kind, &space.backend) {
            (DerivationKind::TorusField(comps), Backend::Torus(_)) => {
                let mut sq = Array1::<f64>::zeros(space.states());
                for comp in comps {
                    sq = sq + &comp.mapv(|v| v * v);
                }
                Ok(PointwiseNorm {
                    values: sq.mapv(f64::sqrt),
                    bound_kind: BoundKind::Exact,
                })
            }
            (DerivationKind::Gradient(v), Backend::Torus(_)) => Ok(PointwiseNorm {
                values: space.gamma_diag(v)?.mapv(|g| g.max(0.0).sqrt()),
                bound_kind: BoundKind::Exact,
            }),
            (_, Backend::Graph(_)) => {
                let n = space.states();
                let mut values = Array1::<f64>::zeros(n);
                for f in space.dictionary() {
                    let bf = self.apply(space, f, t)?;
                    let gf = space.gamma_diag(f)?;
                    for x in 0..n {
                        if gf[x] > 1e-12 {
                            values[x] = values[x].max(bf[x].abs() / gf[x].sqrt());
                        }
                    }
                }
                Ok(PointwiseNorm {
                    values,
                    bound_kind: BoundKind::Lower,
                })
            }
            _ => unreachable!("validated above"),
        }
    }

    /// Dual norm `|b_t|_* = sup_{f in dictionary} |b(f)|`; exact relative to
    /// the dictionary realizing the test class.
    pub fn dual_norm(&self, space: &Space, t: f64) -> Result<PointwiseNorm> {
        let n = space.states();
        let mut values = Array1::<f64>::zeros(n);
        for f in space.dictionary() {
            let bf = self.apply(space, f, t)?;
            for x in 0..n {
                values[x] = values[x].max(bf[x].abs());
            }
        }
        Ok(PointwiseNorm {
            values,
            bound_kind: BoundKind::Exact,
        })
    }

    /// Deformation pairing
    /// `-1/2 ∫ [ b(f) Δg + b(g) Δf - (div b) Γ(f, g) ] dm`,
    /// symmetric and bilinear in `(f, g)`.
    pub fn dsym_pairing(
        &self,
        space: &Space,
        f: &Observable,
        g: &Observable,
        t: f64,
    ) -> Result<f64> {
        let bf = self.apply(space, f, t)?;
        let bg = self.apply(space, g, t)?;
        let lf = space.generator(f);
        let lg = space.generator(g);
        let div = self.divergence(space, t)?;
        let gamma_fg = space.gamma(f, g)?;
        Ok(-0.5
            * (space.inner(&bf, &lg) + space.inner(&bg, &lf) - space.inner(&div, &gamma_fg)))
    }

    /// Leibniz defect `max |b(fg) - f b(g) - g b(f)|`; zero in the strongly
    /// local limit, strictly positive in general on graphs.
    pub fn leibniz_defect(
        &self,
        space: &Space,
        f: &Observable,
        g: &Observable,
        t: f64,
    ) -> Result<f64> {
        let fg = f * g;
        let b_fg = self.apply(space, &fg, t)?;
        let bf = self.apply(space, f, t)?;
        let bg = self.apply(space, g, t)?;
        let mut worst = 0.0f64;
        for x in 0..space.states() {
            worst = worst.max((b_fg[x] - f[x] * bg[x] - g[x] * bf[x]).abs());
        }
        Ok(worst)
    }

    /// Empirical maximum of `|pairing(f, g)| / (‖√Γ(f)‖_4 ‖√Γ(g)‖_4)` over
    /// dictionary pairs and random smooth pairs; a certified lower bound for
    /// `‖D^sym b‖_2`.
    pub fn dsym_norm_estimate(
        &self,
        space: &Space,
        t: f64,
        trials: usize,
        seed: u64,
    ) -> Result<DeformationReport> {
        if trials < 1 {
            return Err(CoreError::InvalidParameter("trials must be >= 1".into()));
        }
        let mut rng = stream(seed, 0x6473796d);
        let mut candidates: Vec<(String, Observable)> = space
            .dictionary()
            .iter()
            .enumerate()
            .map(|(i, f)| (format!("dict[{i}]"), f.clone()))
            .collect();
        for k in 0..trials {
            candidates.push((format!("random[{k}]"), space.random_smooth(&mut rng)));
        }
        // precompute the Γ-norm of each candidate; degenerate entries with
        // Γ(f) ≈ 0 are skipped
        let gnorm: Vec<f64> = candidates
            .iter()
            .map(|(_, f)| {
                let sg = space
                    .gamma_diag(f)
                    .expect("candidate length")
                    .mapv(|v| v.max(0.0).sqrt());
                space.lp_norm(&sg, 4.0)
            })
            .collect();

        let mut samples = Vec::new();
        let mut best = 0.0f64;
        let mut leibniz = 0.0f64;
        for (i, (ni, f)) in candidates.iter().enumerate() {
            if gnorm[i] < 1e-12 {
                continue;
            }
            for (j, (nj, g)) in candidates.iter().enumerate().skip(i) {
                if gnorm[j] < 1e-12 {
                    continue;
                }
                let pairing = self.dsym_pairing(space, f, g, t)?;
                if samples.len() < 64 {
                    samples.push((ni.clone(), nj.clone(), pairing));
                }
                best = best.max(pairing.abs() / (gnorm[i] * gnorm[j]));
            }
            if i < 8 {
                let g = &candidates[(i + 1) % candidates.len()].1;
                leibniz = leibniz.max(self.leibniz_defect(space, f, g, t)?);
            }
        }
        let div = self.divergence(space, t)?;
        Ok(DeformationReport {
            samples,
            dsym_norm_lower: best,
            div_l2: space.lp_norm(&div, 2.0),
            div_linf: space.lp_norm(&div, f64::INFINITY),
            leibniz_defect: leibniz,
            bound_kind: BoundKind::Lower,
        })
    }
}

/// Canonical edge-coefficient matrix of a graph derivation
/// (`Gradient(V)` reduces to `c(x,y) = w(x,y)(V(y) - V(x)) / 2`).
pub fn graph_coefficients(space: &Space, kind: &DerivationKind) -> Result<Array2<f64>> {
    let g = space.graph_backend()?;
    let n = space.states();
    Ok(match kind {
        DerivationKind::GraphFlow(c) => c.clone(),
        DerivationKind::Gradient(v) => {
            let mut c = Array2::<f64>::zeros((n, n));
            for x in 0..n {
                for y in 0..n {
                    let w = g.weights[[x, y]];
                    if w > 0.0 {
                        c[[x, y]] = 0.5 * w * (v[y] - v[x]);
                    }
                }
            }
            c
        }
        DerivationKind::TorusField(_) => {
            return Err(CoreError::BackendMismatch(
                "torus field on a graph space".into(),
            ))
        }
    })
}

/// Torus component fields of a derivation
/// (`Gradient(V)` reduces to the spectral gradient of `V`).
pub fn torus_components(space: &Space, kind: &DerivationKind) -> Result<Vec<Observable>> {
    let tor = space.torus_backend()?;
    Ok(match kind {
        DerivationKind::TorusField(comps) => comps.clone(),
        DerivationKind::Gradient(v) => (0..tor.d).map(|axis| tor.deriv(v, axis)).collect(),
        DerivationKind::GraphFlow(_) => {
            return Err(CoreError::BackendMismatch(
                "graph flow on a torus space".into(),
            ))
        }
    })
}

// ---- presets ----------------------------------------------------------

/// Constant field `v`.
pub fn constant_field(space: &Space, v: [f64; 2]) -> Result<Derivation> {
    let tor = space.torus_backend()?;
    let n = space.states();
    let comps = (0..tor.d)
        .map(|axis| Array1::from_elem(n, v[axis]))
        .collect();
    Ok(Derivation::steady(DerivationKind::TorusField(comps)))
}

/// Shear `(a sin(2π y / L), 0)` on the 2-torus.
pub fn shear_field(space: &Space, amplitude: f64) -> Result<Derivation> {
    let tor = space.torus_backend()?;
    if tor.d != 2 {
        return Err(CoreError::InvalidParameter(
            "the shear preset needs a 2-dimensional torus".into(),
        ));
    }
    let h = 2.0 * std::f64::consts::PI / tor.len;
    let n = space.states();
    let vx = Array1::from_iter((0..n).map(|i| amplitude * (tor.coords(i)[1] * h).sin()));
    let vy = Array1::<f64>::zeros(n);
    Ok(Derivation::steady(DerivationKind::TorusField(vec![vx, vy])))
}

/// Divergence-free rotation-like field `(-∂_y ψ, ∂_x ψ)` with stream function
/// `ψ = a sin(2π q x / L) sin(2π q y / L) / q`; `q = 1` is the smooth preset,
/// large `q` (about N/4) is the oscillatory rough preset.
pub fn rotation_field(space: &Space, amplitude: f64, q: usize) -> Result<Derivation> {
    let tor = space.torus_backend()?;
    if tor.d != 2 {
        return Err(CoreError::InvalidParameter(
            "the rotation preset needs a 2-dimensional torus".into(),
        ));
    }
    let h = 2.0 * std::f64::consts::PI / tor.len;
    let n = space.states();
    let qf = q as f64;
    let vx = Array1::from_iter((0..n).map(|i| {
        let [x, y] = tor.coords(i);
        -amplitude * (qf * x * h).sin() * (qf * y * h).cos()
    }));
    let vy = Array1::from_iter((0..n).map(|i| {
        let [x, y] = tor.coords(i);
        amplitude * (qf * x * h).cos() * (qf * y * h).sin()
    }));
    Ok(Derivation::steady(DerivationKind::TorusField(vec![vx, vy])))
}

pub fn gradient_field(space: &Space, potential: Observable) -> Result<Derivation> {
    if potential.len() != space.states() {
        return Err(CoreError::SizeMismatch {
            expected: space.states(),
            got: potential.len(),
        });
    }
    Ok(Derivation::steady(DerivationKind::Gradient(potential)))
}

/// Random divergence-free graph flow built from cycle flows: a BFS spanning
/// tree plus one random circulation per chord, so every vertex balance is
/// zero by construction.
pub fn random_divergence_free_flow(space: &Space, seed: u64) -> Result<Derivation> {
    let g = space.graph_backend()?;
    let n = space.states();
    let w = &g.weights;

    // BFS tree with parent pointers
    let mut parent = vec![usize::MAX; n];
    let mut order = vec![0usize; 0];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(0usize);
    seen[0] = true;
    while let Some(x) = queue.pop_front() {
        order.push(x);
        for y in 0..n {
            if w[[x, y]] > 0.0 && !seen[y] {
                seen[y] = true;
                parent[y] = x;
                queue.push_back(y);
            }
        }
    }
    let mut depth = vec![0usize; n];
    for &x in &order {
        if parent[x] != usize::MAX {
            depth[x] = depth[parent[x]] + 1;
        }
    }

    let mut rng = stream(seed, 0x6379636c);
    let mut c = Array2::<f64>::zeros((n, n));
    let push = |c: &mut Array2<f64>, a: usize, b: usize, gamma: f64| {
        c[[a, b]] += gamma;
        c[[b, a]] -= gamma;
    };
    let mut found_cycle = false;
    for u in 0..n {
        for v in (u + 1)..n {
            if w[[u, v]] > 0.0 && parent[v] != u && parent[u] != v {
                // chord: circulate along u -> v -> tree path back to u
                let gamma: f64 = rng.gen_range(-1.0..1.0);
                push(&mut c, u, v, gamma);
                let (mut a, mut b) = (v, u);
                while a != b {
                    if depth[a] >= depth[b] {
                        push(&mut c, a, parent[a], gamma);
                        a = parent[a];
                    } else {
                        push(&mut c, parent[b], b, gamma);
                        b = parent[b];
                    }
                }
                found_cycle = true;
            }
        }
    }
    if !found_cycle {
        return Err(CoreError::InvalidParameter(
            "graph is a tree; it has no divergence-free flow besides zero".into(),
        ));
    }
    Ok(Derivation::steady(DerivationKind::GraphFlow(c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    fn torus_2d() -> Space {
        Space::torus(2, 16, 2.0 * std::f64::consts::PI, 16, 3).unwrap()
    }

    #[test]
    fn gradient_apply_is_gamma_exactly() {
        let sp = Space::random_graph(14, 16, 21).unwrap();
        let mut rng = stream(21, 7);
        let v = sp.random_smooth(&mut rng);
        let f = sp.random_smooth(&mut rng);
        let b = gradient_field(&sp, v.clone()).unwrap();
        let bf = b.apply(&sp, &f, 0.0).unwrap();
        let gam = sp.gamma(&v, &f).unwrap();
        assert_eq!(bf, gam); // same code path, bit-identical
    }

    #[test]
    fn constant_annihilated_and_linear() {
        let sp = torus_2d();
        let b = shear_field(&sp, 1.0).unwrap();
        let ones = Array1::from_elem(sp.states(), 1.0);
        let b1 = b.apply(&sp, &ones, 0.0).unwrap();
        assert!(b1.iter().all(|v| v.abs() < 1e-12));
        let mut rng = stream(1, 1);
        let f = sp.random_smooth(&mut rng);
        let g = sp.random_smooth(&mut rng);
        let combo = &f * 2.0 + &g * (-3.0);
        let lhs = b.apply(&sp, &combo, 0.0).unwrap();
        let rhs =
            &b.apply(&sp, &f, 0.0).unwrap() * 2.0 + &b.apply(&sp, &g, 0.0).unwrap() * (-3.0);
        let err = (&lhs - &rhs).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn torus_constant_field_derivative() {
        let sp = Space::torus(1, 64, 2.0 * std::f64::consts::PI, 16, 0).unwrap();
        let b = constant_field(&sp, [1.0, 0.0]).unwrap();
        let f = Array1::from_iter(
            (0..64).map(|i| sp.torus_backend().unwrap().coords(i)[0].sin()),
        );
        let bf = b.apply(&sp, &f, 0.0).unwrap();
        let want = Array1::from_iter(
            (0..64).map(|i| sp.torus_backend().unwrap().coords(i)[0].cos()),
        );
        let err = (&bf - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn divergence_satisfies_adjoint_identity() {
        let sp = Space::random_graph(12, 16, 5).unwrap();
        let b = random_divergence_free_flow(&sp, 5).unwrap();
        // also a non-divergence-free one: gradient
        let mut rng = stream(5, 2);
        let v = sp.random_smooth(&mut rng);
        let grad = gradient_field(&sp, v).unwrap();
        for b in [&b, &grad] {
            let div = b.divergence(&sp, 0.0).unwrap();
            for f in sp.dictionary() {
                let lhs = sp.integral(&b.apply(&sp, f, 0.0).unwrap());
                let rhs = -sp.inner(&div, f);
                assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn divergence_of_gradient_is_generator() {
        for sp in [torus_2d(), Space::random_graph(10, 16, 8).unwrap()] {
            let mut rng = stream(8, 3);
            let v = sp.random_smooth(&mut rng);
            let b = gradient_field(&sp, v.clone()).unwrap();
            let div = b.divergence(&sp, 0.0).unwrap();
            let want = sp.generator(&v);
            let err = (&div - &want).iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn rotation_field_is_divergence_free() {
        let sp = torus_2d();
        let b = rotation_field(&sp, 1.0, 1).unwrap();
        let div = b.divergence(&sp, 0.0).unwrap();
        assert!(div.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn cycle_flow_is_divergence_free() {
        let sp = Space::random_graph(20, 16, 17).unwrap();
        let b = random_divergence_free_flow(&sp, 99).unwrap();
        let div = b.divergence(&sp, 0.0).unwrap();
        assert!(div.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn adjoint_is_the_transpose_in_l2m() {
        for sp in [torus_2d(), Space::random_graph(11, 16, 6).unwrap()] {
            let b = if sp.is_torus() {
                shear_field(&sp, 0.7).unwrap()
            } else {
                random_divergence_free_flow(&sp, 4).unwrap()
            };
            let mut rng = stream(6, 9);
            let f = sp.random_smooth(&mut rng);
            let u = sp.random_smooth(&mut rng);
            let lhs = sp.inner(&b.apply(&sp, &f, 0.0).unwrap(), &u);
            let rhs = sp.inner(&f, &b.adjoint_apply(&sp, &u, 0.0).unwrap());
            assert!((lhs - rhs).abs() < 1e-11, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gradient_pointwise_norm_on_torus() {
        let sp = torus_2d();
        let v = Array1::from_iter(
            (0..sp.states()).map(|i| sp.torus_backend().unwrap().coords(i)[0].sin()),
        );
        let b = gradient_field(&sp, v.clone()).unwrap();
        let norm = b.pointwise_norm(&sp, 0.0).unwrap();
        assert_eq!(norm.bound_kind, BoundKind::Exact);
        let want = sp.gamma_diag(&v).unwrap().mapv(|g| g.max(0.0).sqrt());
        let err = (&norm.values - &want)
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn zero_derivation_norms_vanish() {
        let sp = Space::random_graph(8, 16, 2).unwrap();
        let c = Array2::<f64>::zeros((8, 8));
        let b = Derivation::steady(DerivationKind::GraphFlow(c));
        let pw = b.pointwise_norm(&sp, 0.0).unwrap();
        let dual = b.dual_norm(&sp, 0.0).unwrap();
        assert!(pw.values.iter().all(|v| *v == 0.0));
        assert!(dual.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dual_norm_below_pointwise_norm_on_graph() {
        let sp = Space::random_graph(9, 16, 13).unwrap();
        // single-edge coefficient
        let g = sp.graph_backend().unwrap();
        let mut c = Array2::<f64>::zeros((9, 9));
        'search: for x in 0..9 {
            for y in 0..9 {
                if g.weights[[x, y]] > 0.0 {
                    c[[x, y]] = 1.0;
                    c[[y, x]] = -1.0;
                    break 'search;
                }
            }
        }
        let b = Derivation::steady(DerivationKind::GraphFlow(c));
        let pw = b.pointwise_norm(&sp, 0.0).unwrap();
        let dual = b.dual_norm(&sp, 0.0).unwrap();
        for x in 0..9 {
            assert!(dual.values[x] <= pw.values[x] + 1e-12);
        }
    }

    #[test]
    fn dsym_pairing_symmetric_and_zero_for_rigid_translation() {
        let sp = torus_2d();
        let b = constant_field(&sp, [0.8, -0.3]).unwrap();
        let mut rng = stream(3, 11);
        let f = sp.random_smooth(&mut rng);
        let g = sp.random_smooth(&mut rng);
        let pfg = b.dsym_pairing(&sp, &f, &g, 0.0).unwrap();
        let pgf = b.dsym_pairing(&sp, &g, &f, 0.0).unwrap();
        assert!((pfg - pgf).abs() < 1e-15);
        assert!(pfg.abs() < 1e-10, "constant field pairing {pfg}");
    }

    #[test]
    fn dsym_pairing_is_bilinear() {
        let sp = torus_2d();
        let b = shear_field(&sp, 1.0).unwrap();
        let mut rng = stream(4, 13);
        let f1 = sp.random_smooth(&mut rng);
        let f2 = sp.random_smooth(&mut rng);
        let g = sp.random_smooth(&mut rng);
        let combo = &f1 * 1.5 + &f2 * (-0.5);
        let lhs = b.dsym_pairing(&sp, &combo, &g, 0.0).unwrap();
        let rhs = 1.5 * b.dsym_pairing(&sp, &f1, &g, 0.0).unwrap()
            - 0.5 * b.dsym_pairing(&sp, &f2, &g, 0.0).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn dsym_estimate_reports_lower_bound() {
        let sp = torus_2d();
        let b = shear_field(&sp, 1.0).unwrap();
        let report = b.dsym_norm_estimate(&sp, 0.0, 4, 12).unwrap();
        assert!(report.dsym_norm_lower > 0.0);
        assert_eq!(report.bound_kind, BoundKind::Lower);
        assert!(report.div_linf < 1e-10);
        for (_, _, value) in &report.samples {
            assert!(value.is_finite());
        }
    }

    #[test]
    fn kind_backend_mismatch_rejected() {
        let sp = Space::random_graph(8, 16, 2).unwrap();
        let b = Derivation::steady(DerivationKind::TorusField(vec![Array1::zeros(8)]));
        assert!(b.apply(&sp, &Array1::zeros(8), 0.0).is_err());
    }

    #[test]
    fn time_knots_select_piecewise() {
        let sp = Space::torus(1, 16, 2.0 * std::f64::consts::PI, 8, 0).unwrap();
        let n = sp.states();
        let b = Derivation::time_dependent(vec![
            (
                0.0,
                DerivationKind::TorusField(vec![Array1::from_elem(n, 1.0)]),
            ),
            (
                1.0,
                DerivationKind::TorusField(vec![Array1::from_elem(n, 2.0)]),
            ),
        ])
        .unwrap();
        let f = Array1::from_iter(
            (0..n).map(|i| sp.torus_backend().unwrap().coords(i)[0].sin()),
        );
        let early = b.apply(&sp, &f, 0.5).unwrap();
        let late = b.apply(&sp, &f, 1.5).unwrap();
        let ratio = late[3] / early[3];
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn knots_must_increase() {
        let kind = DerivationKind::Gradient(array![0.0, 1.0]);
        assert!(Derivation::time_dependent(vec![(1.0, kind.clone()), (0.5, kind)]).is_err());
    }
}
