//! Finite diffusion spaces: measure, carré du champ, generator, heat
//! semigroup, `L^p` machinery and the normalized test dictionary shared by
//! every estimator in the crate.

mod graph;
mod torus;

pub use graph::GraphSpace;
pub use torus::{interp_periodic, TorusSpace, UPSAMPLE};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::rng::stream;

/// A function on the states of a space.
pub type Observable = Array1<f64>;

pub enum Backend {
    Graph(GraphSpace),
    Torus(TorusSpace),
}

/// Analytic form of a torus dictionary entry: `sin(h (kx x + ky y) + phase) / scale`.
#[derive(Debug, Clone, Copy)]
pub struct TorusMode {
    pub kx: i64,
    pub ky: i64,
    pub phase: f64,
    pub scale: f64,
}

pub struct Space {
    pub backend: Backend,
    measure: Array1<f64>,
    /// Test dictionary, each entry normalized so that `max Γ(f) <= 1`.
    dictionary: Vec<Observable>,
    /// For torus backends, the analytic description of each dictionary entry
    /// (used to evaluate test observables off-grid).
    torus_modes: Vec<TorusMode>,
    seed: u64,
}

pub const DEFAULT_DICTIONARY: usize = 32;

impl Space {
    pub fn graph(weights: Array2<f64>, measure: Array1<f64>, dict: usize, seed: u64) -> Result<Self> {
        Self::from_backend(Backend::Graph(GraphSpace::new(weights, measure)?), dict, seed)
    }

    pub fn random_graph(n: usize, dict: usize, seed: u64) -> Result<Self> {
        Self::from_backend(Backend::Graph(GraphSpace::random(n, seed)?), dict, seed)
    }

    pub fn torus(d: usize, n_axis: usize, len: f64, dict: usize, seed: u64) -> Result<Self> {
        Self::from_backend(Backend::Torus(TorusSpace::new(d, n_axis, len)?), dict, seed)
    }

    fn from_backend(backend: Backend, dict: usize, seed: u64) -> Result<Self> {
        let measure = match &backend {
            Backend::Graph(g) => g.measure.clone(),
            Backend::Torus(t) => Array1::from_elem(t.states(), 1.0 / t.states() as f64),
        };
        let mut space = Space {
            backend,
            measure,
            dictionary: Vec::new(),
            torus_modes: Vec::new(),
            seed,
        };
        let (dictionary, torus_modes) = space.build_dictionary(dict);
        space.dictionary = dictionary;
        space.torus_modes = torus_modes;
        Ok(space)
    }

    pub fn states(&self) -> usize {
        self.measure.len()
    }

    pub fn measure(&self) -> &Array1<f64> {
        &self.measure
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.backend, Backend::Torus(_))
    }

    pub fn torus_backend(&self) -> Result<&TorusSpace> {
        match &self.backend {
            Backend::Torus(t) => Ok(t),
            Backend::Graph(_) => Err(CoreError::BackendMismatch(
                "operation needs the torus backend".into(),
            )),
        }
    }

    pub fn graph_backend(&self) -> Result<&GraphSpace> {
        match &self.backend {
            Backend::Graph(g) => Ok(g),
            Backend::Torus(_) => Err(CoreError::BackendMismatch(
                "operation needs the graph backend".into(),
            )),
        }
    }

    fn check_len(&self, f: &Observable) -> Result<()> {
        if f.len() != self.states() {
            return Err(CoreError::SizeMismatch {
                expected: self.states(),
                got: f.len(),
            });
        }
        Ok(())
    }

    /// `∫ f dm`.
    pub fn integral(&self, f: &Observable) -> f64 {
        f.iter().zip(self.measure.iter()).map(|(a, m)| a * m).sum()
    }

    /// `∫ f g dm`.
    pub fn inner(&self, f: &Observable, g: &Observable) -> f64 {
        f.iter()
            .zip(g.iter())
            .zip(self.measure.iter())
            .map(|((a, b), m)| a * b * m)
            .sum()
    }

    /// Carré du champ `Γ(f, g)`.
    pub fn gamma(&self, f: &Observable, g: &Observable) -> Result<Observable> {
        self.check_len(f)?;
        self.check_len(g)?;
        Ok(match &self.backend {
            Backend::Graph(gr) => gr.gamma(f, g),
            Backend::Torus(t) => t.gamma(f, g),
        })
    }

    pub fn gamma_diag(&self, f: &Observable) -> Result<Observable> {
        self.gamma(f, f)
    }

    /// Generator `Δ f`.
    pub fn generator(&self, f: &Observable) -> Observable {
        match &self.backend {
            Backend::Graph(g) => g.generator(f),
            Backend::Torus(t) => t.laplacian(f),
        }
    }

    /// Dirichlet form `ℰ(f, g) = ∫ Γ(f, g) dm`.
    pub fn energy(&self, f: &Observable, g: &Observable) -> Result<f64> {
        Ok(self.integral(&self.gamma(f, g)?))
    }

    /// Heat semigroup `P_t f`.
    pub fn heat(&self, f: &Observable, t: f64) -> Result<Observable> {
        self.check_len(f)?;
        if t < 0.0 {
            return Err(CoreError::InvalidParameter(format!(
                "heat flow needs t >= 0, got {t}"
            )));
        }
        Ok(match &self.backend {
            Backend::Graph(g) => g.heat(f, t),
            Backend::Torus(tor) => tor.heat(f, t),
        })
    }

    /// Solves `Δ v = g - <g>`, zero-mean solution.
    pub fn solve_poisson(&self, g: &Observable) -> Observable {
        match &self.backend {
            Backend::Graph(gr) => gr.solve_poisson(g),
            Backend::Torus(t) => t.solve_poisson(g),
        }
    }

    /// `L^p(m)` norm; `p` may be `f64::INFINITY`.
    pub fn lp_norm(&self, f: &Observable, p: f64) -> f64 {
        assert!(p >= 1.0, "L^p norms need p >= 1");
        if p.is_infinite() {
            f.iter().map(|v| v.abs()).fold(0.0, f64::max)
        } else {
            self.integral(&f.mapv(|v| v.abs().powf(p))).powf(1.0 / p)
        }
    }

    /// `V_p` norm `‖f‖_2 + ‖Γ(f)‖_{p/2}`.
    pub fn vp_norm(&self, f: &Observable, p: f64) -> Result<f64> {
        assert!(p >= 2.0, "V_p norms need p >= 2");
        let gam = self.gamma_diag(f)?;
        let gnorm = if p.is_infinite() {
            gam.iter().map(|v| v.abs()).fold(0.0, f64::max)
        } else {
            self.lp_norm(&gam, p / 2.0)
        };
        Ok(self.lp_norm(f, 2.0) + gnorm)
    }

    pub fn dictionary(&self) -> &[Observable] {
        &self.dictionary
    }

    fn build_dictionary(&self, count: usize) -> (Vec<Observable>, Vec<TorusMode>) {
        let mut dict = Vec::with_capacity(count);
        let mut torus_modes = Vec::new();
        match &self.backend {
            Backend::Torus(t) => {
                let h = 2.0 * std::f64::consts::PI / t.len;
                let kmax = (t.n_axis / 2 - 1) as i64;
                let mut modes: Vec<(i64, i64)> = Vec::new();
                if t.d == 1 {
                    for k in 1..=kmax {
                        modes.push((k, 0));
                    }
                } else {
                    for kx in 0..=kmax {
                        for ky in -kmax..=kmax {
                            if kx == 0 && ky <= 0 {
                                continue;
                            }
                            modes.push((kx, ky));
                        }
                    }
                    modes.sort_by_key(|&(kx, ky)| (kx * kx + ky * ky, kx, ky));
                }
                'outer: for (kx, ky) in modes {
                    let knorm = ((kx * kx + ky * ky) as f64).sqrt() * h;
                    for phase in [0.0, std::f64::consts::FRAC_PI_2] {
                        if dict.len() >= count {
                            break 'outer;
                        }
                        let f = Array1::from_iter((0..t.states()).map(|i| {
                            let [x, y] = t.coords(i);
                            ((kx as f64 * x + ky as f64 * y) * h + phase).sin() / knorm
                        }));
                        dict.push(f);
                        torus_modes.push(TorusMode {
                            kx,
                            ky,
                            phase,
                            scale: knorm,
                        });
                    }
                }
            }
            Backend::Graph(g) => {
                let n = g.states();
                let indicators = (count / 2).min(n);
                for i in 0..indicators {
                    let mut f = Array1::<f64>::zeros(n);
                    f[i] = 1.0;
                    dict.push(self.gamma_normalize(f));
                }
                let mut rng = stream(self.seed, 0x64696374);
                let low = n.saturating_sub(1).min(6);
                while dict.len() < count {
                    // random combination of the lowest nonconstant eigenfunctions
                    let mut f = Array1::<f64>::zeros(n);
                    for j in 0..low {
                        let k = n - 2 - j; // eigenvalues ascend; n-1 is the constant
                        let coeff = symmetric_unit(&mut rng);
                        f = f + g.eigenfunction(k).mapv(|v| v * coeff);
                    }
                    dict.push(self.gamma_normalize(f));
                }
            }
        }
        (dict, torus_modes)
    }

    /// Evaluates dictionary entry `i` at an arbitrary point of the torus
    /// (exactly, through its analytic mode form).
    pub fn eval_dictionary_at(&self, i: usize, point: [f64; 2]) -> Result<f64> {
        let tor = self.torus_backend()?;
        let mode = self
            .torus_modes
            .get(i)
            .ok_or_else(|| CoreError::InvalidParameter(format!("no dictionary entry {i}")))?;
        let h = 2.0 * std::f64::consts::PI / tor.len;
        Ok(((mode.kx as f64 * point[0] + mode.ky as f64 * point[1]) * h + mode.phase).sin()
            / mode.scale)
    }

    /// Analytic mode data of torus dictionary entry `i`.
    pub fn torus_mode(&self, i: usize) -> Result<TorusMode> {
        self.torus_backend()?;
        self.torus_modes
            .get(i)
            .copied()
            .ok_or_else(|| CoreError::InvalidParameter(format!("no dictionary entry {i}")))
    }

    fn gamma_normalize(&self, f: Observable) -> Observable {
        let gmax = self
            .gamma_diag(&f)
            .expect("dictionary entry has the right length")
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        if gmax > 0.0 {
            f.mapv(|v| v / gmax.sqrt())
        } else {
            f
        }
    }

    /// Random band-limited observable with unit `L^2` norm, for estimator
    /// trials. Deterministic in the supplied RNG.
    pub fn random_smooth(&self, rng: &mut ChaCha8Rng) -> Observable {
        let n = self.states();
        let mut f = Array1::<f64>::zeros(n);
        match &self.backend {
            Backend::Torus(_) => {
                for entry in self.dictionary.iter().take(12) {
                    let c = symmetric_unit(rng);
                    f = f + entry.mapv(|v| v * c);
                }
            }
            Backend::Graph(g) => {
                let low = n.saturating_sub(1).min(8);
                for j in 0..low {
                    let k = n - 2 - j;
                    let c = symmetric_unit(rng);
                    f = f + g.eigenfunction(k).mapv(|v| v * c);
                }
            }
        }
        let norm = self.lp_norm(&f, 2.0);
        if norm > 1e-300 {
            f.mapv(|v| v / norm)
        } else {
            f
        }
    }

    /// Empirical maximum of `√t ‖√Γ(P_t f)‖_p / ‖f‖_p` over the dictionary
    /// and `trials` random smooth observables; a certified lower bound for
    /// the true `L^p`-Γ constant. Ties break toward the lowest dictionary
    /// index.
    pub fn gamma_inequality_estimate(
        &self,
        p: f64,
        t_grid: &[f64],
        trials: usize,
        seed: u64,
    ) -> Result<GammaEstimate> {
        if t_grid.is_empty() {
            return Err(CoreError::InvalidParameter("empty t grid".into()));
        }
        if t_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(CoreError::InvalidParameter(
                "t grid must lie in (0, 1]".into(),
            ));
        }
        if trials < 1 {
            return Err(CoreError::InvalidParameter("trials must be >= 1".into()));
        }
        let mut rng = stream(seed, 0x6770676d);
        let mut candidates: Vec<(String, Observable)> = self
            .dictionary
            .iter()
            .enumerate()
            .map(|(i, f)| (format!("dict[{i}]"), f.clone()))
            .collect();
        for tdx in 0..trials {
            candidates.push((format!("random[{tdx}]"), self.random_smooth(&mut rng)));
        }
        let mut best = GammaEstimate {
            constant: 0.0,
            t_at_max: t_grid[0],
            candidate: String::new(),
        };
        for (name, f) in &candidates {
            let fnorm = self.lp_norm(f, p);
            if fnorm < 1e-13 {
                continue;
            }
            for &t in t_grid {
                let ptf = self.heat(f, t)?;
                let sqrt_gamma = self.gamma_diag(&ptf)?.mapv(|v| v.max(0.0).sqrt());
                let ratio = t.sqrt() * self.lp_norm(&sqrt_gamma, p) / fnorm;
                if ratio > best.constant {
                    best = GammaEstimate {
                        constant: ratio,
                        t_at_max: t,
                        candidate: name.clone(),
                    };
                }
            }
        }
        Ok(best)
    }

    /// `max_x |Γ(η∘f) - η'(f)^2 Γ(f)|`, the chain-rule defect. Vanishes at the
    /// spectral rate on the torus; strictly positive in general on graphs
    /// (graph forms are not strongly local), where it is a diagnostic only.
    pub fn chain_rule_defect(
        &self,
        f: &Observable,
        eta: impl Fn(f64) -> f64,
        eta_prime: impl Fn(f64) -> f64,
    ) -> Result<f64> {
        let ef = f.mapv(&eta);
        let lhs = self.gamma_diag(&ef)?;
        let gf = self.gamma_diag(f)?;
        let mut worst = 0.0f64;
        for x in 0..self.states() {
            let d = eta_prime(f[x]);
            worst = worst.max((lhs[x] - d * d * gf[x]).abs());
        }
        Ok(worst)
    }
}

/// Result of the `L^p`-Γ constant estimation.
#[derive(Debug, Clone)]
pub struct GammaEstimate {
    pub constant: f64,
    pub t_at_max: f64,
    pub candidate: String,
}

fn symmetric_unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>() * 2.0 - 1.0
}

/// Parses a CSV edge list `x,y,w` into a symmetric weight matrix.
pub fn weights_from_edge_list(n: usize, text: &str) -> Result<Array2<f64>> {
    let mut w = Array2::<f64>::zeros((n, n));
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("x,") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(CoreError::InvalidSpace(format!(
                "edge list line {} is not `x,y,w`: {line}",
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| CoreError::InvalidSpace(format!("bad number `{s}` on line {}", lineno + 1)))
        };
        let x = parse(parts[0])? as usize;
        let y = parse(parts[1])? as usize;
        let val = parse(parts[2])?;
        if x >= n || y >= n {
            return Err(CoreError::InvalidSpace(format!(
                "edge ({x}, {y}) out of range for n = {n}"
            )));
        }
        w[[x, y]] = val;
        w[[y, x]] = val;
    }
    Ok(w)
}
