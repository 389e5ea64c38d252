//! Numerical laboratory for transport and diffusion under rough vector fields,
//! built on exactly computable finite Dirichlet spaces.
//!
//! Two backends realize the abstract calculus (measure `m`, carré du champ `Γ`,
//! generator `Δ`, heat semigroup `P_t`):
//!
//! * weighted graphs, where everything reduces to dense symmetric matrix algebra
//!   and the semigroup is an exact matrix exponential via eigendecomposition;
//! * periodic torus grids (d = 1, 2), where `Γ`, `Δ` and `P_t` act spectrally.
//!
//! On top of the backends the crate provides derivations (abstract vector
//! fields) with divergence and deformation functionals, weak-form continuity
//! and Fokker-Planck solvers, semigroup commutators with their integral
//! representation, particle flows in the sense of regular Lagrangian flows,
//! path-ensemble lifts of densities (superposition), and martingale-problem
//! diagnostics for the diffusion extension.
//!
//! Everything is deterministic given explicit seeds, including parallel
//! particle loops (per-particle RNG streams, indexed writes, sequential
//! reductions).

pub mod array_file;
pub mod commutator;
pub mod continuity;
pub mod derivation;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod quadrature;
pub mod rng;
pub mod space;
pub mod stochastic;
pub mod superposition;

pub use error::{CoreError, Result};
pub use space::{Observable, Space};
