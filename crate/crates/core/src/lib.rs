//! Forward and inverse boundary value problems for time-harmonic isotropic
//! elastic waves with piecewise-constant Lamé parameters and density on a
//! known partition of the unit box.
//!
//! The crate is layered bottom-up:
//!
//! * [`material`]: isotropic tensors, parameter vectors, admissible sets and
//!   the stability moduli `σ`, `σ1`;
//! * [`mesh`]: block-partitioned tetrahedral meshes with the accessible patch `Σ`;
//! * [`fem`]: P1 vector finite-element assembly of
//!   `a(u, v) = ∫ C ∇̂u : ∇̂v − ω² ρ u · v`;
//! * [`solver`]: Dirichlet solves (block-Jacobi PCG) and the smallest Dirichlet
//!   eigenvalue gating admissible frequencies;
//! * [`dtn`]: the local Dirichlet-to-Neumann matrix, the `⋆`-norm and the
//!   Alessandrini identity check;
//! * [`deriv`]: the Fréchet derivative of the forward map and its probes;
//! * [`invert`]: projected Landweber / steepest-descent reconstruction;
//! * [`probes`]: empirical stability, injectivity and Green's-function probes.

pub mod deriv;
pub mod dtn;
pub mod error;
pub mod fem;
pub mod invert;
pub mod linalg;
pub mod material;
pub mod mesh;
pub mod probes;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
