//! Contact-geometric machinery for scalar second-order PDEs with one unknown
//! function and `n` independent variables.
//!
//! A PDE is viewed as a hypersurface of the bundle of Lagrangian planes over a
//! `(2n+1)`-dimensional contact manifold, worked chart-locally in Darboux
//! coordinates `(x^i, z, p_i)` with contact form `θ = dz − p_i dx^i`. On top of
//! a small expression DSL ([`expr`]) the crate provides:
//!
//! - [`contact`] — the contact form, Hamiltonian vector fields, brackets,
//!   Legendre transformations and Cauchy-datum handling;
//! - [`grassmann`] — pointwise linear algebra of the Lagrangian Grassmannian
//!   fiber: conformal metrics of equation hypersurfaces, characteristic
//!   covectors and metric decomposition;
//! - [`mae`] — Goursat-type Monge-Ampère structure `det(P − B) = 0`: adjugate
//!   metrics, the distributions `D`, `D⊥`, n-form residuals, intermediate
//!   integral tests and reconstruction of `D` from a black-box equation;
//! - [`charsolve`] — numerical method of characteristics: Hamiltonian flows,
//!   first-order Cauchy solving, functional relations among first integrals
//!   and the generalized Monge solver;
//! - [`jets`] — truncated formal power-series solutions of non-characteristic
//!   Cauchy problems via the prolongation recursion.

pub mod charsolve;
pub mod contact;
pub mod expr;
pub mod grassmann;
pub mod jets;
pub mod linalg;
pub mod mae;
pub mod rng;

pub use contact::ChartPoint;
pub use expr::{Expr, VarTable};
pub use grassmann::JetPoint;
