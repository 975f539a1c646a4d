//! Multi-batch line-search L-BFGS optimization for deep Q-learning, at a
//! scale where every moving part can be checked against an exact oracle.
//!
//! The crate is organized around the optimizer stack and the training
//! harness that drives it:
//!
//! - [`qnet`] — dense ReLU networks over flat `f64` parameter vectors with
//!   exact reverse-mode gradients of a single output.
//! - [`lbfgs`] — curvature-pair memory, the two-loop recursion for
//!   `H_k g`, and a dense inverse-Hessian oracle used by the tests.
//! - [`linesearch`] — weak-Wolfe backtracking with a configurable step
//!   floor.
//! - [`envs`] — deterministic gridworlds with a value-iteration oracle.
//! - [`trainer`] — the interaction loop: epsilon-greedy collection into a
//!   capacity-`b` memory that is consumed whole each optimization step,
//!   target values from the previous iterate, overlap gradients, and an
//!   SGD baseline.
//! - [`bench`] — convex quadratic experiments with a convergence-bound
//!   calculator, a Rosenbrock smoke test, and the update cost-ratio model.
//! - [`checkpoint`] — binary serialization of parameter vectors.

pub mod bench;
pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod lbfgs;
pub mod linesearch;
pub mod qnet;
pub mod trainer;
pub mod vecmath;

pub use error::{Error, Result};
pub use qnet::{NetworkSpec, ParamVector};
