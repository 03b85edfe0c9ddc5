//! Convex dual bounds and reconstruction for a 1D bilinear coefficient
//! inverse problem.
//!
//! The task: recover a spatially varying coefficient `w` on (0,1) from a
//! noisy observation of the state `u` solving `-u'' + f0*u*w = f1` with
//! homogeneous Dirichlet boundary conditions. The library provides
//!
//! - first-order finite elements for the state equation and a locally
//!   averaged variant of it ([`fem`], [`mesh`]),
//! - a convex relaxation of the bilinear term via per-cell McCormick
//!   envelopes over cell averages ([`relax`]),
//! - optimization-based tightening of the per-cell state bounds that
//!   enter those envelopes ([`obbt`]),
//! - self-contained dense LP / convex-QP kernels backing the above
//!   ([`convex`]),
//! - a box-constrained limited-memory quasi-Newton local solver
//!   ([`localopt`]),
//! - the noise-adapted mesh-size balancing rule ([`balance`]), and
//! - an experiment driver that ties everything together and writes CSV
//!   tables ([`harness`]).
//!
//! The binary target exposes the driver as a CLI; see the README for the
//! subcommands and the config file schema.

pub mod balance;
pub mod convex;
pub mod fem;
pub mod harness;
pub mod linalg;
pub mod localopt;
pub mod mesh;
pub mod obbt;
pub mod quad;
pub mod relax;
