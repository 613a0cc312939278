//! NMPC motion planning for autonomous overtaking with progressively
//! smoothed obstacle constraints.
//!
//! The stack is organized bottom-up:
//!
//! * [`shape`] — smooth over-approximations of the unit square (the
//!   normalized obstacle footprint), their gradients, width calibration,
//!   and half-space linearization.
//! * [`path`] — reference curves built from curvature profiles, plus the
//!   Cartesian/Frenet coordinate transforms.
//! * [`vehicle`] — the 5-state Frenet kinematic single-track model, its RK4
//!   discretization, and analytic sensitivities.
//! * [`qp`] — an in-house primal-dual interior-point solver for
//!   stage-structured convex QPs (Riccati-style block elimination).
//! * [`ocp`] — assembly of the multiple-shooting optimal control problem
//!   and its Gauss-Newton QP linearization.
//! * [`rti`] — the real-time-iteration controller: shift, linearize once,
//!   solve one QP per sample.
//! * [`sim`] — closed-loop simulation of ego + surrounding vehicle on
//!   randomized roads, metric computation, and batch experiments.
//!
//! The scalar-level numerics ([`shape`], [`vehicle`]) are generic over the
//! float type via [`num_traits::Float`]; the matrix-level solver layers are
//! concrete over [`Real`].

pub mod ocp;
pub mod path;
pub mod qp;
pub mod rti;
pub mod shape;
pub mod sim;
pub mod vehicle;

/// Scalar type used by the solver, controller and harness layers.
pub type Real = f64;
