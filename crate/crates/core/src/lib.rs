//! Verification of first- and second-order optimality conditions for
//! singular solutions of partially-affine optimal control problems.
//!
//! Dynamics have the form `x' = f0(x,u) + sum_i v_i f_i(x,u)` with
//! polynomial data. Given a candidate trajectory the crate computes
//! Lagrange multipliers, the Goh-transformed coefficient matrices and the
//! quadratic forms built from them, then checks pointwise conditions, the
//! integral necessary condition and uniform positivity on the critical cone.

pub mod checker;
pub mod cone;
pub mod error;
pub mod forms;
pub mod goh;
pub mod linearized;
pub mod multiplier;
pub mod numerics;
pub mod poly;
pub mod problem;
pub mod registry;
pub mod trajectory;

pub use error::{Error, Result};
pub use linearized::{
    gamma_order, goh_transform_direction, integrate_linearized, linearize, Direction, GohDirection,
    LinearizedSystem,
};
pub use poly::{Monomial, Polynomial};
pub use problem::{EndpointEval, EndpointKind, EndpointMap, FieldEval, ProblemDef, VectorField};
pub use trajectory::{feasibility_report, integrate_state, FeasibilityReport, Grid, Series, Trajectory};
pub use checker::{
    full_report, necessity_scan, pointwise_report, sufficiency_check, vertex_forms, ConditionReport, Entry,
    ReportOptions, Stage, SufficiencyMode, SufficiencyResult, Verdict, VertexForm,
};
pub use cone::{build_cone, form_matrix, reduced_minimum, DiscretizedCone};
pub use forms::{expansion_probe, lagrangian_value, omega, omega_p, omega_p2, omega_p2_bilinear, QuadraticEvaluation};
pub use goh::{goh_matrices, h_blocks, r_cross_check, GohMatrices, HBlocks, RCrossCheck};
pub use multiplier::{
    classify_multiplier, find_multipliers, find_multipliers_with, integrate_costate, multiplier_from_weights,
    multiplier_residuals, ClassFlags, Multiplier, MultiplierSet, MultiplierStatus,
};
