//! Fine-grained Carnot bounds for heat engines with finite baths.
//!
//! The crate covers thermal states of several conserved quantities together with
//! their Kubo–Mori Fisher geometry. On top of that sit the second-order work
//! coefficients and the eigenbasis-permutation protocol that attains them.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fgcb;
pub mod linalg;
pub mod models;
pub mod operators;
pub mod protocol;
pub mod thermal;

pub use error::{Error, Result};
pub use fgcb::{
    estimate_densities, fgcb_bound, fgcb_coefficients, gcb_bound, AsymptoticDensities, DensityMode, FgcbCoefficients,
    HeatVector,
};
pub use models::{analytic_reference, instantiate, ModelSpec, ReferenceValues};
pub use operators::{
    dense_eig, joint_spectrum, validate, Factor, JointSpectrum, Label, ObservableSet, Quantity, Representation,
    ValidationReport, ValueClass,
};
pub use protocol::{
    achievability_report, build_optimal_protocol, pythagorean_check, solve_ideal_final_temperature,
    AchievabilityReport, IdealFinalTemperature, ProtocolOutcome,
};
pub use thermal::{
    build_thermal_state, dual_coordinates, effective_temperature, fisher_matrix, free_entropy, relative_entropy,
    von_neumann_entropy, DensityOperator, DualCoordinates, FisherMatrix, InverseTemperature, ThermalState,
};

/// Library version stamped into every output record.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
