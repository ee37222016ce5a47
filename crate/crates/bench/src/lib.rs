//! Shared fixtures for the engine benchmarks.

use fbe_core::{HeatVector, InverseTemperature, ModelSpec, ObservableSet};

pub fn theta(v: &[f64]) -> InverseTemperature {
    InverseTemperature(v.to_vec())
}

/// Observables of `spec` at scale `lambda`.
pub fn observables(spec: &ModelSpec, lambda: f64) -> ObservableSet {
    fbe_core::instantiate(spec, lambda).expect("benchmark instance builds").obs
}

pub fn golden_pair() -> ModelSpec {
    ModelSpec::IidTwoLevel { omega_c: 1.0, omega_h: 0.5 * (1.0 + 5f64.sqrt()) }
}

/// `Q = λ^{0.7}` on the hot bath.
pub fn scaling_heat(lambda: f64, theta0: &InverseTemperature) -> HeatVector {
    HeatVector::new(lambda.powf(0.7), 0.0, 0.0, theta0, &golden_pair().labels())
}
