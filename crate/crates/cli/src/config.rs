//! Experiment configuration files.

use std::path::Path;

use fbe_core::fgcb::{DensityMode, HeatVector};
use fbe_core::protocol::ProtocolOptions;
use fbe_core::{InverseTemperature, ModelSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// A single model or a list of models sharing `theta0`.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(ModelSpec),
    Many(Vec<ModelSpec>),
}

impl<'de> Deserialize<'de> for OneOrMany {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        // Decide on the shape first so errors name the missing field instead of the enum.
        let v = serde_json::Value::deserialize(d)?;
        if v.is_array() {
            serde_json::from_value(v).map(OneOrMany::Many).map_err(D::Error::custom)
        } else {
            serde_json::from_value(v).map(OneOrMany::One).map_err(D::Error::custom)
        }
    }
}

impl OneOrMany {
    pub fn to_vec(&self) -> Vec<ModelSpec> {
        match self {
            OneOrMany::One(m) => vec![m.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Fixed heats, or `Q(λ) = q̂ λ^p`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HeatRule {
    Fixed {
        #[serde(default)]
        dq_a2: f64,
        #[serde(default)]
        dq_b1: f64,
        #[serde(default)]
        dq_b2: f64,
    },
    Scaling {
        exponent: f64,
        direction: [f64; 3],
    },
}

impl HeatRule {
    pub fn at(&self, lambda: f64, theta0: &InverseTemperature, spec: &ModelSpec) -> HeatVector {
        let labels = spec.labels();
        match *self {
            HeatRule::Fixed { dq_a2, dq_b1, dq_b2 } => HeatVector::new(dq_a2, dq_b1, dq_b2, theta0, &labels),
            HeatRule::Scaling { exponent, direction: d } => {
                let s = lambda.powf(exponent);
                HeatVector::new(d[0] * s, d[1] * s, d[2] * s, theta0, &labels)
            }
        }
    }

    pub fn exponent(&self) -> Option<f64> {
        match self {
            HeatRule::Scaling { exponent, .. } => Some(*exponent),
            HeatRule::Fixed { .. } => None,
        }
    }
}

/// Numerical knobs; anything left out keeps the library default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub materialize_cap: Option<usize>,
    pub store_cap: Option<usize>,
    pub force_stream: Option<bool>,
    pub window_z: Option<f64>,
    pub box_nats: Option<f64>,
    pub pythagoras: Option<f64>,
    pub hessian: Option<f64>,
    pub entropy: Option<f64>,
    pub second_law: Option<f64>,
    pub bound_order: Option<f64>,
}

impl Tolerances {
    pub fn protocol_options(&self) -> ProtocolOptions {
        let d = ProtocolOptions::default();
        ProtocolOptions {
            materialize_cap: self.materialize_cap.unwrap_or(d.materialize_cap),
            store_cap: self.store_cap.unwrap_or(d.store_cap),
            force_stream: self.force_stream.unwrap_or(d.force_stream),
            window_z: self.window_z.unwrap_or(d.window_z),
            box_nats: self.box_nats.unwrap_or(d.box_nats),
            polish_xi: d.polish_xi,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: OneOrMany,
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub heat: Option<HeatRule>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_densities")]
    pub densities: DensityMode,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Default output path when `--out` is not given.
    #[serde(default)]
    pub output: Option<String>,
}

fn default_densities() -> DensityMode {
    DensityMode::Analytic
}

/// A parsed configuration together with the hash of its source bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn models(&self) -> Vec<ModelSpec> {
        self.model.to_vec()
    }

    pub fn theta0(&self) -> InverseTemperature {
        InverseTemperature(self.theta0.clone())
    }

    fn validate(&self) -> Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "field `schema_version`: unsupported version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let models = self.models();
        if models.is_empty() {
            return Err("field `model`: at least one model is required".into());
        }
        for (i, m) in models.iter().enumerate() {
            m.validate().map_err(|e| format!("field `model[{i}]`: {e}"))?;
            let k = m.labels().len();
            if k != self.theta0.len() {
                return Err(format!(
                    "field `theta0`: {} has {k} quantities but theta0 has {} entries",
                    m.name(),
                    self.theta0.len()
                ));
            }
        }
        if self.theta0.iter().any(|x| !x.is_finite()) {
            return Err("field `theta0`: entries must be finite".into());
        }
        if self.theta0.first().is_some_and(|b| *b <= 0.0) {
            return Err("field `theta0[0]`: the cold inverse temperature must be positive".into());
        }
        for (i, w) in self.lambdas.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(format!("field `lambdas[{}]`: list must be strictly increasing", i + 1));
            }
        }
        if self.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err("field `lambdas`: scales must be positive and finite".into());
        }
        if let Some(p) = self.heat.and_then(|h| h.exponent()) {
            if !(p > 0.0 && p < 1.0) {
                return Err(format!("field `heat.scaling.exponent`: {p} is outside (0, 1)"));
            }
        }
        if let DensityMode::Numeric { lambda_ref, .. } = self.densities {
            if !(lambda_ref > 0.0) {
                return Err("field `densities.numeric.lambda_ref`: must be positive".into());
            }
        }
        Ok(())
    }
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str, origin: &str) -> Result<LoadedConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!("{origin}: field `{path}`: {inner}"))
    })?;
    config.validate().map_err(|m| CliError::Config(format!("{origin}: {m}")))?;
    let digest = Sha256::digest(text.as_bytes());
    let hash = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok(LoadedConfig { config, hash })
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: cannot read: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}
