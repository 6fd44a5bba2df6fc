use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{parse_topology_with_channels, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Pixels are multiplied into the first layer's integrators directly.
    AnalogFirstLayer,
    /// Each pixel `p` becomes `round(p * encode_steps)` unit spikes.
    SpikeEncoded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    RoundHalfAway,
    Floor,
    Ceil,
}

/// Floor and ceil treat values this close to an integer as that integer, so
/// that sums which cancel exactly in real arithmetic round the same way in
/// every summation order.
pub const INTEGER_SNAP: f64 = 1e-9;

impl RoundingMode {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            // f64::round already rounds half away from zero
            RoundingMode::RoundHalfAway => v.round(),
            RoundingMode::Floor | RoundingMode::Ceil => {
                let r = v.round();
                if (v - r).abs() <= INTEGER_SNAP {
                    r
                } else if self == RoundingMode::Floor {
                    v.floor()
                } else {
                    v.ceil()
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn channels(self) -> usize {
        match self {
            DatasetKind::Mnist => 1,
            DatasetKind::Cifar10 => 3,
        }
    }
}

/// Run configuration. Serialized as TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub topology: String,
    pub theta_ff: f64,
    pub theta_bp: f64,
    /// Scale applied to the top-layer error before it is discretized.
    pub alpha: f64,
    /// Learning rate. The applied step is `eta / alpha`, averaged over the batch.
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub input_mode: InputMode,
    pub rounding_mode: RoundingMode,
    pub dataset: DatasetKind,
    pub dataset_path: String,
    /// Number of sweeps used by the spike-encoded input mode.
    pub encode_steps: u32,
    /// Plain SGD momentum, 0 disables it.
    pub momentum: f64,
    /// Per-channel standardization (CIFAR-10 only).
    pub standardize: bool,
    /// Pad-4 random crop plus horizontal flip (CIFAR-10 only).
    pub augment: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            topology: "784-300-10".into(),
            theta_ff: 1.0,
            theta_bp: 1.0,
            alpha: 100.0,
            eta: 0.05,
            epochs: 10,
            batch_size: 32,
            seed: 1,
            input_mode: InputMode::AnalogFirstLayer,
            rounding_mode: RoundingMode::RoundHalfAway,
            dataset: DatasetKind::Mnist,
            dataset_path: "data/mnist".into(),
            encode_steps: 10,
            momentum: 0.0,
            standardize: true,
            augment: false,
        }
    }
}

impl NetworkConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn parsed_topology(&self) -> Result<Topology> {
        parse_topology_with_channels(&self.topology, self.dataset.channels())
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        validate_config(self)
    }
}

/// Per-example parameters shared by the event engine and the ANN engines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineParams {
    /// Trace increment per spike; also the scale of the weight increments.
    pub eta: f64,
    pub alpha: f64,
    pub rounding: RoundingMode,
    pub input_mode: InputMode,
    pub encode_steps: u32,
}

impl EngineParams {
    /// Parameters for one example of a batch of `batch_len`: the trace scale is
    /// `eta / (alpha * batch_len)`, so summing per-example increments yields the
    /// batch-averaged update with the error-scale compensation applied.
    pub fn for_batch(cfg: &NetworkConfig, batch_len: usize) -> Self {
        Self {
            eta: cfg.eta / (cfg.alpha * batch_len.max(1) as f64),
            alpha: cfg.alpha,
            rounding: cfg.rounding_mode,
            input_mode: cfg.input_mode,
            encode_steps: cfg.encode_steps,
        }
    }
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            eta: 0.01,
            alpha: 1.0,
            rounding: RoundingMode::RoundHalfAway,
            input_mode: InputMode::AnalogFirstLayer,
            encode_steps: 10,
        }
    }
}

/// Returns every violated invariant, or `Ok(())` when there are none.
pub fn validate_config(cfg: &NetworkConfig) -> std::result::Result<(), Vec<String>> {
    let mut errors = Vec::new();
    let positive = |name: &str, v: f64, errors: &mut Vec<String>| {
        if !(v > 0.0 && v.is_finite()) {
            errors.push(format!("{name} must be positive and finite (got {v})"));
        }
    };
    positive("theta_ff", cfg.theta_ff, &mut errors);
    positive("theta_bp", cfg.theta_bp, &mut errors);
    positive("alpha", cfg.alpha, &mut errors);
    positive("eta", cfg.eta, &mut errors);
    if cfg.alpha == 1.0 && cfg.theta_bp != cfg.theta_ff {
        errors.push("theta_bp must equal theta_ff when alpha=1".into());
    }
    if cfg.batch_size == 0 {
        errors.push("batch_size must be at least 1".into());
    }
    if cfg.input_mode == InputMode::SpikeEncoded && cfg.encode_steps == 0 {
        errors.push("encode_steps must be at least 1 for spike_encoded input".into());
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        errors.push(format!("momentum must lie in [0, 1) (got {})", cfg.momentum));
    }
    if let Err(e) = cfg.parsed_topology() {
        errors.push(e.to_string());
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}
