//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::log_grid;
use crate::error::{Error, Result};
use crate::feature_maps::MapSpec;
use crate::flow::ScheduleKind;
use crate::measures::DistributionSpec;

fn default_schedule() -> ScheduleKind {
    ScheduleKind::SecondOrder
}
fn default_safety_c() -> f64 {
    1.0
}
fn default_safety_c_cap() -> f64 {
    1024.0
}
fn default_stop_tol() -> f64 {
    1e-12
}
fn default_mc_slack() -> f64 {
    1e-9
}
fn default_certify_samples() -> usize {
    4000
}
fn default_trials() -> usize {
    20
}
fn default_lipschitz_pairs() -> usize {
    10_000
}
fn default_taylor_grid() -> Vec<f64> {
    log_grid(1e-1, 1e-4, 7)
}
fn default_slope_range() -> [f64; 2] {
    [1.9, 2.1]
}
fn default_inversion_tol() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    60
}
fn default_roundtrip_tol() -> f64 {
    1e-9
}

/// Settings for the `verify` suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    /// Independent (source, target) resamples on which the bound checks run.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Step for the bound checks. Defaults to each trial's second-order step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_lipschitz_pairs")]
    pub lipschitz_pairs: usize,
    #[serde(default = "default_taylor_grid")]
    pub taylor_grid: Vec<f64>,
    #[serde(default = "default_slope_range")]
    pub taylor_slope_range: [f64; 2],
    /// Largest per-block residual accepted by the fixed-point inversion; long
    /// flows use a tighter one derived from `roundtrip_tol`.
    #[serde(default = "default_inversion_tol")]
    pub inversion_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Largest accepted per-particle error of `inverse(forward(z))`.
    #[serde(default = "default_roundtrip_tol")]
    pub roundtrip_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            epsilon: None,
            lipschitz_pairs: default_lipschitz_pairs(),
            taylor_grid: default_taylor_grid(),
            taylor_slope_range: default_slope_range(),
            inversion_tol: default_inversion_tol(),
            max_iter: default_max_iter(),
            roundtrip_tol: default_roundtrip_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub map: MapSpec,
    pub source: DistributionSpec,
    pub target: DistributionSpec,
    pub n_particles: usize,
    /// Target particle count; defaults to `n_particles`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_target: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    /// Target ratio `MMD^2_final / MMD^2_initial`, in `(0, 1)`.
    pub delta: f64,
    #[serde(default = "default_safety_c")]
    pub safety_c: f64,
    /// First-order runs double `safety_c` up to this value.
    #[serde(default = "default_safety_c_cap")]
    pub safety_c_cap: f64,
    #[serde(default = "default_stop_tol")]
    pub stop_tol: f64,
    /// Relative slack on the per-block contraction check.
    #[serde(default = "default_mc_slack")]
    pub mc_slack: f64,
    #[serde(default = "default_certify_samples")]
    pub certify_samples: usize,
    #[serde(default)]
    pub verify: VerifyOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative CSV paths in distribution
    /// specs are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            for spec in [&mut cfg.source, &mut cfg.target] {
                if let DistributionSpec::Csv { path } = spec {
                    let p = Path::new(path.as_str());
                    if p.is_relative() {
                        *path = dir.join(p).to_string_lossy().into_owned();
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn n_target(&self) -> usize {
        self.n_target.unwrap_or(self.n_particles)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(config_err(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.n_particles == 0 || self.n_target() == 0 {
            return Err(config_err("particle counts must be at least 1"));
        }
        if !(self.safety_c > 0.0 && self.safety_c.is_finite()) {
            return Err(config_err(format!("safety_c must be positive, got {}", self.safety_c)));
        }
        if !(self.safety_c_cap >= self.safety_c && self.safety_c_cap.is_finite()) {
            return Err(config_err("safety_c_cap must be finite and at least safety_c"));
        }
        if !(self.stop_tol >= 0.0 && self.stop_tol.is_finite()) {
            return Err(config_err("stop_tol must be finite and nonnegative"));
        }
        if !(self.mc_slack >= 0.0 && self.mc_slack.is_finite()) {
            return Err(config_err("mc_slack must be finite and nonnegative"));
        }
        if self.certify_samples == 0 {
            return Err(config_err("certify_samples must be at least 1"));
        }
        let v = &self.verify;
        if v.trials == 0 || v.lipschitz_pairs == 0 || v.max_iter == 0 {
            return Err(config_err("verify.trials, lipschitz_pairs and max_iter must be at least 1"));
        }
        if let Some(e) = v.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(config_err("verify.epsilon must be positive"));
            }
        }
        if !(v.inversion_tol > 0.0 && v.roundtrip_tol > 0.0) {
            return Err(config_err("inversion tolerances must be positive"));
        }
        if !(v.taylor_slope_range[0] <= v.taylor_slope_range[1]) {
            return Err(config_err("taylor_slope_range must be [lo, hi] with lo <= hi"));
        }
        for (name, spec) in [("source", &self.source), ("target", &self.target)] {
            let dim = self.map.input_dim();
            if let (Some(a), Some(b)) = (dim, spec.dim()) {
                if a != b {
                    return Err(config_err(format!("{name} has dimension {b} but the map expects {a}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "map": {"kind": "affine", "dim": 1},
        "source": {"kind": "point_mass", "x": [0.0]},
        "target": {"kind": "point_mass", "x": [1.0]},
        "n_particles": 1,
        "delta": 1e-3
    }"#;

    #[test]
    fn defaults_apply() {
        let c = ExperimentConfig::from_json(TOY).unwrap();
        assert_eq!(c.schedule, ScheduleKind::SecondOrder);
        assert_eq!(c.safety_c, 1.0);
        assert_eq!(c.stop_tol, 1e-12);
        assert_eq!(c.seed, 0);
        assert_eq!(c.verify.taylor_grid.len(), 7);
        assert_eq!(c.n_target(), 1);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = TOY.replace("\"delta\"", "\"bogus\": 1, \"delta\"");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
        let text = TOY.replace("\"dim\": 1", "\"dim\": 1, \"extra\": 2");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_delta_and_dims() {
        let text = TOY.replace("1e-3", "2");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
        let text = TOY.replace("\"x\": [1.0]", "\"x\": [1.0, 2.0]");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn resolves_relative_csv_paths() {
        let dir = tempfile::tempdir().unwrap();
        let text = TOY.replace(
            r#"{"kind": "point_mass", "x": [1.0]}"#,
            r#"{"kind": "csv", "path": "target.csv"}"#,
        );
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, text).unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        let DistributionSpec::Csv { path: p } = &c.target else { unreachable!() };
        assert_eq!(Path::new(p), dir.path().join("target.csv"));
    }
}
