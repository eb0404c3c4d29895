use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trackmpc::robot::{RobotBenchConfig, DEFAULT_STEPS};

pub const ROBOT_BENCH: &str = "robot2dof";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    Practical,
    Ideal,
    Both,
}

/// Which reference the bench tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    /// The path-following reference, which jumps at the end of the path.
    Path,
    /// The dynamics-consistent reference; its multipliers are identically zero.
    Feasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bench: String,
    pub mode: ModeSelection,
    /// Overrides for `N`, `M` and `ts`.
    pub horizon: Option<usize>,
    pub long_horizon: Option<usize>,
    pub ts: Option<f64>,
    pub seed: u64,
    pub steps: usize,
    /// Samples for terminal validation and positivity checks.
    pub samples: usize,
    pub out: PathBuf,
    pub reference: ReferenceKind,
    /// Scales the stored multipliers before use; anything but 1 corrupts them.
    pub multiplier_scale: f64,
    pub robot: RobotBenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bench: ROBOT_BENCH.into(),
            mode: ModeSelection::Both,
            horizon: None,
            long_horizon: None,
            ts: None,
            seed: 0,
            steps: DEFAULT_STEPS,
            samples: 10_000,
            out: PathBuf::from("out"),
            reference: ReferenceKind::Path,
            multiplier_scale: 1.0,
            robot: RobotBenchConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(format!("malformed config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Bench configuration with the overrides applied, checked against the bench bounds.
    pub fn bench_config(&self) -> Result<RobotBenchConfig, ConfigError> {
        if self.bench != ROBOT_BENCH {
            return Err(ConfigError(format!("unknown bench `{}` (available: {ROBOT_BENCH})", self.bench)));
        }
        if self.steps == 0 {
            return Err(ConfigError("closed loop needs at least one step (empty trace)".into()));
        }
        if self.samples == 0 {
            return Err(ConfigError("samples must be positive".into()));
        }
        if !self.multiplier_scale.is_finite() {
            return Err(ConfigError("multiplier_scale must be finite".into()));
        }
        let mut cfg = self.robot.clone();
        if let Some(n) = self.horizon {
            cfg.horizon = n;
        }
        if let Some(m) = self.long_horizon {
            cfg.long_horizon = m;
        }
        if let Some(ts) = self.ts {
            cfg.ts = ts;
        }
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.steps + cfg.horizon + 1 >= cfg.long_horizon {
            return Err(ConfigError(format!(
                "{} steps with horizon {} exceed the long horizon {}",
                self.steps, cfg.horizon, cfg.long_horizon
            )));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.horizon = Some(12);
        cfg.ts = Some(0.1 + 0.2);
        cfg.mode = ModeSelection::Practical;
        cfg.robot.x0 = [-4.69, -1.62, 0.1, -0.3];
        let text = cfg.to_json();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn seed_defaults_to_zero() {
        let cfg = ExperimentConfig::parse("{}").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_fields_and_benches_are_rejected() {
        assert!(ExperimentConfig::parse(r#"{"horizn": 3}"#).is_err());
        let cfg = ExperimentConfig::parse(r#"{"bench": "cartpole"}"#).unwrap();
        assert!(cfg.bench_config().is_err());
    }

    #[test]
    fn overrides_are_validated() {
        let cfg = ExperimentConfig::parse(r#"{"horizon": 0}"#).unwrap();
        assert!(cfg.bench_config().is_err());
        let cfg = ExperimentConfig::parse(r#"{"ts": -0.1}"#).unwrap();
        assert!(cfg.bench_config().is_err());
        let cfg = ExperimentConfig::parse(r#"{"horizon": 15, "ts": 0.02}"#).unwrap();
        let b = cfg.bench_config().unwrap();
        assert_eq!((b.horizon, b.ts), (15, 0.02));
    }
}
