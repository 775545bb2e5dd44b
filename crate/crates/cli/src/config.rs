//! Run configuration: defaults, then a JSON file, then command-line flags.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize};
use tracenorm::solver::Initializer;
use tracenorm::PathConfig;

use crate::io::read_json;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// One value for single solves, any number for `check`.
    #[serde(deserialize_with = "one_or_many")]
    pub lambda: Vec<f64>,
    pub ridge: f64,
    /// Regression only: scale the loss by `1/(nk)`.
    pub scaled: bool,
    pub trace: bool,
    /// Grid and solver settings. `path.solver` is also used by single solves.
    pub path: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            lambda: Vec::new(),
            ridge: 0.0,
            scaled: true,
            trace: false,
            path: PathConfig::default(),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// Master seed; required by `gen`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "tracenorm-out")]
    pub out: PathBuf,
    /// JSON file with configuration overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Regularization weight; comma-separated or repeated for `check`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, global = true)]
    pub lambda_max: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_min: Option<f64>,
    /// Grid ratio `λ_{i+1}/λ_i`.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Start from a random point of this rank instead of `X = 0`.
    #[arg(long, global = true)]
    pub rank0: Option<usize>,
    #[arg(long, global = true)]
    pub max_rank: Option<usize>,
    /// Threshold on `σ₁(S) − λ`, in units of `‖∇f(0)‖_op`.
    #[arg(long, global = true)]
    pub eps_sigma: Option<f64>,
    /// Threshold on the relative duality gap.
    #[arg(long, global = true)]
    pub eps_gap: Option<f64>,
    /// Threshold on the absolute duality gap.
    #[arg(long, global = true)]
    pub eps_gap_abs: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub predictor: Option<Switch>,
    /// Ridge weight `μ` on `‖X‖²_F`.
    #[arg(long, global = true, value_name = "MU")]
    pub ridge: Option<f64>,
    /// Write a JSON Lines trace of every outer iteration.
    #[arg(long, global = true)]
    pub trace: bool,
}

/// Recursively overlays `patch` on `base`.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl SharedArgs {
    /// Effective configuration: `defaults`, then the `--config` file, then flags.
    pub fn resolve(&self, defaults: RunConfig) -> Result<RunConfig, CliError> {
        let mut cfg = defaults;
        if let Some(path) = &self.config {
            let patch: serde_json::Value = read_json(path)?;
            let mut base = serde_json::to_value(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
            merge(&mut base, patch);
            cfg = serde_json::from_value(base)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if !self.lambda.is_empty() {
            cfg.lambda = self.lambda.clone();
        }
        if let Some(v) = self.ridge {
            cfg.ridge = v;
        }
        cfg.trace |= self.trace;
        // The master seed also drives random initialization.
        if let Some(seed) = cfg.seed {
            cfg.path.solver.seed = seed;
        }
        let p = &mut cfg.path;
        if let Some(v) = self.lambda_max {
            p.lambda_max = v;
        }
        if let Some(v) = self.lambda_min {
            p.lambda_min = v;
        }
        if let Some(v) = self.gamma {
            p.gamma = v;
        }
        if let Some(v) = self.predictor {
            p.predictor = v == Switch::On;
        }
        let s = &mut p.solver;
        if let Some(v) = self.rank0 {
            s.rank0 = v;
            s.init = Initializer::Random;
        }
        if let Some(v) = self.max_rank {
            s.max_rank = Some(v);
        }
        if let Some(v) = self.eps_sigma {
            s.epsilon_sigma = v;
        }
        if let Some(v) = self.eps_gap {
            s.epsilon_gap = v;
        }
        if let Some(v) = self.eps_gap_abs {
            s.epsilon_gap_abs = Some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Checks that do not need the problem shape.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.lambda.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(CliError::Input("lambda must be finite and nonnegative".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(CliError::Input("ridge must be finite and nonnegative".into()));
        }
        self.path.validate().map_err(|e| CliError::Input(e.to_string()))
    }

    /// The single `λ` of a one-shot solve.
    pub fn single_lambda(&self) -> Result<f64, CliError> {
        match self.lambda.as_slice() {
            [l] => Ok(*l),
            [] => Err(CliError::Input("missing --lambda".into())),
            _ => Err(CliError::Input("this command takes exactly one --lambda".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"lambda": 0.5, "ridge": 0.1, "path": {"gamma": 0.9, "solver": {"epsilon_gap": 1e-7}}}"#).unwrap();
        let args = SharedArgs {
            config: Some(p),
            ridge: Some(0.2),
            ..Default::default()
        };
        let cfg = args.resolve(RunConfig::default()).unwrap();
        assert_eq!(cfg.lambda, vec![0.5]);
        assert_eq!(cfg.ridge, 0.2);
        assert_eq!(cfg.path.gamma, 0.9);
        assert_eq!(cfg.path.solver.epsilon_gap, 1e-7);
        assert_eq!(cfg.path.solver.epsilon_sigma, 1e-5);
        assert_eq!(cfg.path.lambda_max, 1e3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"lamda": 0.5}"#).unwrap();
        let args = SharedArgs {
            config: Some(p),
            ..Default::default()
        };
        assert!(matches!(args.resolve(RunConfig::default()), Err(CliError::Input(_))));

        let args = SharedArgs {
            gamma: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(args.resolve(RunConfig::default()), Err(CliError::Input(_))));
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
