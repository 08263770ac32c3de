//! Run configuration shared by all commands.
//!
//! A config file is a JSON object with the fields of [`RunConfig`]; every
//! field is optional and command-line flags take precedence. Each run echoes
//! its fully resolved config as `config.json` in the output directory, and
//! that file reproduces the run when passed back through `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use msm_design::scenarios::PropensityMode;
use msm_design::{Estimand, Link, OutcomeKind, StabilityFunctional, UcbSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_POWER: f64 = 0.8;
pub const DEFAULT_B: usize = 1000;
pub const DEFAULT_B_UCB: usize = 1000;
pub const DEFAULT_GAMMA_UCB: f64 = 0.05;
/// Stability choices of a `design` run; the second-level bootstrap is opt-in.
pub const DESIGN_FUNCTIONALS: [&str; 4] = ["q0.5", "q0.7", "q0.9", "mean"];
/// Stability choices of a `validate` run.
pub const VALIDATE_FUNCTIONALS: [&str; 6] = ["q0.5", "q0.7", "q0.9", "mean", "ucb_q0.5", "ucb_mean"];

/// Covariates entering the propensity model of a pilot analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropensityTerms {
    All,
    Intercept,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<String>,
    pub mode: Option<PropensityMode>,
    pub pilot: Option<PathBuf>,
    pub kind: Option<OutcomeKind>,
    pub link: Option<Link>,
    pub propensity: Option<PropensityTerms>,
    pub estimand: Option<Estimand>,

    pub alpha: Option<f64>,
    pub power: Option<f64>,
    pub delta: Option<f64>,

    pub b: Option<usize>,
    pub b_ucb: Option<usize>,
    pub gamma_ucb: Option<f64>,
    pub functionals: Option<Vec<String>>,

    pub replicates: Option<usize>,
    pub n_pilot: Option<usize>,
    pub mc_reps: Option<usize>,
    pub target: Option<f64>,
    pub isotonic: Option<bool>,
    pub n: Option<usize>,

    pub p0: Option<f64>,
    pub p1: Option<f64>,
    pub lambda0: Option<f64>,
    pub lambda1: Option<f64>,
    pub sigma2: Option<f64>,
    pub rho: Option<f64>,

    pub dump_bootstrap: Option<bool>,
    pub dump_matrices: Option<bool>,

    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("invalid config {}: {e}", path.display())))
    }

    /// Pretty JSON without unset fields.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut v {
            m.retain(|_, x| !x.is_null());
        }
        let mut s = serde_json::to_string_pretty(&v).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(DEFAULT_ALPHA)
    }

    pub fn power(&self) -> f64 {
        self.power.unwrap_or(DEFAULT_POWER)
    }

    /// Splits the configured labels into plain functionals and UCB specs.
    pub fn stability_choices(&self, defaults: &[&str]) -> Result<(Vec<StabilityFunctional>, Vec<UcbSpec>), CliError> {
        let labels: Vec<String> = match &self.functionals {
            Some(l) => l.clone(),
            None => defaults.iter().map(|s| s.to_string()).collect(),
        };
        if labels.is_empty() {
            return Err(CliError::user("at least one stability functional is required"));
        }
        let mut plain = Vec::new();
        let mut ucb = Vec::new();
        for label in &labels {
            let label = label.trim();
            if let Some(rest) = label.strip_prefix("ucb_") {
                let phi: StabilityFunctional = rest.parse().map_err(|e| CliError::user(format!("{e}")))?;
                ucb.push(UcbSpec {
                    phi,
                    b_ucb: self.b_ucb.unwrap_or(DEFAULT_B_UCB),
                    gamma_ucb: self.gamma_ucb.unwrap_or(DEFAULT_GAMMA_UCB),
                });
            } else {
                plain.push(label.parse().map_err(|e| CliError::user(format!("{e}")))?);
            }
        }
        Ok((plain, ucb))
    }
}

/// Parses a lowercase enum name through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("unrecognized value `{s}`"))
}

pub fn default_link(kind: OutcomeKind) -> Link {
    match kind {
        OutcomeKind::Binary => Link::Logit,
        OutcomeKind::Count => Link::Log,
        OutcomeKind::Continuous => Link::Identity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig {
            scenario: Some("binary_sga".into()),
            mode: Some(PropensityMode::Constant),
            functionals: Some(vec!["q0.5".into(), "ucb_mean".into()]),
            seed: Some(7),
            ..Default::default()
        };
        let text = cfg.to_json();
        assert!(!text.contains("null"));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn choices_split_ucb_labels() {
        let cfg = RunConfig { b_ucb: Some(50), ..Default::default() };
        let (plain, ucb) = cfg.stability_choices(&VALIDATE_FUNCTIONALS).unwrap();
        assert_eq!(plain.len(), 4);
        assert_eq!(ucb.len(), 2);
        assert_eq!(ucb[1].label(), "ucb_mean");
        assert_eq!(ucb[0].b_ucb, 50);
        let bad = RunConfig { functionals: Some(vec!["q1.5".into()]), ..Default::default() };
        assert!(bad.stability_choices(&DESIGN_FUNCTIONALS).is_err());
    }

    #[test]
    fn enum_names() {
        assert_eq!(parse_enum::<Link>("Logit").unwrap(), Link::Logit);
        assert_eq!(parse_enum::<PropensityMode>("constant").unwrap(), PropensityMode::Constant);
        assert!(parse_enum::<Estimand>("atc").is_err());
    }
}
