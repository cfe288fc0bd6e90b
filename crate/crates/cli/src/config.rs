//! Run configuration, loaded from a JSON file and overridden by flags.

use std::path::PathBuf;

use anyhow::{bail, ensure, Result};
use contracting_msa::norms::NormKind;
use contracting_msa::oracle::LqrParams;
use serde::{Deserialize, Serialize};

/// Where the Lipschitz constants come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstantsSource {
    /// The constants shipped with the problem.
    #[default]
    Declared,
    /// A JSON file of Lipschitz values.
    File { path: PathBuf },
    /// Sampled difference quotients; the resulting certificate is heuristic.
    Estimate { budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    /// Inline LQR problem, used instead of a named one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lqr: Option<LqrParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_norm: Option<NormKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_norm: Option<NormKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub constants: ConstantsSource,
}

fn default_tol() -> f64 {
    1e-9
}

fn default_max_iter() -> usize {
    200
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: None,
            lqr: None,
            grid_steps: None,
            horizon: None,
            tol: default_tol(),
            max_iter: default_max_iter(),
            seed: 0,
            state_norm: None,
            control_norm: None,
            out: None,
            constants: ConstantsSource::Declared,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.problem, &self.lqr) {
            (Some(_), Some(_)) => bail!("give either a problem name or inline lqr parameters, not both"),
            (None, None) => bail!("no problem given; use --problem <name> or an `lqr` block in the config file"),
            _ => {}
        }
        if let Some(n) = self.grid_steps {
            ensure!(n >= 1, "grid steps must be at least 1");
        }
        if let Some(t) = self.horizon {
            ensure!(t > 0.0 && t.is_finite(), "horizon must be positive and finite, got {t}");
        }
        ensure!(self.tol > 0.0 && self.tol.is_finite(), "tolerance must be positive, got {}", self.tol);
        ensure!(self.max_iter >= 1, "max iterations must be at least 1");
        if let ConstantsSource::Estimate { budget } = self.constants {
            ensure!(budget >= 1, "estimation budget must be at least 1");
        }
        Ok(())
    }
}

/// Parses `l1`, `l2`, `linf`, or a weighted form such as `wl2:1,1.25`.
pub fn parse_norm(text: &str) -> Result<NormKind> {
    let (kind, weights) = match text.split_once(':') {
        Some((k, w)) => {
            let w: Vec<f64> = w
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| anyhow::anyhow!("bad norm weight in `{text}`: {e}"))?;
            (k, Some(w))
        }
        None => (text, None),
    };
    let repr = match weights {
        Some(w) => serde_json::json!({ "kind": kind.trim(), "weights": w }),
        None => serde_json::json!({ "kind": kind.trim() }),
    };
    Ok(serde_json::from_value(repr)?)
}
