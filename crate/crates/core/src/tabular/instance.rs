//! Text format for tabular game instances.
//!
//! ```toml
//! n_states = 2
//! n_actions = 2
//! gamma = 0.9
//! lambda_cost = 0.5
//! theta_grid = 2                       # number of leader grid points
//! transition = [1.0, 0.0,  0.0, 1.0,   # (s, a, s'), s-major
//!               0.5, 0.5,  0.0, 1.0]
//! reward = [0.0, 1.0, 0.5, -1.0]       # (s, a)
//! cost = [0.1, 0.4, 0.0, 1.0]          # (s, theta)
//! phi_grid = "all"                     # or [[0, 1], [1, 1]]
//! # optional
//! r_max = 1.0
//! mode = "adversarial"                 # or "cooperative"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FollowerMode, TabularGameMdp, TabularMdp};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhiGridSpec {
    Keyword(String),
    Maps(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub lambda_cost: f64,
    pub theta_grid: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    pub phi_grid: PhiGridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

impl InstanceFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("instance", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("instance serializes")
    }

    pub fn build(&self) -> Result<TabularGameMdp> {
        let base = TabularMdp::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.gamma,
            self.r_max,
        )?;
        let phi = match &self.phi_grid {
            PhiGridSpec::Keyword(k) if k == "all" => {
                TabularGameMdp::enumerate_phi_maps(self.n_states, self.n_actions)?
            }
            PhiGridSpec::Keyword(k) => {
                return Err(Error::config("phi_grid", format!("unknown keyword {k:?}; expected \"all\" or a list of maps")))
            }
            PhiGridSpec::Maps(m) => m.clone(),
        };
        let mode = match self.mode.as_deref() {
            None | Some("adversarial") => FollowerMode::Adversarial,
            Some("cooperative") => FollowerMode::Cooperative,
            Some(other) => {
                return Err(Error::config("mode", format!("unknown mode {other:?}")))
            }
        };
        Ok(TabularGameMdp::new(base, self.theta_grid, phi, self.cost.clone(), self.lambda_cost)?.with_mode(mode))
    }

    pub fn from_game(g: &TabularGameMdp) -> Self {
        let base = g.base();
        Self {
            n_states: base.n_states(),
            n_actions: base.n_actions(),
            gamma: base.gamma(),
            lambda_cost: g.lambda_cost(),
            theta_grid: g.n_theta(),
            transition: base.transition_table().to_vec(),
            reward: base.reward_table().to_vec(),
            cost: g.cost_table().to_vec(),
            phi_grid: PhiGridSpec::Maps(g.phi_grid().to_vec()),
            r_max: Some(base.r_max()),
            mode: Some(
                match g.mode() {
                    FollowerMode::Adversarial => "adversarial",
                    FollowerMode::Cooperative => "cooperative",
                }
                .to_string(),
            ),
        }
    }
}
