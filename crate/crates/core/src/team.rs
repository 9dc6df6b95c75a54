//! Team utility `u(ŷ, y)`, query cost `c`, and the policy interface shared by every
//! trained system.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Distribution;

/// Utility matrix and query cost. `utility[ŷ][y]` is the utility of predicting `ŷ` when
/// the truth is `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeamConfig {
    pub utility: Vec<Vec<f64>>,
    pub query_cost: f64,
}

impl TeamConfig {
    /// Accuracy utility `1[ŷ = y]`.
    pub fn accuracy(k: usize, query_cost: f64) -> Self {
        let utility = (0..k)
            .map(|a| (0..k).map(|y| if a == y { 1.0 } else { 0.0 }).collect())
            .collect();
        TeamConfig {
            utility,
            query_cost,
        }
    }

    /// Binary utility where missing the positive class (class 0) costs twice as much as
    /// a false alarm.
    pub fn false_negative_weighted(query_cost: f64) -> Self {
        TeamConfig {
            utility: vec![vec![1.0, 0.0], vec![-1.0, 1.0]],
            query_cost,
        }
    }

    pub fn with_cost(&self, query_cost: f64) -> Self {
        TeamConfig {
            utility: self.utility.clone(),
            query_cost,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.utility.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.utility.len();
        if k < 2 {
            return Err(Error::Config(
                "utility matrix needs at least 2 classes".into(),
            ));
        }
        for row in &self.utility {
            if row.len() != k {
                return Err(Error::shape("utility row", k, row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("utility entries must be finite".into()));
            }
        }
        if !(self.query_cost >= 0.0 && self.query_cost.is_finite()) {
            return Err(Error::Config(format!(
                "query cost must be non-negative, got {}",
                self.query_cost
            )));
        }
        Ok(())
    }

    pub fn is_accuracy(&self) -> bool {
        self.utility.iter().enumerate().all(|(a, row)| {
            row.iter()
                .enumerate()
                .all(|(y, v)| *v == if a == y { 1.0 } else { 0.0 })
        })
    }

    pub fn u(&self, predicted: usize, truth: usize) -> f64 {
        self.utility[predicted][truth]
    }

    /// Utility lost by predicting `predicted` instead of the truth.
    pub fn misutility(&self, predicted: usize, truth: usize) -> f64 {
        self.utility[truth][truth] - self.utility[predicted][truth]
    }

    /// Expected utility of every action under `dist`.
    pub fn expected_utilities(&self, dist: &[f64]) -> Vec<f64> {
        self.utility
            .iter()
            .map(|row| row.iter().zip(dist).map(|(u, p)| u * p).sum())
            .collect()
    }
}

/// Per-true-class loss weights from the utility spread `U[y][y] − min_ŷ U[ŷ][y]`,
/// normalized to mean 1. Also returns the classes whose spread is zero.
pub fn utility_loss_weights(team: &TeamConfig) -> Result<(Vec<f64>, Vec<usize>)> {
    team.validate()?;
    let k = team.num_classes();
    let spreads: Vec<f64> = (0..k)
        .map(|y| {
            let worst = (0..k).map(|a| team.u(a, y)).fold(f64::INFINITY, f64::min);
            (team.u(y, y) - worst).max(0.0)
        })
        .collect();
    let flat: Vec<usize> = (0..k).filter(|y| spreads[*y] == 0.0).collect();
    if !flat.is_empty() {
        log::warn!("utility has no spread for classes {flat:?}; their loss weight is 0");
    }
    let mean = spreads.iter().sum::<f64>() / k as f64;
    if mean == 0.0 {
        return Err(Error::Config("utility matrix has no spread at all".into()));
    }
    Ok((spreads.iter().map(|s| s / mean).collect(), flat))
}

/// A team decision for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamPrediction {
    pub predicted_label: usize,
    pub queried: bool,
    pub q_soft: f64,
    pub machine_dist: Distribution,
}

/// Source of human responses at decision time.
pub type HumanProvider<'a> = dyn FnMut(&[f64]) -> Result<usize> + 'a;

/// A trained human–machine system.
pub trait TeamPolicy {
    fn num_classes(&self) -> usize;

    fn feature_dim(&self) -> usize;

    /// Decides whether to query, calling `provider` only when it does.
    fn team_predict(&self, x: &[f64], provider: &mut HumanProvider<'_>) -> Result<TeamPrediction>;

    /// The label the machine would output without ever querying.
    fn machine_predict(&self, x: &[f64]) -> Result<usize>;
}
