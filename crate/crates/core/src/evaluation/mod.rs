//! Team metrics, baselines, cost sweeps and the analyses built on top of them.

mod report;
mod sweep;
mod tree;

pub use report::{emit_report, load_sweep_json, write_error_tree, ReportFormat};
pub use sweep::{
    cost_sweep, improvement_summary, Approach, CellFailure, CostRecord, ImprovementSummary,
    SavedSystem, SeedRecord, SweepOptions, SweepOutcome, SweepResult, TrainedSystem,
};
pub use tree::{human_error_tree, ErrorRegionTree, LeafStats, TreeNode};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Distribution;
use crate::team::{TeamConfig, TeamPolicy, TeamPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeamMetrics {
    /// Mean misutility plus `c · query_rate`.
    pub total_loss: f64,
    /// Mean misutility `U[y][y] − U[ŷ][y]`; the error rate under accuracy utility.
    pub classification_error: f64,
    pub mean_utility: f64,
    pub query_rate: f64,
}

pub fn team_metrics(
    predictions: &[TeamPrediction],
    labels: &[usize],
    team: &TeamConfig,
) -> Result<TeamMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    let k = team.num_classes();
    let n = predictions.len() as f64;
    let (mut mis, mut util, mut queries) = (0.0, 0.0, 0.0);
    for (p, &y) in predictions.iter().zip(labels) {
        if p.predicted_label >= k || y >= k {
            return Err(Error::Input(format!("class index outside 0..{k}")));
        }
        let q = if p.queried { 1.0 } else { 0.0 };
        mis += team.misutility(p.predicted_label, y);
        util += team.u(p.predicted_label, y) - team.query_cost * q;
        queries += q;
    }
    let classification_error = mis / n;
    let query_rate = queries / n;
    Ok(TeamMetrics {
        total_loss: classification_error + team.query_cost * query_rate,
        classification_error,
        mean_utility: util / n,
        query_rate,
    })
}

/// Runs `policy` over `data`, answering queries with each instance's logged human label.
pub fn evaluate_policy(
    policy: &dyn TeamPolicy,
    data: &Dataset,
    team: &TeamConfig,
) -> Result<(Vec<TeamPrediction>, TeamMetrics)> {
    let predictions = data
        .instances()
        .iter()
        .map(|inst| policy.team_predict(&inst.features, &mut |_| Ok(inst.human)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.instances().iter().map(|i| i.label).collect();
    let metrics = team_metrics(&predictions, &labels, team)?;
    Ok((predictions, metrics))
}

/// Policy that always queries and returns the human's answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanOnly {
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl TeamPolicy for HumanOnly {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn team_predict(
        &self,
        x: &[f64],
        provider: &mut crate::team::HumanProvider<'_>,
    ) -> Result<TeamPrediction> {
        let h = provider(x)?;
        if h >= self.num_classes {
            return Err(Error::Query(format!("provider returned class {h}")));
        }
        Ok(TeamPrediction {
            predicted_label: h,
            queried: true,
            q_soft: 1.0,
            machine_dist: Distribution::uniform(self.num_classes),
        })
    }

    fn machine_predict(&self, _x: &[f64]) -> Result<usize> {
        Err(Error::State(
            "the human-only baseline has no machine".into(),
        ))
    }
}

pub fn human_only_baseline(dataset: &Dataset, team: &TeamConfig) -> Result<TeamMetrics> {
    let policy = HumanOnly {
        num_classes: dataset.num_classes(),
        feature_dim: dataset.feature_dim(),
    };
    Ok(evaluate_policy(&policy, dataset, team)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub class: usize,
    pub count: usize,
    /// `None` when the class is absent from the data or the system has no machine.
    pub machine_error: Option<f64>,
    pub team_error: Option<f64>,
    pub query_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassTable {
    pub system: String,
    pub rows: Vec<PerClassRow>,
}

pub fn per_class_analysis(
    systems: &[(String, &dyn TeamPolicy)],
    dataset: &Dataset,
) -> Result<Vec<PerClassTable>> {
    let k = dataset.num_classes();
    systems
        .iter()
        .map(|(name, policy)| {
            let mut count = vec![0usize; k];
            let mut machine_wrong = vec![0usize; k];
            let mut team_wrong = vec![0usize; k];
            let mut queried = vec![0usize; k];
            let mut has_machine = true;
            for inst in dataset.instances() {
                let y = inst.label;
                count[y] += 1;
                let p = policy.team_predict(&inst.features, &mut |_| Ok(inst.human))?;
                team_wrong[y] += usize::from(p.predicted_label != y);
                queried[y] += usize::from(p.queried);
                match policy.machine_predict(&inst.features) {
                    Ok(m) => machine_wrong[y] += usize::from(m != y),
                    Err(Error::State(_)) => has_machine = false,
                    Err(e) => return Err(e),
                }
            }
            let frac = |num: usize, c: usize| (c > 0).then(|| num as f64 / c as f64);
            let rows = (0..k)
                .map(|c| PerClassRow {
                    class: c,
                    count: count[c],
                    machine_error: if has_machine {
                        frac(machine_wrong[c], count[c])
                    } else {
                        None
                    },
                    team_error: frac(team_wrong[c], count[c]),
                    query_fraction: frac(queried[c], count[c]),
                })
                .collect();
            Ok(PerClassTable {
                system: name.clone(),
                rows,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub p_value: f64,
    pub t_statistic: f64,
    pub mean_difference: f64,
    pub n: usize,
    /// The differences had zero variance, so no test was run and `p_value` is 1.
    pub degenerate: bool,
}

/// Two-sided paired Student t-test of `a − b`.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Input("paired test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Ok(PairedTest {
            p_value: 1.0,
            t_statistic: 0.0,
            mean_difference: mean,
            n,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Input(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
    Ok(PairedTest {
        p_value: p,
        t_statistic: t,
        mean_difference: mean,
        n,
        degenerate: false,
    })
}
