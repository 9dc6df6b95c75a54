use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::discriminative::{
    train_joint, train_machine_only, train_query_for, DiscriminativeSystem,
};
use crate::error::{Error, Result};
use crate::numerics::TrainConfig;
use crate::team::{HumanProvider, TeamConfig, TeamPolicy, TeamPrediction};
use crate::voi::{train_fixed_voi, train_joint_voi_from, VoiSystem};

use super::{evaluate_policy, HumanOnly, TeamMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Approach {
    FixedDisc,
    JointDisc,
    FixedVoi,
    JointVoi,
    HumanOnly,
}

impl Approach {
    pub const ALL: [Approach; 5] = [
        Approach::FixedDisc,
        Approach::JointDisc,
        Approach::FixedVoi,
        Approach::JointVoi,
        Approach::HumanOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Approach::FixedDisc => "fixed-disc",
            Approach::JointDisc => "joint-disc",
            Approach::FixedVoi => "fixed-voi",
            Approach::JointVoi => "joint-voi",
            Approach::HumanOnly => "human-only",
        }
    }

    pub fn is_joint(self) -> bool {
        matches!(self, Approach::JointDisc | Approach::JointVoi)
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Approach::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown approach {s:?}")))
    }
}

/// Any trained policy the sweep can produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedSystem {
    Discriminative(DiscriminativeSystem),
    Voi(VoiSystem),
    HumanOnly(HumanOnly),
}

impl TrainedSystem {
    /// The same system deployed at query cost `c`.
    pub fn with_cost(&self, c: f64) -> TrainedSystem {
        match self {
            TrainedSystem::Discriminative(s) => {
                let mut s = s.clone();
                s.team = s.team.with_cost(c);
                TrainedSystem::Discriminative(s)
            }
            TrainedSystem::Voi(s) => {
                let mut s = s.clone();
                s.team = s.team.with_cost(c);
                TrainedSystem::Voi(s)
            }
            TrainedSystem::HumanOnly(h) => TrainedSystem::HumanOnly(*h),
        }
    }

    fn policy(&self) -> &dyn TeamPolicy {
        match self {
            TrainedSystem::Discriminative(s) => s,
            TrainedSystem::Voi(s) => s,
            TrainedSystem::HumanOnly(h) => h,
        }
    }
}

impl TeamPolicy for TrainedSystem {
    fn num_classes(&self) -> usize {
        self.policy().num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.policy().feature_dim()
    }

    fn team_predict(&self, x: &[f64], provider: &mut HumanProvider<'_>) -> Result<TeamPrediction> {
        self.policy().team_predict(x, provider)
    }

    fn machine_predict(&self, x: &[f64]) -> Result<usize> {
        self.policy().machine_predict(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub approaches: Vec<Approach>,
    pub costs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Train / validation / test fractions.
    pub split: (f64, f64, f64),
    /// Worker threads; 1 runs every cell in order on the calling thread.
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            approaches: vec![
                Approach::FixedDisc,
                Approach::JointDisc,
                Approach::FixedVoi,
                Approach::JointVoi,
            ],
            costs: vec![0.0, 0.025, 0.05, 0.075, 0.1, 0.15, 0.2],
            lambdas: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            seeds: (0..10).collect(),
            split: (0.6, 0.15, 0.25),
            jobs: 1,
        }
    }
}

impl SweepOptions {
    pub fn validate(&self) -> Result<()> {
        if self.approaches.is_empty() {
            return Err(Error::Config("no approaches selected".into()));
        }
        if self.costs.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "cost grid and seed list must be nonempty".into(),
            ));
        }
        if self.approaches.iter().any(|a| a.is_joint()) && self.lambdas.is_empty() {
            return Err(Error::Config(
                "joint approaches need a nonempty lambda grid".into(),
            ));
        }
        if self.costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config(
                "costs must be finite and non-negative".into(),
            ));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("lambdas must be finite and positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Reference cost that the λ grid of the joint approaches scales.
    pub fn reference_cost(&self) -> f64 {
        self.costs.iter().sum::<f64>() / self.costs.len() as f64
    }
}

/// Test-split metrics of one approach, seed and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub cost: f64,
    pub total_loss: f64,
    pub classification_error: f64,
    pub query_rate: f64,
    pub selected_lambda: Option<f64>,
}

/// Seed-averaged metrics at one cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub c: f64,
    pub total_loss: f64,
    pub classification_error: f64,
    pub query_rate: f64,
    /// Most frequently selected λ across seeds (smallest on ties).
    pub selected_lambda: Option<f64>,
    pub seeds_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub seed: u64,
    pub cost: Option<f64>,
    pub lambda: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub approach: Approach,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub records: Vec<CostRecord>,
    pub per_seed: Vec<SeedRecord>,
    pub failures: Vec<CellFailure>,
}

/// A system as deployed at one cost, kept for later analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedSystem {
    pub approach: Approach,
    pub seed: u64,
    pub cost: f64,
    pub system: TrainedSystem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub results: Vec<SweepResult>,
    pub systems: Vec<SavedSystem>,
}

impl SweepOutcome {
    pub fn has_failures(&self) -> bool {
        self.results.iter().any(|r| !r.failures.is_empty())
    }

    pub fn result(&self, approach: Approach) -> Option<&SweepResult> {
        self.results.iter().find(|r| r.approach == approach)
    }
}

#[derive(Default)]
struct CellOutput {
    records: Vec<(Approach, SeedRecord)>,
    failures: Vec<(Approach, CellFailure)>,
    systems: Vec<SavedSystem>,
}

struct SeedContext<'a> {
    seed: u64,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    team: &'a TeamConfig,
    cfg: TrainConfig,
    opts: &'a SweepOptions,
    out: CellOutput,
}

impl SeedContext<'_> {
    fn fail(&mut self, approach: Approach, cost: Option<f64>, lambda: Option<f64>, e: &Error) {
        log::warn!("{approach} seed {}: {e}", self.seed);
        self.out.failures.push((
            approach,
            CellFailure {
                seed: self.seed,
                cost,
                lambda,
                message: e.to_string(),
            },
        ));
    }

    fn record(&mut self, approach: Approach, c: f64, system: TrainedSystem, lambda: Option<f64>) {
        let team = self.team.with_cost(c);
        match evaluate_policy(&system, &self.test, &team) {
            Ok((_, m)) => {
                self.out.records.push((
                    approach,
                    SeedRecord {
                        seed: self.seed,
                        cost: c,
                        total_loss: m.total_loss,
                        classification_error: m.classification_error,
                        query_rate: m.query_rate,
                        selected_lambda: lambda,
                    },
                ));
                self.out.systems.push(SavedSystem {
                    approach,
                    seed: self.seed,
                    cost: c,
                    system,
                });
            }
            Err(e) => self.fail(approach, Some(c), lambda, &e),
        }
    }

    /// Picks, per cost, the λ-version with the lowest validation total loss.
    fn select(&mut self, approach: Approach, versions: Vec<(f64, TrainedSystem)>) {
        for &c in &self.opts.costs {
            let team = self.team.with_cost(c);
            let mut best: Option<(f64, f64, TrainedSystem)> = None;
            for (lambda, system) in &versions {
                let deployed = system.with_cost(c);
                match evaluate_policy(&deployed, &self.val, &team) {
                    Ok((_, TeamMetrics { total_loss, .. })) => {
                        if best.as_ref().is_none_or(|(_, b, _)| total_loss < *b) {
                            best = Some((*lambda, total_loss, deployed));
                        }
                    }
                    Err(e) => self.fail(approach, Some(c), Some(*lambda), &e),
                }
            }
            match best {
                Some((lambda, val_loss, system)) => {
                    log::info!(
                        "{approach} seed {} c={c}: selected lambda {lambda} (validation total loss {val_loss:.4})",
                        self.seed
                    );
                    self.record(approach, c, system, Some(lambda));
                }
                None => self.fail(
                    approach,
                    Some(c),
                    None,
                    &Error::State("no lambda version trained successfully".into()),
                ),
            }
        }
    }

    fn with_lambda(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            cost_weight: lambda,
            ..self.cfg.clone()
        }
    }

    fn run(mut self) -> CellOutput {
        let costs = self.opts.costs.clone();
        let lambdas = self.opts.lambdas.clone();
        let reference = self.team.with_cost(self.opts.reference_cost());
        let mut fixed_voi: Option<std::result::Result<VoiSystem, String>> = None;
        for &approach in &self.opts.approaches {
            log::info!("{approach} seed {}", self.seed);
            match approach {
                Approach::HumanOnly => {
                    let h = HumanOnly {
                        num_classes: self.train.num_classes(),
                        feature_dim: self.train.feature_dim(),
                    };
                    for &c in &costs {
                        self.record(approach, c, TrainedSystem::HumanOnly(h), None);
                    }
                }
                Approach::FixedDisc => {
                    match train_machine_only(&self.train, self.team, &self.cfg) {
                        Ok(machine) => {
                            for &c in &costs {
                                match train_query_for(
                                    &machine,
                                    &self.train,
                                    &self.team.with_cost(c),
                                    &self.cfg,
                                ) {
                                    Ok(s) => self.record(
                                        approach,
                                        c,
                                        TrainedSystem::Discriminative(s),
                                        None,
                                    ),
                                    Err(e) => self.fail(approach, Some(c), None, &e),
                                }
                            }
                        }
                        Err(e) => self.fail(approach, None, None, &e),
                    }
                }
                Approach::JointDisc => {
                    let mut versions = Vec::new();
                    for &lambda in &lambdas {
                        match train_joint(&self.train, &reference, &self.with_lambda(lambda)) {
                            Ok(s) => versions.push((lambda, TrainedSystem::Discriminative(s))),
                            Err(e) => self.fail(approach, None, Some(lambda), &e),
                        }
                    }
                    self.select(approach, versions);
                }
                Approach::FixedVoi | Approach::JointVoi => {
                    let fixed = fixed_voi
                        .get_or_insert_with(|| {
                            train_fixed_voi(&self.train, self.team, &self.cfg)
                                .map_err(|e| e.to_string())
                        })
                        .clone();
                    let fixed = match fixed {
                        Ok(f) => f,
                        Err(message) => {
                            self.fail(approach, None, None, &Error::State(message));
                            continue;
                        }
                    };
                    if approach == Approach::FixedVoi {
                        let system = TrainedSystem::Voi(fixed);
                        for &c in &costs {
                            self.record(approach, c, system.with_cost(c), None);
                        }
                        continue;
                    }
                    let mut versions = Vec::new();
                    for &lambda in &lambdas {
                        match train_joint_voi_from(
                            &fixed,
                            &self.train,
                            &reference,
                            &self.with_lambda(lambda),
                            |_, _| {},
                        ) {
                            Ok(s) => versions.push((lambda, TrainedSystem::Voi(s))),
                            Err(e) => self.fail(approach, None, Some(lambda), &e),
                        }
                    }
                    self.select(approach, versions);
                }
            }
        }
        self.out
    }
}

fn run_seed(
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
    opts: &SweepOptions,
    seed: u64,
) -> CellOutput {
    match dataset.split(opts.split, seed) {
        Ok((train, val, test)) => SeedContext {
            seed,
            train,
            val,
            test,
            team,
            cfg: TrainConfig {
                seed,
                ..cfg.clone()
            },
            opts,
            out: CellOutput::default(),
        }
        .run(),
        Err(e) => {
            let mut out = CellOutput::default();
            for &a in &opts.approaches {
                out.failures.push((
                    a,
                    CellFailure {
                        seed,
                        cost: None,
                        lambda: None,
                        message: e.to_string(),
                    },
                ));
            }
            out
        }
    }
}

fn most_common(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let mut best: Option<(f64, usize)> = None;
    for chunk in v.chunk_by(|a, b| a == b) {
        if best.is_none_or(|(_, n)| chunk.len() > n) {
            best = Some((chunk[0], chunk.len()));
        }
    }
    best.map(|(v, _)| v)
}

/// Trains every approach for every seed, selects per-cost versions of the joint
/// approaches on validation data, and reports test metrics. Failures of individual
/// cells are recorded and the sweep continues.
pub fn cost_sweep(
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
    opts: &SweepOptions,
) -> Result<SweepOutcome> {
    opts.validate()?;
    cfg.validate()?;
    team.validate()?;
    if team.num_classes() != dataset.num_classes() {
        return Err(Error::shape(
            "utility matrix",
            dataset.num_classes(),
            team.num_classes(),
        ));
    }
    let cells: Vec<CellOutput> = if opts.jobs == 1 {
        opts.seeds
            .iter()
            .map(|&s| run_seed(dataset, team, cfg, opts, s))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            opts.seeds
                .par_iter()
                .map(|&s| run_seed(dataset, team, cfg, opts, s))
                .collect()
        })
    };

    let mut results: Vec<SweepResult> = opts
        .approaches
        .iter()
        .map(|&approach| SweepResult {
            approach,
            dataset: dataset.name().to_string(),
            seeds: opts.seeds.clone(),
            records: Vec::new(),
            per_seed: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    let mut systems = Vec::new();
    for cell in cells {
        for (a, r) in cell.records {
            results
                .iter_mut()
                .find(|s| s.approach == a)
                .unwrap()
                .per_seed
                .push(r);
        }
        for (a, f) in cell.failures {
            results
                .iter_mut()
                .find(|s| s.approach == a)
                .unwrap()
                .failures
                .push(f);
        }
        systems.extend(cell.systems);
    }
    for result in &mut results {
        for &c in &opts.costs {
            let rows: Vec<&SeedRecord> = result.per_seed.iter().filter(|r| r.cost == c).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let mean = |f: fn(&SeedRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            result.records.push(CostRecord {
                c,
                total_loss: mean(|r| r.total_loss),
                classification_error: mean(|r| r.classification_error),
                query_rate: mean(|r| r.query_rate),
                selected_lambda: most_common(rows.iter().filter_map(|r| r.selected_lambda)),
                seeds_used: rows.len(),
            });
        }
    }
    Ok(SweepOutcome { results, systems })
}

/// Percentage reduction in mean total loss of `joint` relative to `fixed`, over the
/// costs both cover ("min / avg / max").
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSummary {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

pub fn improvement_summary(fixed: &SweepResult, joint: &SweepResult) -> Option<ImprovementSummary> {
    let pct: Vec<f64> = fixed
        .records
        .iter()
        .filter_map(|f| {
            let j = joint.records.iter().find(|j| j.c == f.c)?;
            (f.total_loss > 0.0).then(|| 100.0 * (f.total_loss - j.total_loss) / f.total_loss)
        })
        .collect();
    if pct.is_empty() {
        return None;
    }
    Some(ImprovementSummary {
        min: pct.iter().copied().fold(f64::INFINITY, f64::min),
        avg: pct.iter().sum::<f64>() / pct.len() as f64,
        max: pct.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 30,
            calibration_interval: 10,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        generate_synthetic(&SynthConfig {
            n: 300,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn approach_names_round_trip() {
        for a in Approach::ALL {
            assert_eq!(a.name().parse::<Approach>().unwrap(), a);
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                format!("\"{}\"", a.name())
            );
        }
        assert!("both".parse::<Approach>().is_err());
    }

    #[test]
    fn most_common_prefers_smallest_on_ties() {
        assert_eq!(most_common([2.0, 1.0, 2.0, 1.0].into_iter()), Some(1.0));
        assert_eq!(most_common([4.0, 0.5, 4.0].into_iter()), Some(4.0));
        assert_eq!(most_common(std::iter::empty()), None);
    }

    #[test]
    fn human_only_sweep_matches_baseline() {
        let data = tiny_data();
        let team = TeamConfig::accuracy(5, 0.0);
        let opts = SweepOptions {
            approaches: vec![Approach::HumanOnly],
            costs: vec![0.0, 0.1],
            lambdas: vec![],
            seeds: vec![0, 1],
            ..SweepOptions::default()
        };
        let out = cost_sweep(&data, &team, &tiny_cfg(), &opts).unwrap();
        let r = &out.results[0];
        assert_eq!(r.records.len(), 2);
        for rec in &r.records {
            assert_eq!(rec.query_rate, 1.0);
            assert!((rec.total_loss - (rec.classification_error + rec.c)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_lambda_selection_is_identity_and_sweeps_are_deterministic() {
        let data = tiny_data();
        let team = TeamConfig::accuracy(5, 0.0);
        let opts = SweepOptions {
            approaches: vec![Approach::JointDisc, Approach::FixedVoi],
            costs: vec![0.0, 0.2],
            lambdas: vec![2.0],
            seeds: vec![3],
            ..SweepOptions::default()
        };
        let a = cost_sweep(&data, &team, &tiny_cfg(), &opts).unwrap();
        assert!(!a.has_failures());
        for rec in &a.result(Approach::JointDisc).unwrap().per_seed {
            assert_eq!(rec.selected_lambda, Some(2.0));
        }
        let b = cost_sweep(&data, &team, &tiny_cfg(), &SweepOptions { jobs: 2, ..opts }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_grids_are_rejected() {
        let data = tiny_data();
        let team = TeamConfig::accuracy(5, 0.0);
        for opts in [
            SweepOptions {
                approaches: vec![],
                ..SweepOptions::default()
            },
            SweepOptions {
                costs: vec![],
                ..SweepOptions::default()
            },
            SweepOptions {
                lambdas: vec![],
                ..SweepOptions::default()
            },
        ] {
            assert!(matches!(
                cost_sweep(&data, &team, &tiny_cfg(), &opts),
                Err(Error::Config(_))
            ));
        }
    }
}
