//! The `teamlearn` command line: `generate`, `sweep`, `analyze` and `verify`, all driven
//! by one JSON [`RunConfig`] with a few flag overrides.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or IO error,
//! 3 sweep finished with failed cells.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    cost_sweep, emit_report, human_error_tree, improvement_summary, paired_significance,
    per_class_analysis, write_error_tree, Approach, ImprovementSummary, PairedTest, ReportFormat,
    SavedSystem, SweepOptions, SweepOutcome,
};
use crate::numerics::TrainConfig;
use crate::team::{TeamConfig, TeamPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    Csv { path: PathBuf, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Utility matrix; accuracy utility when absent. Its query cost is ignored by
    /// `sweep`, which uses `costs`.
    pub team: Option<TeamConfig>,
    pub train: TrainConfig,
    pub approaches: Vec<Approach>,
    pub costs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub split: [f64; 3],
    pub out_dir: PathBuf,
    pub formats: Vec<ReportFormat>,
    /// Cost at which `sweep` saves systems for `analyze`.
    pub analysis_cost: f64,
    pub jobs: usize,
    pub tree_max_depth: usize,
    pub tree_min_leaf_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sweep = SweepOptions::default();
        RunConfig {
            dataset: DatasetSource::Synthetic(SynthConfig::default()),
            team: None,
            train: TrainConfig::default(),
            approaches: sweep.approaches,
            costs: sweep.costs,
            lambdas: sweep.lambdas,
            seeds: sweep.seeds,
            split: [sweep.split.0, sweep.split.1, sweep.split.2],
            out_dir: PathBuf::from("out"),
            formats: vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg],
            analysis_cost: 0.1,
            jobs: 1,
            tree_max_depth: 2,
            tree_min_leaf_fraction: 0.05,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            approaches: self.approaches.clone(),
            costs: self.costs.clone(),
            lambdas: self.lambdas.clone(),
            seeds: self.seeds.clone(),
            split: (self.split[0], self.split[1], self.split[2]),
            jobs: self.jobs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sweep_options().validate()?;
        self.train.validate()?;
        if let Some(team) = &self.team {
            team.validate()?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => generate_synthetic(s),
            DatasetSource::Csv { path, num_classes } => Dataset::load_csv(path, *num_classes),
        }
    }

    pub fn team_for(&self, dataset: &Dataset) -> Result<TeamConfig> {
        let team = self
            .team
            .clone()
            .unwrap_or_else(|| TeamConfig::accuracy(dataset.num_classes(), self.analysis_cost));
        if team.num_classes() != dataset.num_classes() {
            return Err(Error::Config(format!(
                "utility matrix is {0}x{0} but the dataset has {1} classes",
                team.num_classes(),
                dataset.num_classes()
            )));
        }
        Ok(team)
    }

    fn model_path(&self, approach: Approach, seed: u64) -> PathBuf {
        self.out_dir
            .join("models")
            .join(format!("{}__seed{seed}.json", approach.name()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "teamlearn", about = "Train and evaluate human-machine teams")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the seed list (and the synthetic generator seed for `generate`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as CSV.
    Generate(Common),
    /// Train every approach over the cost grid and write reports.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cost grid.
        #[arg(long, value_delimiter = ',')]
        costs: Option<Vec<f64>>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Per-class table and human-error tree for systems saved by `sweep`.
    Analyze(Common),
    /// Run the built-in property suites.
    Verify {
        /// Corrupt the analytic gradients (to check that the suite can fail).
        #[arg(long)]
        inject_gradient_fault: bool,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if cli.quiet {
        log::set_max_level(log::LevelFilter::Warn);
    }
    let result = match cli.command {
        Command::Generate(common) => {
            resolve(&common).and_then(|cfg| cmd_generate(&cfg, common.seed))
        }
        Command::Sweep {
            common,
            costs,
            jobs,
        } => resolve(&common).and_then(|mut cfg| {
            if let Some(c) = costs {
                cfg.costs = c;
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            cmd_sweep(&cfg)
        }),
        Command::Analyze(common) => resolve(&common).and_then(|cfg| cmd_analyze(&cfg)),
        Command::Verify {
            inject_gradient_fault,
        } => cmd_verify(inject_gradient_fault),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            EXIT_CONFIG
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig, seed: Option<u64>) -> Result<i32> {
    let DatasetSource::Synthetic(synth) = &cfg.dataset else {
        return Err(Error::Config(
            "generate needs a synthetic dataset source".into(),
        ));
    };
    let mut synth = synth.clone();
    if let Some(s) = seed {
        synth.seed = s;
    }
    let data = generate_synthetic(&synth)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("dataset.csv");
    data.save_csv(&path)?;
    println!(
        "n={} K={} d={} human_error_rate={:.4}",
        data.len(),
        data.num_classes(),
        data.feature_dim(),
        data.human_error_rate()
    );
    log::info!("wrote {}", path.display());
    Ok(EXIT_OK)
}

/// Joint versus fixed variant of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fixed: Approach,
    pub joint: Approach,
    /// Percentage reduction of mean total loss, over costs.
    pub improvement: Option<ImprovementSummary>,
    /// Fixed minus joint total loss, paired over every (seed, cost) cell both completed.
    pub t_test: Option<PairedTest>,
    /// Unit the t-test pairs over.
    pub t_test_pairing: String,
}

pub fn comparisons(outcome: &SweepOutcome) -> Vec<Comparison> {
    [
        (Approach::FixedDisc, Approach::JointDisc),
        (Approach::FixedVoi, Approach::JointVoi),
    ]
    .into_iter()
    .filter_map(|(f, j)| {
        let (fr, jr) = (outcome.result(f)?, outcome.result(j)?);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in &fr.per_seed {
            if let Some(o) = jr
                .per_seed
                .iter()
                .find(|o| o.seed == r.seed && o.cost == r.cost)
            {
                a.push(r.total_loss);
                b.push(o.total_loss);
            }
        }
        Some(Comparison {
            fixed: f,
            joint: j,
            improvement: improvement_summary(fr, jr),
            t_test: paired_significance(&a, &b).ok(),
            t_test_pairing: "per-seed, pooled over costs".into(),
        })
    })
    .collect()
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<i32> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let team = cfg.team_for(&data)?;
    let outcome = cost_sweep(&data, &team, &cfg.train, &cfg.sweep_options())?;
    let mut files = emit_report(&outcome.results, &cfg.out_dir, &cfg.formats)?;

    let summary = comparisons(&outcome);
    let path = cfg.out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    files.push(path);

    let saved: Vec<&SavedSystem> = outcome
        .systems
        .iter()
        .filter(|s| s.cost == cfg.analysis_cost)
        .collect();
    if saved.is_empty() {
        log::warn!(
            "analysis cost {} is not in the cost grid; no systems saved",
            cfg.analysis_cost
        );
    } else {
        let dir = cfg.out_dir.join("models");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in saved {
            let path = cfg.model_path(s.approach, s.seed);
            fs::write(&path, serde_json::to_string(s)?).map_err(|e| Error::io(&path, e))?;
        }
    }

    for f in &files {
        log::info!("wrote {}", f.display());
    }
    if outcome.has_failures() {
        let mut text = String::new();
        for r in &outcome.results {
            for f in &r.failures {
                let _ = writeln!(
                    text,
                    "{} seed={} cost={:?} lambda={:?}: {}",
                    r.approach, f.seed, f.cost, f.lambda, f.message
                );
            }
        }
        let path = cfg.out_dir.join("failures.log");
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        log::error!("some sweep cells failed; see {}", path.display());
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<i32> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let seed = cfg.seeds[0];
    let (_, _, test) = data.split((cfg.split[0], cfg.split[1], cfg.split[2]), seed)?;

    let mut systems = Vec::new();
    for &approach in &cfg.approaches {
        let path = cfg.model_path(approach, seed);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let saved: SavedSystem = serde_json::from_str(&text)?;
        systems.push((approach.name().to_string(), saved.system));
    }
    let policies: Vec<(String, &dyn TeamPolicy)> = systems
        .iter()
        .map(|(n, s)| (n.clone(), s as &dyn TeamPolicy))
        .collect();
    let tables = per_class_analysis(&policies, &test)?;
    let path = cfg.out_dir.join("per_class.json");
    fs::write(&path, serde_json::to_string_pretty(&tables)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    log::info!("wrote {}", path.display());

    let machines: Vec<(String, &dyn TeamPolicy)> = policies
        .into_iter()
        .filter(|(n, _)| n != Approach::HumanOnly.name())
        .collect();
    let tree = human_error_tree(
        &test,
        &machines,
        cfg.tree_max_depth,
        cfg.tree_min_leaf_fraction,
    )?;
    let path = write_error_tree(&tree, &cfg.out_dir)?;
    log::info!("wrote {}", path.display());
    Ok(EXIT_OK)
}

pub fn cmd_verify(inject_gradient_fault: bool) -> Result<i32> {
    let reports = crate::verify::run_all(inject_gradient_fault)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        log::error!("verification failed: {}", failed.join(", "));
        Ok(EXIT_VERIFY_FAILED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_with_snake_case_keys() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"analysis_cost\""));
        assert!(json.contains("\"synthetic\""));
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        let partial: RunConfig =
            serde_json::from_str(r#"{"seeds": [4], "approaches": ["human-only"]}"#).unwrap();
        assert_eq!(partial.seeds, vec![4]);
        assert_eq!(partial.approaches, vec![Approach::HumanOnly]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sedes": [4]}"#).is_err());
    }

    #[test]
    fn empty_grids_fail_validation() {
        let cfg = RunConfig {
            approaches: vec![],
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
