//! Self-checks run by `teamlearn verify`: gradient checks of every training loss,
//! brute-force agreement of the VOI rule, the soft-to-hard limit, soundness of the
//! discriminative run-time rule, and calibration recovery.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::calibration::{expected_calibration_error, PlattCalibrator};
use crate::data::Instance;
use crate::discriminative::{runtime_query_decision, JointDiscObjective};
use crate::error::Result;
use crate::numerics::{
    argmax, finite_diff_check, seeded_rng, sigmoid, Distribution, GradientSet, Head, MlpModel,
    Objective, TrainConfig,
};
use crate::objectives::{Target, WeightedCe};
use crate::team::TeamConfig;
use crate::voi::{CalibratedModel, JointVoiObjective, VoiSystem};

const VERIFY_SEED: u64 = 0x7e51;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max error {:.3e} (tolerance {:.0e}) {}",
            self.name,
            self.max_error,
            self.tolerance,
            if self.passed { "ok" } else { "FAILED" }
        )
    }
}

fn report(name: &'static str, max_error: f64, tolerance: f64) -> SuiteReport {
    SuiteReport {
        name,
        max_error,
        tolerance,
        passed: max_error < tolerance,
    }
}

/// Adds a constant to the first analytic gradient entry of every instance.
struct Faulty<'a, O: ?Sized>(&'a O);

impl<O: Objective + ?Sized> Objective for Faulty<'_, O> {
    fn instance_loss(
        &self,
        models: &[MlpModel],
        instance: &Instance,
        dropout: Option<&mut [ChaCha8Rng]>,
        grads: Option<&mut [GradientSet]>,
    ) -> f64 {
        match grads {
            Some(g) => {
                let loss = self
                    .0
                    .instance_loss(models, instance, dropout, Some(&mut *g));
                *g[0].get_mut(0) += 0.05;
                loss
            }
            None => self.0.instance_loss(models, instance, dropout, None),
        }
    }
}

fn random_model(rng: &mut ChaCha8Rng, dims: &[usize], head: Head) -> MlpModel {
    MlpModel::new(dims, head, 0.0, rng).expect("valid dimensions")
}

/// Random instances with features in `[-2, 2)`.
pub fn random_instances(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> Vec<Instance> {
    (0..n)
        .map(|_| Instance {
            features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..k),
            human: rng.random_range(0..k),
        })
        .collect()
}

fn random_calibrator(rng: &mut ChaCha8Rng, k: usize) -> PlattCalibrator {
    PlattCalibrator {
        slopes: (0..k).map(|_| rng.random_range(0.3..2.5)).collect(),
        offsets: (0..k).map(|_| rng.random_range(-1.5..1.5)).collect(),
    }
}

/// A calibrated VOI system with random weights, random calibrators and a random
/// utility matrix whose diagonal dominates each column.
pub fn random_calibrated_system(
    rng: &mut ChaCha8Rng,
    k: usize,
    d: usize,
    hidden: usize,
) -> VoiSystem {
    let cfg = TrainConfig {
        hidden: vec![hidden],
        dropout_rate: 0.0,
        ..TrainConfig::default()
    };
    let utility = (0..k)
        .map(|a| {
            (0..k)
                .map(|y| {
                    if a == y {
                        1.0
                    } else {
                        rng.random_range(-1.0..0.5)
                    }
                })
                .collect()
        })
        .collect();
    let team = TeamConfig {
        utility,
        query_cost: rng.random_range(0.0..0.3),
    };
    let mut calibrated = |input: usize| CalibratedModel {
        model: random_model(rng, &cfg.layer_dims(input, k), Head::Softmax),
        calibrator: Some(random_calibrator(rng, k)),
    };
    VoiSystem {
        alpha: calibrated(d),
        beta: calibrated(d),
        gamma: calibrated(d + k),
        team,
        train_cfg: cfg,
        calibration_refits: 1,
    }
}

/// Maximum relative finite-difference error of the three training losses over
/// `points` random parameter points each.
pub fn gradcheck(points: usize, inject_fault: bool) -> Result<f64> {
    let mut rng = seeded_rng(VERIFY_SEED, 1);
    let mut worst: f64 = 0.0;
    let mut check =
        |models: &[MlpModel], data: &[Instance], objective: &dyn Objective| -> Result<()> {
            let batch: Vec<usize> = (0..data.len()).collect();
            let err = if inject_fault {
                finite_diff_check(models, data, &batch, &Faulty(objective), 1e-5)?
            } else {
                finite_diff_check(models, data, &batch, objective, 1e-5)?
            };
            worst = worst.max(err);
            Ok(())
        };
    for p in 0..points {
        let k = [2, 3, 5][p % 3];
        let d = 3;
        let data = random_instances(&mut rng, 4, k, d);

        let m = random_model(&mut rng, &[d, 6, k], Head::Softmax);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let ce = WeightedCe {
            weights: weights.clone(),
            target: Target::Label,
            human_input: false,
        };
        check(std::slice::from_ref(&m), &data, &ce)?;

        let q = random_model(&mut rng, &[d, 6, 1], Head::Sigmoid);
        let joint = JointDiscObjective {
            weights,
            query_penalty: rng.random_range(0.0..0.5),
            train_machine: true,
            train_query: true,
            q_override: None,
            direct_relaxation: false,
        };
        check(&[m, q], &data, &joint)?;

        let system = random_calibrated_system(&mut rng, k, d, 5);
        let cfg = TrainConfig {
            softmax_temperature: rng.random_range(0.3..1.5),
            cost_weight: rng.random_range(0.25..4.0),
            ..system.train_cfg.clone()
        };
        let voi = JointVoiObjective::for_system(&system, &cfg)?;
        let models = [
            system.alpha.model.clone(),
            system.beta.model.clone(),
            system.gamma.model.clone(),
        ];
        check(&models, &data, &voi)?;
    }
    Ok(worst)
}

/// Exact `(u_nq, u_q, query)` by enumerating every action and human response.
pub fn brute_force_voi(
    alpha: &[f64],
    beta: &[f64],
    gamma: &[Vec<f64>],
    team: &TeamConfig,
) -> (f64, f64, bool) {
    let k = alpha.len();
    let eu = |dist: &[f64], a: usize| -> f64 { (0..k).map(|y| dist[y] * team.utility[a][y]).sum() };
    let mut u_nq = f64::NEG_INFINITY;
    for a in 0..k {
        u_nq = u_nq.max(eu(alpha, a));
    }
    let mut u_q = 0.0;
    for h in 0..k {
        let mut best = f64::NEG_INFINITY;
        for a in 0..k {
            best = best.max(eu(&gamma[h], a));
        }
        u_q += beta[h] * best;
    }
    u_q -= team.query_cost;
    (u_nq, u_q, u_q > u_nq)
}

/// Largest utility discrepancy against [`brute_force_voi`] over random systems, and
/// the number of mismatched decisions.
pub fn voi_oracle(systems: usize) -> Result<(f64, usize)> {
    let mut rng = seeded_rng(VERIFY_SEED, 2);
    let (mut worst, mut mismatches): (f64, usize) = (0.0, 0);
    for i in 0..systems {
        let k = [2, 3, 5][i % 3];
        let system = random_calibrated_system(&mut rng, k, 3, 4);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let decision = system.decide(&x)?;
        let (a, b, g) = system.distributions(&x)?;
        let g: Vec<Vec<f64>> = g.into_iter().map(Distribution::into_vec).collect();
        let (u_nq, u_q, query) = brute_force_voi(a.probs(), b.probs(), &g, &system.team);
        worst = worst
            .max((u_nq - decision.u_nq).abs())
            .max((u_q - decision.u_q).abs());
        mismatches += usize::from(query != decision.query);
    }
    Ok((worst, mismatches))
}

/// Smallest gap between the two best expected utilities over every soft max taken
/// for `x`.
fn smallest_utility_gap(system: &VoiSystem, x: &[f64]) -> Result<f64> {
    let (alpha, _, gamma) = system.distributions(x)?;
    Ok(std::iter::once(alpha)
        .chain(gamma)
        .map(|d| {
            let mut eu = system.team.expected_utilities(d.probs());
            eu.sort_by(|a, b| b.total_cmp(a));
            eu[0] - eu[1]
        })
        .fold(f64::INFINITY, f64::min))
}

/// Largest gap between soft quantities at `temperature` and the exact ones, over
/// random systems whose utilities are at least `10·temperature` apart. Closer ties
/// converge too slowly for any fixed tolerance (the error is about `δ·e^(-δ/τ)`).
pub fn soft_limit(systems: usize, temperature: f64) -> Result<f64> {
    let mut rng = seeded_rng(VERIFY_SEED, 3);
    let mut worst: f64 = 0.0;
    for i in 0..systems {
        let k = [2, 3, 5][i % 3];
        let system = random_calibrated_system(&mut rng, k, 3, 4);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        if smallest_utility_gap(&system, &x)? < 10.0 * temperature {
            continue;
        }
        let soft = system.soft_team_quantities(&x, temperature)?;
        let exact = system.decide(&x)?;
        worst = worst
            .max((soft.u_nq_soft - exact.u_nq).abs())
            .max((soft.u_q_soft - system.team.query_cost - exact.u_q).abs());
    }
    Ok(worst)
}

/// Number of random `(q, m, h)` triples where the run-time rule fires but the mixed
/// prediction is not `h`.
pub fn runtime_rule_violations(trials: usize) -> usize {
    let mut rng = seeded_rng(VERIFY_SEED, 4);
    let mut violations = 0;
    for _ in 0..trials {
        let k = rng.random_range(2..=6);
        let raw: Vec<f64> = (0..k)
            .map(|_| rng.random_range(0.0f64..1.0).powi(3))
            .collect();
        let total: f64 = raw.iter().sum();
        let m = Distribution::new(raw.iter().map(|v| v / total).collect())
            .unwrap_or_else(|_| Distribution::uniform(k));
        let q: f64 = rng.random();
        let h = rng.random_range(0..k);
        if runtime_query_decision(q, &m) {
            let mix: Vec<f64> = (0..k)
                .map(|j| q * if j == h { 1.0 } else { 0.0 } + (1.0 - q) * m[j])
                .collect();
            violations += usize::from(argmax(&mix) != h);
        }
    }
    violations
}

/// ECE of a Platt calibrator fitted to `n` draws of a logistic task.
pub fn calibration_ece(n: usize) -> Result<f64> {
    let mut rng = seeded_rng(VERIFY_SEED, 5);
    let normal = Normal::new(0.0, 2.0).expect("valid normal");
    let scores: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let labels: Vec<bool> = scores
        .iter()
        .map(|s| rng.random::<f64>() < sigmoid(1.7 * s - 0.4))
        .collect();
    let fit = crate::calibration::fit_platt(&scores, &labels)?;
    let preds: Vec<Distribution> = scores
        .iter()
        .map(|s| {
            let p = sigmoid(fit.a * s + fit.b);
            Distribution::new(vec![p, 1.0 - p]).expect("binary distribution")
        })
        .collect();
    let targets: Vec<usize> = labels.iter().map(|l| usize::from(!l)).collect();
    expected_calibration_error(&preds, &targets, 10)
}

/// Runs every suite. `inject_fault` corrupts the analytic gradients seen by the
/// gradient check.
pub fn run_all(inject_fault: bool) -> Result<Vec<SuiteReport>> {
    let (voi_err, mismatches) = voi_oracle(1000)?;
    Ok(vec![
        report("gradcheck", gradcheck(10, inject_fault)?, 1e-4),
        report(
            "voi-oracle",
            if mismatches > 0 {
                f64::INFINITY
            } else {
                voi_err
            },
            1e-12,
        ),
        report("soft-limit", soft_limit(100, 1e-3)?, 1e-6),
        report("runtime-rule", runtime_rule_violations(100_000) as f64, 0.5),
        report("calibration", calibration_ece(2000)?, 0.05),
    ])
}
