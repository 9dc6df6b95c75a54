//! Decision-theoretic teams built from three calibrated models:
//! `p_α(y|x)` for the label, `p_β(h|x)` for the human response and `p_γ(y|x,h)` for
//! the label once the human has answered.
//!
//! At decision time the human is queried iff
//!
//! ```text
//! u_q  = E_{h~p_β}[ max_ŷ Σ_y p_γ(y|x,h)·u(ŷ,y) ] − c
//! u_nq = max_ŷ Σ_y p_α(y|x)·u(ŷ,y)
//! u_q > u_nq
//! ```
//!
//! Joint training replaces both maxima and the query decision with softmax-weighted
//! averages so the decision can be backpropagated into all three networks. Calibrators
//! are frozen during backpropagation and refit from the calibration slice every
//! `calibration_interval` iterations.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::PlattCalibrator;
use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::numerics::{
    argmax, seeded_rng, sigmoid, softmax_unchecked, Distribution, GradientSet, Head, MlpModel,
    Objective, TrainConfig, PROB_FLOOR,
};
use crate::objectives::{clamped_nll, run_sgd, streams, with_human_one_hot, Target, WeightedCe};
use crate::team::{utility_loss_weights, HumanProvider, TeamConfig, TeamPolicy, TeamPrediction};

const ALPHA: usize = 0;
const BETA: usize = 1;
const GAMMA: usize = 2;
const CALIBRATION_STREAM: u64 = 300;

/// Fraction of the training data held out for fitting calibrators.
pub const CALIBRATION_FRACTION: f64 = 0.2;

/// Network plus (once fitted) its Platt calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    pub model: MlpModel,
    pub calibrator: Option<PlattCalibrator>,
}

impl CalibratedModel {
    fn dist(&self, input: &[f64]) -> Result<Distribution> {
        let cal = self
            .calibrator
            .as_ref()
            .ok_or_else(|| Error::State("model has not been calibrated".into()))?;
        cal.calibrate_scores(&self.model.logits(input))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiSystem {
    pub alpha: CalibratedModel,
    pub beta: CalibratedModel,
    pub gamma: CalibratedModel,
    pub team: TeamConfig,
    pub train_cfg: TrainConfig,
    /// Number of times the calibrators have been (re)fitted.
    pub calibration_refits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoiDecision {
    pub u_nq: f64,
    pub u_q: f64,
    pub query: bool,
    pub best_label_no_query: usize,
}

/// Softmax-relaxed team quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftQuantities {
    pub u_nq_soft: f64,
    pub u_q_soft: f64,
    pub q_soft: f64,
}

/// Best action and its expected utility under `dist`, lowest index on ties.
pub fn expected_utility_no_query(dist: &Distribution, team: &TeamConfig) -> (usize, f64) {
    let eu = team.expected_utilities(dist.probs());
    let best = argmax(&eu);
    (best, eu[best])
}

/// `E_{h~p_β}[max_ŷ EU(ŷ | p_γ(·|h))] − c`.
pub fn expected_utility_query(
    dist_beta: &Distribution,
    mut gamma: impl FnMut(usize) -> Result<Distribution>,
    team: &TeamConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (h, p_h) in dist_beta.probs().iter().enumerate() {
        let g = gamma(h)?;
        total += p_h * expected_utility_no_query(&g, team).1;
    }
    Ok(total - team.query_cost)
}

/// Softmax-weighted average `Σ_j v_j·softmax(v/τ)_j` and the softmax weights.
fn soft_max(values: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let s = softmax_unchecked(values, temperature);
    (values.iter().zip(&s).map(|(v, w)| v * w).sum(), s)
}

/// Gradient of `soft_max` with respect to its inputs, scaled by `upstream`.
fn soft_max_backward(
    values: &[f64],
    weights: &[f64],
    result: f64,
    temperature: f64,
    upstream: f64,
) -> Vec<f64> {
    values
        .iter()
        .zip(weights)
        .map(|(v, s)| upstream * s * (1.0 + (v - result) / temperature))
        .collect()
}

/// Soft `u_nq`, soft `u_q` (without the cost) and the soft query probability.
pub fn soft_quantities(
    alpha: &[f64],
    beta: &[f64],
    gamma: &[Vec<f64>],
    team: &TeamConfig,
    temperature: f64,
) -> SoftQuantities {
    let (u_nq_soft, _) = soft_max(&team.expected_utilities(alpha), temperature);
    let u_q_soft = beta
        .iter()
        .zip(gamma)
        .map(|(p_h, g)| p_h * soft_max(&team.expected_utilities(g), temperature).0)
        .sum::<f64>();
    let q_soft = sigmoid((u_q_soft - u_nq_soft) / temperature);
    SoftQuantities {
        u_nq_soft,
        u_q_soft,
        q_soft,
    }
}

impl VoiSystem {
    pub fn num_classes(&self) -> usize {
        self.team.num_classes()
    }

    /// The same models deployed at query cost `c`.
    pub fn with_cost(&self, c: f64) -> VoiSystem {
        let mut system = self.clone();
        system.team = self.team.with_cost(c);
        system
    }

    pub fn is_calibrated(&self) -> bool {
        self.alpha.calibrator.is_some()
            && self.beta.calibrator.is_some()
            && self.gamma.calibrator.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        self.team.validate()?;
        for (name, m) in [
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
        ] {
            m.model.validate()?;
            if m.model.output_dim() != k || m.model.head() != Head::Softmax {
                return Err(Error::Config(format!(
                    "{name} must be a {k}-way softmax model"
                )));
            }
            if let Some(c) = &m.calibrator {
                if c.num_classes() != k {
                    return Err(Error::shape("calibrator classes", k, c.num_classes()));
                }
            }
        }
        let d = self.alpha.model.input_dim();
        if self.beta.model.input_dim() != d || self.gamma.model.input_dim() != d + k {
            return Err(Error::Config("inconsistent model input dimensions".into()));
        }
        Ok(())
    }

    fn check_ready(&self, x: &[f64]) -> Result<()> {
        if !self.is_calibrated() {
            return Err(Error::State("VOI system is not calibrated".into()));
        }
        self.alpha.model.check_input(x)
    }

    /// Calibrated `p_α(·|x)`, `p_β(·|x)` and `p_γ(·|x,h)` for every `h`.
    pub fn distributions(
        &self,
        x: &[f64],
    ) -> Result<(Distribution, Distribution, Vec<Distribution>)> {
        self.check_ready(x)?;
        let k = self.num_classes();
        let alpha = self.alpha.dist(x)?;
        let beta = self.beta.dist(x)?;
        let gamma = (0..k)
            .map(|h| self.gamma.dist(&with_human_one_hot(x, h, k)))
            .collect::<Result<Vec<_>>>()?;
        Ok((alpha, beta, gamma))
    }

    pub fn decide(&self, x: &[f64]) -> Result<VoiDecision> {
        let (alpha, beta, gamma) = self.distributions(x)?;
        Ok(decide_from(&alpha, &beta, &gamma, &self.team))
    }

    pub fn soft_team_quantities(&self, x: &[f64], temperature: f64) -> Result<SoftQuantities> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let (alpha, beta, gamma) = self.distributions(x)?;
        let gamma: Vec<Vec<f64>> = gamma.into_iter().map(Distribution::into_vec).collect();
        Ok(soft_quantities(
            alpha.probs(),
            beta.probs(),
            &gamma,
            &self.team,
            temperature,
        ))
    }

    fn models(&self) -> Vec<MlpModel> {
        vec![
            self.alpha.model.clone(),
            self.beta.model.clone(),
            self.gamma.model.clone(),
        ]
    }

    /// Refits all three calibrators on `slice`.
    pub fn recalibrate(&mut self, slice: &[Instance]) -> Result<()> {
        let k = self.num_classes();
        let refit = |model: &MlpModel,
                     input: &dyn Fn(&Instance) -> Vec<f64>,
                     target: &dyn Fn(&Instance) -> usize| {
            let scores: Vec<Vec<f64>> = slice.iter().map(|i| model.logits(&input(i))).collect();
            let targets: Vec<usize> = slice.iter().map(target).collect();
            PlattCalibrator::fit(&scores, &targets, k)
        };
        let (ca, _) = refit(&self.alpha.model, &|i| i.features.clone(), &|i| i.label)?;
        let (cb, _) = refit(&self.beta.model, &|i| i.features.clone(), &|i| i.human)?;
        let (cg, _) = refit(
            &self.gamma.model,
            &|i| with_human_one_hot(&i.features, i.human, k),
            &|i| i.label,
        )?;
        self.alpha.calibrator = Some(ca);
        self.beta.calibrator = Some(cb);
        self.gamma.calibrator = Some(cg);
        self.calibration_refits += 1;
        Ok(())
    }
}

/// Exact decision from already-computed distributions.
pub fn decide_from(
    alpha: &Distribution,
    beta: &Distribution,
    gamma: &[Distribution],
    team: &TeamConfig,
) -> VoiDecision {
    let (best_label_no_query, u_nq) = expected_utility_no_query(alpha, team);
    let u_q = expected_utility_query(beta, |h| Ok(gamma[h].clone()), team).expect("gamma is total");
    VoiDecision {
        u_nq,
        u_q,
        query: u_q > u_nq,
        best_label_no_query,
    }
}

impl TeamPolicy for VoiSystem {
    fn num_classes(&self) -> usize {
        self.team.num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.alpha.model.input_dim()
    }

    fn team_predict(&self, x: &[f64], provider: &mut HumanProvider<'_>) -> Result<TeamPrediction> {
        let (alpha, beta, gamma) = self.distributions(x)?;
        let decision = decide_from(&alpha, &beta, &gamma, &self.team);
        let gamma_raw: Vec<Vec<f64>> = gamma.iter().map(|g| g.probs().to_vec()).collect();
        let soft = soft_quantities(
            alpha.probs(),
            beta.probs(),
            &gamma_raw,
            &self.team,
            self.train_cfg.softmax_temperature,
        );
        let predicted_label = if decision.query {
            let h = provider(x)?;
            if h >= self.num_classes() {
                return Err(Error::Query(format!("provider returned class {h}")));
            }
            expected_utility_no_query(&gamma[h], &self.team).0
        } else {
            decision.best_label_no_query
        };
        Ok(TeamPrediction {
            predicted_label,
            queried: decision.query,
            q_soft: soft.q_soft,
            machine_dist: alpha,
        })
    }

    fn machine_predict(&self, x: &[f64]) -> Result<usize> {
        self.check_ready(x)?;
        let alpha = self.alpha.dist(x)?;
        Ok(expected_utility_no_query(&alpha, &self.team).0)
    }
}

/// The end-to-end loss of joint VOI training over `[α, β, γ]`.
#[derive(Debug, Clone)]
pub struct JointVoiObjective {
    pub calibrators: [PlattCalibrator; 3],
    pub team: TeamConfig,
    pub weights: Vec<f64>,
    /// `λ·c`.
    pub query_penalty: f64,
    pub temperature: f64,
    pub q_override: Option<f64>,
}

impl JointVoiObjective {
    pub fn for_system(system: &VoiSystem, cfg: &TrainConfig) -> Result<Self> {
        let cal = |m: &CalibratedModel| {
            m.calibrator
                .clone()
                .ok_or_else(|| Error::State("joint VOI training needs calibrated models".into()))
        };
        Ok(JointVoiObjective {
            calibrators: [cal(&system.alpha)?, cal(&system.beta)?, cal(&system.gamma)?],
            team: system.team.clone(),
            weights: utility_loss_weights(&system.team)?.0,
            query_penalty: cfg.cost_weight * system.team.query_cost,
            temperature: cfg.softmax_temperature,
            q_override: None,
        })
    }

    fn refresh(&mut self, system: &VoiSystem) {
        for (slot, m) in
            self.calibrators
                .iter_mut()
                .zip([&system.alpha, &system.beta, &system.gamma])
        {
            if let Some(c) = &m.calibrator {
                *slot = c.clone();
            }
        }
    }
}

impl Objective for JointVoiObjective {
    fn instance_loss(
        &self,
        models: &[MlpModel],
        instance: &Instance,
        mut dropout: Option<&mut [ChaCha8Rng]>,
        grads: Option<&mut [GradientSet]>,
    ) -> f64 {
        let k = self.team.num_classes();
        let tau = self.temperature;
        let u = &self.team.utility;
        let x = &instance.features;
        let [cal_a, cal_b, cal_g] = &self.calibrators;

        let a_trace = models[ALPHA].trace(x, dropout.as_deref_mut().map(|d| &mut d[ALPHA]));
        let pa = cal_a.apply(&a_trace.logits);
        let b_trace = models[BETA].trace(x, dropout.as_deref_mut().map(|d| &mut d[BETA]));
        let pb = cal_b.apply(&b_trace.logits);
        let g_traces: Vec<_> = (0..k)
            .map(|h| {
                models[GAMMA].trace(
                    &with_human_one_hot(x, h, k),
                    dropout.as_deref_mut().map(|d| &mut d[GAMMA]),
                )
            })
            .collect();
        let pg: Vec<Vec<f64>> = g_traces.iter().map(|t| cal_g.apply(&t.logits)).collect();

        // Soft VOI calculation.
        let unq = self.team.expected_utilities(&pa);
        let (unq_soft, s_nq) = soft_max(&unq, tau);
        let uq: Vec<Vec<f64>> = pg.iter().map(|g| self.team.expected_utilities(g)).collect();
        let per_h: Vec<(f64, Vec<f64>)> = uq.iter().map(|v| soft_max(v, tau)).collect();
        let uq_soft: f64 = pb.iter().zip(&per_h).map(|(p, (v, _))| p * v).sum();
        let q = match self.q_override {
            Some(v) => v,
            None => sigmoid((uq_soft - unq_soft) / tau),
        };

        let y = instance.label;
        let hi = instance.human;
        let w = self.weights[y];
        let mix = q * pg[hi][y] + (1.0 - q) * pa[y];
        let loss = w * clamped_nll(mix) + self.query_penalty * q;

        let Some(grads) = grads else {
            return loss;
        };

        let g_mix = if mix < PROB_FLOOR { 0.0 } else { -w / mix };
        let mut d_pa = vec![0.0; k];
        let mut d_pb = vec![0.0; k];
        let mut d_pg = vec![vec![0.0; k]; k];
        d_pa[y] += g_mix * (1.0 - q);
        d_pg[hi][y] += g_mix * q;

        if self.q_override.is_none() {
            let d_q = g_mix * (pg[hi][y] - pa[y]) + self.query_penalty;
            let d_diff = d_q * q * (1.0 - q) / tau;
            // d/d u_q_soft = d_diff, d/d u_nq_soft = -d_diff
            for h in 0..k {
                let (v_h, s_h) = &per_h[h];
                d_pb[h] += d_diff * v_h;
                let d_uq = soft_max_backward(&uq[h], s_h, *v_h, tau, d_diff * pb[h]);
                for (a, dv) in d_uq.iter().enumerate() {
                    for yy in 0..k {
                        d_pg[h][yy] += dv * u[a][yy];
                    }
                }
            }
            let d_unq = soft_max_backward(&unq, &s_nq, unq_soft, tau, -d_diff);
            for (a, dv) in d_unq.iter().enumerate() {
                for yy in 0..k {
                    d_pa[yy] += dv * u[a][yy];
                }
            }
        }

        let d_za = cal_a.backward(&a_trace.logits, &pa, &d_pa);
        models[ALPHA].backward(&a_trace, &d_za, &mut grads[ALPHA]);
        if d_pb.iter().any(|v| *v != 0.0) {
            let d_zb = cal_b.backward(&b_trace.logits, &pb, &d_pb);
            models[BETA].backward(&b_trace, &d_zb, &mut grads[BETA]);
        }
        for h in 0..k {
            if d_pg[h].iter().all(|v| *v == 0.0) {
                continue;
            }
            let d_zg = cal_g.backward(&g_traces[h].logits, &pg[h], &d_pg[h]);
            models[GAMMA].backward(&g_traces[h], &d_zg, &mut grads[GAMMA]);
        }
        loss
    }
}

/// Deterministic `(fit, calibration)` partition of the training data.
pub fn calibration_partition(dataset: &Dataset, seed: u64) -> (Vec<Instance>, Vec<Instance>) {
    let n = dataset.len();
    let n_cal = ((n as f64 * CALIBRATION_FRACTION).round() as usize)
        .clamp(1.min(n), n.saturating_sub(1).max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, CALIBRATION_STREAM));
    let (cal, fit) = order.split_at(n_cal);
    let take = |idx: &[usize]| {
        idx.iter()
            .map(|&i| dataset.instances()[i].clone())
            .collect()
    };
    let fit: Vec<Instance> = take(fit);
    let cal: Vec<Instance> = take(cal);
    if fit.is_empty() {
        (cal.clone(), cal)
    } else {
        (fit, cal)
    }
}

fn check_inputs(dataset: &Dataset, team: &TeamConfig, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    team.validate()?;
    if team.num_classes() != dataset.num_classes() {
        return Err(Error::shape(
            "utility matrix",
            dataset.num_classes(),
            team.num_classes(),
        ));
    }
    Ok(utility_loss_weights(team)?.0)
}

/// Fixed VOI: each model trained on its own target, then Platt-calibrated on the
/// calibration slice.
pub fn train_fixed_voi(
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
) -> Result<VoiSystem> {
    let weights = check_inputs(dataset, team, cfg)?;
    let k = dataset.num_classes();
    let d = dataset.feature_dim();
    let (fit, cal) = calibration_partition(dataset, cfg.seed);

    let train_one = |slot: usize, input_dim: usize, objective: WeightedCe| -> Result<MlpModel> {
        let mut models = vec![MlpModel::new(
            &cfg.layer_dims(input_dim, k),
            Head::Softmax,
            cfg.dropout_rate,
            &mut seeded_rng(cfg.seed, streams::INIT + 10 + slot as u64),
        )?];
        let mut objective = objective;
        let mut batch_rng = seeded_rng(cfg.seed, streams::BATCH + 20 + slot as u64);
        let mut dropout = vec![seeded_rng(cfg.seed, streams::DROPOUT + 10 + slot as u64)];
        run_sgd(
            &mut models,
            &[true],
            &fit,
            &mut objective,
            cfg,
            &mut batch_rng,
            &mut dropout,
            |_, _, _| Ok(()),
        )?;
        Ok(models.pop().unwrap())
    };

    let alpha = train_one(
        ALPHA,
        d,
        WeightedCe {
            weights: weights.clone(),
            target: Target::Label,
            human_input: false,
        },
    )?;
    let beta = train_one(
        BETA,
        d,
        WeightedCe {
            weights: vec![1.0; k],
            target: Target::Human,
            human_input: false,
        },
    )?;
    let gamma = train_one(
        GAMMA,
        d + k,
        WeightedCe {
            weights,
            target: Target::Label,
            human_input: true,
        },
    )?;

    let mut system = VoiSystem {
        alpha: CalibratedModel {
            model: alpha,
            calibrator: None,
        },
        beta: CalibratedModel {
            model: beta,
            calibrator: None,
        },
        gamma: CalibratedModel {
            model: gamma,
            calibrator: None,
        },
        team: team.clone(),
        train_cfg: cfg.clone(),
        calibration_refits: 0,
    };
    system.recalibrate(&cal)?;
    Ok(system)
}

/// Joint VOI: fixed VOI followed by end-to-end fine-tuning.
pub fn train_joint_voi(
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
) -> Result<VoiSystem> {
    let fixed = train_fixed_voi(dataset, team, cfg)?;
    train_joint_voi_from(&fixed, dataset, team, cfg, |_, _| {})
}

/// Fine-tunes a calibrated system end-to-end. `observe(iteration, system)` sees the
/// system after every SGD step and any calibrator refresh that follows it.
pub fn train_joint_voi_from(
    warm_start: &VoiSystem,
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &VoiSystem),
) -> Result<VoiSystem> {
    check_inputs(dataset, team, cfg)?;
    let (fit, cal) = calibration_partition(dataset, cfg.seed);
    let mut system = warm_start.clone();
    system.team = team.clone();
    system.train_cfg = cfg.clone();
    let mut objective = JointVoiObjective::for_system(&system, cfg)?;
    let mut models = system.models();
    let mut batch_rng = seeded_rng(cfg.seed, streams::BATCH + 30);
    let mut dropout: Vec<ChaCha8Rng> = (0..3)
        .map(|slot| seeded_rng(cfg.seed, streams::DROPOUT + 30 + slot))
        .collect();
    let interval = cfg.calibration_interval;
    let total = cfg.iterations;
    run_sgd(
        &mut models,
        &[true, true, true],
        &fit,
        &mut objective,
        cfg,
        &mut batch_rng,
        &mut dropout,
        |iteration, models, objective| {
            system.alpha.model.clone_from(&models[ALPHA]);
            system.beta.model.clone_from(&models[BETA]);
            system.gamma.model.clone_from(&models[GAMMA]);
            let done = iteration + 1;
            if done % interval == 0 && done < total {
                system.recalibrate(&cal)?;
                objective.refresh(&system);
            }
            observe(iteration, &system);
            Ok(())
        },
    )?;
    system.recalibrate(&cal)?;
    Ok(system)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::Rng;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn no_query_utility_examples() {
        let acc = TeamConfig::accuracy(2, 0.0);
        assert_eq!(
            expected_utility_no_query(&dist(&[0.5, 0.5]), &acc),
            (0, 0.5)
        );
        assert_eq!(
            expected_utility_no_query(&dist(&[0.9, 0.1]), &acc),
            (0, 0.9)
        );
        let skewed = TeamConfig {
            utility: vec![vec![1.0, -1.0], vec![0.0, 1.0]],
            query_cost: 0.0,
        };
        let (best, u) = expected_utility_no_query(&dist(&[0.6, 0.4]), &skewed);
        assert_eq!(best, 1);
        assert!((u - 0.4).abs() < 1e-15);
    }

    #[test]
    fn query_utility_examples() {
        let team = TeamConfig::accuracy(2, 0.1);
        let gammas = [dist(&[0.8, 0.2]), dist(&[0.4, 0.6])];
        let u_q =
            expected_utility_query(&dist(&[0.7, 0.3]), |h| Ok(gammas[h].clone()), &team).unwrap();
        assert!((u_q - 0.64).abs() < 1e-12);

        let perfect = expected_utility_query(
            &dist(&[0.2, 0.8]),
            |h| Ok(Distribution::one_hot(2, h)),
            &TeamConfig::accuracy(2, 0.3),
        )
        .unwrap();
        assert!((perfect - 0.7).abs() < 1e-15);

        let free = TeamConfig::accuracy(3, 0.0);
        let alpha = dist(&[0.2, 0.5, 0.3]);
        let u_q =
            expected_utility_query(&dist(&[0.1, 0.1, 0.8]), |_| Ok(alpha.clone()), &free).unwrap();
        assert_eq!(u_q, expected_utility_no_query(&alpha, &free).1);
    }

    #[test]
    fn soft_no_query_arithmetic() {
        let team = TeamConfig::accuracy(2, 0.0);
        let s = soft_quantities(
            &[0.9, 0.1],
            &[0.5, 0.5],
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            &team,
            1.0,
        );
        let w = sigmoid(0.8);
        assert!((s.u_nq_soft - (0.9 * w + 0.1 * (1.0 - w))).abs() < 1e-15);
        assert!((s.u_nq_soft - 0.6520).abs() < 1e-4);
    }

    #[test]
    fn equal_soft_utilities_give_half() {
        let team = TeamConfig::accuracy(2, 0.0);
        let a = vec![0.3, 0.7];
        let s = soft_quantities(&a, &[0.4, 0.6], &[a.clone(), a.clone()], &team, 1.0);
        assert!((s.u_q_soft - s.u_nq_soft).abs() < 1e-15);
        assert!((s.q_soft - 0.5).abs() < 1e-15);
    }

    fn random_system(rng: &mut ChaCha8Rng, k: usize, d: usize) -> VoiSystem {
        let cfg = TrainConfig {
            dropout_rate: 0.0,
            hidden: vec![5],
            ..TrainConfig::default()
        };
        let mut model =
            |input| MlpModel::new(&cfg.layer_dims(input, k), Head::Softmax, 0.0, rng).unwrap();
        let (a, b, g) = (model(d), model(d), model(d + k));
        let mut cal = || PlattCalibrator {
            slopes: (0..k).map(|_| rng.random_range(0.3..2.0)).collect(),
            offsets: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let (ca, cb, cg) = (cal(), cal(), cal());
        VoiSystem {
            alpha: CalibratedModel {
                model: a,
                calibrator: Some(ca),
            },
            beta: CalibratedModel {
                model: b,
                calibrator: Some(cb),
            },
            gamma: CalibratedModel {
                model: g,
                calibrator: Some(cg),
            },
            team: TeamConfig::accuracy(k, 0.05),
            train_cfg: cfg,
            calibration_refits: 1,
        }
    }

    fn random_instances(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> Vec<Instance> {
        (0..n)
            .map(|_| Instance {
                features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: rng.random_range(0..k),
                human: rng.random_range(0..k),
            })
            .collect()
    }

    #[test]
    fn joint_voi_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(8, 0);
        for k in [2, 3] {
            let system = random_system(&mut rng, k, 3);
            let data = random_instances(&mut rng, 4, k, 3);
            let cfg = TrainConfig {
                softmax_temperature: 0.7,
                ..system.train_cfg.clone()
            };
            let objective = JointVoiObjective::for_system(&system, &cfg).unwrap();
            let err = finite_diff_check(&system.models(), &data, &[0, 1, 2, 3], &objective, 1e-5)
                .unwrap();
            assert!(err < 1e-4, "k={k}: {err}");
        }
    }

    #[test]
    fn forced_query_limits() {
        let mut rng = seeded_rng(9, 0);
        let system = random_system(&mut rng, 3, 2);
        let cfg = system.train_cfg.clone();
        let inst = random_instances(&mut rng, 1, 3, 2).pop().unwrap();
        let models = system.models();

        let mut objective = JointVoiObjective::for_system(&system, &cfg).unwrap();
        objective.q_override = Some(0.0);
        let loss = objective.instance_loss(&models, &inst, None, None);
        let pa = system.alpha.dist(&inst.features).unwrap();
        assert!((loss - (-pa[inst.label].ln())).abs() < 1e-12);
    }

    #[test]
    fn uncalibrated_system_refuses_decisions() {
        let mut rng = seeded_rng(10, 0);
        let mut system = random_system(&mut rng, 2, 2);
        system.gamma.calibrator = None;
        assert!(matches!(system.decide(&[0.0, 0.0]), Err(Error::State(_))));
    }

    #[test]
    fn calibration_partition_is_deterministic_and_disjoint() {
        let data = crate::data::generate_synthetic(&crate::data::SynthConfig {
            n: 101,
            ..Default::default()
        })
        .unwrap();
        let (fit, cal) = calibration_partition(&data, 3);
        assert_eq!(fit.len() + cal.len(), 101);
        assert_eq!(cal.len(), 20);
        assert_eq!(calibration_partition(&data, 3), (fit, cal));
    }
}
