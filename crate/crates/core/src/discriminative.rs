//! Discriminative teams: a prediction network `m` and a query network `q`, trained
//! either one after the other (fixed) or end-to-end on the mixture loss (joint).
//!
//! The mixture loss for an instance `(x, y, h)` is
//!
//! ```text
//! w[y] · CE(y, q(x)·onehot(h) + (1 − q(x))·m(x)) + λ·c·q(x)
//! ```
//!
//! and at run time the human is queried iff `(1 − q)·max m(x) < q`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::numerics::{
    seeded_rng, sigmoid, softmax_unchecked, Distribution, GradientSet, Head, MlpModel, Objective,
    TrainConfig, PROB_FLOOR,
};
use crate::objectives::{clamped_nll, run_sgd, softmax_ce_grad, streams, Target, WeightedCe};
use crate::team::{utility_loss_weights, HumanProvider, TeamConfig, TeamPolicy, TeamPrediction};

const MACHINE: u64 = 0;
const QUERY: u64 = 1;

/// Mixture loss for one instance given the machine distribution and query probability.
pub fn joint_loss(
    m_dist: &Distribution,
    q: f64,
    human: usize,
    label: usize,
    team: &TeamConfig,
    cost_weight: f64,
) -> Result<f64> {
    let k = team.num_classes();
    if m_dist.len() != k {
        return Err(Error::shape("machine distribution", k, m_dist.len()));
    }
    if !(0.0..=1.0).contains(&q) || human >= k || label >= k {
        return Err(Error::Input("joint loss inputs out of range".into()));
    }
    let (weights, _) = utility_loss_weights(team)?;
    let mix = mixture_prob(m_dist.probs(), q, human, label);
    Ok(weights[label] * clamped_nll(mix) + cost_weight * team.query_cost * q)
}

fn mixture_prob(m: &[f64], q: f64, human: usize, label: usize) -> f64 {
    let h = if human == label { 1.0 } else { 0.0 };
    q * h + (1.0 - q) * m[label]
}

/// Run-time rule: query iff `(1 − q)·max(m) < q`.
pub fn runtime_query_decision(q: f64, m_dist: &Distribution) -> bool {
    (1.0 - q) * m_dist.max() < q
}

/// Loss over `[m, q]` used by both discriminative trainers.
#[derive(Debug, Clone)]
pub struct JointDiscObjective {
    pub weights: Vec<f64>,
    /// `λ·c`.
    pub query_penalty: f64,
    pub train_machine: bool,
    pub train_query: bool,
    /// Replaces the query network's output with a constant.
    pub q_override: Option<f64>,
    pub direct_relaxation: bool,
}

impl Objective for JointDiscObjective {
    fn instance_loss(
        &self,
        models: &[MlpModel],
        instance: &Instance,
        mut dropout: Option<&mut [ChaCha8Rng]>,
        grads: Option<&mut [GradientSet]>,
    ) -> f64 {
        let (m_model, q_model) = (&models[MACHINE as usize], &models[QUERY as usize]);
        let x = &instance.features;
        let y = instance.label;
        let w = self.weights[y];

        let m_trace = m_model.trace(x, dropout.as_deref_mut().map(|d| &mut d[0]));
        let m = softmax_unchecked(&m_trace.logits, 1.0);
        let q_trace = match self.q_override {
            Some(_) => None,
            None => Some(q_model.trace(x, dropout.map(|d| &mut d[1]))),
        };
        let q = match (&q_trace, self.q_override) {
            (_, Some(v)) => v,
            (Some(t), None) => sigmoid(t.logits[0]),
            (None, None) => unreachable!(),
        };
        let human_right = instance.human == y;

        let (loss, d_m_logits, d_q) = if self.direct_relaxation {
            let ce_h = clamped_nll(if human_right { 1.0 } else { 0.0 });
            let ce_m = clamped_nll(m[y]);
            let loss = q * w * ce_h + (1.0 - q) * w * ce_m + self.query_penalty * q;
            let d_q = w * ce_h - w * ce_m + self.query_penalty;
            (loss, softmax_ce_grad(w, 1.0 - q, &m, y), d_q)
        } else {
            let mix = mixture_prob(&m, q, instance.human, y);
            let loss = w * clamped_nll(mix) + self.query_penalty * q;
            if mix < PROB_FLOOR {
                (loss, vec![0.0; m.len()], self.query_penalty)
            } else {
                let factor = (1.0 - q) * m[y] / mix;
                let h = if human_right { 1.0 } else { 0.0 };
                let d_q = -w / mix * (h - m[y]) + self.query_penalty;
                (loss, softmax_ce_grad(w, factor, &m, y), d_q)
            }
        };

        if let Some(g) = grads {
            if self.train_machine {
                m_model.backward(&m_trace, &d_m_logits, &mut g[MACHINE as usize]);
            }
            if let (true, Some(t)) = (self.train_query, &q_trace) {
                q_model.backward(t, &[d_q * q * (1.0 - q)], &mut g[QUERY as usize]);
            }
        }
        loss
    }
}

/// Prediction network, query network and the team they serve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeSystem {
    pub m: MlpModel,
    pub q: MlpModel,
    pub team: TeamConfig,
    pub train_cfg: TrainConfig,
}

impl DiscriminativeSystem {
    pub fn validate(&self) -> Result<()> {
        self.m.validate()?;
        self.q.validate()?;
        self.team.validate()?;
        if self.m.input_dim() != self.q.input_dim() {
            return Err(Error::shape(
                "query network input",
                self.m.input_dim(),
                self.q.input_dim(),
            ));
        }
        if self.m.head() != Head::Softmax || self.q.head() != Head::Sigmoid {
            return Err(Error::Config(
                "m needs a softmax head and q a sigmoid head".into(),
            ));
        }
        if self.m.output_dim() != self.team.num_classes() {
            return Err(Error::shape(
                "machine output",
                self.team.num_classes(),
                self.m.output_dim(),
            ));
        }
        Ok(())
    }

    /// Eval-mode machine distribution and query probability.
    pub fn outputs(&self, x: &[f64]) -> Result<(Distribution, f64)> {
        self.m.check_input(x)?;
        let m = Distribution::from_normalized(softmax_unchecked(&self.m.logits(x), 1.0));
        let q = sigmoid(self.q.logits(x)[0]);
        Ok((m, q))
    }
}

impl TeamPolicy for DiscriminativeSystem {
    fn num_classes(&self) -> usize {
        self.m.output_dim()
    }

    fn feature_dim(&self) -> usize {
        self.m.input_dim()
    }

    fn team_predict(&self, x: &[f64], provider: &mut HumanProvider<'_>) -> Result<TeamPrediction> {
        let (machine_dist, q) = self.outputs(x)?;
        let queried = runtime_query_decision(q, &machine_dist);
        let predicted_label = if queried {
            let h = provider(x)?;
            if h >= self.num_classes() {
                return Err(Error::Query(format!("provider returned class {h}")));
            }
            h
        } else {
            machine_dist.argmax()
        };
        Ok(TeamPrediction {
            predicted_label,
            queried,
            q_soft: q,
            machine_dist,
        })
    }

    fn machine_predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.outputs(x)?.0.argmax())
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

fn init_models(dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<MlpModel>> {
    let d = dataset.feature_dim();
    let k = dataset.num_classes();
    let m = MlpModel::new(
        &cfg.layer_dims(d, k),
        Head::Softmax,
        cfg.dropout_rate,
        &mut seeded_rng(cfg.seed, streams::INIT + MACHINE),
    )?;
    let q = MlpModel::new(
        &cfg.layer_dims(d, 1),
        Head::Sigmoid,
        cfg.dropout_rate,
        &mut seeded_rng(cfg.seed, streams::INIT + QUERY),
    )?;
    Ok(vec![m, q])
}

fn dropout_streams(seed: u64) -> Vec<ChaCha8Rng> {
    vec![
        seeded_rng(seed, streams::DROPOUT + MACHINE),
        seeded_rng(seed, streams::DROPOUT + QUERY),
    ]
}

fn into_system(
    mut models: Vec<MlpModel>,
    team: &TeamConfig,
    cfg: &TrainConfig,
) -> DiscriminativeSystem {
    let q = models.pop().unwrap();
    let m = models.pop().unwrap();
    DiscriminativeSystem {
        m,
        q,
        team: team.clone(),
        train_cfg: cfg.clone(),
    }
}

/// Trains `m` alone on weighted cross-entropy (the first stage of the fixed approach).
pub fn train_machine_only(
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    let weights = check_inputs(dataset, team, cfg)?;
    let mut models = init_models(dataset, cfg)?;
    models.truncate(1);
    let mut objective = WeightedCe {
        weights,
        target: Target::Label,
        human_input: false,
    };
    let mut batch_rng = seeded_rng(cfg.seed, streams::BATCH);
    let mut dropout = dropout_streams(cfg.seed);
    run_sgd(
        &mut models,
        &[true],
        dataset.instances(),
        &mut objective,
        cfg,
        &mut batch_rng,
        &mut dropout[..1],
        |_, _, _| Ok(()),
    )?;
    Ok(models.pop().unwrap())
}

/// Second stage of the fixed approach: trains `q` on the mixture loss with `machine`
/// frozen.
pub fn train_query_for(
    machine: &MlpModel,
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
) -> Result<DiscriminativeSystem> {
    let weights = check_inputs(dataset, team, cfg)?;
    let mut models = init_models(dataset, cfg)?;
    models[MACHINE as usize] = machine.clone();
    let mut objective = JointDiscObjective {
        weights,
        query_penalty: cfg.cost_weight * team.query_cost,
        train_machine: false,
        train_query: true,
        q_override: None,
        direct_relaxation: cfg.direct_relaxation,
    };
    let mut batch_rng = seeded_rng(cfg.seed, streams::BATCH + 10);
    let mut dropout = dropout_streams(cfg.seed);
    run_sgd(
        &mut models,
        &[false, true],
        dataset.instances(),
        &mut objective,
        cfg,
        &mut batch_rng,
        &mut dropout,
        |_, _, _| Ok(()),
    )?;
    Ok(into_system(models, team, cfg))
}

/// Fixed approach: `m` trained in isolation, then `q` trained against the frozen `m`.
pub fn train_fixed(
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
) -> Result<DiscriminativeSystem> {
    let machine = train_machine_only(dataset, team, cfg)?;
    train_query_for(&machine, dataset, team, cfg)
}

/// Joint approach: `m` and `q` updated together on the mixture loss.
pub fn train_joint(
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
) -> Result<DiscriminativeSystem> {
    train_joint_with(dataset, team, cfg, None)
}

/// [`train_joint`] with the query network optionally pinned to a constant output.
pub fn train_joint_with(
    dataset: &Dataset,
    team: &TeamConfig,
    cfg: &TrainConfig,
    q_override: Option<f64>,
) -> Result<DiscriminativeSystem> {
    let weights = check_inputs(dataset, team, cfg)?;
    if let Some(v) = q_override {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("q override {v} outside [0, 1]")));
        }
    }
    let mut models = init_models(dataset, cfg)?;
    let mut objective = JointDiscObjective {
        weights,
        query_penalty: cfg.cost_weight * team.query_cost,
        train_machine: true,
        train_query: q_override.is_none(),
        q_override,
        direct_relaxation: cfg.direct_relaxation,
    };
    let mut batch_rng = seeded_rng(cfg.seed, streams::BATCH);
    let mut dropout = dropout_streams(cfg.seed);
    run_sgd(
        &mut models,
        &[true, q_override.is_none()],
        dataset.instances(),
        &mut objective,
        cfg,
        &mut batch_rng,
        &mut dropout,
        |_, _, _| Ok(()),
    )?;
    Ok(into_system(models, team, cfg))
}
