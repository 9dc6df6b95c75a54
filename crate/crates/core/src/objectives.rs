//! Shared loss pieces and the minibatch SGD loop used by every trainer.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::numerics::{
    loss_and_grad, sgd_step, softmax_unchecked, GradientSet, MlpModel, Objective, TrainConfig,
    PROB_FLOOR,
};

/// Generator streams derived from a run seed; one per independent source of randomness.
pub(crate) mod streams {
    pub const BATCH: u64 = 1;
    pub const INIT: u64 = 100;
    pub const DROPOUT: u64 = 200;
}

/// `x ⊕ onehot(h)`.
pub fn with_human_one_hot(x: &[f64], human: usize, k: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + k);
    v.extend_from_slice(x);
    v.extend((0..k).map(|c| if c == human { 1.0 } else { 0.0 }));
    v
}

/// Gradient of `-w·factor·ln p_y`-style terms with respect to softmax logits,
/// `-w·factor·(δ_jy − p_j)`. Zero when `p_y` sits at the probability floor.
pub(crate) fn softmax_ce_grad(weight: f64, factor: f64, probs: &[f64], y: usize) -> Vec<f64> {
    if probs[y] < PROB_FLOOR {
        return vec![0.0; probs.len()];
    }
    probs
        .iter()
        .enumerate()
        .map(|(j, p)| -weight * factor * (if j == y { 1.0 } else { 0.0 } - p))
        .collect()
}

pub(crate) fn clamped_nll(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// What a probabilistic model is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Label,
    Human,
}

/// Per-class weighted cross-entropy of a single softmax model.
#[derive(Debug, Clone)]
pub struct WeightedCe {
    pub weights: Vec<f64>,
    pub target: Target,
    /// Feed `x ⊕ onehot(h)` instead of `x`.
    pub human_input: bool,
}

impl WeightedCe {
    pub fn input<'a>(&self, instance: &'a Instance) -> Cow<'a, [f64]> {
        if self.human_input {
            Cow::Owned(with_human_one_hot(
                &instance.features,
                instance.human,
                self.weights.len(),
            ))
        } else {
            Cow::Borrowed(&instance.features)
        }
    }
}

impl Objective for WeightedCe {
    fn instance_loss(
        &self,
        models: &[MlpModel],
        instance: &Instance,
        dropout: Option<&mut [ChaCha8Rng]>,
        grads: Option<&mut [GradientSet]>,
    ) -> f64 {
        let x = self.input(instance);
        let trace = models[0].trace(&x, dropout.map(|d| &mut d[0]));
        let probs = softmax_unchecked(&trace.logits, 1.0);
        let y = match self.target {
            Target::Label => instance.label,
            Target::Human => instance.human,
        };
        let w = self.weights[y];
        if let Some(g) = grads {
            let d = softmax_ce_grad(w, 1.0, &probs, y);
            models[0].backward(&trace, &d, &mut g[0]);
        }
        w * clamped_nll(probs[y])
    }
}

pub(crate) fn sample_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

/// Runs `cfg.iterations` SGD steps on `objective`, updating only the models flagged in
/// `trainable`. `after_step(iteration, models, objective)` runs after each update.
pub(crate) fn run_sgd<O: Objective>(
    models: &mut [MlpModel],
    trainable: &[bool],
    data: &[Instance],
    objective: &mut O,
    cfg: &TrainConfig,
    batch_rng: &mut ChaCha8Rng,
    dropout: &mut [ChaCha8Rng],
    mut after_step: impl FnMut(usize, &mut [MlpModel], &mut O) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("no training instances".into()));
    }
    for iteration in 0..cfg.iterations {
        let batch = sample_batch(batch_rng, data.len(), cfg.batch_size);
        let (_, grads) =
            loss_and_grad(models, data, &batch, objective, Some(dropout)).map_err(|e| {
                Error::Training {
                    iteration,
                    source: Box::new(e),
                }
            })?;
        for ((model, g), train) in models.iter_mut().zip(&grads).zip(trainable) {
            if *train {
                sgd_step(model, g, cfg.learning_rate)?;
                if !model.is_finite() {
                    return Err(Error::Training {
                        iteration,
                        source: Box::new(Error::Input("parameters became non-finite".into())),
                    });
                }
            }
        }
        after_step(iteration, models, objective)?;
    }
    Ok(())
}
