//! Differentiable MLP core: numerically stable softmax, forward and backward passes,
//! plain SGD and a central-difference gradient checker.
//!
//! All arithmetic is `f64`. Every training loss in the crate is expressed as an
//! [`Objective`] over one or more [`MlpModel`]s, which lets the same finite-difference
//! harness check all of them.

mod mlp;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mlp::{ForwardTrace, GradientSet, Head, MlpModel, Mode, ModelOutput};
pub use train::{finite_diff_check, loss_and_grad, sgd_step, Objective, TrainConfig};

/// Lower bound applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A probability vector over `K` outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input(format!("invalid probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Distribution(probs))
    }

    /// Wraps a vector already known to be normalized.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Distribution(probs)
    }

    pub fn uniform(k: usize) -> Self {
        Distribution(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Distribution(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Index<usize> for Distribution {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `softmax(logits / temperature)` with max subtraction.
pub fn stable_softmax(logits: &[f64], temperature: f64) -> Result<Distribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Input("softmax of empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Input("non-finite logit".into()));
    }
    Ok(Distribution(softmax_unchecked(logits, temperature)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Deterministic generator for one purpose (`stream`) derived from a run seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let d = stable_softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let d = stable_softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
        let d = stable_softmax(&[1e6, -1e6, 0.0], 1.0).unwrap();
        assert!(d.probs().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn two_class_softmax_is_sigmoid_of_difference() {
        let d = stable_softmax(&[0.8, 0.5], 1.0).unwrap();
        let s = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((d[0] - s).abs() < 1e-15);
        assert!((d[0] - 0.5744).abs() < 1e-4);
        assert!((d[1] - 0.4256).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(stable_softmax(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(
            stable_softmax(&[1.0], -2.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.3, 0.3, 0.4, 0.4]), 2);
        assert_eq!(Distribution::uniform(4).argmax(), 0);
    }

    #[test]
    fn sigmoid_is_symmetric_and_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            logits in prop::collection::vec(-1e6f64..1e6, 1..8),
            shift in -1e3f64..1e3,
            tau in 0.01f64..10.0,
        ) {
            let d = stable_softmax(&logits, tau).unwrap();
            let total: f64 = d.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let e = stable_softmax(&shifted, tau).unwrap();
            for (a, b) in d.probs().iter().zip(e.probs()) {
                // shifting by a constant changes rounding of the inputs only
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
