use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GradientSet, MlpModel};
use crate::data::Instance;
use crate::error::{Error, Result};

/// Optimization settings shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of SGD iterations `T`.
    pub iterations: usize,
    /// Calibrator refresh interval `t` for joint VOI training.
    pub calibration_interval: usize,
    pub softmax_temperature: f64,
    /// Weight `λ` on the query-cost term of the joint losses.
    pub cost_weight: f64,
    pub seed: u64,
    pub dropout_rate: f64,
    /// Hidden layer widths of every network.
    pub hidden: Vec<usize>,
    /// Use `q·ℓ(h) + (1-q)·ℓ(m) + c·q` instead of the mixture loss (ablation only).
    pub direct_relaxation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 64,
            iterations: 4000,
            calibration_interval: 200,
            softmax_temperature: 1.0,
            cost_weight: 1.0,
            seed: 0,
            dropout_rate: 0.2,
            hidden: vec![16],
            direct_relaxation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("softmax_temperature", self.softmax_temperature)?;
        if !(self.cost_weight >= 0.0 && self.cost_weight.is_finite()) {
            return Err(Error::Config(format!(
                "cost_weight must be non-negative, got {}",
                self.cost_weight
            )));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.calibration_interval == 0 {
            return Err(Error::Config(
                "batch_size, iterations and calibration_interval must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer dims `input → hidden… → output`.
    pub fn layer_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input);
        dims.extend(&self.hidden);
        dims.push(output);
        dims
    }
}

/// A differentiable per-instance loss over a fixed tuple of models.
pub trait Objective {
    /// Loss of one instance. When `grads` is given, adds the gradient of the loss with
    /// respect to every model's parameters (one [`GradientSet`] per model). `dropout`
    /// holds one generator per model and enables train-mode dropout.
    fn instance_loss(
        &self,
        models: &[MlpModel],
        instance: &Instance,
        dropout: Option<&mut [ChaCha8Rng]>,
        grads: Option<&mut [GradientSet]>,
    ) -> f64;
}

/// Mean loss over `batch` (indices into `data`) and its exact gradient.
pub fn loss_and_grad<O: Objective + ?Sized>(
    models: &[MlpModel],
    data: &[Instance],
    batch: &[usize],
    objective: &O,
    mut dropout: Option<&mut [ChaCha8Rng]>,
) -> Result<(f64, Vec<GradientSet>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty minibatch".into()));
    }
    let mut grads: Vec<GradientSet> = models.iter().map(GradientSet::zeros_like).collect();
    let mut total = 0.0;
    for &i in batch {
        let loss =
            objective.instance_loss(models, &data[i], dropout.as_deref_mut(), Some(&mut grads));
        if !loss.is_finite() {
            return Err(Error::Numeric { index: i });
        }
        total += loss;
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.scale(inv);
    }
    Ok((total * inv, grads))
}

fn mean_loss<O: Objective + ?Sized>(
    models: &[MlpModel],
    data: &[Instance],
    batch: &[usize],
    objective: &O,
) -> f64 {
    batch
        .iter()
        .map(|&i| objective.instance_loss(models, &data[i], None, None))
        .sum::<f64>()
        / batch.len() as f64
}

/// `p ← p − learning_rate · g` for every parameter.
pub fn sgd_step(model: &mut MlpModel, grads: &GradientSet, learning_rate: f64) -> Result<()> {
    if !grads.matches(model) {
        return Err(Error::shape(
            "gradient set",
            model.param_count(),
            grads.len(),
        ));
    }
    model.update_with(grads, |p, g| p - learning_rate * g);
    Ok(())
}

/// Largest `|analytic − central difference| / max(1, |analytic|)` over all parameters
/// of all models, evaluated without dropout.
pub fn finite_diff_check<O: Objective + ?Sized>(
    models: &[MlpModel],
    data: &[Instance],
    batch: &[usize],
    objective: &O,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = loss_and_grad(models, data, batch, objective, None)?;
    let mut work = models.to_vec();
    let mut worst = 0.0f64;
    for (mi, grads) in analytic.iter().enumerate() {
        for p in 0..work[mi].param_count() {
            let orig = work[mi].param(p);
            *work[mi].param_mut(p) = orig + step;
            let plus = mean_loss(&work, data, batch, objective);
            *work[mi].param_mut(p) = orig - step;
            let minus = mean_loss(&work, data, batch, objective);
            *work[mi].param_mut(p) = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads.get(p);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Head};

    /// Squared error on the first output logit of a single model.
    struct SquaredError;

    impl Objective for SquaredError {
        fn instance_loss(
            &self,
            models: &[MlpModel],
            instance: &Instance,
            _dropout: Option<&mut [ChaCha8Rng]>,
            grads: Option<&mut [GradientSet]>,
        ) -> f64 {
            let trace = models[0].trace(&instance.features, None::<&mut ChaCha8Rng>);
            let r = trace.logits[0] - instance.label as f64;
            if let Some(g) = grads {
                models[0].backward(&trace, &[2.0 * r, 0.0], &mut g[0]);
            }
            r * r
        }
    }

    struct Constant(f64);

    impl Objective for Constant {
        fn instance_loss(
            &self,
            _models: &[MlpModel],
            _instance: &Instance,
            _dropout: Option<&mut [ChaCha8Rng]>,
            _grads: Option<&mut [GradientSet]>,
        ) -> f64 {
            self.0
        }
    }

    fn toy_data() -> Vec<Instance> {
        (0..6)
            .map(|i| Instance {
                features: vec![i as f64 * 0.3 - 0.7, (i % 3) as f64],
                label: i % 2,
                human: 0,
            })
            .collect()
    }

    #[test]
    fn linear_squared_error_is_exact_under_central_differences() {
        let mut rng = seeded_rng(1, 0);
        let model = MlpModel::new(&[2, 2], Head::Softmax, 0.0, &mut rng).unwrap();
        let data = toy_data();
        let batch: Vec<usize> = (0..data.len()).collect();
        let err = finite_diff_check(&[model], &data, &batch, &SquaredError, 1e-5).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = seeded_rng(1, 0);
        let model = MlpModel::new(&[2, 4, 2], Head::Softmax, 0.0, &mut rng).unwrap();
        let data = toy_data();
        let (loss, grads) =
            loss_and_grad(&[model], &data, &[0, 1, 2], &Constant(3.5), None).unwrap();
        assert_eq!(loss, 3.5);
        assert_eq!(grads[0].max_abs(), 0.0);
    }

    #[test]
    fn non_finite_loss_names_the_instance() {
        let model = MlpModel::zeros(&[2, 2], Head::Softmax, 0.0).unwrap();
        let data = toy_data();
        let err = loss_and_grad(&[model], &data, &[4], &Constant(f64::NAN), None).unwrap_err();
        assert!(matches!(err, Error::Numeric { index: 4 }));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut model = MlpModel::zeros(&[1, 2], Head::Softmax, 0.0).unwrap();
        *model.param_mut(0) = 1.0;
        let mut grads = GradientSet::zeros_like(&model);
        let untouched = model.clone();
        sgd_step(&mut model, &grads, 0.1).unwrap();
        assert_eq!(model, untouched);

        *grads.get_mut(0) = 0.5;
        sgd_step(&mut model, &grads, 0.1).unwrap();
        assert!((model.param(0) - 0.95).abs() < 1e-15);
        sgd_step(&mut model, &grads, 0.1).unwrap();
        assert!((model.param(0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_rejects_mismatched_shapes() {
        let mut model = MlpModel::zeros(&[1, 2], Head::Softmax, 0.0).unwrap();
        let other = MlpModel::zeros(&[3, 2], Head::Softmax, 0.0).unwrap();
        let grads = GradientSet::zeros_like(&other);
        assert!(matches!(
            sgd_step(&mut model, &grads, 0.1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            softmax_temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
