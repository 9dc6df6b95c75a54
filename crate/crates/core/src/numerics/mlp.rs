use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, softmax_unchecked, Distribution};
use crate::error::{Error, Result};

/// Output nonlinearity of the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Softmax over `K` outputs.
    Softmax,
    /// A single logit squashed to a probability.
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelOutput {
    Dist(Distribution),
    Prob(f64),
}

impl ModelOutput {
    pub fn dist(self) -> Option<Distribution> {
        match self {
            ModelOutput::Dist(d) => Some(d),
            ModelOutput::Prob(_) => None,
        }
    }

    pub fn prob(&self) -> Option<f64> {
        match self {
            ModelOutput::Prob(p) => Some(*p),
            ModelOutput::Dist(_) => None,
        }
    }
}

/// Dense layer, weights row-major `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    weights: Vec<f64>,
    biases: Vec<f64>,
}

/// Feed-forward ReLU network with inverted dropout on hidden activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    dropout_rate: f64,
    head: Head,
}

/// Gradients with the same layout as an [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, consumed by [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of every layer (post-dropout for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    hidden_pre: Vec<Vec<f64>>,
    /// Per-unit dropout scale of every hidden layer (0 or 1/(1-p)); empty when inactive.
    masks: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl MlpModel {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        head: Head,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::validate_dims(layer_dims, head)?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-limit..=limit))
                        .collect(),
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            layers,
            dropout_rate,
            head,
        })
    }

    /// Model with every weight and bias zero.
    pub fn zeros(layer_dims: &[usize], head: Head, dropout_rate: f64) -> Result<Self> {
        Self::validate_dims(layer_dims, head)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer {
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
            })
            .collect();
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            layers,
            dropout_rate,
            head,
        })
    }

    fn validate_dims(layer_dims: &[usize], head: Head) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims must have at least two positive entries, got {layer_dims:?}"
            )));
        }
        let out = *layer_dims.last().unwrap();
        match head {
            Head::Sigmoid if out != 1 => Err(Error::Config(format!(
                "sigmoid head needs output dim 1, got {out}"
            ))),
            Head::Softmax if out < 2 => Err(Error::Config(format!(
                "softmax head needs at least 2 outputs, got {out}"
            ))),
            _ => Ok(()),
        }
    }

    /// Checks shapes and finiteness, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        Self::validate_dims(&self.layer_dims, self.head)?;
        if self.layers.len() != self.layer_dims.len() - 1 {
            return Err(Error::shape(
                "layer count",
                self.layer_dims.len() - 1,
                self.layers.len(),
            ));
        }
        for (layer, w) in self.layers.iter().zip(self.layer_dims.windows(2)) {
            if layer.weights.len() != w[0] * w[1] {
                return Err(Error::shape(
                    "layer weights",
                    w[0] * w[1],
                    layer.weights.len(),
                ));
            }
            if layer.biases.len() != w[1] {
                return Err(Error::shape("layer biases", w[1], layer.biases.len()));
            }
            if layer
                .weights
                .iter()
                .chain(&layer.biases)
                .any(|v| !v.is_finite())
            {
                return Err(Error::Input("non-finite model parameter".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate outside [0, 1)".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    /// Shape-checked forward pass returning the head's output.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        self.check_input(x)?;
        let trace = match mode {
            Mode::Eval => self.trace(x, None::<&mut R>),
            Mode::Train => self.trace(x, Some(rng)),
        };
        Ok(self.head_output(&trace.logits))
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("model input", self.input_dim(), x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn head_output(&self, logits: &[f64]) -> ModelOutput {
        match self.head {
            Head::Softmax => ModelOutput::Dist(Distribution::from_normalized(softmax_unchecked(
                logits, 1.0,
            ))),
            Head::Sigmoid => ModelOutput::Prob(sigmoid(logits[0])),
        }
    }

    /// Eval-mode logits without shape checks.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x, None::<&mut rand_chacha::ChaCha8Rng>).logits
    }

    /// Forward pass recording everything the backward pass needs. Dropout is active
    /// only when `dropout` is given and the rate is positive.
    pub fn trace<R: Rng + ?Sized>(&self, x: &[f64], mut dropout: Option<&mut R>) -> ForwardTrace {
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut hidden_pre = Vec::with_capacity(n_layers - 1);
        let mut masks = Vec::with_capacity(n_layers - 1);
        let mut current = x.to_vec();
        let keep_scale = 1.0 / (1.0 - self.dropout_rate);
        for (li, layer) in self.layers.iter().enumerate() {
            let in_dim = self.layer_dims[li];
            let out_dim = self.layer_dims[li + 1];
            let mut z = layer.biases.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * in_dim..(o + 1) * in_dim];
                *zo += row.iter().zip(&current).map(|(w, a)| w * a).sum::<f64>();
            }
            inputs.push(std::mem::take(&mut current));
            if li + 1 == n_layers {
                current = z;
                break;
            }
            let mut act: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let mask = match dropout.as_deref_mut() {
                Some(rng) if self.dropout_rate > 0.0 => {
                    let mask: Vec<f64> = (0..out_dim)
                        .map(|_| {
                            if rng.random::<f64>() < self.dropout_rate {
                                0.0
                            } else {
                                keep_scale
                            }
                        })
                        .collect();
                    for (a, m) in act.iter_mut().zip(&mask) {
                        *a *= m;
                    }
                    mask
                }
                _ => Vec::new(),
            };
            hidden_pre.push(z);
            masks.push(mask);
            current = act;
        }
        ForwardTrace {
            inputs,
            hidden_pre,
            masks,
            logits: current,
        }
    }

    /// Accumulates into `grads` the parameter gradient of a scalar whose gradient with
    /// respect to the output logits is `d_logits`.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &[f64], grads: &mut GradientSet) {
        debug_assert_eq!(d_logits.len(), self.output_dim());
        let mut delta = d_logits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let in_dim = self.layer_dims[li];
            let layer = &self.layers[li];
            let input = &trace.inputs[li];
            let g = &mut grads.layers[li];
            for (o, d) in delta.iter().enumerate() {
                g.biases[o] += d;
                if *d == 0.0 {
                    continue;
                }
                let row = &mut g.weights[o * in_dim..(o + 1) * in_dim];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if li == 0 {
                break;
            }
            let mut d_in = vec![0.0; in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * in_dim..(o + 1) * in_dim];
                for (di, w) in d_in.iter_mut().zip(row) {
                    *di += d * w;
                }
            }
            let pre = &trace.hidden_pre[li - 1];
            let mask = &trace.masks[li - 1];
            for (j, di) in d_in.iter_mut().enumerate() {
                if pre[j] <= 0.0 {
                    *di = 0.0;
                } else if !mask.is_empty() {
                    *di *= mask[j];
                }
            }
            delta = d_in;
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Mutable access to the `index`-th parameter in flat order (layer by layer,
    /// weights before biases).
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        flat_mut(&mut self.layers, index)
    }

    pub fn param(&self, index: usize) -> f64 {
        flat(&self.layers, index)
    }

    /// Applies `f(param, grad)` to every parameter.
    pub(crate) fn update_with(&mut self, grads: &GradientSet, f: impl Fn(f64, f64) -> f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, d) in layer.weights.iter_mut().zip(&g.weights) {
                *p = f(*p, *d);
            }
            for (p, d) in layer.biases.iter_mut().zip(&g.biases) {
                *p = f(*p, *d);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

fn flat(layers: &[Layer], mut index: usize) -> f64 {
    for l in layers {
        if index < l.weights.len() {
            return l.weights[index];
        }
        index -= l.weights.len();
        if index < l.biases.len() {
            return l.biases[index];
        }
        index -= l.biases.len();
    }
    panic!("parameter index out of range");
}

fn flat_mut(layers: &mut [Layer], mut index: usize) -> &mut f64 {
    for l in layers {
        if index < l.weights.len() {
            return &mut l.weights[index];
        }
        index -= l.weights.len();
        if index < l.biases.len() {
            return &mut l.biases[index];
        }
        index -= l.biases.len();
    }
    panic!("parameter index out of range");
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> Self {
        GradientSet {
            layers: model
                .layers
                .iter()
                .map(|l| Layer {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, model: &MlpModel) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len()
            })
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .chain(l.biases.iter_mut())
                .for_each(|v| *v *= factor);
        }
    }

    pub fn get(&self, index: usize) -> f64 {
        flat(&self.layers, index)
    }

    pub fn get_mut(&mut self, index: usize) -> &mut f64 {
        flat_mut(&mut self.layers, index)
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn zero_softmax_model_is_uniform() {
        let m = MlpModel::zeros(&[3, 5], Head::Softmax, 0.0).unwrap();
        let out = m
            .forward(&[0.3, -2.0, 7.0], Mode::Eval, &mut seeded_rng(0, 0))
            .unwrap()
            .dist()
            .unwrap();
        for p in out.probs() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_sigmoid_model_is_half() {
        let m = MlpModel::zeros(&[2, 4, 1], Head::Sigmoid, 0.2).unwrap();
        let p = m
            .forward(&[1.0, -1.0], Mode::Eval, &mut seeded_rng(0, 0))
            .unwrap()
            .prob()
            .unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn single_layer_logits_one_zero() {
        let mut m = MlpModel::zeros(&[1, 2], Head::Softmax, 0.0).unwrap();
        *m.param_mut(0) = 1.0;
        let d = m
            .forward(&[1.0], Mode::Eval, &mut seeded_rng(0, 0))
            .unwrap()
            .dist()
            .unwrap();
        let e = std::f64::consts::E;
        assert!((d[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((d[0] - 0.7311).abs() < 1e-4);
        assert!((d[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = MlpModel::zeros(&[2, 3], Head::Softmax, 0.0).unwrap();
        let mut rng = seeded_rng(0, 0);
        assert!(matches!(
            m.forward(&[1.0], Mode::Eval, &mut rng),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            m.forward(&[1.0, f64::NAN], Mode::Eval, &mut rng),
            Err(Error::Input(_))
        ));
        assert!(MlpModel::zeros(&[2, 3], Head::Sigmoid, 0.0).is_err());
        assert!(MlpModel::zeros(&[2, 1], Head::Softmax, 0.0).is_err());
        assert!(MlpModel::new(&[2, 2], Head::Softmax, 1.0, &mut rng).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_zero_dropout_train_matches_eval() {
        let mut rng = seeded_rng(3, 0);
        let m = MlpModel::new(&[4, 8, 8, 3], Head::Softmax, 0.0, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0, 0.1];
        let a = m.forward(&x, Mode::Eval, &mut seeded_rng(1, 1)).unwrap();
        let b = m.forward(&x, Mode::Eval, &mut seeded_rng(2, 2)).unwrap();
        let c = m.forward(&x, Mode::Train, &mut seeded_rng(9, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn dropout_changes_train_outputs() {
        let mut rng = seeded_rng(3, 0);
        let m = MlpModel::new(&[4, 32, 3], Head::Softmax, 0.5, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0, 0.1];
        let eval = m.forward(&x, Mode::Eval, &mut rng).unwrap();
        let train = m.forward(&x, Mode::Train, &mut rng).unwrap();
        assert_ne!(eval, train);
    }

    #[test]
    fn glorot_init_respects_bounds() {
        let mut rng = seeded_rng(0, 0);
        let m = MlpModel::new(&[10, 6], Head::Softmax, 0.2, &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        for i in 0..60 {
            assert!(m.param(i).abs() <= limit);
        }
        for i in 60..66 {
            assert_eq!(m.param(i), 0.0);
        }
    }
}
