//! Platt sigmoid calibration, its one-vs-rest multiclass extension, and expected
//! calibration error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax_unchecked, Distribution, PROB_FLOOR};

const MAX_NEWTON_ITERATIONS: usize = 200;
const GRADIENT_TOLERANCE: f64 = 1e-8;
const HESSIAN_RIDGE: f64 = 1e-12;
const MIN_STEP: f64 = 1e-10;
/// Accepted steps that improve the objective by less than this fraction end the fit.
const RELATIVE_PROGRESS: f64 = 1e-15;

/// Result of a binary Platt fit: `p(+|s) = σ(a·s + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlattFit {
    pub a: f64,
    pub b: f64,
    /// Set when the labels were single-class and the fit fell back to a constant.
    pub degenerate: bool,
    /// Negative log-likelihood before the first and after every accepted Newton step.
    pub objective_history: Vec<f64>,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn nll(scores: &[f64], targets: &[f64], a: f64, b: f64) -> f64 {
    scores
        .iter()
        .zip(targets)
        .map(|(s, t)| {
            let z = a * s + b;
            softplus(z) - t * z
        })
        .sum()
}

/// Fits `σ(a·s + b)` to binary labels by damped Newton iterations on Platt's smoothed
/// targets `(N₊+1)/(N₊+2)` and `1/(N₋+2)`.
pub fn fit_platt(scores: &[f64], labels: &[bool]) -> Result<PlattFit> {
    if scores.len() != labels.len() {
        return Err(Error::shape("platt labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::Input("cannot calibrate on zero examples".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("non-finite calibration score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    let hi = (n_pos as f64 + 1.0) / (n_pos as f64 + 2.0);
    let lo = 1.0 / (n_neg as f64 + 2.0);

    if n_pos == 0 || n_neg == 0 {
        let rate = if n_pos == 0 { lo } else { hi };
        log::warn!("platt fit on single-class labels; using constant {rate:.4}");
        return Ok(PlattFit {
            a: 0.0,
            b: logit(rate),
            degenerate: true,
            objective_history: Vec::new(),
        });
    }

    let targets: Vec<f64> = labels.iter().map(|l| if *l { hi } else { lo }).collect();
    let mut a = 0.0;
    let mut b = ((n_pos as f64 + 1.0) / (n_neg as f64 + 1.0)).ln();
    let mut f = nll(scores, &targets, a, b);
    let mut history = vec![f];
    let n = scores.len() as f64;

    for _ in 0..MAX_NEWTON_ITERATIONS {
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (HESSIAN_RIDGE, 0.0, HESSIAN_RIDGE);
        for (s, t) in scores.iter().zip(&targets) {
            let p = sigmoid(a * s + b);
            let r = p - t;
            let w = p * (1.0 - p);
            ga += r * s;
            gb += r;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        if ga.hypot(gb) < GRADIENT_TOLERANCE * n {
            break;
        }
        let det = haa * hbb - hab * hab;
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        let slope = ga * da + gb * db;

        let mut step = 1.0;
        let mut progressing = false;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = nll(scores, &targets, na, nb);
            if nf <= f + 1e-4 * step * slope {
                progressing = f - nf > RELATIVE_PROGRESS * f.abs();
                a = na;
                b = nb;
                f = nf;
                history.push(f);
                break;
            }
            step *= 0.5;
        }
        if !progressing {
            break;
        }
    }

    Ok(PlattFit {
        a,
        b,
        degenerate: false,
        objective_history: history,
    })
}

/// Per-class `(a_k, b_k)` applied one-vs-rest to per-class logits, then renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlattCalibrator {
    pub slopes: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl PlattCalibrator {
    /// `a = 1, b = 0` for every class.
    pub fn identity(k: usize) -> Self {
        PlattCalibrator {
            slopes: vec![1.0; k],
            offsets: vec![0.0; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.slopes.len()
    }

    /// Fits one binary calibrator per class on rows of per-class scores. Returns the
    /// calibrator and the classes whose fit was degenerate.
    pub fn fit(scores: &[Vec<f64>], targets: &[usize], k: usize) -> Result<(Self, Vec<usize>)> {
        if scores.len() != targets.len() {
            return Err(Error::shape(
                "calibration targets",
                scores.len(),
                targets.len(),
            ));
        }
        let mut slopes = Vec::with_capacity(k);
        let mut offsets = Vec::with_capacity(k);
        let mut degenerate = Vec::new();
        for class in 0..k {
            let column: Vec<f64> = scores
                .iter()
                .map(|row| {
                    if row.len() == k {
                        Ok(row[class])
                    } else {
                        Err(Error::shape("calibration scores", k, row.len()))
                    }
                })
                .collect::<Result<_>>()?;
            let labels: Vec<bool> = targets.iter().map(|t| *t == class).collect();
            let fit = fit_platt(&column, &labels)?;
            if fit.degenerate {
                degenerate.push(class);
            }
            slopes.push(fit.a);
            offsets.push(fit.b);
        }
        Ok((PlattCalibrator { slopes, offsets }, degenerate))
    }

    /// Calibrated distribution from per-class logits.
    pub fn calibrate_scores(&self, scores: &[f64]) -> Result<Distribution> {
        if scores.len() != self.num_classes() {
            return Err(Error::shape(
                "calibrator input",
                self.num_classes(),
                scores.len(),
            ));
        }
        Ok(Distribution::from_normalized(self.apply(scores)))
    }

    /// Calibrates an uncalibrated distribution via its log-probabilities.
    pub fn calibrate(&self, raw: &Distribution) -> Result<Distribution> {
        let scores: Vec<f64> = raw.probs().iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
        self.calibrate_scores(&scores)
    }

    /// `normalize(σ(a_k z_k + b_k))`, computed as a softmax of log-sigmoids.
    pub(crate) fn apply(&self, scores: &[f64]) -> Vec<f64> {
        let log_r: Vec<f64> = self.log_sigmoids(scores);
        softmax_unchecked(&log_r, 1.0)
    }

    fn log_sigmoids(&self, scores: &[f64]) -> Vec<f64> {
        scores
            .iter()
            .zip(self.slopes.iter().zip(&self.offsets))
            .map(|(z, (a, b))| -softplus(-(a * z + b)))
            .collect()
    }

    /// Gradient with respect to the input scores of a loss whose gradient with respect
    /// to the calibrated probabilities `probs` is `d_probs`. Calibrator parameters are
    /// treated as constants.
    pub(crate) fn backward(&self, scores: &[f64], probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
        let inner: f64 = d_probs.iter().zip(probs).map(|(g, p)| g * p).sum();
        scores
            .iter()
            .enumerate()
            .map(|(k, z)| {
                let u = self.slopes[k] * z + self.offsets[k];
                let d_log_r = probs[k] * (d_probs[k] - inner);
                d_log_r * (1.0 - sigmoid(u)) * self.slopes[k]
            })
            .collect()
    }

    pub fn max_abs_difference(&self, other: &PlattCalibrator) -> f64 {
        self.slopes
            .iter()
            .zip(&other.slopes)
            .chain(self.offsets.iter().zip(&other.offsets))
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Expected calibration error over equal-width bins of the top-class probability.
pub fn expected_calibration_error(
    predictions: &[Distribution],
    labels: &[usize],
    bins: usize,
) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    if predictions.is_empty() {
        return Err(Error::Input("no predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape("ece labels", predictions.len(), labels.len()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0.0; bins];
    for (p, y) in predictions.iter().zip(labels) {
        let top = p.argmax();
        let c = p[top];
        let bin = ((c * bins as f64) as usize).min(bins - 1);
        count[bin] += 1;
        conf[bin] += c;
        if top == *y {
            correct[bin] += 1.0;
        }
    }
    let n = predictions.len() as f64;
    Ok((0..bins)
        .filter(|b| count[*b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] / m - conf[b] / m).abs()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use rand::Rng;

    #[test]
    fn uninformative_scores_recover_base_rate() {
        let scores = vec![0.0; 100];
        let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let fit = fit_platt(&scores, &labels).unwrap();
        assert!((sigmoid(fit.b) - 0.5).abs() < 0.02);
        assert!(!fit.degenerate);
    }

    #[test]
    fn separated_scores_give_confident_but_capped_fit() {
        let scores: Vec<f64> = (0..1000)
            .map(|i| if i < 500 { -1.0 } else { 1.0 })
            .collect();
        let labels: Vec<bool> = (0..1000).map(|i| i >= 500).collect();
        let fit = fit_platt(&scores, &labels).unwrap();
        let p_pos = sigmoid(fit.a + fit.b);
        let p_neg = sigmoid(-fit.a + fit.b);
        assert!(p_pos > 0.95, "{p_pos}");
        assert!(p_neg < 0.05, "{p_neg}");
        // smoothing keeps the fit finite: the optimum matches the smoothed targets
        assert!((p_pos - 501.0 / 502.0).abs() < 1e-6);
        assert!((p_neg - 1.0 / 502.0).abs() < 1e-6);
    }

    #[test]
    fn single_class_labels_fall_back() {
        let fit = fit_platt(&[0.3, 1.2, -0.5], &[true, true, true]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.a, 0.0);
        assert!((sigmoid(fit.b) - 4.0 / 5.0).abs() < 1e-12);
        let fit = fit_platt(&[0.3, 1.2], &[false, false]).unwrap();
        assert!(fit.degenerate);
        assert!((sigmoid(fit.b) - 1.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn newton_objective_never_increases() {
        let mut rng = seeded_rng(5, 0);
        let scores: Vec<f64> = (0..400).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<bool> = scores
            .iter()
            .map(|s| rng.random::<f64>() < sigmoid(2.0 * s - 0.7))
            .collect();
        let fit = fit_platt(&scores, &labels).unwrap();
        assert!(fit.objective_history.len() > 1);
        for w in fit.objective_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(
            (fit.a - 2.0).abs() < 0.6 && (fit.b + 0.7).abs() < 0.5,
            "{fit:?}"
        );
    }

    #[test]
    fn identity_calibrator_on_uniform_is_uniform() {
        let cal = PlattCalibrator::identity(4);
        let out = cal.calibrate(&Distribution::uniform(4)).unwrap();
        for p in out.probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_calibration_arithmetic() {
        let cal = PlattCalibrator::identity(2);
        let out = cal.calibrate_scores(&[2.0, 0.0]).unwrap();
        let expected = sigmoid(2.0) / (sigmoid(2.0) + 0.5);
        assert!((out[0] - expected).abs() < 1e-14);
        assert!((out[0] - 0.638).abs() < 1e-3);
        assert!((out[1] - 0.362).abs() < 1e-3);
    }

    #[test]
    fn calibration_handles_extreme_scores() {
        let cal = PlattCalibrator::identity(3);
        let out = cal.calibrate_scores(&[-900.0, -1000.0, -950.0]).unwrap();
        assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out.argmax(), 0);
    }

    #[test]
    fn calibrator_backward_matches_finite_differences() {
        let cal = PlattCalibrator {
            slopes: vec![0.7, 1.3, -0.4],
            offsets: vec![0.1, -0.5, 0.9],
        };
        let z = [0.3, -1.1, 2.0];
        let weights = [0.5, -2.0, 1.5];
        let loss =
            |z: &[f64]| -> f64 { cal.apply(z).iter().zip(&weights).map(|(p, w)| p * w).sum() };
        let probs = cal.apply(&z);
        let grad = cal.backward(&z, &probs, &weights);
        for k in 0..3 {
            let mut plus = z;
            let mut minus = z;
            plus[k] += 1e-6;
            minus[k] -= 1e-6;
            let fd = (loss(&plus) - loss(&minus)) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-8, "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn ece_edge_cases() {
        let oracle_free: Vec<Distribution> = (0..10)
            .map(|_| Distribution::new(vec![0.7, 0.3]).unwrap())
            .collect();
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i >= 7)).collect();
        let ece = expected_calibration_error(&oracle_free, &labels, 1).unwrap();
        assert!(ece.abs() < 1e-12);

        let sure: Vec<Distribution> = (0..1000).map(|_| Distribution::one_hot(2, 0)).collect();
        let coin: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let ece = expected_calibration_error(&sure, &coin, 10).unwrap();
        assert!((ece - 0.5).abs() < 1e-12);

        assert!(matches!(
            expected_calibration_error(&[], &[], 10),
            Err(Error::Input(_))
        ));
        assert!(expected_calibration_error(&sure, &coin, 0).is_err());
    }

    #[test]
    fn ece_of_calibrated_oracle_is_small() {
        let mut rng = seeded_rng(17, 0);
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..10000 {
            let p: f64 = rng.random();
            preds.push(Distribution::new(vec![p, 1.0 - p]).unwrap());
            labels.push(usize::from(rng.random::<f64>() >= p));
        }
        let ece = expected_calibration_error(&preds, &labels, 10).unwrap();
        assert!(ece < 0.02, "{ece}");
    }

    #[test]
    fn fit_reports_degenerate_classes() {
        let scores = vec![
            vec![0.1, 0.2, 0.3],
            vec![0.4, 0.1, 0.0],
            vec![1.0, -1.0, 0.5],
        ];
        let (cal, degenerate) = PlattCalibrator::fit(&scores, &[0, 1, 0], 3).unwrap();
        assert_eq!(degenerate, vec![2]);
        assert_eq!(cal.num_classes(), 3);
    }
}
