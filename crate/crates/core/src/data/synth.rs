//! Synthetic human–machine task with planted complementarity.
//!
//! Feature 0 is a nuisance coordinate that decides who struggles: its top
//! `hard_region_fraction` of instances form the human-hard region (the human flips to a
//! confusable class there with probability `human_hard_error`), its bottom fraction the
//! machine-hard region (class-bearing features are drowned in extra noise while the
//! human keeps answering at the easy error rate). Class means sit on a regular simplex
//! in features `1..K`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

/// Distance between any two class means.
pub const CLASS_SEPARATION: f64 = 2.5;

const SYNTH_STREAM: u64 = 0x5e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub n: usize,
    pub class_priors: Vec<f64>,
    pub human_easy_error: f64,
    pub human_hard_error: f64,
    pub hard_region_fraction: f64,
    pub machine_noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 5,
            feature_dim: 8,
            n: 14000,
            class_priors: vec![0.7, 0.075, 0.075, 0.075, 0.075],
            human_easy_error: 0.05,
            human_hard_error: 0.5,
            hard_region_fraction: 0.1,
            machine_noise_scale: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        if self.feature_dim < k {
            return Err(Error::Config(format!(
                "feature_dim must be at least num_classes ({k}) to host the class simplex, got {}",
                self.feature_dim
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.class_priors.len() != k
            || self
                .class_priors
                .iter()
                .any(|p| !(p.is_finite() && *p >= 0.0))
            || (self.class_priors.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "class_priors must be {k} non-negative values summing to 1, got {:?}",
                self.class_priors
            )));
        }
        for (name, v) in [
            ("human_easy_error", self.human_easy_error),
            ("human_hard_error", self.human_hard_error),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.human_hard_error < self.human_easy_error {
            return Err(Error::Config(
                "human_hard_error must be at least human_easy_error".into(),
            ));
        }
        if !(self.hard_region_fraction > 0.0 && self.hard_region_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "hard_region_fraction must lie in (0, 0.5] so the two regions stay disjoint, got {}",
                self.hard_region_fraction
            )));
        }
        if !(self.machine_noise_scale >= 0.0 && self.machine_noise_scale.is_finite()) {
            return Err(Error::Config(
                "machine_noise_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Region boundaries on feature 0, recorded in a synthetic dataset's name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedRegions {
    /// Instances with `x[0] > human_hard_above` are human-hard.
    pub human_hard_above: f64,
    /// Instances with `x[0] < machine_hard_below` are machine-hard.
    pub machine_hard_below: f64,
}

impl PlantedRegions {
    pub fn is_human_hard(&self, x: &[f64]) -> bool {
        x[0] > self.human_hard_above
    }

    pub fn is_machine_hard(&self, x: &[f64]) -> bool {
        x[0] < self.machine_hard_below
    }

    fn tag(&self) -> String {
        format!(
            "human_hard_x0>{};machine_hard_x0<{}",
            self.human_hard_above, self.machine_hard_below
        )
    }

    /// Recovers the regions from a dataset name written by [`generate_synthetic`]
    /// (split suffixes such as `/train` are tolerated).
    pub fn from_name(name: &str) -> Option<PlantedRegions> {
        let field = |key: &str| -> Option<f64> {
            let start = name.find(key)? + key.len();
            let rest = &name[start..];
            let end = rest.find([';', ')']).unwrap_or(rest.len());
            rest[..end].parse().ok()
        };
        Some(PlantedRegions {
            human_hard_above: field("human_hard_x0>")?,
            machine_hard_below: field("machine_hard_x0<")?,
        })
    }
}

/// Vertices of a regular simplex with `k` vertices in `k-1` dimensions, pairwise
/// distance `sqrt(2)`.
fn simplex_vertices(k: usize) -> Vec<Vec<f64>> {
    // Coordinates of the centered basis vectors e_i - 1/k in the Helmert basis.
    (0..k)
        .map(|i| {
            (1..k)
                .map(|j| {
                    let norm = ((j * (j + 1)) as f64).sqrt();
                    if i < j {
                        1.0 / norm
                    } else if i == j {
                        -(j as f64) / norm
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub(crate) fn class_means(k: usize) -> Vec<Vec<f64>> {
    let scale = CLASS_SEPARATION / 2f64.sqrt();
    simplex_vertices(k)
        .into_iter()
        .map(|v| v.into_iter().map(|c| c * scale).collect())
        .collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let d = cfg.feature_dim;
    let n = cfg.n;
    let mut rng = seeded_rng(cfg.seed, SYNTH_STREAM);
    let priors = WeightedIndex::new(&cfg.class_priors)
        .map_err(|e| Error::Config(format!("invalid class priors: {e}")))?;
    let means = class_means(k);

    let mut instances: Vec<Instance> = (0..n)
        .map(|_| {
            let y = priors.sample(&mut rng);
            let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for (j, m) in means[y].iter().enumerate() {
                x[1 + j] += m;
            }
            Instance {
                features: x,
                label: y,
                human: y,
            }
        })
        .collect();

    let regions = region_thresholds(&instances, cfg.hard_region_fraction);
    let corrupted = 1..=d.div_ceil(2).min(d - 1);
    for inst in &mut instances {
        let x = &mut inst.features;
        let error_rate = if regions.is_human_hard(x) {
            cfg.human_hard_error
        } else {
            cfg.human_easy_error
        };
        if rng.random::<f64>() < error_rate {
            inst.human = confusable_class(&x[1..k], inst.label, &means);
        }
        if regions.is_machine_hard(x) {
            for j in corrupted.clone() {
                let noise: f64 = rng.sample(StandardNormal);
                x[j] += cfg.machine_noise_scale * noise;
            }
        }
    }

    let name = format!("synthetic(seed={};{})", cfg.seed, regions.tag());
    Dataset::new(instances, k, name)
}

/// Boundaries isolating exactly `round(n·fraction)` instances at each end of feature 0.
fn region_thresholds(instances: &[Instance], fraction: f64) -> PlantedRegions {
    let n = instances.len();
    let mut x0: Vec<f64> = instances.iter().map(|i| i.features[0]).collect();
    x0.sort_by(f64::total_cmp);
    let count = ((n as f64 * fraction).round() as usize).min(n / 2);
    if count == 0 {
        return PlantedRegions {
            human_hard_above: f64::INFINITY,
            machine_hard_below: f64::NEG_INFINITY,
        };
    }
    PlantedRegions {
        human_hard_above: 0.5 * (x0[n - count - 1] + x0[n - count]),
        machine_hard_below: 0.5 * (x0[count - 1] + x0[count]),
    }
}

/// Wrong class whose mean is nearest to the instance's clean class features.
fn confusable_class(class_features: &[f64], label: usize, means: &[Vec<f64>]) -> usize {
    let dist = |m: &[f64]| -> f64 {
        m.iter()
            .zip(class_features)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    (0..means.len())
        .filter(|&c| c != label)
        .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
        .expect("at least two classes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_is_regular() {
        for k in 2..7 {
            let v = simplex_vertices(k);
            for a in 0..k {
                for b in (a + 1)..k {
                    let d2: f64 = v[a].iter().zip(&v[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    assert!((d2 - 2.0).abs() < 1e-12, "k={k} d2={d2}");
                }
            }
        }
    }

    #[test]
    fn perfect_human_when_error_rates_zero() {
        let cfg = SynthConfig {
            n: 2000,
            human_easy_error: 0.0,
            human_hard_error: 0.0,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        assert!(d.instances().iter().all(|i| i.human == i.label));
    }

    #[test]
    fn human_errors_concentrate_in_hard_region() {
        let cfg = SynthConfig {
            n: 10000,
            hard_region_fraction: 0.1,
            human_hard_error: 0.8,
            human_easy_error: 0.02,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let regions = PlantedRegions::from_name(d.name()).unwrap();
        let errors: Vec<&Instance> = d
            .instances()
            .iter()
            .filter(|i| i.human != i.label)
            .collect();
        let inside = errors
            .iter()
            .filter(|i| regions.is_human_hard(&i.features))
            .count();
        let frac = inside as f64 / errors.len() as f64;
        let expected = 0.8 * 0.1 / (0.8 * 0.1 + 0.02 * 0.9);
        assert!((frac - expected).abs() < 0.05, "{frac} vs {expected}");

        let hard = d
            .instances()
            .iter()
            .filter(|i| regions.is_human_hard(&i.features))
            .count();
        let machine_hard = d
            .instances()
            .iter()
            .filter(|i| regions.is_machine_hard(&i.features))
            .count();
        assert_eq!(hard, 1000);
        assert_eq!(machine_hard, 1000);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig {
            n: 500,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        let c = generate_synthetic(&SynthConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.to_csv_string(), c.to_csv_string());
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad_priors = SynthConfig {
            class_priors: vec![0.5, 0.5],
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&bad_priors),
            Err(Error::Config(_))
        ));
        let empty = SynthConfig {
            n: 0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&empty).is_err());
        let inverted = SynthConfig {
            human_easy_error: 0.3,
            human_hard_error: 0.1,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&inverted).is_err());
    }

    #[test]
    fn region_tag_round_trips_through_split_names() {
        let d = generate_synthetic(&SynthConfig {
            n: 300,
            ..SynthConfig::default()
        })
        .unwrap();
        let regions = PlantedRegions::from_name(d.name()).unwrap();
        let (train, _, _) = d.split((0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!(PlantedRegions::from_name(train.name()), Some(regions));
        assert!(PlantedRegions::from_name("plain").is_none());
    }
}
