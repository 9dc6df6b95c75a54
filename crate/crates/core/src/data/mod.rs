//! Instances `(x, y, h)`, CSV ingestion and deterministic splitting.

mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

pub use synth::{generate_synthetic, PlantedRegions, SynthConfig};

/// One labelled instance with its logged human response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<f64>,
    /// Ground-truth class `y`.
    pub label: usize,
    /// Logged human response `h`.
    pub human: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    instances: Vec<Instance>,
    num_classes: usize,
    feature_dim: usize,
    name: String,
}

impl Dataset {
    pub fn new(
        instances: Vec<Instance>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let Some(first) = instances.first() else {
            return Err(Error::Input("dataset is empty".into()));
        };
        let feature_dim = first.features.len();
        if feature_dim == 0 {
            return Err(Error::Input("instances have no features".into()));
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.features.len() != feature_dim {
                return Err(Error::shape(
                    "instance features",
                    feature_dim,
                    inst.features.len(),
                ));
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!(
                    "instance {i} has a non-finite feature"
                )));
            }
            if inst.label >= num_classes || inst.human >= num_classes {
                return Err(Error::Input(format!(
                    "instance {i} has a class index outside 0..{num_classes}"
                )));
            }
        }
        Ok(Dataset {
            instances,
            num_classes,
            feature_dim,
            name: name.into(),
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Fraction of instances whose human response is wrong.
    pub fn human_error_rate(&self) -> f64 {
        self.instances.iter().filter(|i| i.human != i.label).count() as f64 / self.len() as f64
    }

    /// Sub-dataset with the given indices, in order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        Dataset::new(
            indices.iter().map(|&i| self.instances[i].clone()).collect(),
            self.num_classes,
            name,
        )
    }

    /// Reads the `f0,…,f{d-1},y,h` CSV format.
    pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into());
        Self::parse_csv(&text, num_classes, name)
    }

    pub fn parse_csv(text: &str, num_classes: usize, name: impl Into<String>) -> Result<Dataset> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let columns: Vec<&str> = header.iter().collect();
        let d = columns
            .len()
            .checked_sub(2)
            .filter(|d| *d > 0)
            .ok_or(Error::Parse {
                line: 1,
                message: "header needs at least one feature column plus y and h".into(),
            })?;
        for (i, col) in columns[..d].iter().enumerate() {
            if *col != format!("f{i}") {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected column f{i}, found {col:?}"),
                });
            }
        }
        if columns[d] != "y" || columns[d + 1] != "h" {
            return Err(Error::Parse {
                line: 1,
                message: "last two columns must be y,h".into(),
            });
        }

        let mut instances = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let parse_err = |message: String| Error::Parse { line, message };
            if record.len() != d + 2 {
                return Err(parse_err(format!(
                    "expected {} columns, found {}",
                    d + 2,
                    record.len()
                )));
            }
            let features = record
                .iter()
                .take(d)
                .map(|field| match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(parse_err(format!("non-numeric feature {field:?}"))),
                })
                .collect::<Result<Vec<f64>>>()?;
            let class = |field: &str, what: &str| -> Result<usize> {
                let v: usize = field
                    .parse()
                    .map_err(|_| parse_err(format!("{what} is not a class index: {field:?}")))?;
                if v >= num_classes {
                    return Err(parse_err(format!("{what}={v} is outside 0..{num_classes}")));
                }
                Ok(v)
            };
            let label = class(&record[d], "y")?;
            let human = class(&record[d + 1], "h")?;
            instances.push(Instance {
                features,
                label,
                human,
            });
        }
        if instances.is_empty() {
            return Err(Error::Parse {
                line: 2,
                message: "no data rows".into(),
            });
        }
        Dataset::new(instances, num_classes, name)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.feature_dim {
            out.push_str(&format!("f{i},"));
        }
        out.push_str("y,h\n");
        for inst in &self.instances {
            for v in &inst.features {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{},{}\n", inst.label, inst.human));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Shuffles by `seed` and cuts into train/validation/test. Validation and test get
    /// `⌊n·fraction⌋` instances, train gets the remainder.
    pub fn split(
        &self,
        fractions: (f64, f64, f64),
        seed: u64,
    ) -> Result<(Dataset, Dataset, Dataset)> {
        let (ft, fv, fs) = fractions;
        if [ft, fv, fs].iter().any(|f| !(*f > 0.0)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {fractions:?}"
            )));
        }
        let n = self.len();
        if n < 3 {
            return Err(Error::Input(format!(
                "cannot split {n} instances three ways"
            )));
        }
        let n_val = (n as f64 * fv + 1e-9).floor() as usize;
        let n_test = (n as f64 * fs + 1e-9).floor() as usize;
        let n_train = n - n_val - n_test;
        if n_val == 0 || n_test == 0 || n_train == 0 {
            return Err(Error::Input(format!(
                "split of {n} instances by {fractions:?} leaves an empty partition"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(seed, SPLIT_STREAM));
        let (train, rest) = order.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        Ok((
            self.subset(train, format!("{}/train", self.name))?,
            self.subset(val, format!("{}/val", self.name))?,
            self.subset(test, format!("{}/test", self.name))?,
        ))
    }
}

const SPLIT_STREAM: u64 = 0x5b11;
