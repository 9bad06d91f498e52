//! Synthetic families of related classification tasks, plus a loader for
//! small delimited numeric files. Everything is seeded and deterministic:
//! the same config always yields bitwise-identical datasets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One task's identity and sizing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Feature matrix plus integer labels for one split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Materialize the rows at `idx` as a minibatch.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let d = self.features.cols();
        let mut rows = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            rows.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Batch {
            features: Tensor::new(vec![idx.len(), d], rows).expect("batch rows"),
            labels,
        }
    }

    /// The whole split as one batch.
    pub fn full_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// A materialized minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Configuration for a family of related synthetic tasks. Each task's
/// ground-truth encoder is a blend `rho * G0 + (1 - rho) * Gk` of a shared
/// encoder and a task-private one, so `rho` controls task relatedness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFamilyConfig {
    pub tasks: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub relatedness: f64,
    pub label_noise: f64,
    pub class_counts: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticFamilyConfig {
    fn default() -> Self {
        SyntheticFamilyConfig {
            tasks: 2,
            input_dim: 16,
            hidden: 16,
            relatedness: 0.8,
            label_noise: 0.05,
            class_counts: vec![2, 5],
            n_train: 512,
            n_val: 256,
            n_test: 256,
            seed: 0,
        }
    }
}

impl SyntheticFamilyConfig {
    fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::Data("need at least one task".into()));
        }
        if self.class_counts.len() != self.tasks {
            return Err(Error::Data(format!(
                "{} class counts for {} tasks",
                self.class_counts.len(),
                self.tasks
            )));
        }
        if self.class_counts.iter().any(|&c| c < 2) {
            return Err(Error::Data("every task needs at least 2 classes".into()));
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::Data(format!(
                "relatedness {} outside [0, 1]",
                self.relatedness
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Data(format!(
                "label noise {} outside [0, 0.5)",
                self.label_noise
            )));
        }
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::Data("dimensions must be positive".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Data("split sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One generated task: spec, splits, and the ground-truth encoders kept
/// around so relatedness properties can be checked.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub encoder: Tensor,
    pub private_encoder: Tensor,
    pub head: Tensor,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("normal matrix")
}

/// Generate a family of related tasks sharing a ground-truth encoder.
///
/// Labels are the argmax of `head_k(tanh(x G_k))`, flipped to a uniformly
/// chosen *other* class with probability `label_noise`. Splits are disjoint
/// by construction: rows are drawn once and partitioned.
pub fn gen_synthetic_family(cfg: &SyntheticFamilyConfig) -> Result<(Tensor, Vec<SyntheticTask>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared = normal_matrix(&mut rng, cfg.input_dim, cfg.hidden);

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for k in 0..cfg.tasks {
        let classes = cfg.class_counts[k];
        let private = normal_matrix(&mut rng, cfg.input_dim, cfg.hidden);
        let mix: Vec<f64> = shared
            .data()
            .iter()
            .zip(private.data())
            .map(|(&g0, &gk)| cfg.relatedness * g0 + (1.0 - cfg.relatedness) * gk)
            .collect();
        let encoder = Tensor::new(vec![cfg.input_dim, cfg.hidden], mix)?;
        let head = normal_matrix(&mut rng, cfg.hidden, classes);

        let total = cfg.n_train + cfg.n_val + cfg.n_test;
        let features = normal_matrix(&mut rng, total, cfg.input_dim);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let x = &features.data()[i * cfg.input_dim..(i + 1) * cfg.input_dim];
            let mut logits = vec![0.0; classes];
            for c in 0..classes {
                let mut v = 0.0;
                for h in 0..cfg.hidden {
                    let mut pre = 0.0;
                    for d in 0..cfg.input_dim {
                        pre += x[d] * encoder.at(d, h);
                    }
                    v += pre.tanh() * head.at(h, c);
                }
                logits[c] = v;
            }
            let mut best = 0;
            for c in 1..classes {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            let flip: f64 = rng.gen();
            let label = if flip < cfg.label_noise {
                let other = rng.gen_range(0..classes - 1);
                if other >= best {
                    other + 1
                } else {
                    other
                }
            } else {
                best
            };
            labels.push(label);
        }

        let slice = |lo: usize, hi: usize, split: Split| -> Result<Dataset> {
            let rows = features.data()[lo * cfg.input_dim..hi * cfg.input_dim].to_vec();
            Ok(Dataset {
                features: Tensor::new(vec![hi - lo, cfg.input_dim], rows)?,
                labels: labels[lo..hi].to_vec(),
                split,
            })
        };
        let train = slice(0, cfg.n_train, Split::Train)?;
        let val = slice(cfg.n_train, cfg.n_train + cfg.n_val, Split::Val)?;
        let test = slice(cfg.n_train + cfg.n_val, total, Split::Test)?;

        tasks.push(SyntheticTask {
            spec: TaskSpec {
                name: format!("synthetic-{}", k + 1),
                classes,
                input_dim: cfg.input_dim,
                n_train: cfg.n_train,
                n_val: cfg.n_val,
                n_test: cfg.n_test,
            },
            train,
            val,
            test,
            encoder,
            private_encoder: private,
            head,
        });
    }
    Ok((shared, tasks))
}

/// Load a delimited numeric text file (comma or whitespace separated), last
/// column an integer class label, and split it train/val/test.
///
/// Rows are shuffled with the given seed; split sizes are the floor of
/// `n * fraction` for val and test, with the remainder going to train.
pub fn load_delimited(
    path: &std::path::Path,
    classes: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let text = std::fs::read_to_string(path)?;
    parse_delimited(&text, classes, fractions, seed)
}

/// Same as [`load_delimited`] but from an in-memory string.
pub fn parse_delimited(
    text: &str,
    classes: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ftr, fva, fte) = fractions;
    if ftr < 0.0 || fva < 0.0 || fte < 0.0 || (ftr + fva + fte - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "split fractions ({ftr}, {fva}, {fte}) must be nonnegative and sum to 1"
        )));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() < 2 {
            return Err(Error::Data(format!(
                "line {}: need at least one feature and a label",
                lineno + 1
            )));
        }
        let mut vals = Vec::with_capacity(fields.len() - 1);
        for f in &fields[..fields.len() - 1] {
            let v: f64 = f.parse().map_err(|_| {
                Error::Data(format!("line {}: bad number `{f}`", lineno + 1))
            })?;
            vals.push(v);
        }
        let label: usize = fields[fields.len() - 1].parse().map_err(|_| {
            Error::Data(format!(
                "line {}: bad label `{}`",
                lineno + 1,
                fields[fields.len() - 1]
            ))
        })?;
        if label >= classes {
            return Err(Error::Data(format!(
                "line {}: label {label} out of range for {classes} classes",
                lineno + 1
            )));
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(Error::Data(format!(
                    "line {}: {} features, expected {w}",
                    lineno + 1,
                    vals.len()
                )));
            }
            _ => {}
        }
        rows.push(vals);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }

    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let n_val = (n as f64 * fva).floor() as usize;
    let n_test = (n as f64 * fte).floor() as usize;
    let n_train = n - n_val - n_test;

    let build = |idx: &[usize], split: Split| -> Result<Dataset> {
        let d = rows[0].len();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut lab = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&rows[i]);
            lab.push(labels[i]);
        }
        // Tensor shapes are strictly positive, so an empty split keeps a
        // single zeroed placeholder row; `len()` counts labels and stays 0.
        Ok(Dataset {
            features: if idx.is_empty() {
                Tensor::new(vec![1, d], vec![0.0; d])?
            } else {
                Tensor::new(vec![idx.len(), d], data)?
            },
            labels: lab,
            split,
        })
    };

    let train = build(&order[..n_train], Split::Train)?;
    let val = build(&order[n_train..n_train + n_val], Split::Val)?;
    let test = build(&order[n_train + n_val..], Split::Test)?;
    Ok((train, val, test))
}
