//! Experiment configuration: a single TOML file with nested sections.
//!
//! Grammar (all sections except a data source are optional and take the
//! defaults shown by `ExperimentConfig::default()`):
//!
//! ```toml
//! schema_version = 1
//! method = "il"              # il | mtl | blocked
//! seeds = [1, 2, 3]
//! out_dir = "runs/out"
//! threads = 1
//!
//! [engine]
//! rounds = 2
//! lambda = 100.0
//! eta = 0.004
//! eta_arch = 0.5
//! outer_iters = 40
//! hypergrad_mode = "unrolled" # unrolled | first_order
//! batch_size = 32
//! task_order = [2, 1]         # default: class counts descending
//! mtl_weights = [1.0, 1.0]    # default: all ones
//! warm_start = false
//! early_stop_tol = 1e-6       # omit or set negative to disable
//!
//! [cell]
//! nodes = 4
//! width = 16
//! ops = ["zero", "identity", "linear", "linear_relu", "linear_tanh"]
//!
//! [data.synthetic]            # exactly one of data.synthetic / data.files
//! tasks = 2
//! input_dim = 16
//! hidden = 16
//! relatedness = 0.8
//! label_noise = 0.05
//! class_counts = [2, 5]
//! samples = [512, 256, 256]
//! seed = 0
//!
//! [data.files]
//! paths = ["task1.csv", "task2.csv"]
//! class_counts = [3, 4]
//! fractions = [0.6, 0.2, 0.2]
//! seed = 0
//!
//! [sweep]
//! lambda_values = [0.0, 1.0, 10.0, 100.0, 1000.0]
//! rounds_values = [1, 2, 3]
//!
//! [retrain]
//! steps = 200
//! eta = 0.05
//! batch_size = 32
//!
//! [gradcheck]
//! weight_instances = 100
//! weight_eps = 1e-5
//! weight_tol = 1e-4
//! hyper_eps = 1e-4
//! hyper_tol = 1e-3
//! seed = 0
//! ```
//!
//! The number of learners is always the number of tasks in the data
//! source. Environment variables `INTERLEAVE_OUT` and `INTERLEAVE_THREADS`
//! override the output directory and thread count; command-line flags
//! override both.

use std::path::Path;

use serde::{Deserialize, Serialize};

use interleave_core::data::SyntheticFamilyConfig;
use interleave_core::engine::{EngineConfig, HypergradMode, RetrainConfig};
use interleave_core::supernet::{CellSpec, OpKind};
use interleave_core::{Error, Result};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub cell: CellSection,
    pub data: DataSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub retrain: RetrainSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

fn default_schema() -> u32 {
    CONFIG_SCHEMA
}
fn default_method() -> String {
    "il".into()
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_out_dir() -> String {
    "runs/out".into()
}
fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub rounds: usize,
    pub lambda: f64,
    pub eta: f64,
    pub eta_arch: f64,
    pub outer_iters: usize,
    pub hypergrad_mode: HypergradMode,
    pub batch_size: usize,
    /// Defaults to learners ordered by class count descending (stable by
    /// learner index on ties).
    pub task_order: Option<Vec<usize>>,
    /// Defaults to all ones.
    pub mtl_weights: Option<Vec<f64>>,
    pub warm_start: bool,
    pub early_stop_tol: Option<f64>,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        EngineSection {
            rounds: e.rounds,
            lambda: e.lambda,
            eta: e.eta,
            eta_arch: e.eta_arch,
            outer_iters: e.outer_iters,
            hypergrad_mode: e.hypergrad_mode,
            batch_size: e.batch_size,
            task_order: None,
            mtl_weights: None,
            warm_start: e.warm_start,
            early_stop_tol: e.early_stop_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellSection {
    pub nodes: usize,
    pub width: usize,
    pub ops: Vec<String>,
}

impl Default for CellSection {
    fn default() -> Self {
        CellSection {
            nodes: 4,
            width: 16,
            ops: OpKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        }
    }
}

impl CellSection {
    pub fn build(&self) -> Result<CellSpec> {
        if self.nodes < 2 {
            return Err(Error::InvalidConfig("cell needs at least 2 nodes".into()));
        }
        let ops: Vec<OpKind> = self
            .ops
            .iter()
            .map(|s| {
                OpKind::parse(s)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown op kind `{s}`")))
            })
            .collect::<Result<_>>()?;
        if ops.is_empty() {
            return Err(Error::InvalidConfig("cell needs at least one op kind".into()));
        }
        Ok(CellSpec::fully_connected(self.nodes, self.width, &ops))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub files: Option<FilesSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub tasks: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub relatedness: f64,
    pub label_noise: f64,
    pub class_counts: Vec<usize>,
    /// (train, val, test) sample counts per task.
    pub samples: [usize; 3],
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticFamilyConfig::default();
        SyntheticSection {
            tasks: d.tasks,
            input_dim: d.input_dim,
            hidden: d.hidden,
            relatedness: d.relatedness,
            label_noise: d.label_noise,
            class_counts: d.class_counts,
            samples: [d.n_train, d.n_val, d.n_test],
            seed: d.seed,
        }
    }
}

impl SyntheticSection {
    pub fn to_core(&self) -> SyntheticFamilyConfig {
        SyntheticFamilyConfig {
            tasks: self.tasks,
            input_dim: self.input_dim,
            hidden: self.hidden,
            relatedness: self.relatedness,
            label_noise: self.label_noise,
            class_counts: self.class_counts.clone(),
            n_train: self.samples[0],
            n_val: self.samples[1],
            n_test: self.samples[2],
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesSection {
    pub paths: Vec<String>,
    pub class_counts: Vec<usize>,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambda_values: Vec<f64>,
    pub rounds_values: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            lambda_values: vec![0.0, 1.0, 10.0, 100.0, 1000.0],
            rounds_values: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainSection {
    pub steps: usize,
    pub eta: f64,
    pub batch_size: usize,
}

impl Default for RetrainSection {
    fn default() -> Self {
        let r = RetrainConfig::default();
        RetrainSection {
            steps: r.steps,
            eta: r.eta,
            batch_size: r.batch_size,
        }
    }
}

impl RetrainSection {
    pub fn to_core(&self, seed: u64) -> RetrainConfig {
        RetrainConfig {
            steps: self.steps,
            eta: self.eta,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub weight_instances: usize,
    pub weight_eps: f64,
    pub weight_tol: f64,
    pub hyper_eps: f64,
    pub hyper_tol: f64,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            weight_instances: 100,
            weight_eps: 1e-5,
            weight_tol: 1e-4,
            hyper_eps: 1e-4,
            hyper_tol: 1e-3,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        interleave_core::engine::Method::parse(&self.method)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{}`", self.method)))?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        match (&self.data.synthetic, &self.data.files) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "exactly one of data.synthetic / data.files is required".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of learners implied by the data source.
    pub fn learners(&self) -> usize {
        match (&self.data.synthetic, &self.data.files) {
            (Some(s), _) => s.tasks,
            (_, Some(f)) => f.paths.len(),
            _ => 0,
        }
    }

    /// Class counts per learner, in learner order.
    pub fn class_counts(&self) -> Vec<usize> {
        match (&self.data.synthetic, &self.data.files) {
            (Some(s), _) => s.class_counts.clone(),
            (_, Some(f)) => f.class_counts.clone(),
            _ => vec![],
        }
    }

    /// Learners ordered by class count descending, ties by learner index.
    pub fn default_task_order(&self) -> Vec<usize> {
        let counts = self.class_counts();
        let mut order: Vec<usize> = (1..=counts.len()).collect();
        order.sort_by_key(|&k| (std::cmp::Reverse(counts[k - 1]), k));
        order
    }

    /// Assemble the core engine config for one run seed.
    pub fn engine_config(&self, seed: u64) -> EngineConfig {
        let learners = self.learners();
        EngineConfig {
            learners,
            rounds: self.engine.rounds,
            lambda: self.engine.lambda,
            eta: self.engine.eta,
            eta_arch: self.engine.eta_arch,
            outer_iters: self.engine.outer_iters,
            hypergrad_mode: self.engine.hypergrad_mode,
            batch_size: self.engine.batch_size,
            seed,
            task_order: self
                .engine
                .task_order
                .clone()
                .unwrap_or_else(|| self.default_task_order()),
            mtl_weights: self
                .engine
                .mtl_weights
                .clone()
                .unwrap_or_else(|| vec![1.0; learners]),
            warm_start: self.engine.warm_start,
            early_stop_tol: self.engine.early_stop_tol.filter(|t| *t > 0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "[data.synthetic]\n"
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(minimal()).unwrap();
        assert_eq!(cfg.method, "il");
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.learners(), 2);
        // synthetic default classes (2, 5): learner 2 first
        assert_eq!(cfg.default_task_order(), vec![2, 1]);
        let e = cfg.engine_config(7);
        assert_eq!(e.seed, 7);
        assert_eq!(e.task_order, vec![2, 1]);
        assert_eq!(e.mtl_weights, vec![1.0, 1.0]);
    }

    #[test]
    fn round_trip_is_value_identical() {
        let text = r#"
            method = "blocked"
            seeds = [4, 5]
            [engine]
            lambda = 10.0
            task_order = [1, 2]
            [data.synthetic]
            tasks = 2
            class_counts = [3, 3]
            [sweep]
            lambda_values = [0.0, 10.0]
        "#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        let round = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, round);
    }

    #[test]
    fn requires_exactly_one_data_source() {
        assert!(ExperimentConfig::parse("method = \"il\"\n").is_err());
        let both = r#"
            [data.synthetic]
            [data.files]
            paths = ["x.csv"]
            class_counts = [2]
        "#;
        assert!(ExperimentConfig::parse(both).is_err());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_method() {
        assert!(ExperimentConfig::parse("nonsense = 3\n[data.synthetic]\n").is_err());
        assert!(
            ExperimentConfig::parse("method = \"zigzag\"\n[data.synthetic]\n").is_err()
        );
        assert!(ExperimentConfig::parse("seeds = []\n[data.synthetic]\n").is_err());
    }

    #[test]
    fn task_order_ties_break_by_index() {
        let text = r#"
            [data.synthetic]
            tasks = 3
            class_counts = [4, 4, 2]
        "#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.default_task_order(), vec![1, 2, 3]);
    }
}
