//! Flat key-value experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::class_weights::{ObjectiveTerms, TrackerMode};
use crate::data::{
    generate_synthetic, load_dataset_dir, DataPool, ImbalanceSpec, SplitSource, SuperclassMap,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::experts::ExpertTraining;
use crate::learner::Architecture;
use crate::selection::Rule;
use crate::simulator::CheckpointPolicy;

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackerKind {
    Full,
    Ewma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Softmax,
    Mlp,
}

/// Every knob of a run. Missing keys take the defaults below; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: u32,
    pub rule: Rule,
    pub seed: u64,

    /// Dataset directory (from `generate-data`) or CSV file; synthetic when unset.
    pub data_path: Option<PathBuf>,
    pub num_classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub n_test: usize,
    pub separation: f64,
    pub label_noise: f64,
    pub data_seed: u64,
    /// Split fractions for a bare CSV file; the remainder is the test split.
    pub train_fraction: f64,
    pub holdout_fraction: f64,
    pub split_seed: u64,
    pub standardize: bool,

    pub large_batch: usize,
    /// Selected points per step; 10% of `large_batch` when unset.
    pub small_batch: Option<usize>,
    pub steps: usize,
    pub eta: f64,
    pub gamma: f64,
    pub selection_pressure: f64,
    /// Clip excess losses at zero; on for reducr and off for payoff when unset.
    pub clip: Option<bool>,
    pub drop_model_loss: bool,
    pub drop_expert_loss: bool,
    pub drop_holdout_loss: bool,

    pub tracker: TrackerKind,
    pub ewma_decay: f64,
    pub ewma_batch: usize,
    /// Full-refresh period in steps; one epoch (`ceil(n_train / large_batch)`) when unset.
    pub refresh_period: Option<usize>,

    pub imbalance_classes: Vec<usize>,
    pub imbalance_p: Option<f64>,
    pub superclasses: Vec<Vec<usize>>,

    pub checkpoint: CheckpointPolicy,
    pub eval_every: usize,
    pub arch: ArchKind,
    pub hidden: usize,
    pub learning_rate: f64,

    pub expert_arch: Option<ArchKind>,
    pub expert_steps: usize,
    pub expert_batch: usize,
    pub expert_learning_rate: f64,
    pub expert_val_fraction: f64,
    pub expert_eval_every: usize,
    pub expert_seed: u64,
    /// Sample expert batches with the run's class imbalance.
    pub expert_imbalanced: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            spec_version: SPEC_VERSION,
            rule: Rule::Uniform,
            seed: 0,
            data_path: None,
            num_classes: 4,
            dim: 10,
            n_train: 8000,
            n_holdout: 2000,
            n_test: 2000,
            separation: 2.0,
            label_noise: 0.0,
            data_seed: 0,
            train_fraction: 0.6,
            holdout_fraction: 0.2,
            split_seed: 0,
            standardize: false,
            large_batch: 320,
            small_batch: None,
            steps: 3000,
            eta: 1e-4,
            gamma: 9.0,
            selection_pressure: 100.0,
            clip: None,
            drop_model_loss: false,
            drop_expert_loss: false,
            drop_holdout_loss: false,
            tracker: TrackerKind::Full,
            ewma_decay: 0.99,
            ewma_batch: 320,
            refresh_period: None,
            imbalance_classes: Vec::new(),
            imbalance_p: None,
            superclasses: Vec::new(),
            checkpoint: CheckpointPolicy::BestWorstClass,
            eval_every: 25,
            arch: ArchKind::Softmax,
            hidden: 32,
            learning_rate: 0.1,
            expert_arch: None,
            expert_steps: 2000,
            expert_batch: 64,
            expert_learning_rate: 0.1,
            expert_val_fraction: 0.2,
            expert_eval_every: 50,
            expert_seed: 0,
            expert_imbalanced: true,
        }
    }
}

/// Key names with one-line descriptions, for help output.
pub const KEYS: &[(&str, &str)] = &[
    ("spec_version", "config format version (1)"),
    ("rule", "uniform | trainloss | rholoss | reducr | payoff"),
    ("seed", "run seed"),
    (
        "data_path",
        "dataset directory or CSV file; synthetic data when unset",
    ),
    ("num_classes", "synthetic: number of classes"),
    ("dim", "synthetic: feature dimension"),
    ("n_train", "synthetic: train split size"),
    ("n_holdout", "synthetic: holdout split size"),
    ("n_test", "synthetic: test split size"),
    (
        "separation",
        "synthetic: distance of class means from the origin",
    ),
    ("label_noise", "synthetic: label flip rate in [0, 1)"),
    ("data_seed", "synthetic: generator seed"),
    (
        "train_fraction",
        "CSV file: fraction of rows in the train split",
    ),
    (
        "holdout_fraction",
        "CSV file: fraction of rows in the holdout split",
    ),
    ("split_seed", "CSV file: shuffle seed for split assignment"),
    (
        "standardize",
        "standardize features with train-split statistics",
    ),
    ("large_batch", "candidate batch size |B_t|"),
    (
        "small_batch",
        "selected points per step k (default 10% of large_batch)",
    ),
    ("steps", "number of training steps"),
    ("eta", "class-weight learning rate"),
    ("gamma", "expert up-weighting factor"),
    (
        "selection_pressure",
        "trainloss rank-sampling pressure (> 1)",
    ),
    (
        "clip",
        "clip excess losses at zero (default: on, off for payoff)",
    ),
    (
        "drop_model_loss",
        "ablation: drop the target-model loss term",
    ),
    ("drop_expert_loss", "ablation: drop the expert loss term"),
    (
        "drop_holdout_loss",
        "ablation: drop the class-holdout loss term",
    ),
    ("tracker", "class-holdout loss tracker: full | ewma"),
    ("ewma_decay", "EWMA decay in [0, 1]"),
    ("ewma_batch", "holdout batch size per EWMA update"),
    (
        "refresh_period",
        "full tracker refresh period in steps (default one epoch)",
    ),
    (
        "imbalance_classes",
        "classes drawn with probability imbalance_p each",
    ),
    (
        "imbalance_p",
        "per-class probability of the imbalanced classes",
    ),
    (
        "superclasses",
        "class groups, e.g. [[0, 1], [2, 3]]; identity when empty",
    ),
    ("checkpoint", "best-average | best-worst-class | final"),
    ("eval_every", "holdout evaluation cadence in steps"),
    ("arch", "target model: softmax | mlp"),
    ("hidden", "hidden units for mlp models"),
    ("learning_rate", "target model SGD learning rate"),
    (
        "expert_arch",
        "expert and reference model architecture (default: arch)",
    ),
    ("expert_steps", "expert SGD steps"),
    ("expert_batch", "expert batch size"),
    ("expert_learning_rate", "expert SGD learning rate"),
    (
        "expert_val_fraction",
        "holdout fraction used to pick expert checkpoints",
    ),
    ("expert_eval_every", "expert validation cadence in steps"),
    ("expert_seed", "expert training seed"),
    (
        "expert_imbalanced",
        "train experts with the run's class imbalance",
    ),
];

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        match table.get("spec_version") {
            None => {}
            Some(toml::Value::Integer(v)) if *v == SPEC_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::config(format!(
                    "unsupported spec_version {v} (expected {SPEC_VERSION})"
                )))
            }
        }
        Self::deserialize(table).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a config file (if any) and applies `key=value` overrides on top.
    /// Values are TOML literals; bare words are taken as strings.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            if !KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::config(format!("unknown config key {k:?}")));
            }
            table.insert(k.clone(), parse_value(v));
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn small_batch_size(&self) -> usize {
        self.small_batch
            .unwrap_or_else(|| ((self.large_batch as f64 * 0.1).round() as usize).max(1))
    }

    /// Checks everything that doesn't depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.spec_version != SPEC_VERSION {
            return bad(format!("unsupported spec_version {}", self.spec_version));
        }
        if self.large_batch == 0 {
            return bad("large_batch must be positive".into());
        }
        let k = self.small_batch_size();
        if k == 0 || k > self.large_batch {
            return bad(format!(
                "small_batch {k} must be in 1..={}",
                self.large_batch
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("gamma", self.gamma),
            ("expert_learning_rate", self.expert_learning_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.selection_pressure > 1.0) || !self.selection_pressure.is_finite() {
            return bad("selection_pressure must be > 1".into());
        }
        if !(0.0..=1.0).contains(&self.ewma_decay) {
            return bad("ewma_decay must be in [0, 1]".into());
        }
        for (name, v) in [
            ("eval_every", self.eval_every),
            ("ewma_batch", self.ewma_batch),
            ("expert_batch", self.expert_batch),
            ("expert_eval_every", self.expert_eval_every),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.refresh_period == Some(0) {
            return bad("refresh_period must be positive".into());
        }
        if self.imbalance_classes.is_empty() != self.imbalance_p.is_none() {
            return bad("imbalance_classes and imbalance_p must be set together".into());
        }
        if !(0.0..1.0).contains(&self.train_fraction)
            || !(0.0..1.0).contains(&self.holdout_fraction)
            || self.train_fraction + self.holdout_fraction > 1.0
        {
            return bad(
                "train_fraction and holdout_fraction must be in [0, 1) and sum to <= 1".into(),
            );
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            dim: self.dim,
            n_train: self.n_train,
            n_holdout: self.n_holdout,
            n_test: self.n_test,
            separation: self.separation,
            label_noise: self.label_noise,
            seed: self.data_seed,
        }
    }

    pub fn imbalance(&self, num_classes: usize) -> Result<Option<ImbalanceSpec>> {
        let Some(p) = self.imbalance_p else {
            return Ok(None);
        };
        let spec = ImbalanceSpec {
            classes: self.imbalance_classes.clone(),
            p,
        };
        spec.validate(num_classes)
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(Some(spec))
    }

    pub fn superclass_map(&self, num_classes: usize) -> Result<SuperclassMap> {
        if self.superclasses.is_empty() {
            Ok(SuperclassMap::identity(num_classes))
        } else {
            SuperclassMap::from_groups(&self.superclasses, num_classes)
                .map_err(|e| Error::config(e.to_string()))
        }
    }

    fn build_arch(&self, kind: ArchKind, inputs: usize, classes: usize) -> Architecture {
        match kind {
            ArchKind::Softmax => Architecture::SoftmaxRegression { inputs, classes },
            ArchKind::Mlp => Architecture::Mlp {
                inputs,
                hidden: self.hidden,
                classes,
            },
        }
    }

    pub fn architecture(&self, inputs: usize, classes: usize) -> Architecture {
        self.build_arch(self.arch, inputs, classes)
    }

    pub fn expert_architecture(&self, inputs: usize, classes: usize) -> Architecture {
        self.build_arch(self.expert_arch.unwrap_or(self.arch), inputs, classes)
    }

    pub fn clip_for_rule(&self) -> bool {
        self.clip.unwrap_or(self.rule != Rule::Payoff)
    }

    pub fn objective_terms(&self) -> ObjectiveTerms {
        ObjectiveTerms {
            model_loss: !self.drop_model_loss,
            expert_loss: !self.drop_expert_loss,
            holdout_loss: !self.drop_holdout_loss,
        }
    }

    pub fn tracker_mode(&self) -> TrackerMode {
        match self.tracker {
            TrackerKind::Full => TrackerMode::Full,
            TrackerKind::Ewma => TrackerMode::Ewma {
                decay: self.ewma_decay,
                batch_size: self.ewma_batch,
            },
        }
    }

    /// Steps between full tracker refreshes.
    pub fn refresh_period_for(&self, n_train: usize) -> usize {
        self.refresh_period
            .unwrap_or_else(|| n_train.div_ceil(self.large_batch).max(1))
    }

    pub fn expert_training(&self, num_classes: usize) -> Result<ExpertTraining> {
        Ok(ExpertTraining {
            steps: self.expert_steps,
            batch_size: self.expert_batch,
            learning_rate: self.expert_learning_rate,
            seed: self.expert_seed,
            val_fraction: self.expert_val_fraction,
            eval_every: self.expert_eval_every,
            imbalance: if self.expert_imbalanced {
                self.imbalance(num_classes)?
            } else {
                None
            },
        })
    }

    /// Loads or generates the dataset this config describes.
    pub fn load_pool(&self) -> Result<DataPool> {
        let pool = match &self.data_path {
            None => generate_synthetic(&self.synthetic_spec())?,
            Some(p) if p.is_dir() => load_dataset_dir(p)?,
            Some(p) => crate::data::load_csv(
                p,
                &crate::data::CsvSchema {
                    num_classes: None,
                    splits: SplitSource::Fractions {
                        train: self.train_fraction,
                        holdout: self.holdout_fraction,
                        seed: self.split_seed,
                    },
                },
            )?,
        };
        if self.standardize {
            pool.standardized()
        } else {
            Ok(pool)
        }
    }
}
