//! Amortised class-irreducible loss models ("experts") and the holdout
//! reference model.
//!
//! Each expert is trained on the holdout split with examples of its class (or
//! superclass) up-weighted by `1 + gamma`. The reference model uses the same
//! code path with every weight equal to 1. Experts are frozen once trained.

use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataPool, ImbalanceSpec, IndexSampler, Split, SuperclassMap};
use crate::error::{Error, Result};
use crate::learner::{Architecture, LearnerState, WeightedBatch};
use crate::numerics::Rng;

/// Budget and sampling knobs shared by every expert and the reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of the holdout split held back to pick the best checkpoint.
    /// Zero disables selection and keeps the final state.
    pub val_fraction: f64,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Draw training batches with this class imbalance.
    pub imbalance: Option<ImbalanceSpec>,
}

impl Default for ExpertTraining {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 0.1,
            seed: 0,
            val_fraction: 0.2,
            eval_every: 50,
            imbalance: None,
        }
    }
}

impl ExpertTraining {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("expert batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("expert learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("expert val_fraction must be in [0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("expert eval_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub state: LearnerState,
    /// Step of the kept checkpoint.
    pub best_step: u64,
    /// Weighted validation loss of the kept checkpoint (`None` without a
    /// validation slice).
    pub best_val_loss: Option<f64>,
    pub warnings: Vec<String>,
}

/// Splits the holdout indices into (train part, validation slice).
fn holdout_parts(pool: &DataPool, cfg: &ExpertTraining) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx = pool.split_indices(Split::Holdout).to_vec();
    if idx.is_empty() {
        return Err(Error::invalid("holdout split is empty"));
    }
    let n_val = (cfg.val_fraction * idx.len() as f64).round() as usize;
    if n_val == 0 {
        return Ok((idx, Vec::new()));
    }
    if n_val >= idx.len() {
        return Err(Error::invalid(
            "validation slice would consume the whole holdout split",
        ));
    }
    Rng::with_stream(cfg.seed, 1).shuffle(&mut idx);
    let val = idx.split_off(idx.len() - n_val);
    Ok((idx, val))
}

fn weighted_mean_loss(
    state: &LearnerState,
    pool: &DataPool,
    indices: &[usize],
    weight: &dyn Fn(usize) -> f64,
) -> Result<f64> {
    let batch = WeightedBatch::from_pool(pool, indices);
    let losses = state.per_example_loss(&batch)?;
    let total: f64 = losses
        .iter()
        .zip(indices)
        .map(|(l, &i)| weight(pool.label(i)) * l)
        .sum();
    Ok(total / indices.len() as f64)
}

/// Shared training loop: SGD on weighted holdout batches, keeping the state
/// with the lowest weighted validation loss (earliest on ties).
fn train_weighted(
    pool: &DataPool,
    arch: Architecture,
    weight: &dyn Fn(usize) -> f64,
    cfg: &ExpertTraining,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let (train_idx, val_idx) = holdout_parts(pool, cfg)?;
    let sampler = IndexSampler::new(pool, train_idx);
    let mut rng = Rng::with_stream(cfg.seed, 2);
    let mut state = LearnerState::init(arch, cfg.seed)?;
    let mut best = (state.clone(), 0u64, None::<f64>);
    if !val_idx.is_empty() {
        best.2 = Some(weighted_mean_loss(&state, pool, &val_idx, weight)?);
    }
    for step in 1..=cfg.steps {
        let idx = sampler.sample(cfg.batch_size, cfg.imbalance.as_ref(), &mut rng)?;
        let weights = idx.iter().map(|&i| weight(pool.label(i))).collect();
        let batch =
            WeightedBatch::weighted(idx.iter().map(|&i| pool.example(i)).collect(), weights)?;
        state = state.sgd_step(&batch, cfg.learning_rate)?;
        if !val_idx.is_empty() && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let loss = weighted_mean_loss(&state, pool, &val_idx, weight)?;
            if best.2.is_none_or(|b| loss < b) {
                best = (state.clone(), step as u64, Some(loss));
            }
        }
    }
    let (state, best_step, best_val_loss) = if val_idx.is_empty() {
        (state, cfg.steps as u64, None)
    } else {
        best
    };
    Ok(TrainedModel {
        state,
        best_step,
        best_val_loss,
        warnings: Vec::new(),
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(())
}

/// Expert for one class: weight `1 + gamma` on examples labeled `class`.
pub fn train_class_expert(
    pool: &DataPool,
    arch: Architecture,
    class: usize,
    gamma: f64,
    cfg: &ExpertTraining,
) -> Result<TrainedModel> {
    train_member_expert(pool, arch, &[class], gamma, cfg)
}

fn train_member_expert(
    pool: &DataPool,
    arch: Architecture,
    members: &[usize],
    gamma: f64,
    cfg: &ExpertTraining,
) -> Result<TrainedModel> {
    check_gamma(gamma)?;
    if let Some(&c) = members.iter().find(|&&c| c >= pool.num_classes()) {
        return Err(Error::invalid(format!("class {c} out of range")));
    }
    let mut in_group = vec![false; pool.num_classes()];
    for &c in members {
        in_group[c] = true;
    }
    let weight = move |y: usize| if in_group[y] { 1.0 + gamma } else { 1.0 };
    let mut model = train_weighted(pool, arch, &weight, cfg)?;
    let present: usize = members
        .iter()
        .map(|&c| pool.class_indices(Split::Holdout, c).len())
        .sum();
    if present == 0 {
        let msg =
            format!("classes {members:?} have no holdout examples; expert weights degenerate to 1");
        warn!("{msg}");
        model.warnings.push(msg);
    }
    Ok(model)
}

/// Holdout reference model for the RHO-Loss rule (all weights 1).
pub fn train_reference_model(
    pool: &DataPool,
    arch: Architecture,
    cfg: &ExpertTraining,
) -> Result<TrainedModel> {
    train_weighted(pool, arch, &|_| 1.0, cfg)
}

/// Frozen experts, one per superclass (one per class for the identity map).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    experts: Vec<LearnerState>,
    groups: SuperclassMap,
    gamma: f64,
    training: ExpertTraining,
}

impl ExpertBank {
    pub fn new(
        experts: Vec<LearnerState>,
        groups: SuperclassMap,
        gamma: f64,
        training: ExpertTraining,
    ) -> Result<Self> {
        if experts.len() != groups.num_groups() {
            return Err(Error::invalid(format!(
                "{} experts for {} groups",
                experts.len(),
                groups.num_groups()
            )));
        }
        let arch = experts[0].architecture();
        if experts.iter().any(|e| e.architecture() != arch) {
            return Err(Error::invalid("experts must share one architecture"));
        }
        if arch.classes() != groups.num_classes() {
            return Err(Error::invalid(
                "expert class count differs from the superclass map",
            ));
        }
        Ok(Self {
            experts,
            groups,
            gamma,
            training,
        })
    }

    /// A bank whose every entry is the same model, e.g. the reference.
    pub fn shared(model: LearnerState, groups: SuperclassMap) -> Result<Self> {
        let experts = vec![model; groups.num_groups()];
        Self::new(
            experts,
            groups,
            f64::MIN_POSITIVE,
            ExpertTraining::default(),
        )
    }

    pub fn experts(&self) -> &[LearnerState] {
        &self.experts
    }

    pub fn expert(&self, group: usize) -> &LearnerState {
        &self.experts[group]
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn groups(&self) -> &SuperclassMap {
        &self.groups
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn training(&self) -> &ExpertTraining {
        &self.training
    }
}

/// Trains one expert per group of `groups`, in parallel.
pub fn train_group_experts(
    pool: &DataPool,
    arch: Architecture,
    groups: &SuperclassMap,
    gamma: f64,
    cfg: &ExpertTraining,
) -> Result<(ExpertBank, Vec<TrainedModel>)> {
    check_gamma(gamma)?;
    if groups.num_classes() != pool.num_classes() {
        return Err(Error::invalid(
            "superclass map does not match the pool's classes",
        ));
    }
    let models = (0..groups.num_groups())
        .into_par_iter()
        .map(|g| train_member_expert(pool, arch, &groups.members(g), gamma, cfg))
        .collect::<Result<Vec<_>>>()?;
    let bank = ExpertBank::new(
        models.iter().map(|m| m.state.clone()).collect(),
        groups.clone(),
        gamma,
        cfg.clone(),
    )?;
    Ok((bank, models))
}

pub fn train_class_experts(
    pool: &DataPool,
    arch: Architecture,
    gamma: f64,
    cfg: &ExpertTraining,
) -> Result<(ExpertBank, Vec<TrainedModel>)> {
    train_group_experts(
        pool,
        arch,
        &SuperclassMap::identity(pool.num_classes()),
        gamma,
        cfg,
    )
}

/// `manifest.json` written next to the checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertManifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub gamma: f64,
    pub training: ExpertTraining,
    pub groups: Vec<Vec<usize>>,
    pub dataset_fingerprint: String,
    pub experts: Vec<ManifestEntry>,
    pub reference: ManifestEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub best_step: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REFERENCE_FILE: &str = "reference.bin";

pub fn expert_file_name(group: usize) -> String {
    format!("expert_{group}.bin")
}

/// Writes every expert checkpoint, the reference checkpoint and the manifest.
pub fn save_expert_dir(
    dir: &Path,
    bank: &ExpertBank,
    reports: &[TrainedModel],
    reference: &TrainedModel,
    dataset_fingerprint: &str,
) -> Result<ExpertManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut experts = Vec::new();
    for (g, state) in bank.experts().iter().enumerate() {
        let file = expert_file_name(g);
        state.save(&dir.join(&file))?;
        experts.push(ManifestEntry {
            file,
            seed: bank.training.seed,
            best_step: reports.get(g).map_or(state.steps(), |r| r.best_step),
        });
    }
    reference.state.save(&dir.join(REFERENCE_FILE))?;
    let manifest = ExpertManifest {
        format_version: 1,
        architecture: bank.experts[0].architecture(),
        gamma: bank.gamma,
        training: bank.training.clone(),
        groups: bank.groups.groups(),
        dataset_fingerprint: dataset_fingerprint.to_string(),
        experts,
        reference: ManifestEntry {
            file: REFERENCE_FILE.to_string(),
            seed: bank.training.seed,
            best_step: reference.best_step,
        },
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loaded contents of an experts directory.
#[derive(Debug, Clone)]
pub struct ExpertDir {
    pub manifest: ExpertManifest,
    pub bank: ExpertBank,
    pub reference: LearnerState,
    pub path: PathBuf,
}

pub fn load_expert_dir(dir: &Path) -> Result<ExpertDir> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ExpertManifest = serde_json::from_str(&text)?;
    if manifest.format_version != 1 {
        return Err(Error::invalid(format!(
            "unsupported experts manifest version {}",
            manifest.format_version
        )));
    }
    let experts = manifest
        .experts
        .iter()
        .map(|e| LearnerState::load(&dir.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    let reference = LearnerState::load(&dir.join(&manifest.reference.file))?;
    let groups = SuperclassMap::from_groups(&manifest.groups, manifest.architecture.classes())?;
    let bank = ExpertBank::new(experts, groups, manifest.gamma, manifest.training.clone())?;
    Ok(ExpertDir {
        manifest,
        bank,
        reference,
        path: dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn pool(seed: u64) -> DataPool {
        generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            dim: 4,
            n_train: 40,
            n_holdout: 800,
            n_test: 40,
            separation: 1.5,
            label_noise: 0.0,
            seed,
        })
        .unwrap()
    }

    fn arch() -> Architecture {
        Architecture::SoftmaxRegression {
            inputs: 4,
            classes: 4,
        }
    }

    fn cfg(seed: u64) -> ExpertTraining {
        ExpertTraining {
            steps: 300,
            batch_size: 32,
            learning_rate: 0.2,
            seed,
            val_fraction: 0.2,
            eval_every: 25,
            imbalance: None,
        }
    }

    #[test]
    fn reference_equals_unit_weight_path() {
        let p = pool(1);
        let a = train_reference_model(&p, arch(), &cfg(3)).unwrap();
        let b = train_weighted(&p, arch(), &|_| 1.0, &cfg(3)).unwrap();
        assert_eq!(a.state.to_bytes(), b.state.to_bytes());
        let again = train_reference_model(&p, arch(), &cfg(3)).unwrap();
        assert_eq!(a.state.to_bytes(), again.state.to_bytes());
    }

    #[test]
    fn tiny_gamma_approaches_reference() {
        let p = pool(2);
        let mut c = cfg(4);
        c.val_fraction = 0.0;
        let reference = train_reference_model(&p, arch(), &c).unwrap();
        let expert = train_class_expert(&p, arch(), 1, 1e-12, &c).unwrap();
        for (a, b) in reference.state.params().iter().zip(expert.state.params()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn trained_reference_beats_zero_init() {
        let p = pool(3);
        let zero = LearnerState::init(arch(), 0).unwrap();
        let trained = train_reference_model(&p, arch(), &cfg(0)).unwrap().state;
        let mean = |s: &LearnerState| {
            let e = s.evaluate(&p, Split::Holdout).unwrap();
            e.mean_loss.iter().flatten().sum::<f64>() / 4.0
        };
        assert!(mean(&trained) < mean(&zero));
    }

    #[test]
    fn expert_beats_reference_on_its_class() {
        let p = pool(5);
        let reference = train_reference_model(&p, arch(), &cfg(5)).unwrap().state;
        let ref_eval = reference.evaluate(&p, Split::Holdout).unwrap();
        let (bank, _) = train_class_experts(&p, arch(), 9.0, &cfg(5)).unwrap();
        assert_eq!(bank.len(), 4);
        for c in 0..4 {
            let e = bank.expert(c).evaluate(&p, Split::Holdout).unwrap();
            assert!(
                e.mean_loss[c].unwrap() < ref_eval.mean_loss[c].unwrap(),
                "class {c}"
            );
        }
    }

    #[test]
    fn grouped_bank_shapes() {
        let p = pool(6);
        let groups = SuperclassMap::from_groups(&[vec![0, 1], vec![2, 3]], 4).unwrap();
        let (bank, _) = train_group_experts(&p, arch(), &groups, 9.0, &cfg(6)).unwrap();
        assert_eq!(bank.len(), 2);
        let reference = train_reference_model(&p, arch(), &cfg(6)).unwrap().state;
        let r = reference.evaluate(&p, Split::Holdout).unwrap();
        for (g, members) in groups.groups().iter().enumerate() {
            let e = bank.expert(g).evaluate(&p, Split::Holdout).unwrap();
            let own = |ev: &crate::learner::Evaluation| {
                members
                    .iter()
                    .map(|&c| ev.mean_loss[c].unwrap())
                    .sum::<f64>()
            };
            assert!(own(&e) < own(&r));
        }
    }

    #[test]
    fn singleton_groups_match_class_experts() {
        let p = pool(7);
        let (a, _) = train_class_experts(&p, arch(), 9.0, &cfg(1)).unwrap();
        let groups = SuperclassMap::from_groups(&[vec![0], vec![1], vec![2], vec![3]], 4).unwrap();
        let (b, _) = train_group_experts(&p, arch(), &groups, 9.0, &cfg(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs() {
        let p = pool(8);
        assert!(train_class_expert(&p, arch(), 0, 0.0, &cfg(0)).is_err());
        let empty = DataPool::new(2, 1, vec![0.0], vec![0], vec![Split::Train]).unwrap();
        let a2 = Architecture::SoftmaxRegression {
            inputs: 1,
            classes: 2,
        };
        assert!(train_reference_model(&empty, a2, &cfg(0)).is_err());
    }

    #[test]
    fn absent_class_warns() {
        let p = DataPool::new(
            3,
            1,
            vec![0.0, 1.0, 2.0, 3.0],
            vec![0, 1, 0, 1],
            vec![Split::Holdout; 4],
        )
        .unwrap();
        let a = Architecture::SoftmaxRegression {
            inputs: 1,
            classes: 3,
        };
        let mut c = cfg(0);
        c.val_fraction = 0.0;
        c.steps = 5;
        let m = train_class_expert(&p, a, 2, 9.0, &c).unwrap();
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn expert_dir_round_trip() {
        let p = pool(9);
        let mut c = cfg(2);
        c.steps = 40;
        let (bank, reports) = train_class_experts(&p, arch(), 9.0, &c).unwrap();
        let reference = train_reference_model(&p, arch(), &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            save_expert_dir(dir.path(), &bank, &reports, &reference, &p.fingerprint()).unwrap();
        assert_eq!(manifest.gamma, 9.0);
        let loaded = load_expert_dir(dir.path()).unwrap();
        assert_eq!(loaded.bank, bank);
        assert_eq!(loaded.reference, reference.state);
        assert_eq!(loaded.manifest, manifest);
    }
}
