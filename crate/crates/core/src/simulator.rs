//! The online batch-selection training loop, checkpointing and sweeps.
//!
//! One step of a run:
//!
//! 1. full tracker refresh at the start of every refresh period (full mode);
//! 2. sample the candidate batch `B_t` from the train split;
//! 3. select `k` points with the configured rule;
//! 4. REDUCR and payoff compute `alpha` with the pre-step model, and REDUCR
//!    moves its class weights;
//! 5. one SGD step on the selected points (unit weights);
//! 6. EWMA tracker update with the new model (EWMA mode);
//! 7. holdout evaluation and checkpointing on evaluation steps.
//!
//! Seed streams: 0 learner init, 1 candidate sampling, 2 selection, 3 EWMA
//! holdout batches.

use std::io::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class_weights::{compute_alpha, ClassWeights, HoldoutLossTracker, TrackerMode};
use crate::config::ExperimentConfig;
use crate::data::{sample_large_batch, DataPool, Split};
use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::learner::{Architecture, Evaluation, LearnerState, WeightedBatch};
use crate::numerics::Rng;
use crate::reporting::{
    summarize_finals, CheckpointSummary, FinalRecord, Record, StepRecord, Summary, SCHEMA_VERSION,
};
use crate::selection::{select, Rule, SelectionContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    BestAverage,
    BestWorstClass,
    Final,
}

impl CheckpointPolicy {
    pub const ALL: [CheckpointPolicy; 3] = [
        CheckpointPolicy::BestAverage,
        CheckpointPolicy::BestWorstClass,
        CheckpointPolicy::Final,
    ];

    fn score(self, holdout: &Evaluation) -> Option<f64> {
        match self {
            CheckpointPolicy::BestAverage => holdout.average_accuracy(),
            CheckpointPolicy::BestWorstClass => holdout.worst_class_accuracy(),
            CheckpointPolicy::Final => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: CheckpointPolicy,
    pub step: usize,
    /// Holdout score the policy ranks by (`None` for the final policy).
    pub score: Option<f64>,
    pub state: LearnerState,
}

/// Folds one evaluated state into the best-so-far checkpoint. A strictly
/// better score replaces the incumbent; ties keep the earlier checkpoint.
pub fn checkpoint(
    policy: CheckpointPolicy,
    state: &LearnerState,
    step: usize,
    holdout: &Evaluation,
    best: Option<Checkpoint>,
) -> Checkpoint {
    let candidate = Checkpoint {
        policy,
        step,
        score: policy.score(holdout),
        state: state.clone(),
    };
    match best {
        Some(b) if policy != CheckpointPolicy::Final => match (candidate.score, b.score) {
            (Some(new), Some(old)) if new > old => candidate,
            (Some(_), None) => candidate,
            _ => b,
        },
        _ => candidate,
    }
}

/// Selected pool indices and labels, `k` per step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionLog {
    pub k: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl SelectionLog {
    pub fn num_steps(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn step(&self, t: usize) -> (&[usize], &[usize]) {
        let r = t * self.k..(t + 1) * self.k;
        (&self.indices[r.clone()], &self.labels[r])
    }

    /// Count of selected points per class over the whole run.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// One JSON line per step: `{"step":1,"indices":[..],"labels":[..]}`.
    pub fn write(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            indices: &'a [usize],
            labels: &'a [usize],
        }
        let mut text = Vec::new();
        for t in 0..self.num_steps() {
            let (indices, labels) = self.step(t);
            serde_json::to_writer(
                &mut text,
                &Line {
                    step: t + 1,
                    indices,
                    labels,
                },
            )?;
            text.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct PolicyResult {
    pub checkpoint: Checkpoint,
    pub test: Evaluation,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// One record per executed step.
    pub records: Vec<StepRecord>,
    pub final_record: FinalRecord,
    pub policies: Vec<PolicyResult>,
    pub selection_log: SelectionLog,
    pub final_state: LearnerState,
    pub final_weights: Option<ClassWeights>,
    /// Number of full tracker refreshes performed.
    pub tracker_refreshes: usize,
}

impl RunResult {
    pub fn policy(&self, policy: CheckpointPolicy) -> &PolicyResult {
        self.policies
            .iter()
            .find(|p| p.checkpoint.policy == policy)
            .expect("every policy is tracked")
    }

    /// Step records followed by the final record.
    pub fn all_records(&self) -> Vec<Record> {
        self.records
            .iter()
            .cloned()
            .map(Record::Step)
            .chain(std::iter::once(Record::Final(self.final_record.clone())))
            .collect()
    }
}

fn check_model(what: &str, arch: Architecture, pool: &DataPool) -> Result<()> {
    if arch.inputs() != pool.dim() || arch.classes() != pool.num_classes() {
        return Err(Error::config(format!(
            "{what} expects {} features and {} classes, dataset has {} and {}",
            arch.inputs(),
            arch.classes(),
            pool.dim(),
            pool.num_classes()
        )));
    }
    Ok(())
}

fn check_pool(pool: &DataPool) -> Result<()> {
    for split in Split::ALL {
        if pool.split_indices(split).is_empty() {
            return Err(Error::config(format!("{split} split is empty")));
        }
    }
    Ok(())
}

/// Runs one experiment. `experts` is required by reducr and payoff,
/// `reference` by rholoss; both are ignored otherwise.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    pool: &DataPool,
    experts: Option<&ExpertBank>,
    reference: Option<&LearnerState>,
) -> Result<RunResult> {
    cfg.validate()?;
    check_pool(pool)?;
    let num_classes = pool.num_classes();
    let rule = cfg.rule;
    let groups = cfg.superclass_map(num_classes)?;
    let imbalance = cfg.imbalance(num_classes)?;
    let arch = cfg.architecture(pool.dim(), num_classes);
    let k = cfg.small_batch_size();

    let experts = if rule.needs_experts() {
        let bank =
            experts.ok_or_else(|| Error::config(format!("rule {rule} needs trained experts")))?;
        if bank.groups() != &groups {
            return Err(Error::config(
                "expert bank groups differ from the configured superclasses",
            ));
        }
        check_model("expert bank", bank.expert(0).architecture(), pool)?;
        Some(bank)
    } else {
        None
    };
    let reference = if rule.needs_reference() {
        let r = reference
            .ok_or_else(|| Error::config(format!("rule {rule} needs a reference model")))?;
        check_model("reference model", r.architecture(), pool)?;
        Some(r)
    } else {
        None
    };

    let mut state = LearnerState::init(arch, cfg.seed)?;
    let mut sample_rng = Rng::with_stream(cfg.seed, 1);
    let mut select_rng = Rng::with_stream(cfg.seed, 2);
    let mut ewma_rng = Rng::with_stream(cfg.seed, 3);
    let mut weights = if rule.is_weighted() {
        Some(ClassWeights::uniform(groups.num_groups())?)
    } else {
        None
    };
    let mut tracker = if rule.needs_tracker() {
        Some(HoldoutLossTracker::new(cfg.tracker_mode(), groups.clone())?)
    } else {
        None
    };
    let period = cfg.refresh_period_for(pool.split_indices(Split::Train).len());
    let terms = cfg.objective_terms();

    let initial = state.evaluate(pool, Split::Holdout)?;
    let mut best: Vec<Checkpoint> = CheckpointPolicy::ALL
        .iter()
        .map(|&p| checkpoint(p, &state, 0, &initial, None))
        .collect();

    let mut records = Vec::with_capacity(cfg.steps);
    let mut log = SelectionLog {
        k,
        indices: Vec::with_capacity(k * cfg.steps),
        labels: Vec::with_capacity(k * cfg.steps),
    };
    let mut refreshes = 0;

    if let Some(t) = tracker.as_mut() {
        // EWMA mode starts from a full pass too; the first fold replaces it
        t.refresh_full(&state, pool)?;
        refreshes += 1;
    }

    for t in 0..cfg.steps {
        let step = t + 1;
        let mut one_step = || -> Result<StepRecord> {
            if let Some(tr) = tracker.as_mut() {
                if tr.mode() == TrackerMode::Full && t > 0 && t % period == 0 {
                    tr.refresh_full(&state, pool)?;
                    refreshes += 1;
                }
            }
            let idx =
                sample_large_batch(pool, cfg.large_batch, imbalance.as_ref(), &mut sample_rng)?;
            let candidates = WeightedBatch::from_pool(pool, &idx);
            let ctx = SelectionContext {
                target: &state,
                experts,
                reference,
                weights: weights.as_ref(),
                tracker: tracker.as_ref(),
                k,
                clip: cfg.clip_for_rule(),
                terms,
                selection_pressure: cfg.selection_pressure,
            };
            let result = select(rule, &candidates, &ctx, &mut select_rng)?;

            let mut alpha = None;
            if let (Some(losses), Some(tr)) = (&result.losses, tracker.as_ref()) {
                let a = compute_alpha(
                    &losses.select(&result.selected),
                    tr,
                    cfg.clip_for_rule(),
                    terms,
                )?;
                if let Some(w) = weights.as_mut() {
                    *w = w.update(&a, cfg.eta)?;
                }
                alpha = Some(a.values().to_vec());
            }

            let chosen: Vec<usize> = result.selected.iter().map(|&p| idx[p]).collect();
            let mut hist = vec![0; num_classes];
            for &i in &chosen {
                let y = pool.label(i);
                hist[y] += 1;
                log.indices.push(i);
                log.labels.push(y);
            }
            state = state.sgd_step(&WeightedBatch::from_pool(pool, &chosen), cfg.learning_rate)?;

            if let Some(tr) = tracker.as_mut() {
                if matches!(tr.mode(), TrackerMode::Ewma { .. }) {
                    tr.refresh_ewma(&state, pool, &mut ewma_rng)?;
                }
            }

            let mut record = StepRecord {
                schema_version: SCHEMA_VERSION,
                step,
                rule,
                seed: cfg.seed,
                holdout_accuracy: None,
                holdout_loss: None,
                worst_class_accuracy: None,
                average_accuracy: None,
                weights: weights.as_ref().map(|w| w.values().to_vec()),
                alpha,
                selected_labels: hist,
            };
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let ev = state.evaluate(pool, Split::Holdout)?;
                for b in best.iter_mut() {
                    *b = checkpoint(b.policy, &state, step, &ev, Some(b.clone()));
                }
                record.worst_class_accuracy = ev.worst_class_accuracy();
                record.average_accuracy = ev.average_accuracy();
                record.holdout_accuracy = Some(ev.accuracy);
                record.holdout_loss = Some(ev.mean_loss);
            }
            Ok(record)
        };
        let record = one_step().map_err(|e| Error::AtStep {
            step,
            source: Box::new(e),
        })?;
        records.push(record);
    }

    let policies = best
        .into_iter()
        .map(|cp| {
            let test = cp.state.evaluate(pool, Split::Test)?;
            Ok(PolicyResult {
                checkpoint: cp,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries: Vec<CheckpointSummary> = policies
        .iter()
        .map(|p| CheckpointSummary {
            policy: p.checkpoint.policy,
            step: p.checkpoint.step,
            test_accuracy: p.test.accuracy.clone(),
            worst_class_accuracy: p.test.worst_class_accuracy(),
            average_accuracy: p.test.average_accuracy(),
        })
        .collect();
    let primary = summaries
        .iter()
        .find(|s| s.policy == cfg.checkpoint)
        .expect("every policy is tracked")
        .clone();
    let final_record = FinalRecord {
        schema_version: SCHEMA_VERSION,
        rule,
        seed: cfg.seed,
        num_classes,
        dataset_fingerprint: pool.fingerprint(),
        steps: cfg.steps,
        policy: cfg.checkpoint,
        checkpoint_step: primary.step,
        test_accuracy: primary.test_accuracy,
        worst_class_accuracy: primary.worst_class_accuracy,
        average_accuracy: primary.average_accuracy,
        checkpoints: summaries,
        final_weights: weights.as_ref().map(|w| w.values().to_vec()),
    };
    Ok(RunResult {
        records,
        final_record,
        policies,
        selection_log: log,
        final_state: state,
        final_weights: weights,
        tracker_refreshes: refreshes,
    })
}

#[derive(Debug)]
pub struct SweepRun {
    pub rule: Rule,
    pub seed: u64,
    pub result: Result<RunResult>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    /// Runs in (rule, seed) input order.
    pub runs: Vec<SweepRun>,
    /// Aggregate over successful runs; `None` when every run failed.
    pub summary: Option<Summary>,
    pub warnings: Vec<String>,
}

/// Runs every (rule, seed) pair with at most `parallel` runs in flight.
/// Each run equals a standalone [`run_experiment`] with `rule` and `seed`
/// substituted into `template`.
pub fn sweep(
    template: &ExperimentConfig,
    rules: &[Rule],
    seeds: &[u64],
    pool: &DataPool,
    experts: Option<&ExpertBank>,
    reference: Option<&LearnerState>,
    parallel: usize,
) -> Result<SweepOutcome> {
    if seeds.is_empty() {
        return Err(Error::config("sweep needs at least one seed"));
    }
    if rules.is_empty() {
        return Err(Error::config("sweep needs at least one rule"));
    }
    let pairs: Vec<(Rule, u64)> = rules
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let work = |&(rule, seed): &(Rule, u64)| {
        let cfg = ExperimentConfig {
            rule,
            seed,
            ..template.clone()
        };
        SweepRun {
            rule,
            seed,
            result: run_experiment(&cfg, pool, experts, reference),
        }
    };
    let runs: Vec<SweepRun> = if parallel <= 1 {
        pairs.iter().map(work).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(|| pairs.par_iter().map(work).collect())
    };
    let mut warnings = Vec::new();
    for r in &runs {
        if let Err(e) = &r.result {
            let msg = format!("run {} seed {} failed: {e}", r.rule, r.seed);
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    let finals: Vec<FinalRecord> = runs
        .iter()
        .filter_map(|r| r.result.as_ref().ok().map(|x| x.final_record.clone()))
        .collect();
    let summary = if finals.is_empty() {
        None
    } else {
        Some(summarize_finals(&finals)?)
    };
    Ok(SweepOutcome {
        runs,
        summary,
        warnings,
    })
}
