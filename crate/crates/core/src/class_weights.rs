//! Class-priority reweighting.
//!
//! Weights live on the probability simplex over classes (or superclasses).
//! After each selection step every class receives an objective value
//!
//! ```text
//! alpha_c = sum_{(x,y) in b_t} excess_c(x, y) - holdout_loss_c
//! ```
//!
//! and the weights move multiplicatively, `w'_c ∝ w_c * exp(-eta * alpha_c)`,
//! so classes with a high holdout loss (or little to gain from the selected
//! points) gain weight. The update runs in log space with a max shift.

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, DataPool, Split, SuperclassMap};
use crate::error::{Error, Result};
use crate::learner::{LearnerState, WeightedBatch};
use crate::numerics::{log_sum_exp, Rng};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    /// Uniform `1/C` start.
    pub fn uniform(num: usize) -> Result<Self> {
        if num < 2 {
            return Err(Error::invalid("class weights need at least two entries"));
        }
        Ok(Self(vec![1.0 / num as f64; num]))
    }

    pub fn from_vec(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("class weights must be finite and >= 0"));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "class weights sum to {total}, not 1"
            )));
        }
        Ok(Self(w))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Multiplicative-weights step `w'_c = w_c e^{-eta a_c} / sum_j w_j e^{-eta a_j}`.
    /// `eta == 0` returns the weights unchanged, bit for bit.
    pub fn update(&self, alpha: &AlphaVector, eta: f64) -> Result<Self> {
        if alpha.len() != self.len() {
            return Err(Error::invalid(format!(
                "alpha has {} entries, weights have {}",
                alpha.len(),
                self.len()
            )));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("eta must be >= 0, got {eta}")));
        }
        if eta == 0.0 {
            return Ok(self.clone());
        }
        let logits: Vec<f64> = self
            .0
            .iter()
            .zip(alpha.values())
            .map(|(w, a)| w.ln() - eta * a)
            .collect();
        let lse = log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(Error::Numeric(format!(
                "weight update underflowed: weights {:?}, alpha {:?}, eta {eta}",
                self.0,
                alpha.values()
            )));
        }
        Ok(Self(logits.iter().map(|l| (l - lse).exp()).collect()))
    }
}

/// Per-class objective values for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector(Vec<f64>);

impl AlphaVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite alpha {values:?}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which terms of the selection objective are active. Everything on is the
/// full method; the other combinations are ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub model_loss: bool,
    pub expert_loss: bool,
    pub holdout_loss: bool,
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        Self {
            model_loss: true,
            expert_loss: true,
            holdout_loss: true,
        }
    }
}

/// Target and expert cross-entropies for a list of points.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    /// `target[i]`: loss of point `i` under the target model.
    pub target: Vec<f64>,
    /// `experts[g][i]`: loss of point `i` under expert `g`.
    pub experts: Vec<Vec<f64>>,
}

impl LossTable {
    pub fn compute(
        target: &LearnerState,
        experts: &[LearnerState],
        batch: &WeightedBatch<'_>,
    ) -> Result<Self> {
        Ok(Self {
            target: target.per_example_loss(batch)?,
            experts: experts
                .iter()
                .map(|e| e.per_example_loss(batch))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.experts.len()
    }

    /// Excess loss of point `i` against expert `g`.
    ///
    /// With both loss terms active this is `L_target - L_expert`, clipped at
    /// zero when `clip` is set. Dropping the model loss leaves `-L_expert`
    /// and dropping the expert term leaves `L_target`; clipping only applies
    /// to the full difference.
    pub fn excess(&self, g: usize, i: usize, clip: bool, terms: ObjectiveTerms) -> f64 {
        let t = self.target[i];
        let e = self.experts[g][i];
        match (terms.model_loss, terms.expert_loss) {
            (true, true) => {
                let d = t - e;
                if clip {
                    d.max(0.0)
                } else {
                    d
                }
            }
            (false, true) => -e,
            (true, false) => t,
            (false, false) => 0.0,
        }
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            target: rows.iter().map(|&i| self.target[i]).collect(),
            experts: self
                .experts
                .iter()
                .map(|col| rows.iter().map(|&i| col[i]).collect())
                .collect(),
        }
    }
}

/// `alpha_g = sum_i excess_g(i) - holdout_g` over the selected points.
pub fn compute_alpha(
    selected: &LossTable,
    tracker: &HoldoutLossTracker,
    clip: bool,
    terms: ObjectiveTerms,
) -> Result<AlphaVector> {
    let groups = tracker.len();
    if selected.num_groups() != groups {
        return Err(Error::invalid(format!(
            "{} expert loss columns for {groups} tracked classes",
            selected.num_groups()
        )));
    }
    if selected
        .experts
        .iter()
        .any(|col| col.len() != selected.len())
    {
        return Err(Error::invalid(
            "expert loss column length differs from the batch",
        ));
    }
    let values = (0..groups)
        .map(|g| {
            let excess: f64 = (0..selected.len())
                .map(|i| selected.excess(g, i, clip, terms))
                .sum();
            if terms.holdout_loss {
                excess - tracker.losses()[g]
            } else {
                excess
            }
        })
        .collect();
    AlphaVector::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TrackerMode {
    /// Recompute from the whole holdout split on a schedule.
    Full,
    /// Debiased EWMA over per-step holdout batches.
    Ewma { decay: f64, batch_size: usize },
}

/// Per-class (or per-group) mean holdout cross-entropy of the target model.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutLossTracker {
    mode: TrackerMode,
    groups: SuperclassMap,
    losses: Vec<f64>,
    raw: Vec<f64>,
    updates: Vec<u32>,
    // running arithmetic mean for decay == 1, the limit of the debiased EWMA
    sums: Vec<f64>,
}

impl HoldoutLossTracker {
    /// Tracker with zero losses; call [`Self::refresh_full`] before use.
    pub fn new(mode: TrackerMode, groups: SuperclassMap) -> Result<Self> {
        if let TrackerMode::Ewma { decay, batch_size } = mode {
            if !(0.0..=1.0).contains(&decay) {
                return Err(Error::invalid(format!("EWMA decay {decay} outside [0, 1]")));
            }
            if batch_size == 0 {
                return Err(Error::invalid("EWMA holdout batch size must be positive"));
            }
        }
        let n = groups.num_groups();
        Ok(Self {
            mode,
            groups,
            losses: vec![0.0; n],
            raw: vec![0.0; n],
            updates: vec![0; n],
            sums: vec![0.0; n],
        })
    }

    pub fn mode(&self) -> TrackerMode {
        self.mode
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn groups(&self) -> &SuperclassMap {
        &self.groups
    }

    /// Mean target loss per group over `indices`; `None` for absent groups.
    fn group_means(
        &self,
        target: &LearnerState,
        pool: &DataPool,
        indices: &[usize],
    ) -> Result<Vec<Option<f64>>> {
        let batch = WeightedBatch::from_pool(pool, indices);
        let losses = target.per_example_loss(&batch)?;
        let n = self.len();
        let mut sum = vec![0.0; n];
        let mut count = vec![0usize; n];
        for (&i, l) in indices.iter().zip(&losses) {
            let g = self.groups.group_of(pool.label(i));
            sum[g] += l;
            count[g] += 1;
        }
        Ok((0..n)
            .map(|g| (count[g] > 0).then(|| sum[g] / count[g] as f64))
            .collect())
    }

    /// Replaces every entry with the group mean over the full holdout split.
    /// Resets the EWMA state.
    pub fn refresh_full(&mut self, target: &LearnerState, pool: &DataPool) -> Result<()> {
        let means = self.group_means(target, pool, pool.split_indices(Split::Holdout))?;
        for (g, m) in means.iter().enumerate() {
            match m {
                Some(v) => self.losses[g] = *v,
                None => {
                    return Err(Error::config(format!(
                        "class group {g} has no holdout examples"
                    )))
                }
            }
        }
        self.raw.iter_mut().for_each(|v| *v = 0.0);
        self.sums.iter_mut().for_each(|v| *v = 0.0);
        self.updates.iter_mut().for_each(|v| *v = 0);
        Ok(())
    }

    /// Samples a uniform holdout batch and folds its group means into the
    /// debiased EWMA.
    pub fn refresh_ewma(
        &mut self,
        target: &LearnerState,
        pool: &DataPool,
        rng: &mut Rng,
    ) -> Result<()> {
        let TrackerMode::Ewma { batch_size, .. } = self.mode else {
            return Err(Error::invalid("tracker is not in EWMA mode"));
        };
        let idx = sample_batch(pool, Split::Holdout, batch_size, None, rng)?;
        let means = self.group_means(target, pool, &idx)?;
        self.observe(&means)
    }

    /// EWMA fold of one set of group means:
    /// `raw <- a * raw + (1 - a) * mean`, stored value `raw / (1 - a^n)` with
    /// `n` the number of folds for that group. Groups with `None` keep their
    /// previous value. With `a == 1` the stored value is the running mean.
    pub fn observe(&mut self, means: &[Option<f64>]) -> Result<()> {
        let TrackerMode::Ewma { decay: a, .. } = self.mode else {
            return Err(Error::invalid("tracker is not in EWMA mode"));
        };
        if means.len() != self.len() {
            return Err(Error::invalid("batch means length differs from tracker"));
        }
        for (g, m) in means.iter().enumerate() {
            let Some(m) = *m else { continue };
            self.updates[g] += 1;
            let n = self.updates[g];
            if a == 1.0 {
                self.sums[g] += m;
                self.losses[g] = self.sums[g] / n as f64;
            } else {
                self.raw[g] = a * self.raw[g] + (1.0 - a) * m;
                self.losses[g] = self.raw[g] / (1.0 - a.powi(n as i32));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::learner::Architecture;
    use proptest::prelude::*;

    fn table(target: Vec<f64>, experts: Vec<Vec<f64>>) -> LossTable {
        LossTable { target, experts }
    }

    fn tracker_with(losses: Vec<f64>) -> HoldoutLossTracker {
        let mut t =
            HoldoutLossTracker::new(TrackerMode::Full, SuperclassMap::identity(losses.len()))
                .unwrap();
        t.losses = losses;
        t
    }

    #[test]
    fn uniform_init() {
        let w = ClassWeights::uniform(10).unwrap();
        assert!(w.values().iter().all(|&v| v == 0.1));
        assert_eq!(ClassWeights::uniform(2).unwrap().values(), &[0.5, 0.5]);
        assert!(ClassWeights::from_vec(w.values().to_vec()).is_ok());
        assert!(ClassWeights::uniform(1).is_err());
    }

    #[test]
    fn alpha_arithmetic() {
        let terms = ObjectiveTerms::default();
        let t = table(vec![2.0], vec![vec![0.5], vec![0.5]]);
        let a = compute_alpha(&t, &tracker_with(vec![0.7, 0.7]), true, terms).unwrap();
        assert!((a.values()[0] - 0.8).abs() < 1e-15);

        let t = table(vec![0.3], vec![vec![0.9], vec![0.9]]);
        let a = compute_alpha(&t, &tracker_with(vec![0.7, 0.7]), true, terms).unwrap();
        assert_eq!(a.values()[0], -0.7);
        let unclipped = compute_alpha(&t, &tracker_with(vec![0.7, 0.7]), false, terms).unwrap();
        assert!((unclipped.values()[0] - (-0.6 - 0.7)).abs() < 1e-15);

        let empty = table(vec![], vec![vec![], vec![]]);
        let a = compute_alpha(&empty, &tracker_with(vec![0.7, 1.1]), true, terms).unwrap();
        assert_eq!(a.values(), &[-0.7, -1.1]);
    }

    #[test]
    fn alpha_needs_every_expert() {
        let t = table(vec![1.0], vec![vec![0.5]]);
        assert!(compute_alpha(
            &t,
            &tracker_with(vec![0.1, 0.2]),
            true,
            ObjectiveTerms::default()
        )
        .is_err());
    }

    #[test]
    fn update_cases() {
        let w = ClassWeights::uniform(2).unwrap();
        let a = AlphaVector::new(vec![0.0, 2f64.ln()]).unwrap();
        let next = w.update(&a, 1.0).unwrap();
        assert!((next.values()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((next.values()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(w.update(&a, 0.0).unwrap(), w);
        let skew = ClassWeights::from_vec(vec![0.2, 0.3, 0.5]).unwrap();
        let same = skew
            .update(&AlphaVector::new(vec![4.0; 3]).unwrap(), 0.7)
            .unwrap();
        for (x, y) in same.values().iter().zip(skew.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn extreme_alpha_stays_on_simplex() {
        let w = ClassWeights::uniform(3).unwrap();
        let a = AlphaVector::new(vec![1e6, 0.0, -1e6]).unwrap();
        let next = w.update(&a, 1.0).unwrap();
        assert_eq!(next.values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn full_refresh_matches_evaluate() {
        let pool = generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            dim: 3,
            n_train: 10,
            n_holdout: 200,
            n_test: 10,
            separation: 2.0,
            label_noise: 0.1,
            seed: 2,
        })
        .unwrap();
        let arch = Architecture::Mlp {
            inputs: 3,
            hidden: 5,
            classes: 4,
        };
        let state = LearnerState::init(arch, 5).unwrap();
        let mut t = HoldoutLossTracker::new(TrackerMode::Full, SuperclassMap::identity(4)).unwrap();
        t.refresh_full(&state, &pool).unwrap();
        let eval = state.evaluate(&pool, Split::Holdout).unwrap();
        for c in 0..4 {
            assert_eq!(
                t.losses()[c].to_bits(),
                eval.mean_loss[c].unwrap().to_bits()
            );
        }

        let zero = LearnerState::init(
            Architecture::SoftmaxRegression {
                inputs: 3,
                classes: 4,
            },
            0,
        )
        .unwrap();
        t.refresh_full(&zero, &pool).unwrap();
        assert!(t.losses().iter().all(|l| (l - 4f64.ln()).abs() < 1e-12));

        // grouped tracker: mean over member examples
        let groups = SuperclassMap::from_groups(&[vec![0, 1], vec![2, 3]], 4).unwrap();
        let mut g = HoldoutLossTracker::new(TrackerMode::Full, groups).unwrap();
        g.refresh_full(&state, &pool).unwrap();
        assert_eq!(g.len(), 2);
        let n = &eval.counts;
        let m = &eval.mean_loss;
        let want0 =
            (m[0].unwrap() * n[0] as f64 + m[1].unwrap() * n[1] as f64) / (n[0] + n[1]) as f64;
        assert!((g.losses()[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn perfect_target_has_near_zero_holdout_loss() {
        let pool = DataPool::new(
            2,
            1,
            vec![-1.0, 1.0],
            vec![0, 1],
            vec![Split::Holdout, Split::Holdout],
        )
        .unwrap();
        let arch = Architecture::SoftmaxRegression {
            inputs: 1,
            classes: 2,
        };
        let state = LearnerState::from_params(arch, vec![-50.0, 50.0, 0.0, 0.0], 0).unwrap();
        let mut t = HoldoutLossTracker::new(TrackerMode::Full, SuperclassMap::identity(2)).unwrap();
        t.refresh_full(&state, &pool).unwrap();
        assert!(t.losses().iter().all(|&l| l < 1e-12));
    }

    #[test]
    fn missing_holdout_class_is_config_error() {
        let pool = DataPool::new(2, 1, vec![0.0], vec![0], vec![Split::Holdout]).unwrap();
        let state = LearnerState::init(
            Architecture::SoftmaxRegression {
                inputs: 1,
                classes: 2,
            },
            0,
        )
        .unwrap();
        let mut t = HoldoutLossTracker::new(TrackerMode::Full, SuperclassMap::identity(2)).unwrap();
        assert!(matches!(
            t.refresh_full(&state, &pool),
            Err(Error::Config(_))
        ));
    }

    fn ewma(decay: f64, n: usize) -> HoldoutLossTracker {
        HoldoutLossTracker::new(
            TrackerMode::Ewma {
                decay,
                batch_size: 8,
            },
            SuperclassMap::identity(n),
        )
        .unwrap()
    }

    #[test]
    fn ewma_two_step_hand_values() {
        let mut t = ewma(0.9, 2);
        t.observe(&[Some(1.0), None]).unwrap();
        // raw = 0.1, debiased 0.1 / 0.1
        assert!((t.losses()[0] - 1.0).abs() < 1e-12);
        t.observe(&[Some(2.0), None]).unwrap();
        // raw = 0.09 + 0.2 = 0.29, debiased 0.29 / 0.19
        assert!((t.losses()[0] - 0.29 / 0.19).abs() < 1e-12);
        assert!((t.losses()[0] - 1.526315789473684).abs() < 1e-12);
        assert_eq!(t.losses()[1], 0.0);
    }

    #[test]
    fn ewma_zero_decay_tracks_latest() {
        let mut t = ewma(0.0, 2);
        for m in [0.3, 1.7, 0.9] {
            t.observe(&[Some(m), Some(2.0 * m)]).unwrap();
            assert_eq!(t.losses(), &[m, 2.0 * m]);
        }
    }

    #[test]
    fn ewma_fixed_point_and_unit_decay() {
        let mut t = ewma(0.99, 1);
        for _ in 0..50 {
            t.observe(&[Some(0.625)]).unwrap();
            assert!((t.losses()[0] - 0.625).abs() < 1e-12);
        }
        let mut u = ewma(1.0, 1);
        u.observe(&[Some(1.0)]).unwrap();
        u.observe(&[Some(2.0)]).unwrap();
        assert_eq!(u.losses()[0], 1.5);
        assert!(HoldoutLossTracker::new(
            TrackerMode::Ewma {
                decay: 1.5,
                batch_size: 1
            },
            SuperclassMap::identity(2)
        )
        .is_err());
    }

    fn simplex_sum(w: &ClassWeights) -> f64 {
        w.values().iter().sum()
    }

    proptest! {
        #[test]
        fn updates_stay_on_simplex_and_telescope(
            alphas in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 4), 1..60),
            eta in 0.0f64..0.5,
        ) {
            let mut w = ClassWeights::uniform(4).unwrap();
            let mut cum = [0.0f64; 4];
            for a in &alphas {
                w = w.update(&AlphaVector::new(a.clone()).unwrap(), eta).unwrap();
                prop_assert!((simplex_sum(&w) - 1.0).abs() < 1e-9);
                prop_assert!(w.values().iter().all(|&v| v >= 0.0));
                for (c, v) in a.iter().enumerate() {
                    cum[c] += v;
                }
            }
            let logits: Vec<f64> = cum.iter().map(|s| -eta * s).collect();
            let lse = log_sum_exp(&logits);
            for (v, l) in w.values().iter().zip(&logits) {
                prop_assert!((v - (l - lse).exp()).abs() < 1e-9);
            }
        }

        #[test]
        fn lower_alpha_grows_more(
            w0 in prop::collection::vec(0.05f64..1.0, 3),
            a in prop::collection::vec(-5.0f64..5.0, 3),
            eta in 0.01f64..2.0,
        ) {
            let total: f64 = w0.iter().sum();
            let w = ClassWeights::from_vec(w0.iter().map(|v| v / total).collect()).unwrap();
            let next = w.update(&AlphaVector::new(a.clone()).unwrap(), eta).unwrap();
            for c in 0..3 {
                for j in 0..3 {
                    if a[c] < a[j] - 1e-9 {
                        let rc = next.values()[c] / w.values()[c];
                        let rj = next.values()[j] / w.values()[j];
                        prop_assert!(rc > rj);
                    }
                }
            }
        }

        #[test]
        fn higher_holdout_loss_raises_weight(
            target in prop::collection::vec(0.0f64..3.0, 1..6),
            bump in 0.01f64..2.0,
            eta in 0.01f64..1.0,
        ) {
            let n = target.len();
            let experts = vec![vec![0.5; n], vec![0.8; n], vec![0.2; n]];
            let t = table(target, experts);
            let w = ClassWeights::uniform(3).unwrap();
            let base = tracker_with(vec![0.4, 0.6, 0.9]);
            let mut raised = base.clone();
            raised.losses[1] += bump;
            let terms = ObjectiveTerms::default();
            let w_base = w.update(&compute_alpha(&t, &base, true, terms).unwrap(), eta).unwrap();
            let w_raised = w.update(&compute_alpha(&t, &raised, true, terms).unwrap(), eta).unwrap();
            prop_assert!(w_raised.values()[1] > w_base.values()[1]);
        }

        #[test]
        fn only_eta_times_alpha_matters(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0, 8.0]),
            eta in 0.01f64..1.0,
        ) {
            let w = ClassWeights::from_vec(vec![0.5, 0.25, 0.25]).unwrap();
            let x = w.update(&AlphaVector::new(a.clone()).unwrap(), eta).unwrap();
            let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
            let y = w.update(&AlphaVector::new(scaled).unwrap(), eta / scale).unwrap();
            for (p, q) in x.values().iter().zip(y.values()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
