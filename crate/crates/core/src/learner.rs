//! Small differentiable classifiers trained by plain SGD.
//!
//! One [`LearnerState`] type serves as the target model, every class expert,
//! and the holdout reference model. Parameters live in one flat `Vec<f64>`:
//!
//! * softmax regression `(d, C)`: `W` (`C x d`, row-major) then `b` (`C`);
//! * one-hidden-layer MLP `(d, h, C)` with `tanh` activation:
//!   `W1` (`h x d`), `b1` (`h`), `W2` (`C x h`), `b2` (`C`).
//!
//! The training objective for a [`WeightedBatch`] of `n` examples is the
//! weight-scaled mean cross-entropy `(1/n) * sum_i w_i * CE_i`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataPool, Split};
use crate::error::{Error, Result};
use crate::numerics::{log_softmax_into, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    SoftmaxRegression {
        inputs: usize,
        classes: usize,
    },
    Mlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match *self {
            Architecture::SoftmaxRegression { inputs, .. } | Architecture::Mlp { inputs, .. } => {
                inputs
            }
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::SoftmaxRegression { classes, .. } | Architecture::Mlp { classes, .. } => {
                classes
            }
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Architecture::SoftmaxRegression { inputs, classes } => classes * inputs + classes,
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => hidden * inputs + hidden + classes * hidden + classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.inputs() < 1 {
            return Err(Error::invalid("learner needs at least one input feature"));
        }
        if self.classes() < 2 {
            return Err(Error::invalid("learner needs at least two classes"));
        }
        if let Architecture::Mlp { hidden: 0, .. } = self {
            return Err(Error::invalid("MLP hidden width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    arch: Architecture,
    params: Vec<f64>,
    steps: u64,
}

/// One labeled example borrowed from a pool.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct WeightedBatch<'a> {
    examples: Vec<Example<'a>>,
    weights: Vec<f64>,
}

impl<'a> WeightedBatch<'a> {
    pub fn unweighted(examples: Vec<Example<'a>>) -> Self {
        let weights = vec![1.0; examples.len()];
        Self { examples, weights }
    }

    pub fn weighted(examples: Vec<Example<'a>>, weights: Vec<f64>) -> Result<Self> {
        if examples.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} examples but {} weights",
                examples.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("batch weights must be finite and >= 0"));
        }
        Ok(Self { examples, weights })
    }

    /// Gathers `indices` from `pool` with unit weights.
    pub fn from_pool(pool: &'a DataPool, indices: &[usize]) -> Self {
        Self::unweighted(indices.iter().map(|&i| pool.example(i)).collect())
    }

    pub fn examples(&self) -> &[Example<'a>] {
        &self.examples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Per-class accuracy and mean loss. Classes with no examples are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: Vec<Option<f64>>,
    pub mean_loss: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl Evaluation {
    pub fn worst_class_accuracy(&self) -> Option<f64> {
        self.accuracy.iter().flatten().copied().reduce(f64::min)
    }

    /// Mean of the defined per-class accuracies.
    pub fn average_accuracy(&self) -> Option<f64> {
        let defined: Vec<f64> = self.accuracy.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

impl LearnerState {
    /// Softmax regression starts at zero; MLP weights are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.num_params()];
        if let Architecture::Mlp {
            inputs,
            hidden,
            classes,
        } = arch
        {
            let mut rng = Rng::new(seed);
            let s1 = 1.0 / (inputs as f64).sqrt();
            let s2 = 1.0 / (hidden as f64).sqrt();
            let (w1, rest) = params.split_at_mut(hidden * inputs);
            let (_b1, rest) = rest.split_at_mut(hidden);
            let (w2, _b2) = rest.split_at_mut(classes * hidden);
            for w in w1 {
                *w = s1 * (2.0 * rng.uniform() - 1.0);
            }
            for w in w2 {
                *w = s2 * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(Self {
            arch,
            params,
            steps: 0,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>, steps: u64) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::invalid(format!(
                "architecture needs {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite learner parameter".into()));
        }
        Ok(Self {
            arch,
            params,
            steps,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classes()
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.arch.inputs() {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match learner input {}",
                features.len(),
                self.arch.inputs()
            )));
        }
        Ok(())
    }

    /// Writes logits into `logits`; for the MLP also fills `hidden_act`.
    fn forward_into(&self, x: &[f64], logits: &mut [f64], hidden_act: &mut Vec<f64>) {
        let p = &self.params;
        match self.arch {
            Architecture::SoftmaxRegression { inputs, classes } => {
                let bias = &p[classes * inputs..];
                for c in 0..classes {
                    let row = &p[c * inputs..(c + 1) * inputs];
                    logits[c] = bias[c] + dot(row, x);
                }
            }
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let (w1, rest) = p.split_at(hidden * inputs);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                hidden_act.clear();
                hidden_act.extend(
                    (0..hidden).map(|j| (b1[j] + dot(&w1[j * inputs..(j + 1) * inputs], x)).tanh()),
                );
                for c in 0..classes {
                    logits[c] = b2[c] + dot(&w2[c * hidden..(c + 1) * hidden], hidden_act);
                }
            }
        }
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        let mut logits = vec![0.0; self.arch.classes()];
        self.forward_into(features, &mut logits, &mut Vec::new());
        Ok(logits)
    }

    /// Cross-entropy of every example in the batch; weights are ignored.
    pub fn per_example_loss(&self, batch: &WeightedBatch<'_>) -> Result<Vec<f64>> {
        self.losses(batch.examples())
    }

    pub fn losses(&self, examples: &[Example<'_>]) -> Result<Vec<f64>> {
        let classes = self.arch.classes();
        let mut logits = vec![0.0; classes];
        let mut lp = vec![0.0; classes];
        let mut hidden = Vec::new();
        examples
            .iter()
            .map(|ex| {
                self.check_dim(ex.features)?;
                check_label(ex.label, classes)?;
                self.forward_into(ex.features, &mut logits, &mut hidden);
                log_softmax_into(&logits, &mut lp);
                Ok(0.0 - lp[ex.label])
            })
            .collect()
    }

    /// Analytic gradient of the weighted mean cross-entropy, in the flat
    /// parameter layout. Examples are accumulated in batch order.
    pub fn gradient(&self, batch: &WeightedBatch<'_>) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        let n = batch.len();
        if n == 0 {
            return Ok(grad);
        }
        let classes = self.arch.classes();
        let mut logits = vec![0.0; classes];
        let mut delta = vec![0.0; classes];
        let mut hidden = Vec::new();
        let mut dhidden = Vec::new();
        for (ex, &w) in batch.examples().iter().zip(batch.weights()) {
            self.check_dim(ex.features)?;
            check_label(ex.label, classes)?;
            if w == 0.0 {
                continue;
            }
            let scale = w / n as f64;
            self.forward_into(ex.features, &mut logits, &mut hidden);
            log_softmax_into(&logits, &mut delta);
            // dCE/dlogits = softmax - onehot
            for (c, d) in delta.iter_mut().enumerate() {
                *d = scale * (d.exp() - if c == ex.label { 1.0 } else { 0.0 });
            }
            match self.arch {
                Architecture::SoftmaxRegression { inputs, classes } => {
                    let (gw, gb) = grad.split_at_mut(classes * inputs);
                    for c in 0..classes {
                        axpy(delta[c], ex.features, &mut gw[c * inputs..(c + 1) * inputs]);
                        gb[c] += delta[c];
                    }
                }
                Architecture::Mlp {
                    inputs,
                    hidden: h,
                    classes,
                } => {
                    let w2 = &self.params[h * inputs + h..h * inputs + h + classes * h];
                    let (gw1, rest) = grad.split_at_mut(h * inputs);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(classes * h);
                    dhidden.clear();
                    dhidden.resize(h, 0.0);
                    for c in 0..classes {
                        axpy(delta[c], &hidden, &mut gw2[c * h..(c + 1) * h]);
                        gb2[c] += delta[c];
                        axpy(delta[c], &w2[c * h..(c + 1) * h], &mut dhidden);
                    }
                    for j in 0..h {
                        let dz = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                        axpy(dz, ex.features, &mut gw1[j * inputs..(j + 1) * inputs]);
                        gb1[j] += dz;
                    }
                }
            }
        }
        Ok(grad)
    }

    /// One plain SGD step: `params <- params - lr * grad`.
    pub fn sgd_step(&self, batch: &WeightedBatch<'_>, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be a positive number"));
        }
        let grad = self.gradient(batch)?;
        let params: Vec<f64> = self
            .params
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - learning_rate * g)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!(
                "SGD step {} produced non-finite parameters (lr {learning_rate})",
                self.steps + 1
            )));
        }
        Ok(Self {
            arch: self.arch,
            params,
            steps: self.steps + 1,
        })
    }

    /// Per-class accuracy and mean loss over one split of `pool`.
    pub fn evaluate(&self, pool: &DataPool, split: Split) -> Result<Evaluation> {
        let indices = pool.split_indices(split);
        if indices.is_empty() {
            return Err(Error::invalid(format!("{split} split is empty")));
        }
        self.evaluate_indices(pool, indices)
    }

    pub fn evaluate_indices(&self, pool: &DataPool, indices: &[usize]) -> Result<Evaluation> {
        let classes = self.arch.classes();
        if pool.num_classes() != classes {
            return Err(Error::invalid(format!(
                "pool has {} classes, learner has {classes}",
                pool.num_classes()
            )));
        }
        let mut correct = vec![0usize; classes];
        let mut loss_sum = vec![0.0; classes];
        let mut counts = vec![0usize; classes];
        let mut logits = vec![0.0; classes];
        let mut lp = vec![0.0; classes];
        let mut hidden = Vec::new();
        for &i in indices {
            let ex = pool.example(i);
            self.check_dim(ex.features)?;
            self.forward_into(ex.features, &mut logits, &mut hidden);
            log_softmax_into(&logits, &mut lp);
            counts[ex.label] += 1;
            loss_sum[ex.label] += 0.0 - lp[ex.label];
            if argmax(&logits) == ex.label {
                correct[ex.label] += 1;
            }
        }
        let per_class = |num: &dyn Fn(usize) -> f64| -> Vec<Option<f64>> {
            (0..classes)
                .map(|c| (counts[c] > 0).then(|| num(c) / counts[c] as f64))
                .collect()
        };
        Ok(Evaluation {
            accuracy: per_class(&|c| correct[c] as f64),
            mean_loss: per_class(&|c| loss_sum[c]),
            counts,
        })
    }

    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(features)?))
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// First index of the maximum.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// Checkpoint layout (all integers and floats little-endian):
//   magic    8 bytes  "RDCRLRN\0"
//   version  u32      = 1
//   kind     u32      0 = softmax regression, 1 = MLP
//   inputs   u64
//   hidden   u64      (0 for softmax regression)
//   classes  u64
//   steps    u64
//   count    u64      number of parameters
//   params   count x f64 (IEEE-754 bits)
const MAGIC: &[u8; 8] = b"RDCRLRN\0";
const CHECKPOINT_VERSION: u32 = 1;

impl LearnerState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (kind, inputs, hidden, classes) = match self.arch {
            Architecture::SoftmaxRegression { inputs, classes } => (0u32, inputs, 0, classes),
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => (1u32, inputs, hidden, classes),
        };
        let mut out = Vec::with_capacity(52 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&kind.to_le_bytes());
        for v in [inputs, hidden, classes] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::invalid("not a learner checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let kind = read_u32(&mut r)?;
        let inputs = read_u64(&mut r)? as usize;
        let hidden = read_u64(&mut r)? as usize;
        let classes = read_u64(&mut r)? as usize;
        let steps = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let arch = match kind {
            0 => Architecture::SoftmaxRegression { inputs, classes },
            1 => Architecture::Mlp {
                inputs,
                hidden,
                classes,
            },
            k => return Err(Error::invalid(format!("unknown architecture tag {k}"))),
        };
        if count != arch.num_params() || r.len() != 8 * count {
            return Err(Error::invalid(
                "checkpoint parameter block has the wrong size",
            ));
        }
        let params = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_params(arch, params, steps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::invalid("truncated learner checkpoint"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
