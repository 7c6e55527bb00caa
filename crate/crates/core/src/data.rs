//! Labeled example pools, synthetic generation, CSV ingestion and streaming
//! samplers.
//!
//! CSV layout: a header `f0,...,f{d-1},label` followed by one row per example,
//! UTF-8, no quoting. Split membership lives in a separate JSON manifest (see
//! [`SplitManifest`]) or is assigned from fractions and a seed at load time.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learner::Example;
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Holdout, Split::Test];

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Test => "test",
        })
    }
}

/// Immutable pool of dense labeled examples, each tagged with one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPool {
    num_classes: usize,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    by_split: [Vec<usize>; 3],
    // by_split_class[split][class] -> example indices
    by_split_class: [Vec<Vec<usize>>; 3],
}

impl DataPool {
    pub fn new(
        num_classes: usize,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a pool needs at least two classes"));
        }
        if dim < 1 {
            return Err(Error::invalid("a pool needs at least one feature"));
        }
        let n = labels.len();
        if features.len() != n * dim {
            return Err(Error::invalid(format!(
                "{} feature values for {n} examples of dimension {dim}",
                features.len()
            )));
        }
        if splits.len() != n {
            return Err(Error::invalid("one split tag per example is required"));
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "example {i} has label {} >= {num_classes}",
                labels[i]
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        let mut by_split: [Vec<usize>; 3] = Default::default();
        let mut by_split_class: [Vec<Vec<usize>>; 3] = Default::default();
        for s in &mut by_split_class {
            *s = vec![Vec::new(); num_classes];
        }
        for (i, (&y, &s)) in labels.iter().zip(&splits).enumerate() {
            by_split[s.slot()].push(i);
            by_split_class[s.slot()][y].push(i);
        }
        Ok(Self {
            num_classes,
            dim,
            features,
            labels,
            splits,
            by_split,
            by_split_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            features: self.features(i),
            label: self.labels[i],
        }
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        &self.by_split[split.slot()]
    }

    pub fn class_indices(&self, split: Split, class: usize) -> &[usize] {
        &self.by_split_class[split.slot()][class]
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        self.by_split_class[split.slot()]
            .iter()
            .map(Vec::len)
            .collect()
    }

    /// SHA-256 over shape, labels, split tags and feature bits; hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for (i, &y) in self.labels.iter().enumerate() {
            h.update((y as u64).to_le_bytes());
            h.update([self.splits[i].slot() as u8]);
        }
        for v in &self.features {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Z-scores every feature using train-split statistics. Features with zero
    /// variance are only centered.
    pub fn standardized(&self) -> Result<Self> {
        let train = self.split_indices(Split::Train);
        if train.is_empty() {
            return Err(Error::invalid("cannot standardize without a train split"));
        }
        let d = self.dim;
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in train {
            for (m, v) in mean.iter_mut().zip(self.features(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for &i in train {
            for ((s, v), m) in var.iter_mut().zip(self.features(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        let features = self
            .features
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (v - m) * s)
                    .collect::<Vec<_>>()
            })
            .collect();
        Self::new(
            self.num_classes,
            d,
            features,
            self.labels.clone(),
            self.splits.clone(),
        )
    }
}

/// Streaming class imbalance: each listed class is drawn with probability
/// `p`, the remaining mass is split evenly over the other classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub classes: Vec<usize>,
    pub p: f64,
}

impl ImbalanceSpec {
    pub fn single(class: usize, p: f64) -> Self {
        Self {
            classes: vec![class],
            p,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("imbalance spec names no class"));
        }
        let mut seen = vec![false; num_classes];
        for &c in &self.classes {
            if c >= num_classes {
                return Err(Error::invalid(format!(
                    "imbalanced class {c} out of range for {num_classes} classes"
                )));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::invalid(format!("imbalanced class {c} listed twice")));
            }
        }
        if self.classes.len() >= num_classes {
            return Err(Error::invalid("at least one class must stay balanced"));
        }
        let cap = 1.0 / num_classes as f64;
        if !(self.p > 0.0 && self.p <= cap) {
            return Err(Error::invalid(format!(
                "percent imbalance {} outside (0, 1/C = {cap}]",
                self.p
            )));
        }
        Ok(())
    }

    /// Sampling probability of every class.
    pub fn class_probabilities(&self, num_classes: usize) -> Result<Vec<f64>> {
        self.validate(num_classes)?;
        let m = self.classes.len();
        let rest = (1.0 - m as f64 * self.p) / (num_classes - m) as f64;
        let mut probs = vec![rest; num_classes];
        for &c in &self.classes {
            probs[c] = self.p;
        }
        Ok(probs)
    }
}

/// Partition of classes into superclasses; `group_of[c]` is class `c`'s group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperclassMap {
    group_of: Vec<usize>,
    num_groups: usize,
}

impl SuperclassMap {
    /// Builds a map from explicit member lists; groups must be disjoint,
    /// non-empty and together cover `0..num_classes`.
    pub fn from_groups(groups: &[Vec<usize>], num_classes: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::invalid("superclass map has no groups"));
        }
        let mut group_of = vec![usize::MAX; num_classes];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid(format!("superclass {g} is empty")));
            }
            for &c in members {
                if c >= num_classes {
                    return Err(Error::invalid(format!(
                        "superclass {g} names class {c} but there are {num_classes} classes"
                    )));
                }
                if group_of[c] != usize::MAX {
                    return Err(Error::invalid(format!(
                        "class {c} appears in superclasses {} and {g}",
                        group_of[c]
                    )));
                }
                group_of[c] = g;
            }
        }
        if let Some(c) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(Error::invalid(format!(
                "class {c} belongs to no superclass"
            )));
        }
        Ok(Self {
            group_of,
            num_groups: groups.len(),
        })
    }

    /// Every class in its own group.
    pub fn identity(num_classes: usize) -> Self {
        Self {
            group_of: (0..num_classes).collect(),
            num_groups: num_classes,
        }
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.group_of[class]
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn num_classes(&self) -> usize {
        self.group_of.len()
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.group_of.len())
            .filter(|&c| self.group_of[c] == group)
            .collect()
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        (0..self.num_groups).map(|g| self.members(g)).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.num_groups == self.group_of.len()
    }
}

/// Draws `size` example indices from `split` with replacement.
///
/// Without an imbalance spec every example is equally likely. With one, each
/// draw first picks a class from [`ImbalanceSpec::class_probabilities`] and
/// then a uniform example of that class.
pub fn sample_batch(
    pool: &DataPool,
    split: Split,
    size: usize,
    imbalance: Option<&ImbalanceSpec>,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    draw(
        pool.split_indices(split),
        |c| pool.class_indices(split, c),
        pool.num_classes(),
        size,
        imbalance,
        rng,
    )
    .map_err(|e| match e {
        DrawError::Empty => Error::invalid(format!("{split} split is empty")),
        DrawError::EmptyClass(c) => {
            Error::invalid(format!("class {c} has no {split} examples to sample"))
        }
        DrawError::Other(e) => e,
    })
}

/// Same sampling rules as [`sample_batch`] over an arbitrary index subset.
#[derive(Debug, Clone)]
pub struct IndexSampler {
    all: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl IndexSampler {
    pub fn new(pool: &DataPool, indices: Vec<usize>) -> Self {
        let mut by_class = vec![Vec::new(); pool.num_classes()];
        for &i in &indices {
            by_class[pool.label(i)].push(i);
        }
        Self {
            all: indices,
            by_class,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.all
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.by_class[class].len()
    }

    pub fn sample(
        &self,
        size: usize,
        imbalance: Option<&ImbalanceSpec>,
        rng: &mut Rng,
    ) -> Result<Vec<usize>> {
        draw(
            &self.all,
            |c| &self.by_class[c],
            self.by_class.len(),
            size,
            imbalance,
            rng,
        )
        .map_err(|e| match e {
            DrawError::Empty => Error::invalid("cannot sample from an empty index set"),
            DrawError::EmptyClass(c) => {
                Error::invalid(format!("class {c} has no examples to sample"))
            }
            DrawError::Other(e) => e,
        })
    }
}

enum DrawError {
    Empty,
    EmptyClass(usize),
    Other(Error),
}

fn draw<'a>(
    all: &'a [usize],
    members: impl Fn(usize) -> &'a [usize],
    num_classes: usize,
    size: usize,
    imbalance: Option<&ImbalanceSpec>,
    rng: &mut Rng,
) -> std::result::Result<Vec<usize>, DrawError> {
    if size == 0 {
        return Err(DrawError::Other(Error::invalid(
            "batch size must be at least 1",
        )));
    }
    let Some(spec) = imbalance else {
        if all.is_empty() {
            return Err(DrawError::Empty);
        }
        return Ok((0..size).map(|_| all[rng.below(all.len())]).collect());
    };
    let probs = spec
        .class_probabilities(num_classes)
        .map_err(DrawError::Other)?;
    for (c, &p) in probs.iter().enumerate() {
        if p > 0.0 && members(c).is_empty() {
            return Err(DrawError::EmptyClass(c));
        }
    }
    let cumulative: Vec<f64> = probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let total = cumulative[num_classes - 1];
    Ok((0..size)
        .map(|_| {
            let u = rng.uniform() * total;
            let c = cumulative
                .iter()
                .position(|&cp| u < cp)
                .unwrap_or(num_classes - 1);
            let m = members(c);
            m[rng.below(m.len())]
        })
        .collect())
}

/// Streaming candidate batch `B_t` from the train split.
pub fn sample_large_batch(
    pool: &DataPool,
    size: usize,
    imbalance: Option<&ImbalanceSpec>,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    sample_batch(pool, Split::Train, size, imbalance, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub n_test: usize,
    pub separation: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim must be at least 2"));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::config("separation must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Gaussian class clouds with unit isotropic covariance.
///
/// Class `c` is centered at `separation * e_c` when `num_classes <= dim`, and
/// at `separation * u_c` for seeded random unit directions `u_c` otherwise.
/// Each split holds `n_split` examples with labels cycling `0, 1, .., C-1`.
/// Label noise flips each label (in every split) to a uniformly chosen other
/// class; noise draws use their own stream, so a noisy pool has exactly the
/// features of the clean pool with the same seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DataPool> {
    spec.validate()?;
    let (c_count, d) = (spec.num_classes, spec.dim);
    let mut mean_rng = Rng::with_stream(spec.seed, 0);
    let mut feat_rng = Rng::with_stream(spec.seed, 1);
    let mut noise_rng = Rng::with_stream(spec.seed, 2);
    let means: Vec<Vec<f64>> = (0..c_count)
        .map(|c| {
            let dir: Vec<f64> = if c_count <= d {
                (0..d).map(|j| if j == c { 1.0 } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..d).map(|_| mean_rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            };
            dir.into_iter().map(|x| x * spec.separation).collect()
        })
        .collect();
    let total = spec.n_train + spec.n_holdout + spec.n_test;
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Holdout, spec.n_holdout),
        (Split::Test, spec.n_test),
    ] {
        for i in 0..n {
            let c = i % c_count;
            features.extend(means[c].iter().map(|m| m + feat_rng.normal()));
            let flip = noise_rng.uniform() < spec.label_noise;
            let other = noise_rng.below(c_count - 1);
            labels.push(if flip {
                if other >= c {
                    other + 1
                } else {
                    other
                }
            } else {
                c
            });
            splits.push(split);
        }
    }
    DataPool::new(c_count, d, features, labels, splits)
}

/// Run-length split assignment written next to a pool CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub num_classes: usize,
    pub dim: usize,
    pub rows: usize,
    pub fingerprint: String,
    pub ranges: Vec<SplitRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRange {
    pub split: Split,
    pub start: usize,
    pub end: usize,
}

impl SplitManifest {
    pub fn for_pool(pool: &DataPool) -> Self {
        let mut ranges: Vec<SplitRange> = Vec::new();
        for (i, &s) in pool.splits.iter().enumerate() {
            match ranges.last_mut() {
                Some(r) if r.split == s => r.end = i + 1,
                _ => ranges.push(SplitRange {
                    split: s,
                    start: i,
                    end: i + 1,
                }),
            }
        }
        Self {
            format_version: 1,
            num_classes: pool.num_classes,
            dim: pool.dim,
            rows: pool.len(),
            fingerprint: pool.fingerprint(),
            ranges,
        }
    }

    pub fn tags(&self) -> Result<Vec<Split>> {
        let mut tags = Vec::with_capacity(self.rows);
        for r in &self.ranges {
            if r.start != tags.len() || r.end < r.start {
                return Err(Error::invalid("split manifest ranges are not contiguous"));
            }
            tags.extend(std::iter::repeat_n(r.split, r.end - r.start));
        }
        if tags.len() != self.rows {
            return Err(Error::invalid("split manifest does not cover every row"));
        }
        Ok(tags)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != 1 {
            return Err(Error::invalid(format!(
                "unsupported split manifest version {}",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// How split tags are assigned to CSV rows.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSource {
    /// Explicit tag per row, usually from a [`SplitManifest`].
    Tags(Vec<Split>),
    /// Rows are shuffled with `seed`; the first `train` fraction becomes the
    /// train split, the next `holdout` fraction the holdout split, the rest test.
    Fractions { train: f64, holdout: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Number of classes; inferred as `max(label) + 1` when absent.
    pub num_classes: Option<usize>,
    pub splits: SplitSource,
}

pub fn write_csv(pool: &DataPool, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (0..pool.dim)
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for i in 0..pool.len() {
        let mut line = String::new();
        for v in pool.features(i) {
            // Display for f64 is the shortest representation that round-trips
            line.push_str(&format!("{v},"));
        }
        line.push_str(&pool.label(i).to_string());
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<DataPool> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "empty file, expected a header".into())),
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let dim = cols.len().saturating_sub(1);
    if dim == 0 || cols[dim].trim() != "label" {
        return Err(parse_err(1, "header must be f0,...,f{d-1},label".into()));
    }
    for (j, c) in cols[..dim].iter().enumerate() {
        if c.trim() != format!("f{j}") {
            return Err(parse_err(
                1,
                format!("column {j} should be named f{j}, found {c:?}"),
            ));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        for (j, f) in fields[..dim].iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("feature f{j} is not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("feature f{j} is not finite")));
            }
            features.push(v);
        }
        let y: usize = fields[dim].trim().parse().map_err(|_| {
            parse_err(
                lineno,
                format!("label is not a class index: {:?}", fields[dim]),
            )
        })?;
        if let Some(c) = schema.num_classes {
            if y >= c {
                return Err(parse_err(
                    lineno,
                    format!("label {y} out of range for {c} classes"),
                ));
            }
        }
        labels.push(y);
    }
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let n = labels.len();
    let splits = match &schema.splits {
        SplitSource::Tags(tags) => {
            if tags.len() != n {
                return Err(Error::invalid(format!(
                    "{} split tags for {n} rows",
                    tags.len()
                )));
            }
            tags.clone()
        }
        SplitSource::Fractions {
            train,
            holdout,
            seed,
        } => {
            if !(*train >= 0.0 && *holdout >= 0.0 && train + holdout <= 1.0) {
                return Err(Error::config(
                    "split fractions must be >= 0 and sum to <= 1",
                ));
            }
            let mut order: Vec<usize> = (0..n).collect();
            Rng::new(*seed).shuffle(&mut order);
            let n_train = (train * n as f64).round() as usize;
            let n_holdout = ((holdout * n as f64).round() as usize).min(n - n_train);
            let mut tags = vec![Split::Test; n];
            for (rank, &i) in order.iter().enumerate() {
                if rank < n_train {
                    tags[i] = Split::Train;
                } else if rank < n_train + n_holdout {
                    tags[i] = Split::Holdout;
                }
            }
            tags
        }
    };
    DataPool::new(num_classes, dim, features, labels, splits)
}

pub const POOL_FILE: &str = "pool.csv";
pub const SPLITS_FILE: &str = "splits.json";

/// Writes `pool.csv` and `splits.json` into `dir`.
pub fn write_dataset_dir(pool: &DataPool, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(pool, &dir.join(POOL_FILE))?;
    SplitManifest::for_pool(pool).save(&dir.join(SPLITS_FILE))
}

/// Reads a directory written by [`write_dataset_dir`], checking the
/// fingerprint recorded in the manifest.
pub fn load_dataset_dir(dir: &Path) -> Result<DataPool> {
    let manifest = SplitManifest::load(&dir.join(SPLITS_FILE))?;
    let pool = load_csv(
        &dir.join(POOL_FILE),
        &CsvSchema {
            num_classes: Some(manifest.num_classes),
            splits: SplitSource::Tags(manifest.tags()?),
        },
    )?;
    if pool.fingerprint() != manifest.fingerprint {
        return Err(Error::invalid(format!(
            "{} does not match the fingerprint in {SPLITS_FILE}",
            dir.join(POOL_FILE).display()
        )));
    }
    Ok(pool)
}
