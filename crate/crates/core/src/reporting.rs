//! Metric records, sweep summaries and SVG charts.
//!
//! Records are newline-delimited JSON. Every line carries `schema_version`
//! and a `kind` tag: `step` lines are written once per training step (holdout
//! fields only on evaluation steps), and a run ends with one `final` line
//! holding test metrics for each checkpoint policy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::mean_and_sample_std;
use crate::selection::Rule;
use crate::simulator::CheckpointPolicy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub schema_version: u32,
    pub step: usize,
    pub rule: Rule,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_accuracy: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_loss: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst_class_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_accuracy: Option<f64>,
    /// Class (or group) weights after this step's update; weighted rules only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    /// Count of selected points per class.
    pub selected_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSummary {
    pub policy: CheckpointPolicy,
    pub step: usize,
    pub test_accuracy: Vec<Option<f64>>,
    pub worst_class_accuracy: Option<f64>,
    pub average_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalRecord {
    pub schema_version: u32,
    pub rule: Rule,
    pub seed: u64,
    pub num_classes: usize,
    pub dataset_fingerprint: String,
    pub steps: usize,
    /// Policy whose test metrics are reported at the top level.
    pub policy: CheckpointPolicy,
    pub checkpoint_step: usize,
    pub test_accuracy: Vec<Option<f64>>,
    pub worst_class_accuracy: Option<f64>,
    pub average_accuracy: Option<f64>,
    pub checkpoints: Vec<CheckpointSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Step(StepRecord),
    Final(FinalRecord),
}

fn encode(records: &[Record]) -> Result<String> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    Ok(text)
}

/// Writes `records` to `path`, replacing any previous content. The whole
/// payload is encoded before the file is touched, so an unwritable sink
/// never ends up with a partial record.
pub fn write_records(records: &[Record], path: &Path) -> Result<usize> {
    let text = encode(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}

/// Appends `records` to `path`, creating it if needed.
pub fn append_records(records: &[Record], path: &Path) -> Result<usize> {
    let text = encode(records)?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let version = match &record {
            Record::Step(s) => s.schema_version,
            Record::Final(f) => f.schema_version,
        };
        if version != SCHEMA_VERSION {
            return Err(parse_err(format!("unsupported schema_version {version}")));
        }
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub rule: Rule,
    pub runs: usize,
    pub worst_class_mean: f64,
    pub worst_class_std: f64,
    pub average_mean: f64,
    pub average_std: f64,
}

/// One row per rule; standard deviations use the sample (n - 1) convention
/// and are 0 for a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub num_classes: usize,
    pub dataset_fingerprint: String,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, rule: Rule) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.rule == rule)
    }

    /// Plain-text table with accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>5}  {:>18}  {:>18}\n",
            "rule", "runs", "worst-class (%)", "average (%)"
        );
        for r in &self.rows {
            let line = format!(
                "{:<10} {:>5}  {:>9.2} ± {:<6.2}  {:>9.2} ± {:.2}",
                r.rule.as_str(),
                r.runs,
                100.0 * r.worst_class_mean,
                100.0 * r.worst_class_std,
                100.0 * r.average_mean,
                100.0 * r.average_std
            );
            s.push_str(&line);
            s.push('\n');
        }
        s
    }
}

/// Aggregates final records. Input order does not matter: records are sorted
/// by (rule, seed) before any arithmetic.
pub fn summarize_finals(finals: &[FinalRecord]) -> Result<Summary> {
    let first = finals
        .first()
        .ok_or_else(|| Error::invalid("no final records to summarize"))?;
    for f in finals {
        if f.dataset_fingerprint != first.dataset_fingerprint {
            return Err(Error::invalid(format!(
                "records come from different datasets ({} vs {})",
                first.dataset_fingerprint, f.dataset_fingerprint
            )));
        }
        if f.num_classes != first.num_classes {
            return Err(Error::invalid("records disagree on the number of classes"));
        }
    }
    let mut by_rule: BTreeMap<Rule, Vec<&FinalRecord>> = BTreeMap::new();
    for f in finals {
        by_rule.entry(f.rule).or_default().push(f);
    }
    let mut rows = Vec::new();
    for (rule, mut runs) in by_rule {
        runs.sort_by(|a, b| {
            a.seed.cmp(&b.seed).then_with(|| {
                let key = |r: &FinalRecord| r.worst_class_accuracy.unwrap_or(f64::NAN);
                key(a).total_cmp(&key(b))
            })
        });
        let worst: Vec<f64> = runs.iter().filter_map(|r| r.worst_class_accuracy).collect();
        let avg: Vec<f64> = runs.iter().filter_map(|r| r.average_accuracy).collect();
        let (Some((wm, ws)), Some((am, as_))) =
            (mean_and_sample_std(&worst), mean_and_sample_std(&avg))
        else {
            return Err(Error::invalid(format!(
                "rule {rule} has no test accuracies"
            )));
        };
        rows.push(SummaryRow {
            rule,
            runs: runs.len(),
            worst_class_mean: wm,
            worst_class_std: ws,
            average_mean: am,
            average_std: as_,
        });
    }
    Ok(Summary {
        num_classes: first.num_classes,
        dataset_fingerprint: first.dataset_fingerprint.clone(),
        rows,
    })
}

fn finals_in(records: &[Record]) -> impl Iterator<Item = &FinalRecord> {
    records.iter().filter_map(|r| match r {
        Record::Final(f) => Some(f),
        Record::Step(_) => None,
    })
}

/// Summary over the `final` lines of every file.
pub fn summarize(files: &[PathBuf]) -> Result<Summary> {
    let mut finals = Vec::new();
    for path in files {
        let records = read_records(path)?;
        let before = finals.len();
        finals.extend(finals_in(&records).cloned());
        if finals.len() == before {
            warn!("{} has no final record; skipped", path.display());
        }
    }
    summarize_finals(&finals)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Maps (step, value in [0, 1]) onto the plot area.
struct Frame {
    x_min: f64,
    x_max: f64,
}

impl Frame {
    fn new(steps: impl Iterator<Item = usize>) -> Self {
        let (mut lo, mut hi) = (usize::MAX, 0);
        for s in steps {
            lo = lo.min(s);
            hi = hi.max(s);
        }
        if lo > hi {
            (lo, hi) = (0, 1);
        }
        Self {
            x_min: lo as f64,
            x_max: hi as f64,
        }
    }

    fn x(&self, step: usize) -> f64 {
        let span = (self.x_max - self.x_min).max(1.0);
        MARGIN + (step as f64 - self.x_min) / span * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        MARGIN + (1.0 - v.clamp(0.0, 1.0)) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str, y_label: &str, frame: &Frame) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    );
    let _ = writeln!(s, "<title>{}</title>", xml_escape(title));
    let _ = writeln!(
        s,
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let (x0, x1) = (MARGIN, WIDTH - MARGIN);
    let (y0, y1) = (HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        "<g stroke=\"black\" stroke-width=\"1\"><line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\"/><line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\"/></g>"
    );
    let _ = writeln!(
        s,
        "<g font-family=\"sans-serif\" font-size=\"11\"><text x=\"{x0}\" y=\"{}\">{}</text><text x=\"{x1}\" y=\"{}\" text-anchor=\"end\">{}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">1</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text><text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text><text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{}</text></g>",
        y0 + 15.0,
        frame.x_min,
        y0 + 15.0,
        frame.x_max,
        x0 - 4.0,
        y1 + 4.0,
        x0 - 4.0,
        y0,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        xml_escape(y_label)
    );
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn join_numbers<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn points(frame: &Frame, steps: &[usize], values: &[f64]) -> String {
    steps
        .iter()
        .zip(values)
        .map(|(&s, &v)| format!("{:.3},{:.3}", frame.x(s), frame.y(v)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn legend(s: &mut String, index: usize, label: &str, color: &str) {
    let y = MARGIN + 14.0 * index as f64;
    let x = WIDTH - MARGIN - 110.0;
    let _ = writeln!(
        s,
        "<g font-family=\"sans-serif\" font-size=\"11\"><line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{}</text></g>",
        x + 18.0,
        x + 22.0,
        y + 4.0,
        xml_escape(label)
    );
}

/// Mean and ±1 sample std of one series across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub steps: Vec<usize>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Per-step worst-class holdout accuracy band of one rule, over every run
/// that evaluated at that step.
pub fn worst_class_band(runs: &[&[Record]]) -> Band {
    let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for records in runs {
        for r in records.iter() {
            if let Record::Step(s) = r {
                if let Some(v) = s.worst_class_accuracy {
                    by_step.entry(s.step).or_default().push(v);
                }
            }
        }
    }
    let mut band = Band {
        steps: Vec::new(),
        mean: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for (step, values) in by_step {
        let (m, sd) = mean_and_sample_std(&values).expect("non-empty");
        band.steps.push(step);
        band.mean.push(m);
        band.lower.push(m - sd);
        band.upper.push(m + sd);
    }
    band
}

fn run_key(records: &[Record]) -> Option<(Rule, u64)> {
    records.first().map(|r| match r {
        Record::Step(s) => (s.rule, s.seed),
        Record::Final(f) => (f.rule, f.seed),
    })
}

/// Writes `worst_class.svg` plus one `weights_<rule>_seed<seed>.svg` per run
/// of a weighted rule. Every path carries its source values in `data-*`
/// attributes. Returns the written paths.
pub fn emit_plots(files: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if files.is_empty() {
        return Err(Error::invalid("no record files to plot"));
    }
    let mut runs: Vec<(Rule, u64, Vec<Record>)> = Vec::new();
    for path in files {
        let records = read_records(path)?;
        match run_key(&records) {
            Some((rule, seed)) => runs.push((rule, seed, records)),
            None => warn!("{} holds no records; skipped", path.display()),
        }
    }
    runs.sort_by_key(|(rule, seed, _)| (*rule, *seed));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let frame = Frame::new(runs.iter().flat_map(|(_, _, rs)| {
        rs.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s.step),
            Record::Final(_) => None,
        })
    }));
    let mut svg = svg_open(
        "Worst-class holdout accuracy",
        "worst-class accuracy",
        &frame,
    );
    let mut rules: Vec<Rule> = runs.iter().map(|(r, _, _)| *r).collect();
    rules.dedup();
    for (i, rule) in rules.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let group: Vec<&[Record]> = runs
            .iter()
            .filter(|(r, _, _)| r == rule)
            .map(|(_, _, rs)| rs.as_slice())
            .collect();
        let band = worst_class_band(&group);
        if band.steps.is_empty() {
            continue;
        }
        let mut poly = points(&frame, &band.steps, &band.upper);
        let rev_steps: Vec<usize> = band.steps.iter().rev().copied().collect();
        let rev_lower: Vec<f64> = band.lower.iter().rev().copied().collect();
        poly.push(' ');
        poly.push_str(&points(&frame, &rev_steps, &rev_lower));
        let _ = writeln!(
            svg,
            "<polygon class=\"band\" data-rule=\"{rule}\" data-steps=\"{}\" data-lower=\"{}\" data-upper=\"{}\" points=\"{poly}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>",
            join_numbers(&band.steps),
            join_numbers(&band.lower),
            join_numbers(&band.upper)
        );
        let _ = writeln!(
            svg,
            "<polyline class=\"mean\" data-rule=\"{rule}\" data-steps=\"{}\" data-values=\"{}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            join_numbers(&band.steps),
            join_numbers(&band.mean),
            points(&frame, &band.steps, &band.mean)
        );
        legend(&mut svg, i, rule.as_str(), color);
    }
    svg.push_str("</svg>\n");
    let path = out_dir.join("worst_class.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    for (rule, seed, records) in &runs {
        let steps: Vec<(usize, &Vec<f64>)> = records
            .iter()
            .filter_map(|r| match r {
                Record::Step(s) => s.weights.as_ref().map(|w| (s.step, w)),
                Record::Final(_) => None,
            })
            .collect();
        let Some(dim) = steps.first().map(|(_, w)| w.len()) else {
            continue;
        };
        let frame = Frame::new(steps.iter().map(|(s, _)| *s));
        let mut svg = svg_open(
            &format!("Class weights, {rule} seed {seed}"),
            "weight",
            &frame,
        );
        let xs: Vec<usize> = steps.iter().map(|(s, _)| *s).collect();
        for c in 0..dim {
            let color = PALETTE[c % PALETTE.len()];
            let ys: Vec<f64> = steps.iter().map(|(_, w)| w[c]).collect();
            let _ = writeln!(
                svg,
                "<polyline class=\"weight\" data-class=\"{c}\" data-steps=\"{}\" data-values=\"{}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                join_numbers(&xs),
                join_numbers(&ys),
                points(&frame, &xs, &ys)
            );
            legend(&mut svg, c, &format!("class {c}"), color);
        }
        svg.push_str("</svg>\n");
        let path = out_dir.join(format!("weights_{rule}_seed{seed}.svg"));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
