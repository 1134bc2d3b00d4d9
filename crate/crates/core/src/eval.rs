//! Per-class accuracy, ROC curves, macro-averaged ROC, permutation p-values
//! and multi-trial summaries.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{contract, Error, Result};
use crate::pipeline::{Detection, TwoStageModel};
use crate::rng::{self, Purpose};
use crate::ClassId;

/// Number of intervals of the common FPR grid used for macro averaging.
pub const MACRO_GRID_STEPS: usize = 1000;

/// Slack when counting permutations at least as extreme as the observed AUC.
pub const PERMUTATION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<ClassId>,
    /// `counts[truth][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<ClassId>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_indices(classes: Vec<ClassId>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(contract!("{} truths but {} predictions", truth.len(), predicted.len()));
        }
        let mut m = Self::new(classes);
        let k = m.classes.len();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(contract!("class index out of range for {k} classes"));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Recall of each class; `NaN` for a class without test samples.
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        (0..self.classes.len())
            .map(|i| {
                let n = self.row_total(i);
                if n == 0 {
                    f64::NAN
                } else {
                    self.counts[i][i] as f64 / n as f64
                }
            })
            .collect()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        correct as f64 / self.total() as f64
    }
}

/// ROC points ordered by decreasing threshold, from `(0, 0)` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        trapezoid(&self.fpr, &self.tpr)
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) * 0.5)
        .sum()
}

/// Scores sorted once so that curves for many truth vectors can be traced cheaply.
#[derive(Debug, Clone)]
pub struct SortedScores {
    order: Vec<usize>,
    /// Exclusive end index in `order` of each group of equal scores.
    group_ends: Vec<usize>,
}

impl SortedScores {
    pub fn new(scores: &[f64]) -> Result<Self> {
        if scores.iter().any(|s| s.is_nan()) {
            return Err(contract!("ROC scores contain NaN"));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut group_ends = Vec::new();
        for i in 1..=order.len() {
            if i == order.len() || scores[order[i]] != scores[order[i - 1]] {
                group_ends.push(i);
            }
        }
        Ok(Self { order, group_ends })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Curve for the positives selected by `is_positive(sample index)`.
    pub fn curve(&self, is_positive: impl Fn(usize) -> bool) -> Result<RocCurve> {
        let n_pos = self.order.iter().filter(|&&i| is_positive(i)).count();
        let n_neg = self.order.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::Validation(format!(
                "ROC needs both classes, got {n_pos} positives and {n_neg} negatives"
            )));
        }
        let mut fpr = Vec::with_capacity(self.group_ends.len() + 1);
        let mut tpr = Vec::with_capacity(self.group_ends.len() + 1);
        fpr.push(0.0);
        tpr.push(0.0);
        let (mut tp, mut fp, mut start) = (0usize, 0usize, 0usize);
        for &end in &self.group_ends {
            for &i in &self.order[start..end] {
                if is_positive(i) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            start = end;
            fpr.push(fp as f64 / n_neg as f64);
            tpr.push(tp as f64 / n_pos as f64);
        }
        Ok(RocCurve { fpr, tpr })
    }
}

/// ROC over every distinct score used as a threshold (`score >= threshold` is positive).
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(contract!("{} scores but {} labels", scores.len(), truth.len()));
    }
    SortedScores::new(scores)?.curve(|i| truth[i])
}

/// TPR of `curve` on the grid `g / steps`, taking the upper value on vertical
/// segments and interpolating linearly between points otherwise.
pub fn interpolate_on_grid(curve: &RocCurve, steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut j = 0;
    let n = curve.fpr.len();
    for g in 0..=steps {
        let x = g as f64 / steps as f64;
        while j + 1 < n && curve.fpr[j + 1] <= x {
            j += 1;
        }
        let y = if j + 1 < n && curve.fpr[j] < x {
            let (x0, x1) = (curve.fpr[j], curve.fpr[j + 1]);
            let (y0, y1) = (curve.tpr[j], curve.tpr[j + 1]);
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        } else {
            curve.tpr[j]
        };
        out.push(y);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroRoc {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

/// Pointwise mean of the per-class curves on a common FPR grid.
pub fn macro_average_roc(curves: &[RocCurve]) -> Result<MacroRoc> {
    if curves.is_empty() {
        return Err(contract!("macro ROC needs at least one curve"));
    }
    let fpr: Vec<f64> = (0..=MACRO_GRID_STEPS)
        .map(|g| g as f64 / MACRO_GRID_STEPS as f64)
        .collect();
    let mut tpr = vec![0.0; fpr.len()];
    for c in curves {
        for (acc, y) in tpr.iter_mut().zip(interpolate_on_grid(c, MACRO_GRID_STEPS)) {
            *acc += y;
        }
    }
    let k = curves.len() as f64;
    tpr.iter_mut().for_each(|y| *y /= k);
    let auc = trapezoid(&fpr, &tpr);
    Ok(MacroRoc { fpr, tpr, auc })
}

/// One-vs-rest score matrix `scores[class][sample]` with multiclass truth.
#[derive(Debug, Clone)]
pub struct ClassScores {
    sorted: Vec<SortedScores>,
    truth: Vec<usize>,
}

impl ClassScores {
    pub fn new(scores: &[Vec<f64>], truth: &[usize]) -> Result<Self> {
        if scores.len() < 2 {
            return Err(contract!("need at least two classes, got {}", scores.len()));
        }
        if let Some(s) = scores.iter().find(|s| s.len() != truth.len()) {
            return Err(contract!("{} scores but {} labels", s.len(), truth.len()));
        }
        if truth.iter().any(|&t| t >= scores.len()) {
            return Err(contract!("truth index out of range"));
        }
        Ok(Self {
            sorted: scores.iter().map(|s| SortedScores::new(s)).collect::<Result<_>>()?,
            truth: truth.to_vec(),
        })
    }

    pub fn curves_for(&self, truth: &[usize]) -> Result<Vec<RocCurve>> {
        self.sorted
            .iter()
            .enumerate()
            .map(|(c, s)| s.curve(|i| truth[i] == c))
            .collect()
    }

    pub fn curves(&self) -> Result<Vec<RocCurve>> {
        self.curves_for(&self.truth)
    }

    pub fn macro_roc(&self) -> Result<MacroRoc> {
        macro_average_roc(&self.curves()?)
    }

    /// `(1 + #{permuted macro AUC >= observed}) / (1 + n_permutations)`,
    /// permuting the truth vector.
    pub fn macro_auc_p_value(&self, n_permutations: usize, seed: u64) -> Result<f64> {
        let observed = self.macro_roc()?.auc;
        let mut rng = rng::stream(seed, Purpose::Permutation);
        let mut truth = self.truth.clone();
        let mut extreme = 0usize;
        for _ in 0..n_permutations {
            truth.shuffle(&mut rng);
            let auc = macro_average_roc(&self.curves_for(&truth)?)?.auc;
            if auc >= observed - PERMUTATION_SLACK {
                extreme += 1;
            }
        }
        Ok((1 + extreme) as f64 / (1 + n_permutations) as f64)
    }
}

/// Permutation p-value of a binary AUC.
pub fn auc_p_value(scores: &[f64], truth: &[bool], n_permutations: usize, seed: u64) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(contract!("{} scores but {} labels", scores.len(), truth.len()));
    }
    let sorted = SortedScores::new(scores)?;
    let observed = sorted.curve(|i| truth[i])?.auc();
    let mut rng = rng::stream(seed, Purpose::Permutation);
    let mut perm = truth.to_vec();
    let mut extreme = 0usize;
    for _ in 0..n_permutations {
        perm.shuffle(&mut rng);
        if sorted.curve(|i| perm[i])?.auc() >= observed - PERMUTATION_SLACK {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + n_permutations) as f64)
}

/// Scores per class for one detection, aligned with `model.classes()`:
/// background gets the negated stage-1 score, each species its stage-2 vote
/// count when the gate is open and `-inf` otherwise.
pub fn class_scores(model: &TwoStageModel, detection: &Detection) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.species_list.len() + 1);
    out.push(-detection.stage1_score);
    match &detection.stage2_votes {
        Some(votes) => out.extend(votes.iter().map(|&v| v as f64)),
        None => out.extend(core::iter::repeat_n(f64::NEG_INFINITY, model.species_list.len())),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_index: usize,
    pub trial_seed: u64,
    pub classes: Vec<ClassId>,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub macro_auc: f64,
    pub p_value: f64,
}

/// Classifies the test samples and computes accuracy, macro AUC and its p-value.
pub fn evaluate_trial(
    model: &TwoStageModel,
    test: &[LabeledSample],
    n_permutations: usize,
    seed: u64,
) -> Result<TrialResult> {
    let classes = model.classes();
    let index_of = |c: &ClassId| {
        classes
            .iter()
            .position(|x| x == c)
            .ok_or_else(|| Error::Validation(format!("test label `{c}` unknown to the model")))
    };
    let mut truth = Vec::with_capacity(test.len());
    let mut predicted = Vec::with_capacity(test.len());
    let mut scores = vec![Vec::with_capacity(test.len()); classes.len()];
    for s in test {
        let d = model.classify_sample(s.feature()?)?;
        truth.push(index_of(&s.class_label)?);
        predicted.push(index_of(d.predicted_class(&model.background))?);
        for (col, v) in scores.iter_mut().zip(class_scores(model, &d)) {
            col.push(v);
        }
    }
    let confusion = ConfusionMatrix::from_indices(classes.clone(), &truth, &predicted)?;
    let cs = ClassScores::new(&scores, &truth)?;
    let macro_auc = cs.macro_roc()?.auc;
    let p_value = cs.macro_auc_p_value(n_permutations, seed)?;
    Ok(TrialResult {
        trial_index: 0,
        trial_seed: seed,
        per_class_accuracy: confusion.per_class_accuracy(),
        classes,
        confusion,
        macro_auc,
        p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl ClassStats {
    /// Population statistics of a non-empty sample.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            sd: libm::sqrt(var),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub classes: Vec<ClassId>,
    pub n_trials: usize,
    pub accuracy: Vec<ClassStats>,
    pub macro_auc: ClassStats,
    pub max_p_value: f64,
}

pub fn summarize_trials(results: &[TrialResult]) -> Result<TrialSummary> {
    let first = results
        .first()
        .ok_or_else(|| contract!("cannot summarize zero trials"))?;
    if results.iter().any(|r| r.classes != first.classes) {
        return Err(contract!("trials disagree on the class list"));
    }
    let accuracy = (0..first.classes.len())
        .map(|c| {
            let v: Vec<f64> = results.iter().map(|r| r.per_class_accuracy[c]).collect();
            ClassStats::of(&v)
        })
        .collect();
    let aucs: Vec<f64> = results.iter().map(|r| r.macro_auc).collect();
    Ok(TrialSummary {
        classes: first.classes.clone(),
        n_trials: results.len(),
        accuracy,
        macro_auc: ClassStats::of(&aucs),
        max_p_value: results.iter().map(|r| r.p_value).fold(0.0, f64::max),
    })
}

const ROW_LABELS: [&str; 4] = ["Mean", "SD", "Min.", "Max."];

fn row_values(s: &ClassStats) -> [f64; 4] {
    [s.mean, s.sd, s.min, s.max]
}

/// Fixed-width table with one column per class and rows Mean, SD, Min., Max.
pub fn text_table(summary: &TrialSummary) -> String {
    let width = summary
        .classes
        .iter()
        .map(|c| c.as_str().len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<6}", "");
    for c in &summary.classes {
        let _ = write!(out, " {:>width$}", c.as_str());
    }
    out.push('\n');
    for (r, label) in ROW_LABELS.iter().enumerate() {
        let _ = write!(out, "{label:<6}");
        for s in &summary.accuracy {
            let _ = write!(out, " {:>width$.2}", row_values(s)[r]);
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "trials {}  macro AUC mean {:.4} min {:.4}  max p-value {:.4}",
        summary.n_trials, summary.macro_auc.mean, summary.macro_auc.min, summary.max_p_value
    );
    out
}

/// Same rows as [`text_table`] as CSV with full precision.
pub fn csv_table(summary: &TrialSummary) -> String {
    let mut out = String::from("statistic");
    for c in &summary.classes {
        out.push(',');
        out.push_str(c.as_str());
    }
    out.push('\n');
    for (r, label) in ROW_LABELS.iter().enumerate() {
        out.push_str(label);
        for s in &summary.accuracy {
            let _ = write!(out, ",{}", row_values(s)[r]);
        }
        out.push('\n');
    }
    out
}
