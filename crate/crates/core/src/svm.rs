//! Soft-margin SVM.
//!
//! Binary training solves the dual
//!
//! ```text
//! min_a  1/2 a'Qa - e'a   s.t.  y'a = 0,  0 <= a_i <= C_{y_i},   Q_ij = y_i y_j k(x_i, x_j)
//! ```
//!
//! with sequential minimal optimization: each step updates the pair chosen by
//! second-order maximal-violating-pair selection, and the loop stops once the
//! KKT gap `max_{I_up} -y G - min_{I_low} -y G` drops below the tolerance. That
//! gap bounds every training point's margin violation, so a returned model
//! always satisfies KKT within `tolerance`.
//!
//! Per-class box constraints `C_+ = c * class_weight_pos`, `C_- = c * class_weight_neg`
//! provide cost sensitivity. Multiclass uses one-vs-one voting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Error, Result};
use crate::ClassId;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(config_err!("rbf gamma must be positive, got {gamma}"))
            }
            _ => Ok(()),
        }
    }

    /// Kernel value without the dimension check.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                libm::exp(-gamma * d2)
            }
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            KernelSpec::Linear => None,
            KernelSpec::Rbf { gamma } => Some(gamma),
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(contract!("kernel inputs have dimensions {} and {}", x.len(), y.len()));
    }
    Ok(spec.eval_unchecked(x, y))
}

/// `1 / (d * var)` over every value of every feature; 1 when the data is constant.
pub fn auto_gamma<F: AsRef<[f64]>>(features: &[F]) -> f64 {
    let dim = features.first().map_or(0, |f| f.as_ref().len());
    let count = (features.len() * dim) as f64;
    if count == 0.0 {
        return 1.0;
    }
    let mean = features.iter().flat_map(|f| f.as_ref()).sum::<f64>() / count;
    let var = features
        .iter()
        .flat_map(|f| f.as_ref())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count;
    if var > 0.0 {
        1.0 / (dim as f64 * var)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmTrainConfig {
    pub c: f64,
    pub class_weight_pos: f64,
    pub class_weight_neg: f64,
    /// `None` selects an RBF kernel with [`auto_gamma`] on the training data.
    pub kernel: Option<KernelSpec>,
    pub tolerance: f64,
    /// Iteration cap, in units of `n` pair updates.
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        Self {
            c: 10.0,
            class_weight_pos: 1.0,
            class_weight_neg: 1.0,
            kernel: None,
            tolerance: 1e-3,
            max_passes: 10_000,
            seed: 0,
        }
    }
}

impl SvmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.c) {
            return Err(config_err!("c must be positive, got {}", self.c));
        }
        if !positive(self.class_weight_pos) || !positive(self.class_weight_neg) {
            return Err(config_err!("class weights must be positive"));
        }
        if !positive(self.tolerance) {
            return Err(config_err!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_passes == 0 {
            return Err(config_err!("max_passes must be positive"));
        }
        if let Some(k) = &self.kernel {
            k.validate()?;
        }
        Ok(())
    }

    pub fn box_for(&self, label: Polarity) -> f64 {
        match label {
            Polarity::Positive => self.c * self.class_weight_pos,
            Polarity::Negative => self.c * self.class_weight_neg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Negative => -1.0,
            Polarity::Positive => 1.0,
        }
    }

    /// `sign(0)` is positive.
    pub fn of(value: f64) -> Self {
        if value >= 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coefficients: Vec<f64>,
    pub bias: f64,
    pub kernel: KernelSpec,
    /// Class identifiers for labels -1 and +1.
    pub negative_class: ClassId,
    pub positive_class: ClassId,
}

impl BinarySvmModel {
    pub fn dimension(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        let dim = self.dimension();
        if !self.support_vectors.is_empty() && x.len() != dim {
            return Err(contract!("input has dimension {}, model expects {dim}", x.len()));
        }
        Ok(self.decision_value_unchecked(x))
    }

    #[inline]
    pub fn decision_value_unchecked(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coefficients)
            .map(|(sv, coef)| coef * self.kernel.eval_unchecked(sv, x))
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> Result<Polarity> {
        self.decision_value(x).map(Polarity::of)
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<&ClassId> {
        Ok(match self.predict(x)? {
            Polarity::Positive => &self.positive_class,
            Polarity::Negative => &self.negative_class,
        })
    }
}

/// Full dual solution, including non-support points. Mostly useful to tests
/// and diagnostics; [`train_binary`] keeps only the support vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub kernel: KernelSpec,
    pub iterations: usize,
}

impl DualSolution {
    pub fn objective<F: AsRef<[f64]>>(&self, features: &[F], labels: &[Polarity]) -> f64 {
        dual_objective(&self.alpha, features, labels, &self.kernel)
    }
}

/// `e'a - 1/2 a'Qa`, the quantity SMO maximises.
pub fn dual_objective<F: AsRef<[f64]>>(alpha: &[f64], features: &[F], labels: &[Polarity], kernel: &KernelSpec) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alpha[i]
                * alpha[j]
                * labels[i].sign()
                * labels[j].sign()
                * kernel.eval_unchecked(features[i].as_ref(), features[j].as_ref());
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

fn check_inputs<F: AsRef<[f64]>>(features: &[F], labels: &[Polarity]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(contract!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        ));
    }
    let dim = features.first().map_or(0, |f| f.as_ref().len());
    for (i, f) in features.iter().enumerate() {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(contract!("feature {i} has dimension {}, expected {dim}", f.len()));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(contract!("feature {i} contains non-finite values"));
        }
    }
    let has = |p| labels.contains(&p);
    if !has(Polarity::Positive) || !has(Polarity::Negative) {
        return Err(Error::Training("both classes must be present".into()));
    }
    Ok(dim)
}

/// Solves the dual and returns every multiplier.
pub fn solve_dual<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[Polarity],
    config: &SvmTrainConfig,
) -> Result<DualSolution> {
    config.validate()?;
    check_inputs(features, labels)?;
    let kernel = config.kernel.unwrap_or(KernelSpec::Rbf {
        gamma: auto_gamma(features),
    });
    let n = features.len();
    let y: Vec<f64> = labels.iter().map(|l| l.sign()).collect();
    let cap: Vec<f64> = labels.iter().map(|&l| config.box_for(l)).collect();

    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval_unchecked(features[i].as_ref(), features[j].as_ref());
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let kd = |i: usize, j: usize| k[i * n + j];

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let max_iter = config.max_passes.saturating_mul(n.max(100));
    let eps = config.tolerance;
    let mut iterations = 0;

    loop {
        // i: maximal -y_t G_t over I_up
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { alpha[t] < cap[t] } else { alpha[t] > 0.0 };
            if in_up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = t;
            }
        }
        // j: second-order choice over I_low
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut best = f64::INFINITY;
        if i_sel != usize::MAX {
            let i = i_sel;
            for t in 0..n {
                let in_low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < cap[t] };
                if !in_low {
                    continue;
                }
                let v = y[t] * grad[t];
                if v >= gmax2 {
                    gmax2 = v;
                }
                let diff = gmax + v;
                if diff > 0.0 {
                    let mut quad = kd(i, i) + kd(t, t) - 2.0 * kd(i, t);
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -(diff * diff) / quad;
                    if obj <= best {
                        best = obj;
                        j_sel = t;
                    }
                }
            }
        }
        if i_sel == usize::MAX || j_sel == usize::MAX || gmax + gmax2 < eps {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::Training(format!(
                "SMO did not reach KKT tolerance {eps} within {max_iter} iterations \
                 (gap {})",
                gmax + gmax2
            )));
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let (ci, cj) = (cap[i], cap[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * kd(i, j);
        if y[i] != y[j] {
            let mut quad = kd(i, i) + kd(j, j) + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let mut quad = kd(i, i) + kd(j, j) - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kd(t, i) * di + y[j] * kd(t, j) * dj);
        }
    }

    Ok(DualSolution {
        bias: bias_from_gradient(&alpha, &grad, &y, &cap),
        alpha,
        kernel,
        iterations,
    })
}

/// Average of `-y_i G_i` over free multipliers, or the midpoint of the
/// feasible interval when every multiplier is at a bound.
fn bias_from_gradient(alpha: &[f64], grad: &[f64], y: &[f64], cap: &[f64]) -> f64 {
    let mut upper = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..alpha.len() {
        let v = -y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < cap[t] {
            free_sum += v;
            free += 1;
            continue;
        }
        let at_upper = alpha[t] >= cap[t];
        // a = 0 with y = +1, or a = C with y = -1, needs b >= v
        if (y[t] > 0.0) != at_upper {
            lower = lower.max(v);
        } else {
            upper = upper.min(v);
        }
    }
    if free > 0 {
        free_sum / free as f64
    } else if upper.is_finite() && lower.is_finite() {
        (upper + lower) / 2.0
    } else if upper.is_finite() {
        upper
    } else {
        lower
    }
}

/// Largest KKT violation of `model` on a training set, measured on the margin
/// `y f(x) - 1` against the multipliers in `alpha`.
pub fn max_kkt_violation<F: AsRef<[f64]>>(
    solution: &DualSolution,
    features: &[F],
    labels: &[Polarity],
    config: &SvmTrainConfig,
) -> f64 {
    let model = solution_to_model(solution, features, labels, ClassId::from("-1"), ClassId::from("+1"));
    let bound_eps = 1e-12;
    features
        .iter()
        .zip(labels)
        .zip(&solution.alpha)
        .map(|((x, &l), &a)| {
            let margin = l.sign() * model.decision_value_unchecked(x.as_ref()) - 1.0;
            let c = config.box_for(l);
            if a <= bound_eps {
                (-margin).max(0.0)
            } else if a >= c - bound_eps {
                margin.max(0.0)
            } else {
                margin.abs()
            }
        })
        .fold(0.0, f64::max)
}

fn solution_to_model<F: AsRef<[f64]>>(
    solution: &DualSolution,
    features: &[F],
    labels: &[Polarity],
    negative_class: ClassId,
    positive_class: ClassId,
) -> BinarySvmModel {
    let (support_vectors, dual_coefficients) = features
        .iter()
        .zip(labels)
        .zip(&solution.alpha)
        .filter(|(_, &a)| a > 0.0)
        .map(|((x, l), a)| (x.as_ref().to_vec(), a * l.sign()))
        .unzip();
    BinarySvmModel {
        support_vectors,
        dual_coefficients,
        bias: solution.bias,
        kernel: solution.kernel,
        negative_class,
        positive_class,
    }
}

pub fn train_binary<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[Polarity],
    config: &SvmTrainConfig,
) -> Result<BinarySvmModel> {
    train_binary_labeled(features, labels, ClassId::from("-1"), ClassId::from("+1"), config)
}

pub fn train_binary_labeled<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[Polarity],
    negative_class: ClassId,
    positive_class: ClassId,
    config: &SvmTrainConfig,
) -> Result<BinarySvmModel> {
    let solution = solve_dual(features, labels, config)?;
    Ok(solution_to_model(
        &solution,
        features,
        labels,
        negative_class,
        positive_class,
    ))
}

/// One binary model per unordered class pair; `first` is the positive side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairModel {
    pub first: usize,
    pub second: usize,
    pub model: BinarySvmModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassSvmModel {
    pub classes: Vec<ClassId>,
    pub pairwise: Vec<PairModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvoPrediction {
    pub class: ClassId,
    /// Votes per class, aligned with the model's class list.
    pub votes: Vec<u32>,
    /// Sum of `|decision value|` over the pairwise models that voted for each class.
    pub mass: Vec<f64>,
}

impl MulticlassSvmModel {
    pub fn pair(&self, a: &ClassId, b: &ClassId) -> Option<&PairModel> {
        let ia = self.classes.iter().position(|c| c == a)?;
        let ib = self.classes.iter().position(|c| c == b)?;
        self.pairwise
            .iter()
            .find(|p| (p.first, p.second) == (ia, ib) || (p.first, p.second) == (ib, ia))
    }

    pub fn dimension(&self) -> usize {
        self.pairwise.iter().map(|p| p.model.dimension()).max().unwrap_or(0)
    }

    pub fn predict(&self, x: &[f64]) -> Result<OvoPrediction> {
        let dim = self.dimension();
        if x.len() != dim {
            return Err(contract!("input has dimension {}, model expects {dim}", x.len()));
        }
        Ok(self.predict_unchecked(x))
    }

    pub fn predict_unchecked(&self, x: &[f64]) -> OvoPrediction {
        let k = self.classes.len();
        let mut votes = vec![0u32; k];
        let mut mass = vec![0.0; k];
        for p in &self.pairwise {
            let d = p.model.decision_value_unchecked(x);
            let winner = if d >= 0.0 { p.first } else { p.second };
            votes[winner] += 1;
            mass[winner] += d.abs();
        }
        let best = (0..k)
            .max_by(|&a, &b| {
                votes[a]
                    .cmp(&votes[b])
                    .then(mass[a].total_cmp(&mass[b]))
                    // smaller identifier wins the final tie
                    .then(self.classes[b].cmp(&self.classes[a]))
            })
            .unwrap_or(0);
        OvoPrediction {
            class: self.classes[best].clone(),
            votes,
            mass,
        }
    }
}

/// Trains `K(K-1)/2` pairwise models. `classes` fixes the class order; every
/// class needs at least two samples.
pub fn train_ovo<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[ClassId],
    classes: &[ClassId],
    config: &SvmTrainConfig,
) -> Result<MulticlassSvmModel> {
    if features.len() != labels.len() {
        return Err(contract!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        ));
    }
    if classes.len() < 2 {
        return Err(Error::Training(format!(
            "one-vs-one needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let index: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| (0..labels.len()).filter(|&i| &labels[i] == c).collect())
        .collect();
    for (c, idx) in classes.iter().zip(&index) {
        if idx.len() < 2 {
            return Err(Error::InsufficientClass {
                class: String::from(c.as_str()),
                available: idx.len(),
                required: 2,
            });
        }
    }
    let mut pairwise = Vec::with_capacity(classes.len() * (classes.len() - 1) / 2);
    for a in 0..classes.len() {
        for b in a + 1..classes.len() {
            let mut xs = Vec::with_capacity(index[a].len() + index[b].len());
            let mut ys = Vec::with_capacity(xs.capacity());
            for &i in &index[a] {
                xs.push(features[i].as_ref());
                ys.push(Polarity::Positive);
            }
            for &i in &index[b] {
                xs.push(features[i].as_ref());
                ys.push(Polarity::Negative);
            }
            let model = train_binary_labeled(&xs, &ys, classes[b].clone(), classes[a].clone(), config)?;
            pairwise.push(PairModel {
                first: a,
                second: b,
                model,
            });
        }
    }
    Ok(MulticlassSvmModel {
        classes: classes.to_vec(),
        pairwise,
    })
}
