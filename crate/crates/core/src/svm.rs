//! Soft-margin support vector machine trained with SMO.
//!
//! The solver minimizes the dual `1/2 a'Qa - e'a` subject to `y'a = 0` and
//! `0 <= a_i <= C`, where `Q_ij = y_i y_j K(x_i, x_j)`. Each iteration picks
//! the maximal-violating index `i` and the partner `j` with the largest
//! second-order decrease, and stops once the KKT gap falls below the
//! tolerance. The offset is the mean of `y_i - sum_j a_j y_j K_ij` over free
//! support vectors (midpoint of the feasible interval if there are none).
//!
//! Model file (`.model`), version 1, one record per line:
//!
//! ```text
//! # gridsync-svm 1
//! kernel rbf <gamma>        or: kernel linear
//! c <C>
//! offset <b>
//! dimension <d>
//! scaling none              or: scaling <d> followed by d lines `<shift> <scale>`
//! support_vectors <n>
//! <a_i y_i> <x_1> ... <x_d> (n lines)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsim::StabilityLabel;
use crate::featureset::Dataset;
use crate::rng::rng_for;

pub const MODEL_VERSION: u32 = 1;
const MODEL_MAGIC: &str = "# gridsync-svm ";
const TAG_OVERSAMPLE: u64 = 0x4f56_4552;
const TAG_FOLDS: u64 = 0x464f_4c44;
const TAU: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum SvmError {
    #[error("training set is empty")]
    Empty,
    #[error("training set has a single class")]
    SingleClass,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("SMO did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("cross-validation: {0}")]
    Folds(String),
    #[error("model format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Rbf { gamma: f64 },
    Linear,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), SvmError> {
        match *self {
            KernelSpec::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(SvmError::Config(format!("RBF gamma {gamma} must be positive")))
            }
            _ => Ok(()),
        }
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
            KernelSpec::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        }
    }

    fn gamma(&self) -> f64 {
        match *self {
            KernelSpec::Rbf { gamma } => gamma,
            KernelSpec::Linear => 0.0,
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64, SvmError> {
    if x.len() != y.len() {
        return Err(SvmError::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(spec.eval(x, y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kernel: KernelSpec,
    pub c: f64,
    /// KKT gap at which SMO stops.
    pub tolerance: f64,
    /// Maximum number of pair updates.
    pub max_passes: usize,
    pub seed: u64,
    /// Standardize every feature to zero mean and unit variance first.
    pub scale: bool,
}

impl TrainConfig {
    pub fn new(kernel: KernelSpec, c: f64) -> Self {
        TrainConfig {
            kernel,
            c,
            tolerance: 1e-3,
            max_passes: 1_000_000,
            seed: 0,
            scale: true,
        }
    }

    pub fn validate(&self) -> Result<(), SvmError> {
        self.kernel.validate()?;
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SvmError::Config(format!("C = {} must be positive", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(SvmError::Config("tolerance must be positive".into()));
        }
        if self.max_passes == 0 {
            return Err(SvmError::Config("max_passes must be positive".into()));
        }
        Ok(())
    }
}

/// The RBF grid gamma in {1e-6, 1e-5, 1e-4} by C in {0.1, 1, 10, 100}.
pub fn default_grid(scale: bool) -> Vec<TrainConfig> {
    let mut grid = Vec::new();
    for gamma in [1e-6, 1e-5, 1e-4] {
        for c in [0.1, 1.0, 10.0, 100.0] {
            grid.push(TrainConfig {
                scale,
                ..TrainConfig::new(KernelSpec::Rbf { gamma }, c)
            });
        }
    }
    grid
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub shift: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `a_i y_i` per support vector.
    pub dual_weights: Vec<f64>,
    pub offset: f64,
    pub kernel: KernelSpec,
    pub c: f64,
    pub feature_dim: usize,
    /// Applied to inputs before the kernel; support vectors are stored scaled.
    pub scaling: Option<Vec<FeatureScale>>,
}

/// Full dual solution, for diagnostics and verification.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub offset: f64,
    pub objective: f64,
    pub iterations: usize,
}

fn sign(l: StabilityLabel) -> f64 {
    l.as_class() as f64
}

pub fn kernel_matrix(kernel: &KernelSpec, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&x[i], &x[j]);
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

/// `1/2 a'Qa - e'a`.
pub fn dual_objective(k: &[Vec<f64>], y: &[f64], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * k[i][j];
        }
    }
    0.5 * quad - alpha.iter().sum::<f64>()
}

/// SMO on a precomputed kernel matrix. `y` holds +-1.
pub fn solve_dual(
    k: &[Vec<f64>],
    y: &[f64],
    c: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<DualSolution, SvmError> {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let q = |i: usize, j: usize| y[i] * y[j] * k[i][j];
    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    let mut iterations = 0;
    loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                if !in_low(alpha[t], y[t]) {
                    continue;
                }
                let v = -y[t] * grad[t];
                gmin = gmin.min(v);
                let b = gmax - v;
                if b > 0.0 {
                    let a = (k[i][i] + k[t][t] - 2.0 * k[i][t]).max(TAU);
                    let score = -b * b / a;
                    if score < best {
                        best = score;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else { break };
        if gmax - gmin <= tolerance {
            break;
        }
        if iterations >= max_iterations {
            return Err(SvmError::NotConverged(max_iterations));
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (k[i][i] + k[j][j] - 2.0 * k[i][j]).max(TAU);
        if y[i] != y[j] {
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
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    let offset = compute_offset(&alpha, &grad, y, c);
    Ok(DualSolution {
        objective: dual_objective(k, y, &alpha),
        alpha,
        offset,
        iterations,
    })
}

fn compute_offset(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let mut free_sum = 0.0;
    let mut free_n = 0usize;
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for t in 0..alpha.len() {
        let r = -y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += r;
            free_n += 1;
        } else {
            // r is the offset that would put this point exactly on its margin.
            let at_zero = alpha[t] <= 0.0;
            if (y[t] > 0.0) == at_zero {
                lower = lower.max(r);
            } else {
                upper = upper.min(r);
            }
        }
    }
    if free_n > 0 {
        free_sum / free_n as f64
    } else if lower.is_finite() && upper.is_finite() {
        0.5 * (lower + upper)
    } else if lower.is_finite() {
        lower
    } else {
        upper
    }
}

fn fit_scaling(x: &[Vec<f64>]) -> Vec<FeatureScale> {
    let d = x[0].len();
    let n = x.len() as f64;
    (0..d)
        .map(|j| {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            FeatureScale {
                shift: mean,
                scale: if sd > 1e-12 { sd } else { 1.0 },
            }
        })
        .collect()
}

fn apply_scaling(s: &Option<Vec<FeatureScale>>, x: &[f64]) -> Vec<f64> {
    match s {
        Some(s) => x.iter().zip(s).map(|(v, f)| (v - f.shift) / f.scale).collect(),
        None => x.to_vec(),
    }
}

/// Trains on raw vectors; also returns the full dual solution.
pub fn train_with_solution(
    x: &[Vec<f64>],
    labels: &[StabilityLabel],
    cfg: &TrainConfig,
) -> Result<(SvmModel, DualSolution), SvmError> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(SvmError::Empty);
    }
    if labels.len() != x.len() {
        return Err(SvmError::Dimension {
            expected: x.len(),
            got: labels.len(),
        });
    }
    let d = x[0].len();
    if let Some(bad) = x.iter().find(|r| r.len() != d) {
        return Err(SvmError::Dimension {
            expected: d,
            got: bad.len(),
        });
    }
    if labels.iter().all(|l| *l == labels[0]) {
        return Err(SvmError::SingleClass);
    }
    let scaling = cfg.scale.then(|| fit_scaling(x));
    let xs: Vec<Vec<f64>> = x.iter().map(|r| apply_scaling(&scaling, r)).collect();
    let y: Vec<f64> = labels.iter().map(|l| sign(*l)).collect();
    let k = kernel_matrix(&cfg.kernel, &xs);
    let sol = solve_dual(&k, &y, cfg.c, cfg.tolerance, cfg.max_passes)?;
    let mut support_vectors = Vec::new();
    let mut dual_weights = Vec::new();
    for (t, a) in sol.alpha.iter().enumerate() {
        if *a > 0.0 {
            support_vectors.push(xs[t].clone());
            dual_weights.push(a * y[t]);
        }
    }
    let model = SvmModel {
        support_vectors,
        dual_weights,
        offset: sol.offset,
        kernel: cfg.kernel,
        c: cfg.c,
        feature_dim: d,
        scaling,
    };
    Ok((model, sol))
}

pub fn train(x: &[Vec<f64>], labels: &[StabilityLabel], cfg: &TrainConfig) -> Result<SvmModel, SvmError> {
    train_with_solution(x, labels, cfg).map(|(m, _)| m)
}

pub fn train_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<SvmModel, SvmError> {
    let x: Vec<Vec<f64>> = ds.examples.iter().map(|e| e.features.clone()).collect();
    train(&x, &ds.labels(), cfg)
}

impl SvmModel {
    pub fn decision_value(&self, x: &[f64]) -> Result<f64, SvmError> {
        if x.len() != self.feature_dim {
            return Err(SvmError::Dimension {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        let xs = apply_scaling(&self.scaling, x);
        let sum: f64 = self
            .support_vectors
            .iter()
            .zip(&self.dual_weights)
            .map(|(sv, w)| w * self.kernel.eval(sv, &xs))
            .sum();
        Ok(sum + self.offset)
    }

    /// Sign of the decision value; zero counts as stable.
    pub fn predict(&self, x: &[f64]) -> Result<StabilityLabel, SvmError> {
        Ok(if self.decision_value(x)? >= 0.0 {
            StabilityLabel::Stable
        } else {
            StabilityLabel::Unstable
        })
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<StabilityLabel>, SvmError> {
        ds.examples.iter().map(|e| self.predict(&e.features)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_MAGIC}{MODEL_VERSION}");
        match self.kernel {
            KernelSpec::Rbf { gamma } => {
                let _ = writeln!(s, "kernel rbf {gamma}");
            }
            KernelSpec::Linear => {
                let _ = writeln!(s, "kernel linear");
            }
        }
        let _ = writeln!(s, "c {}", self.c);
        let _ = writeln!(s, "offset {}", self.offset);
        let _ = writeln!(s, "dimension {}", self.feature_dim);
        match &self.scaling {
            None => {
                let _ = writeln!(s, "scaling none");
            }
            Some(sc) => {
                let _ = writeln!(s, "scaling {}", sc.len());
                for f in sc {
                    let _ = writeln!(s, "{} {}", f.shift, f.scale);
                }
            }
        }
        let _ = writeln!(s, "support_vectors {}", self.support_vectors.len());
        for (sv, w) in self.support_vectors.iter().zip(&self.dual_weights) {
            let _ = write!(s, "{w}");
            for v in sv {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SvmError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, m: &str| SvmError::Format {
            line,
            message: m.to_string(),
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, &format!("missing {what}")));
        let (ln, first) = next("header")?;
        if first.trim() != format!("{MODEL_MAGIC}{MODEL_VERSION}") {
            return Err(err(ln, "not a version 1 model file"));
        }
        fn field<'a>(line: (usize, &'a str), key: &str) -> Result<(usize, Vec<&'a str>), SvmError> {
            let mut parts = line.1.split_whitespace();
            if parts.next() != Some(key) {
                return Err(SvmError::Format {
                    line: line.0,
                    message: format!("expected `{key}`"),
                });
            }
            Ok((line.0, parts.collect()))
        }
        fn num<T: std::str::FromStr>(line: usize, s: Option<&&str>) -> Result<T, SvmError> {
            s.and_then(|v| v.parse().ok()).ok_or(SvmError::Format {
                line,
                message: "bad number".into(),
            })
        }
        let (ln, k) = field(next("kernel")?, "kernel")?;
        let kernel = match k.first().copied() {
            Some("rbf") => KernelSpec::Rbf { gamma: num(ln, k.get(1))? },
            Some("linear") => KernelSpec::Linear,
            _ => return Err(err(ln, "unknown kernel")),
        };
        let (ln, v) = field(next("c")?, "c")?;
        let c: f64 = num(ln, v.first())?;
        let (ln, v) = field(next("offset")?, "offset")?;
        let offset: f64 = num(ln, v.first())?;
        let (ln, v) = field(next("dimension")?, "dimension")?;
        let feature_dim: usize = num(ln, v.first())?;
        let (ln, v) = field(next("scaling")?, "scaling")?;
        let scaling = if v.first() == Some(&"none") {
            None
        } else {
            let n: usize = num(ln, v.first())?;
            if n != feature_dim {
                return Err(err(ln, "scaling length differs from dimension"));
            }
            let mut sc = Vec::with_capacity(n);
            for _ in 0..n {
                let (ln, l) = next("scaling row")?;
                let p: Vec<&str> = l.split_whitespace().collect();
                if p.len() != 2 {
                    return Err(err(ln, "scaling rows hold `shift scale`"));
                }
                sc.push(FeatureScale {
                    shift: num(ln, p.first())?,
                    scale: num(ln, p.get(1))?,
                });
            }
            Some(sc)
        };
        let (ln, v) = field(next("support_vectors")?, "support_vectors")?;
        let n: usize = num(ln, v.first())?;
        let mut support_vectors = Vec::with_capacity(n);
        let mut dual_weights = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, l) = next("support vector")?;
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err(ln, "bad number"))?;
            if vals.len() != feature_dim + 1 {
                return Err(err(ln, "support vector has the wrong dimension"));
            }
            dual_weights.push(vals[0]);
            support_vectors.push(vals[1..].to_vec());
        }
        Ok(SvmModel {
            support_vectors,
            dual_weights,
            offset,
            kernel,
            c,
            feature_dim,
            scaling,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SvmError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| SvmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SvmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SvmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        SvmModel::from_text(&text)
    }
}

/// Indices after random oversampling: all originals in order, then minority
/// indices drawn uniformly with replacement until both classes are equal.
pub fn oversample_indices(labels: &[StabilityLabel], seed: u64) -> Result<Vec<usize>, SvmError> {
    let stable: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == StabilityLabel::Stable).collect();
    let unstable: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == StabilityLabel::Unstable).collect();
    if stable.is_empty() || unstable.is_empty() {
        return Err(SvmError::SingleClass);
    }
    let (minority, deficit) = if stable.len() < unstable.len() {
        (&stable, unstable.len() - stable.len())
    } else {
        (&unstable, stable.len() - unstable.len())
    };
    let mut rng = rng_for(seed, TAG_OVERSAMPLE, 0);
    let mut out: Vec<usize> = (0..labels.len()).collect();
    out.extend((0..deficit).map(|_| minority[rng.random_range(0..minority.len())]));
    Ok(out)
}

pub fn oversample(ds: &Dataset, seed: u64) -> Result<Dataset, SvmError> {
    Ok(ds.subset(&oversample_indices(&ds.labels(), seed)?))
}

/// Stratified fold assignment: each class is shuffled, the classes are
/// concatenated and positions are dealt to folds round-robin.
pub fn stratified_folds(labels: &[StabilityLabel], k: usize, seed: u64) -> Result<Vec<usize>, SvmError> {
    if k < 2 {
        return Err(SvmError::Folds(format!("need at least 2 folds, got {k}")));
    }
    if k > labels.len() {
        return Err(SvmError::Folds(format!("{k} folds for {} examples", labels.len())));
    }
    let mut rng = rng_for(seed, TAG_FOLDS, 0);
    let mut order = Vec::with_capacity(labels.len());
    for class in [StabilityLabel::Stable, StabilityLabel::Unstable] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let mut fold = vec![0; labels.len()];
    for (pos, i) in order.into_iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

/// Mean of the per-class recalls over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[StabilityLabel], truth: &[StabilityLabel]) -> f64 {
    let mut recalls = Vec::new();
    for class in [StabilityLabel::Stable, StabilityLabel::Unstable] {
        let total = truth.iter().filter(|t| **t == class).count();
        if total > 0 {
            let hit = pred.iter().zip(truth).filter(|(p, t)| **t == class && *p == *t).count();
            recalls.push(hit as f64 / total as f64);
        }
    }
    recalls.iter().sum::<f64>() / recalls.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub config: TrainConfig,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: TrainConfig,
    pub rows: Vec<CvRow>,
}

/// k-fold cross-validation over `grid`. Training folds are oversampled;
/// validation folds are not. The best configuration has the highest mean
/// balanced accuracy; ties go to smaller C, then smaller gamma.
pub fn cross_validate(
    x: &[Vec<f64>],
    labels: &[StabilityLabel],
    grid: &[TrainConfig],
    k: usize,
    seed: u64,
) -> Result<CvResult, SvmError> {
    if grid.is_empty() {
        return Err(SvmError::Folds("empty grid".into()));
    }
    let folds = stratified_folds(labels, k, seed)?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..k).map(move |f| (g, f))).collect();
    let scores: Vec<Result<f64, SvmError>> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let train_idx: Vec<usize> = (0..x.len()).filter(|i| folds[*i] != f).collect();
            let val_idx: Vec<usize> = (0..x.len()).filter(|i| folds[*i] == f).collect();
            let train_labels: Vec<StabilityLabel> = train_idx.iter().map(|i| labels[*i]).collect();
            let picked = oversample_indices(&train_labels, seed ^ (f as u64 + 1))?;
            let tx: Vec<Vec<f64>> = picked.iter().map(|p| x[train_idx[*p]].clone()).collect();
            let ty: Vec<StabilityLabel> = picked.iter().map(|p| train_labels[*p]).collect();
            let model = train(&tx, &ty, &grid[g])?;
            let pred: Vec<StabilityLabel> = val_idx
                .iter()
                .map(|i| model.predict(&x[*i]))
                .collect::<Result<_, _>>()?;
            let truth: Vec<StabilityLabel> = val_idx.iter().map(|i| labels[*i]).collect();
            Ok(balanced_accuracy(&pred, &truth))
        })
        .collect();
    let mut rows = Vec::with_capacity(grid.len());
    let mut it = scores.into_iter();
    for cfg in grid {
        let fold_scores: Vec<f64> = (0..k).map(|_| it.next().expect("one score per job")).collect::<Result<_, _>>()?;
        let mean = fold_scores.iter().sum::<f64>() / k as f64;
        rows.push(CvRow {
            config: cfg.clone(),
            fold_scores,
            mean,
        });
    }
    let best = rows
        .iter()
        .min_by(|a, b| {
            b.mean
                .total_cmp(&a.mean)
                .then(a.config.c.total_cmp(&b.config.c))
                .then(a.config.kernel.gamma().total_cmp(&b.config.kernel.gamma()))
        })
        .expect("grid is nonempty")
        .config
        .clone();
    Ok(CvResult { best, rows })
}

pub fn cross_validate_dataset(
    ds: &Dataset,
    grid: &[TrainConfig],
    k: usize,
    seed: u64,
) -> Result<CvResult, SvmError> {
    let x: Vec<Vec<f64>> = ds.examples.iter().map(|e| e.features.clone()).collect();
    cross_validate(&x, &ds.labels(), grid, k, seed)
}
