//! Independent dual QP oracle and random problems for checking the SMO
//! solver.

use gridsync_core::dynsim::StabilityLabel::{self, Stable, Unstable};
use gridsync_core::rng::rng_for;
use gridsync_core::svm::{DualSolution, KernelSpec, SvmModel, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::RngExt;

/// Euclidean projection onto `{0 <= a <= c, y'a = 0}` by bisection on the
/// multiplier of the equality constraint.
pub fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |lam: f64| -> Vec<f64> { v.iter().zip(y).map(|(vi, yi)| (vi - lam * yi).clamp(0.0, c)).collect() };
    let g = |a: &[f64]| a.iter().zip(y).map(|(ai, yi)| ai * yi).sum::<f64>();
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Independent dual minimizer: accelerated projected gradient followed by
/// an exact solve of the KKT system on the detected free set.
pub fn oracle(k: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let n = y.len();
    let q = DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * k[i][j]);
    let lip = q.symmetric_eigenvalues().max().max(1e-12);
    let obj = |a: &[f64]| {
        let av = DVector::from_column_slice(a);
        0.5 * (av.transpose() * &q * &av)[(0, 0)] - av.sum()
    };
    let grad = |a: &[f64]| -> Vec<f64> {
        let av = DVector::from_column_slice(a);
        (&q * av).iter().map(|g| g - 1.0).collect()
    };
    let mut a = vec![0.0; n];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let g = grad(&z);
        let step: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi - gi / lip).collect();
        let next = project(&step, y, c);
        let t2 = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = next.iter().zip(&a).map(|(n1, a1)| n1 + (t - 1.0) / t2 * (n1 - a1)).collect();
        a = next;
        t = t2;
    }
    let mut best = obj(&a);
    let eps = 1e-6 * c.max(1.0);
    let free: Vec<usize> = (0..n).filter(|i| a[*i] > eps && a[*i] < c - eps).collect();
    let mut fixed = a.clone();
    for i in 0..n {
        if !free.contains(&i) {
            fixed[i] = if a[i] >= c - eps { c } else { 0.0 };
        }
    }
    let m = free.len();
    if m > 0 {
        let mut sys = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for (r, &i) in free.iter().enumerate() {
            for (s, &j) in free.iter().enumerate() {
                sys[(r, s)] = q[(i, j)];
            }
            sys[(r, m)] = y[i];
            sys[(m, r)] = y[i];
            let bounded: f64 = (0..n).filter(|j| !free.contains(j)).map(|j| q[(i, j)] * fixed[j]).sum();
            rhs[r] = 1.0 - bounded;
        }
        rhs[m] = -(0..n).filter(|j| !free.contains(j)).map(|j| y[j] * fixed[j]).sum::<f64>();
        if let Some(sol) = sys.lu().solve(&rhs) {
            let mut polished = fixed.clone();
            for (r, &i) in free.iter().enumerate() {
                polished[i] = sol[r];
            }
            if polished.iter().all(|v| *v >= -1e-12 && *v <= c + 1e-12) {
                best = best.min(obj(&polished));
            }
        }
    } else {
        best = best.min(obj(&fixed));
    }
    best
}

pub fn random_problem(seed: u64) -> (Vec<Vec<f64>>, Vec<StabilityLabel>, KernelSpec, f64) {
    let mut rng = rng_for(seed, 0x5445_5354, 0);
    let n = rng.random_range(2..=12usize);
    let d = rng.random_range(1..=4usize);
    let grid_c = [0.1, 1.0, 10.0, 100.0];
    let c = grid_c[rng.random_range(0..4usize)];
    let (kernel, spread) = if rng.random_range(0..2u32) == 0 {
        (KernelSpec::Linear, 1.0)
    } else {
        let gamma = [1e-6, 1e-5, 1e-4][rng.random_range(0..3usize)];
        // Spread the points so that gamma * distance^2 is of order one.
        (KernelSpec::Rbf { gamma }, rng.random_range(0.3..3.0) / f64::sqrt(gamma))
    };
    let mut labels: Vec<StabilityLabel> = (0..n)
        .map(|_| if rng.random_range(0..2u32) == 0 { Stable } else { Unstable })
        .collect();
    labels[0] = Stable;
    labels[1] = Unstable;
    let x = labels
        .iter()
        .map(|l| {
            let centre = if *l == Stable { 0.4 } else { -0.4 };
            (0..d).map(|_| spread * (centre + rng.random_range(-1.0..1.0))).collect()
        })
        .collect();
    (x, labels, kernel, c)
}

pub fn raw(kernel: KernelSpec, c: f64, tolerance: f64) -> TrainConfig {
    TrainConfig {
        tolerance,
        scale: false,
        ..TrainConfig::new(kernel, c)
    }
}

/// Largest KKT violation of a trained model on its training set.
pub fn kkt_violation(model: &SvmModel, sol: &DualSolution, x: &[Vec<f64>], labels: &[StabilityLabel], c: f64) -> f64 {
    let mut worst = 0.0f64;
    for (i, xi) in x.iter().enumerate() {
        let yf = labels[i].as_class() as f64 * model.decision_value(xi).unwrap();
        let a = sol.alpha[i];
        let v = if a <= 0.0 {
            (1.0 - yf).max(0.0)
        } else if a >= c {
            (yf - 1.0).max(0.0)
        } else {
            (yf - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}
