use gridsync_core::dynsim::StabilityLabel::{self, Stable, Unstable};
use gridsync_core::rng::rng_for;
use gridsync_core::svm::*;
use proptest::prelude::*;
use rand::RngExt;

#[path = "support/svm_oracle.rs"]
mod svm_oracle;
use svm_oracle::{kkt_violation, oracle, random_problem, raw};

#[test]
fn smo_matches_the_dual_oracle_and_satisfies_kkt() {
    for seed in 0..200 {
        let (x, labels, kernel, c) = random_problem(seed);
        let y: Vec<f64> = labels.iter().map(|l| l.as_class() as f64).collect();
        let k = kernel_matrix(&kernel, &x);

        let (_, tight) = train_with_solution(&x, &labels, &raw(kernel, c, 1e-10)).unwrap();
        let reference = oracle(&k, &y, c);
        assert!(
            tight.objective <= reference + 1e-6 && (tight.objective - reference).abs() <= 1e-6,
            "seed {seed}: smo {} vs oracle {reference}",
            tight.objective
        );

        let (model, sol) = train_with_solution(&x, &labels, &raw(kernel, c, 1e-3)).unwrap();
        assert!(sol.alpha.iter().all(|a| *a >= 0.0 && *a <= c));
        let balance: f64 = sol.alpha.iter().zip(&y).map(|(a, yi)| a * yi).sum();
        assert!(balance.abs() < 1e-9 * c.max(1.0));
        let v = kkt_violation(&model, &sol, &x, &labels, c);
        assert!(v <= 1e-3 + 1e-12, "seed {seed}: KKT violation {v}");
    }
}

#[test]
fn two_point_problem_has_the_analytic_solution() {
    let x = vec![vec![0.0], vec![2.0]];
    let labels = vec![Stable, Unstable];
    let (model, sol) = train_with_solution(&x, &labels, &raw(KernelSpec::Linear, 100.0, 1e-3)).unwrap();
    assert!((sol.alpha[0] - 0.5).abs() < 1e-9 && (sol.alpha[1] - 0.5).abs() < 1e-9);
    assert!((model.offset - 1.0).abs() < 1e-9);
    // Boundary where the decision value crosses zero.
    let f0 = model.decision_value(&[0.0]).unwrap();
    let f2 = model.decision_value(&[2.0]).unwrap();
    let boundary = f0 / (f0 - f2) * 2.0;
    assert!((boundary - 1.0).abs() < 1e-6);
    assert_eq!(model.predict(&[0.0]).unwrap(), Stable);
    assert_eq!(model.predict(&[2.0]).unwrap(), Unstable);
    // Exactly on the boundary counts as stable.
    assert_eq!(model.decision_value(&[1.0]).unwrap(), 0.0);
    assert_eq!(model.predict(&[1.0]).unwrap(), Stable);
}

#[test]
fn kernel_values() {
    let rbf = KernelSpec::Rbf { gamma: 1e-4 };
    let x = [3.0, -1.0];
    assert_eq!(kernel_eval(&rbf, &x, &x).unwrap(), 1.0);
    let y = [3.0 + 6.0, -1.0 + 8.0];
    assert!((kernel_eval(&rbf, &x, &y).unwrap() - (-0.01f64).exp()).abs() < 1e-15);
    assert!((kernel_eval(&rbf, &x, &y).unwrap() - 0.990050).abs() < 1e-6);
    assert_eq!(kernel_eval(&KernelSpec::Linear, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
    assert!(kernel_eval(&KernelSpec::Linear, &[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn separable_blobs_are_learned_exactly() {
    let mut rng = rng_for(5, 1, 0);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let s = if i % 2 == 0 { 1.0 } else { -1.0 };
        x.push(vec![s * 3.0 + rng.random_range(-1.0..1.0), s * 3.0 + rng.random_range(-1.0..1.0)]);
        labels.push(if s > 0.0 { Stable } else { Unstable });
    }
    for kernel in [KernelSpec::Linear, KernelSpec::Rbf { gamma: 0.5 }] {
        let cfg = TrainConfig::new(kernel, 1000.0);
        let (model, sol) = train_with_solution(&x, &labels, &cfg).unwrap();
        for (xi, l) in x.iter().zip(&labels) {
            assert_eq!(model.predict(xi).unwrap(), *l);
        }
        assert!(kkt_violation(&model, &sol, &x, &labels, 1000.0) <= 1e-3 + 1e-12);
        assert_eq!(model.support_vectors.len(), sol.alpha.iter().filter(|a| **a > 0.0).count());
    }
}

#[test]
fn linear_model_matches_its_primal_form() {
    let (x, labels, _, _) = random_problem(77);
    let model = train(&x, &labels, &raw(KernelSpec::Linear, 1.0, 1e-6)).unwrap();
    let d = x[0].len();
    let w: Vec<f64> = (0..d)
        .map(|j| model.support_vectors.iter().zip(&model.dual_weights).map(|(sv, a)| a * sv[j]).sum())
        .collect();
    let mut rng = rng_for(1, 2, 3);
    for _ in 0..100 {
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let primal: f64 = w.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + model.offset;
        let dual = model.decision_value(&p).unwrap();
        assert!((primal - dual).abs() < 1e-9);
        assert_eq!(
            model.predict(&p).unwrap(),
            if primal >= 0.0 { Stable } else { Unstable }
        );
    }
}

#[test]
fn training_errors() {
    let cfg = TrainConfig::new(KernelSpec::Linear, 1.0);
    assert!(matches!(train(&[vec![1.0], vec![2.0]], &[Stable, Stable], &cfg), Err(SvmError::SingleClass)));
    assert!(matches!(train(&[], &[], &cfg), Err(SvmError::Empty)));
    let bad = TrainConfig::new(KernelSpec::Rbf { gamma: -1.0 }, 1.0);
    assert!(train(&[vec![1.0], vec![2.0]], &[Stable, Unstable], &bad).is_err());
    let starved = TrainConfig {
        max_passes: 1,
        tolerance: 1e-12,
        ..TrainConfig::new(KernelSpec::Rbf { gamma: 1.0 }, 10.0)
    };
    let (x, labels, _, _) = random_problem(3);
    assert!(matches!(train(&x, &labels, &starved), Err(SvmError::NotConverged(1))));
    let model = train(&[vec![0.0], vec![2.0]], &[Stable, Unstable], &cfg).unwrap();
    assert!(model.predict(&[1.0, 2.0]).is_err());
}

#[test]
fn oversampling_balances_the_minority() {
    let labels: Vec<StabilityLabel> = [vec![Stable; 3], vec![Unstable; 7]].concat();
    let idx = oversample_indices(&labels, 9).unwrap();
    assert_eq!(idx.len(), 14);
    assert_eq!(&idx[..10], &(0..10).collect::<Vec<_>>()[..]);
    assert!(idx[10..].iter().all(|i| *i < 3));
    assert_eq!(oversample_indices(&labels, 9).unwrap(), idx);
    let balanced = [Stable, Unstable, Stable, Unstable];
    assert_eq!(oversample_indices(&balanced, 1).unwrap(), vec![0, 1, 2, 3]);
    assert!(oversample_indices(&[Stable, Stable], 1).is_err());
}

#[test]
fn folds_partition_and_stratify() {
    let labels: Vec<StabilityLabel> = (0..200).map(|i| if i % 3 == 0 { Stable } else { Unstable }).collect();
    let folds = stratified_folds(&labels, 10, 4).unwrap();
    for f in 0..10 {
        let members: Vec<usize> = (0..200).filter(|i| folds[*i] == f).collect();
        assert_eq!(members.len(), 20);
        let stable = members.iter().filter(|i| labels[**i] == Stable).count();
        assert!((6..=7).contains(&stable));
    }
    let odd: Vec<StabilityLabel> = (0..23).map(|i| if i < 9 { Stable } else { Unstable }).collect();
    let folds = stratified_folds(&odd, 4, 1).unwrap();
    let sizes: Vec<usize> = (0..4).map(|f| folds.iter().filter(|x| **x == f).count()).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert!(stratified_folds(&odd, 24, 1).is_err());
    assert!(stratified_folds(&odd, 1, 1).is_err());
}

#[test]
fn cross_validation_is_deterministic_and_breaks_ties_low() {
    let mut rng = rng_for(8, 8, 8);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80 {
        let s = if i % 4 == 0 { 1.0 } else { -1.0 };
        x.push(vec![s * 200.0 + rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)]);
        labels.push(if s > 0.0 { Stable } else { Unstable });
    }
    let grid = default_grid(false);
    let a = cross_validate(&x, &labels, &grid, 10, 3).unwrap();
    let b = cross_validate(&x, &labels, &grid, 10, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 12);
    // The blobs are far apart, so many configurations score perfectly and
    // the smallest C with the smallest gamma among them must win.
    let top = a.rows.iter().map(|r| r.mean).fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<&CvRow> = a.rows.iter().filter(|r| r.mean == top).collect();
    let min_c = winners.iter().map(|r| r.config.c).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best.c, min_c);
    assert!(cross_validate(&x[..5], &labels[..5], &grid, 10, 3).is_err());
}

#[test]
fn model_file_round_trips() {
    let (x, labels, kernel, c) = random_problem(12);
    for scale in [false, true] {
        let cfg = TrainConfig {
            scale,
            ..TrainConfig::new(kernel, c)
        };
        let model = train(&x, &labels, &cfg).unwrap();
        let text = model.to_text();
        let back = SvmModel::from_text(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_text(), text);
        for xi in &x {
            assert_eq!(back.decision_value(xi).unwrap(), model.decision_value(xi).unwrap());
        }
    }
    assert!(SvmModel::from_text("# gridsync-svm 9\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trained_models_respect_box_and_kkt(seed in 1000u64..100_000) {
        let (x, labels, kernel, c) = random_problem(seed);
        let (model, sol) = train_with_solution(&x, &labels, &raw(kernel, c, 1e-3)).unwrap();
        prop_assert!(sol.alpha.iter().all(|a| *a >= 0.0 && *a <= c));
        prop_assert!(model.dual_weights.iter().all(|w| w.abs() > 0.0 && w.abs() <= c));
        prop_assert!(kkt_violation(&model, &sol, &x, &labels, c) <= 1e-3 + 1e-12);
    }
}
