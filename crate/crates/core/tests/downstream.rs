use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tjepa::data::Split;
use tjepa::downstream::{
    evaluate, fit_head, train_linear_probe, train_mlp_head, HeadKind, HeadSpec, ProbeInput, ProjectionMode, Targets,
};
use tjepa::numeric::Tensor;

fn uniform_rows(n: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn input(rows: &[Vec<f64>], d: usize, h: usize) -> ProbeInput {
    ProbeInput::new(Tensor::from_rows(rows).unwrap(), d, h).unwrap()
}

fn spec(projection: ProjectionMode) -> HeadSpec {
    HeadSpec {
        projection,
        ..HeadSpec::default()
    }
}

#[test]
fn separable_classes_are_learned_exactly() {
    let rows = uniform_rows(400, 8, 1);
    let labels: Vec<usize> = rows.iter().map(|r| usize::from(r[0] + r[5] > 0.0)).collect();
    let keep: Vec<usize> = (0..rows.len()).filter(|&i| (rows[i][0] + rows[i][5]).abs() > 0.2).collect();
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| rows[i].clone()).collect();
    let y = Targets::Classes {
        labels: keep.iter().map(|&i| labels[i]).collect(),
        n_classes: 2,
    };
    let x = input(&rows, 2, 4);
    let r = train_linear_probe(&spec(ProjectionMode::LinearFlatten), &x, &y, &x, &y, Split::Train).unwrap();
    assert_eq!(r.metric, "accuracy");
    assert_eq!(r.value, 1.0);
}

#[test]
fn exact_linear_targets_are_fit() {
    let rows = uniform_rows(256, 6, 2);
    let y = Targets::Values(rows.iter().map(|r| 0.5 * r[0] - 1.5 * r[3] + 0.25 * r[5] + 2.0).collect());
    let x = input(&rows, 6, 1);
    let s = HeadSpec {
        projection: ProjectionMode::LinearFlatten,
        proj_dim: 6,
        epochs: 400,
        batch_size: 32,
        lr: 1e-2,
        ..HeadSpec::default()
    };
    let r = train_linear_probe(&s, &x, &y, &x, &y, Split::Train).unwrap();
    assert_eq!(r.metric, "rmse");
    assert!(r.value < 1e-3, "rmse {}", r.value);
}

#[test]
fn xor_separates_linear_from_mlp() {
    let rows = uniform_rows(600, 2, 3);
    let labels: Vec<usize> = rows.iter().map(|r| usize::from((r[0] > 0.0) != (r[1] > 0.0))).collect();
    let y = Targets::Classes { labels, n_classes: 2 };
    let x = input(&rows, 2, 1);
    let (tr, va): (Vec<usize>, Vec<usize>) = (0..600).partition(|i| i % 5 != 0);
    let (xt, yt) = (x.select(&tr).unwrap(), y.select(&tr));
    let (xv, yv) = (x.select(&va).unwrap(), y.select(&va));
    let base = HeadSpec {
        projection: ProjectionMode::LinearFlatten,
        proj_dim: 8,
        ..HeadSpec::default()
    };
    let lin = train_linear_probe(&base, &xt, &yt, &xv, &yv, Split::Test).unwrap();
    let mlp = train_mlp_head(&base, &xt, &yt, &xv, &yv, &xv, &yv, Split::Test).unwrap();
    assert!(lin.value <= 0.6, "linear {}", lin.value);
    assert!(mlp.value >= 0.9, "mlp {}", mlp.value);
}

#[test]
fn constant_inputs_predict_the_majority_class() {
    let rows = vec![vec![0.3; 4]; 100];
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i < 70)).collect();
    let y = Targets::Classes { labels, n_classes: 2 };
    let x = input(&rows, 4, 1);
    let r = train_linear_probe(&spec(ProjectionMode::MeanPool), &x, &y, &x, &y, Split::Train).unwrap();
    assert!((r.value - 0.7).abs() < 1e-12);
}

#[test]
fn every_projection_trains_and_predicts() {
    let (d, h) = (5, 6);
    let rows = uniform_rows(64, d * h, 4);
    let y = Targets::Classes {
        labels: rows.iter().map(|r| usize::from(r[0] > 0.0) + usize::from(r[7] > 0.5)).collect(),
        n_classes: 3,
    };
    let x = input(&rows, d, h);
    for mode in [
        ProjectionMode::LinearFlatten,
        ProjectionMode::LinearPerFeature,
        ProjectionMode::Conv,
        ProjectionMode::MaxPool,
        ProjectionMode::MeanPool,
    ] {
        for head in [HeadKind::Linear, HeadKind::Mlp] {
            let s = HeadSpec {
                head,
                projection: mode,
                epochs: 3,
                batch_size: 16,
                ..HeadSpec::default()
            };
            let fitted = fit_head(&s, &x, &y, Some((&x, &y))).unwrap();
            let acc = evaluate(&fitted.predict(&x).unwrap(), &y).unwrap();
            assert!((0.0..=1.0).contains(&acc), "{mode} {head:?}");
        }
    }
}

#[test]
fn early_stopping_respects_patience() {
    let rows = uniform_rows(120, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = Targets::Classes {
        labels: (0..120).map(|_| rng.random_range(0..2)).collect(),
        n_classes: 2,
    };
    let x = input(&rows, 4, 1);
    let s = HeadSpec {
        head: HeadKind::Mlp,
        patience: 3,
        epochs: 200,
        ..HeadSpec::default()
    };
    let fitted = fit_head(&s, &x, &y, Some((&x.select(&[0, 1, 2, 3]).unwrap(), &y.select(&[0, 1, 2, 3])))).unwrap();
    assert!(fitted.epochs_run < 200);
    assert_eq!(fitted.val_history.len(), fitted.epochs_run);
}

#[test]
fn training_is_deterministic_per_seed() {
    let rows = uniform_rows(80, 6, 6);
    let y = Targets::Values(rows.iter().map(|r| r[0] * r[1]).collect());
    let x = input(&rows, 3, 2);
    let s = HeadSpec {
        head: HeadKind::Mlp,
        epochs: 5,
        ..HeadSpec::default()
    };
    let a = fit_head(&s, &x, &y, None).unwrap().predict(&x).unwrap();
    let b = fit_head(&s, &x, &y, None).unwrap().predict(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let rows = uniform_rows(10, 4, 7);
    let x = input(&rows, 2, 2);
    let y = Targets::Values(vec![0.0; 9]);
    assert!(fit_head(&HeadSpec::default(), &x, &y, None).is_err());
    assert!(ProbeInput::new(Tensor::from_rows(&rows).unwrap(), 3, 2).is_err());
    assert!("bogus".parse::<ProjectionMode>().is_err());
}

mod pooling {
    use proptest::prelude::*;
    use tjepa::downstream::{pool, ProjectionMode};
    use tjepa::numeric::Tensor;

    fn mat() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..6, 1usize..8).prop_flat_map(|(d, h)| {
            (
                Just(d),
                Just(h),
                proptest::collection::vec(-5.0f64..5.0, d * h),
                proptest::collection::vec(-5.0f64..5.0, d * h),
            )
        })
    }

    proptest! {
        #[test]
        fn mean_pool_is_linear((d, h, a, b) in mat(), alpha in -3.0f64..3.0) {
            let ta = Tensor::new(vec![d, h], a.clone()).unwrap();
            let tb = Tensor::new(vec![d, h], b.clone()).unwrap();
            let mix = Tensor::new(vec![d, h], a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect()).unwrap();
            let pa = pool(&ta, ProjectionMode::MeanPool).unwrap();
            let pb = pool(&tb, ProjectionMode::MeanPool).unwrap();
            let pm = pool(&mix, ProjectionMode::MeanPool).unwrap();
            prop_assert_eq!(pm.len(), d);
            for i in 0..d {
                prop_assert!((pm[i] - (alpha * pa[i] + pb[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn max_pool_ignores_column_order((d, h, a, _b) in mat(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..h).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let t = Tensor::new(vec![d, h], a.clone()).unwrap();
            let p = Tensor::new(vec![d, h], (0..d).flat_map(|i| perm.iter().map(|&c| i * h + c).collect::<Vec<_>>()).map(|k| a[k]).collect()).unwrap();
            prop_assert_eq!(pool(&t, ProjectionMode::MaxPool).unwrap(), pool(&p, ProjectionMode::MaxPool).unwrap());
            prop_assert_eq!(pool(&t, ProjectionMode::MeanPool).unwrap().len(), d);
        }
    }

    #[test]
    fn learned_projections_are_not_pools() {
        let t = Tensor::<f64>::zeros(&[2, 2]);
        assert!(pool(&t, ProjectionMode::Conv).is_err());
        assert_eq!(pool(&Tensor::new(vec![1, 3], vec![1.0, 5.0, 3.0]).unwrap(), ProjectionMode::MaxPool).unwrap(), vec![5.0]);
    }
}
