use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sclvm::dataio::synth_shared_private;
use sclvm::model::DataRef;
use sclvm::persist;
use sclvm::trainer::{empirical_log_priors, InferOptions, Predictor};
use sclvm::{
    classify, fit, generate, initialize, CategoryLabel, EqKernelParams, FitOptions, FittedModel, InducingSet,
    JitterPolicy, KernelParams, LatentConfig, ModelState, SclvmError, Standardization, VariationalPosterior,
};

fn small_model() -> (sclvm::Dataset, FittedModel) {
    let data = synth_shared_private(60, 12, 1, 1, 6, 2.0, 21).dataset;
    let opts = FitOptions {
        max_iters: 80,
        seed: 3,
        ..Default::default()
    };
    let out = fit(&data, LatentConfig::new(1, 1, 10).unwrap(), &opts).unwrap();
    (data, out.model)
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

#[test]
fn running_max_of_trace_is_returned() {
    let data = synth_shared_private(50, 10, 1, 1, 5, 2.0, 4).dataset;
    let opts = FitOptions {
        max_iters: 50,
        ..Default::default()
    };
    let out = fit(&data, LatentConfig::new(1, 1, 8).unwrap(), &opts).unwrap();
    assert!(out.trace.len() <= 50);
    let best = out.trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.model.elbo, best);
    assert!(best > out.initial_elbo());
}

#[test]
fn label_blind_fit_ignores_label_permutation() {
    let data = synth_shared_private(40, 10, 2, 1, 5, 2.0, 8).dataset;
    let mut permuted = data.clone();
    permuted.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    assert_ne!(permuted.labels, data.labels);
    let cfg = LatentConfig::new(2, 0, 6).unwrap();
    let opts = FitOptions {
        max_iters: 40,
        ..Default::default()
    };
    let a = fit(&data, cfg, &opts).unwrap();
    let b = fit(&permuted, cfg, &opts).unwrap();
    assert_eq!(a.trace, b.trace);
    assert!(a.model.state.kernel.private.lengthscales.is_empty());
}

#[test]
fn initialization_is_bit_identical_for_a_seed() {
    let data = synth_shared_private(40, 10, 2, 2, 5, 2.0, 8).dataset;
    let cfg = LatentConfig::new(2, 2, 10).unwrap();
    let a = initialize(&data, cfg, 5).unwrap();
    let b = initialize(&data, cfg, 5).unwrap();
    assert_eq!(persist::to_bytes(&FittedModel::from_state(a.clone(), &data.y).unwrap()).unwrap(),
        persist::to_bytes(&FittedModel::from_state(b, &data.y).unwrap()).unwrap());
    assert!(a.inducing.has_label(CategoryLabel(1)) && a.inducing.has_label(CategoryLabel(2)));
}

/// Two categories with mirrored data, posteriors and inducing sets.
fn symmetric_model() -> FittedModel {
    let config = LatentConfig::new(1, 1, 4).unwrap();
    let means = DMatrix::from_row_slice(4, 2, &[-0.5, 0.3, 0.7, -0.2, -0.5, 0.3, 0.7, -0.2]);
    let y = DMatrix::from_row_slice(4, 2, &[0.4, -1.0, -0.3, 0.9, 0.4, -1.0, -0.3, 0.9]);
    let l = |c| CategoryLabel(c);
    let state = ModelState {
        config,
        q: VariationalPosterior::new(means, DMatrix::from_element(4, 2, 0.2)).unwrap(),
        labels: vec![l(1), l(1), l(2), l(2)],
        inducing: InducingSet::new(
            DMatrix::from_row_slice(4, 2, &[-0.4, 0.2, 0.6, -0.1, -0.4, 0.2, 0.6, -0.1]),
            vec![l(1), l(1), l(2), l(2)],
        )
        .unwrap(),
        kernel: KernelParams::new(EqKernelParams::unit(1), EqKernelParams::unit(1), 0.1).unwrap(),
        jitter: JitterPolicy::default(),
        data: DataRef {
            name: "mirror".into(),
            fingerprint: 0,
            n: 4,
            d: 2,
            category_count: 2,
            label_names: vec!["a".into(), "b".into()],
            label_column: None,
            feature_names: vec![],
            standardization: Standardization::identity(2),
        },
    };
    FittedModel::from_state(state, &y).unwrap()
}

#[test]
fn symmetric_model_gives_even_odds() {
    let m = symmetric_model();
    let scores = classify(&[0.1, 0.2], &m, &[0.0, 0.0]).unwrap();
    assert_eq!(scores.len(), 2);
    for s in &scores {
        assert!((s.posterior_prob - 0.5).abs() < 1e-8, "{scores:?}");
    }
}

#[test]
fn prior_shift_leaves_probabilities_unchanged() {
    let (data, m) = small_model();
    let p = Predictor::new(&m).unwrap();
    let y = row(&data.y, 3);
    let pri = empirical_log_priors(&m);
    let a = p.classify(&y, &pri, &InferOptions::default()).unwrap();
    let shifted: Vec<f64> = pri.iter().map(|v| v + 7.5).collect();
    let b = p.classify(&y, &shifted, &InferOptions::default()).unwrap();
    for (x, z) in a.iter().zip(&b) {
        assert_eq!(x.label, z.label);
        assert!((x.posterior_prob - z.posterior_prob).abs() < 1e-12);
        assert_eq!(x.bound, z.bound);
    }
    let total: f64 = a.iter().map(|s| s.posterior_prob).sum();
    assert!((total - 1.0).abs() < 1e-10);
    assert!(a[0].posterior_prob >= a[1].posterior_prob);
    assert!(a.iter().all(|s| (0.0..=1.0).contains(&s.posterior_prob)));
}

#[test]
fn priors_enter_only_the_softmax() {
    let (data, m) = small_model();
    let y = row(&data.y, 65);
    let a = classify(&y, &m, &[0.0, 0.0]).unwrap();
    let b = classify(&y, &m, &empirical_log_priors(&m)).unwrap();
    let bound = |v: &[sclvm::ClassScore], c| v.iter().find(|s| s.label == CategoryLabel(c)).unwrap().bound;
    assert_eq!(bound(&a, 1), bound(&b, 1));
    assert_eq!(bound(&a, 2), bound(&b, 2));
}

#[test]
fn inference_leaves_the_model_untouched() {
    let (data, m) = small_model();
    let before = persist::to_bytes(&m).unwrap();
    let p = Predictor::new(&m).unwrap();
    let inf = p.infer(&row(&data.y, 0), CategoryLabel(1), &InferOptions::default()).unwrap();
    assert_eq!(inf.mean.len(), 2);
    assert!(inf.variance.iter().all(|v| *v > 0.0));
    drop(p);
    assert_eq!(persist::to_bytes(&m).unwrap(), before);
}

#[test]
fn unknown_hypothesis_is_rejected() {
    let (data, m) = small_model();
    let p = Predictor::new(&m).unwrap();
    let err = p.infer(&row(&data.y, 0), CategoryLabel(3), &InferOptions::default()).unwrap_err();
    assert!(matches!(err, SclvmError::UnknownLabel(3)));
    assert!(generate(&m, CategoryLabel(3), 2, 0).is_err());
    assert!(p.infer(&[1.0], CategoryLabel(1), &InferOptions::default()).is_err());
}

#[test]
fn generation_shape_and_determinism() {
    let (_, m) = small_model();
    let none = generate(&m, CategoryLabel(2), 0, 1).unwrap();
    assert_eq!(none.shape(), (0, 6));
    let a = generate(&m, CategoryLabel(2), 15, 9).unwrap();
    assert_eq!(a.shape(), (15, 6));
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, generate(&m, CategoryLabel(2), 15, 9).unwrap());
    assert_ne!(a, generate(&m, CategoryLabel(2), 15, 10).unwrap());
}

#[test]
fn persistence_round_trip_is_bit_exact() {
    let (_, m) = small_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sclvm");
    persist::save(&m, &path).unwrap();
    let back = persist::load(&path).unwrap();
    assert_eq!(back, m);
    let bits = |v: &FittedModel| v.state.pack().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&m));
    assert_eq!(back.elbo.to_bits(), m.elbo.to_bits());
    assert!(persist::from_bytes(b"NOTAMODEL\n{}").is_err());
}

#[test]
fn classification_is_bit_reproducible() {
    let (data, m) = small_model();
    let y = row(&data.y, 70);
    let a = classify(&y, &m, &[0.0, 0.0]).unwrap();
    let b = classify(&y, &m, &[0.0, 0.0]).unwrap();
    assert_eq!(a, b);
}
