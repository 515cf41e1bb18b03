mod common;

use common::{dense_log_marginal, random_state, rng};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sclvm::{elbo, elbo_gradient, kl_to_prior, VariationalPosterior};

/// Central differences on the packed unconstrained parameters.
fn max_fd_error(seed: u64, qs: usize, qp: usize) -> f64 {
    let (state, y) = random_state(seed, 8, 4, qs, qp, 3);
    let g = elbo_gradient(&y, &state).unwrap().to_vec();
    let theta = state.pack();
    assert_eq!(g.len(), theta.len());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut s = state.clone();
        let mut t = theta.clone();
        t[i] += h;
        s.unpack(&t).unwrap();
        let fp = elbo(&y, &s).unwrap().elbo;
        t[i] -= 2.0 * h;
        s.unpack(&t).unwrap();
        let fm = elbo(&y, &s).unwrap().elbo;
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-2);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..5 {
        let e = max_fd_error(seed, 2, 2);
        assert!(e < 1e-4, "seed {seed}: max relative error {e:e}");
    }
}

#[test]
fn label_blind_and_private_only_gradients_match_finite_differences() {
    for seed in 10..13 {
        let e = max_fd_error(seed, 2, 0);
        assert!(e < 1e-4, "Q_p=0 seed {seed}: {e:e}");
        let e = max_fd_error(seed, 0, 2);
        assert!(e < 1e-4, "Q_s=0 seed {seed}: {e:e}");
    }
}

/// Sets up M = N with inducing inputs at the (near-deterministic) means.
fn saturated(seed: u64) -> (sclvm::ModelState, DMatrix<f64>) {
    let mut r = rng(1000 + seed);
    let n = r.random_range(4..=20);
    let d = r.random_range(1..=3);
    let (mut s, _) = random_state(seed, n, n, 2, 2, d);
    s.q.variances = DMatrix::from_element(n, 4, 1e-12);
    s.inducing.inputs = s.q.means.clone();
    s.inducing.labels = s.labels.clone();
    // Sample Y from the model so the likelihood is in a realistic range.
    let y = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut r));
    (s, y)
}

#[test]
fn saturated_bound_equals_dense_marginal_likelihood() {
    for seed in 0..10 {
        let (mut s, y) = saturated(seed);
        // The default diagonal jitter perturbs the bound to first order in
        // its size; exactness is checked with a negligible starting level.
        s.jitter.initial = 1e-10;
        let rep = elbo(&y, &s).unwrap();
        let f: f64 = rep.data_fit_terms.iter().sum();
        let exact = dense_log_marginal(&s.q.means, &s.labels, &s.kernel, &y);
        let rel = ((f - exact) / exact).abs();
        assert!(rel < 1e-6, "seed {seed}: bound {f} vs exact {exact} (rel {rel:e})");
    }
}

#[test]
fn default_jitter_perturbation_is_small() {
    for seed in 0..10 {
        let (s, y) = saturated(seed);
        let f: f64 = elbo(&y, &s).unwrap().data_fit_terms.iter().sum();
        let exact = dense_log_marginal(&s.q.means, &s.labels, &s.kernel, &y);
        assert!(((f - exact) / exact).abs() < 1e-4);
        assert!(f <= exact);
    }
}

#[test]
fn duplicating_columns_doubles_data_fit() {
    let (s, y) = random_state(3, 7, 3, 2, 2, 2);
    let mut y2 = DMatrix::zeros(7, 4);
    y2.columns_mut(0, 2).copy_from(&y);
    y2.columns_mut(2, 2).copy_from(&y);
    let mut s2 = s.clone();
    s2.data.d = 4;
    let a = elbo(&y, &s).unwrap();
    let b = elbo(&y2, &s2).unwrap();
    let fa: f64 = a.data_fit_terms.iter().sum();
    let fb: f64 = b.data_fit_terms.iter().sum();
    assert!((fb - 2.0 * fa).abs() <= 1e-10 * fa.abs());
    assert_eq!(a.kl, b.kl);
}

#[test]
fn kl_properties() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let n = r.random_range(1..5);
        let q = r.random_range(1..4);
        let post = VariationalPosterior::new(
            DMatrix::from_fn(n, q, |_, _| r.random_range(-3.0..3.0)),
            DMatrix::from_fn(n, q, |_, _| r.random_range(1e-3..5.0)),
        )
        .unwrap();
        assert!(kl_to_prior(&post).unwrap() >= 0.0);
    }
    let prior = VariationalPosterior::new(DMatrix::zeros(3, 2), DMatrix::from_element(3, 2, 1.0)).unwrap();
    assert_eq!(kl_to_prior(&prior).unwrap(), 0.0);
    let one = VariationalPosterior::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
    assert!((kl_to_prior(&one).unwrap() - 0.5).abs() < 1e-15);
}

/// log p(Y) by importance sampling with proposal q: the latent integral of
/// the dense GP likelihood. Returns (estimate, standard error).
fn importance_log_evidence(s: &sclvm::ModelState, y: &DMatrix<f64>, samples: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (n, qt) = (s.q.n_points(), s.q.dims());
    let mut logw = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut x = DMatrix::zeros(n, qt);
        let mut log_ratio = 0.0;
        for i in 0..n {
            for j in 0..qt {
                let (mu, var) = (s.q.means[(i, j)], s.q.variances[(i, j)]);
                let e: f64 = StandardNormal.sample(&mut r);
                let v = mu + var.sqrt() * e;
                x[(i, j)] = v;
                // log N(v; 0, 1) − log N(v; mu, var)
                log_ratio += -0.5 * v * v + 0.5 * e * e + 0.5 * var.ln();
            }
        }
        logw.push(dense_log_marginal(&x, &s.labels, &s.kernel, y) + log_ratio);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let k = samples as f64;
    let mean = w.iter().sum::<f64>() / k;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (max + mean.ln(), (var / k).sqrt() / mean)
}

#[test]
fn bound_never_exceeds_importance_sampled_evidence() {
    for seed in 0..3 {
        let (mut s, y) = random_state(200 + seed, 6, 3, 1, 1, 2);
        // A proposal close to the prior keeps the importance weights tame.
        s.q.variances = DMatrix::from_element(6, 2, 0.7);
        s.q.means *= 0.5;
        let bound = elbo(&y, &s).unwrap().elbo;
        let (est, se) = importance_log_evidence(&s, &y, 100_000, seed);
        assert!(bound <= est + 3.0 * se, "seed {seed}: elbo {bound} vs log p(Y) ≈ {est} ± {se}");
    }
}
