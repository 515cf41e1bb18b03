#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sclvm::model::DataRef;
use sclvm::{
    CategoryLabel, EqKernelParams, InducingSet, JitterPolicy, KernelParams, LatentConfig, ModelState, Standardization,
    VariationalPosterior,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_kernel(r: &mut ChaCha8Rng, qs: usize, qp: usize) -> KernelParams {
    let mut block = |q: usize| {
        if q == 0 {
            EqKernelParams::unit(0)
        } else {
            EqKernelParams::new(r.random_range(0.5..2.0), (0..q).map(|_| r.random_range(0.6..2.0)).collect()).unwrap()
        }
    };
    let shared = block(qs);
    let private = block(qp);
    KernelParams::new(shared, private, r.random_range(0.05..0.5)).unwrap()
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<CategoryLabel> {
    (0..n).map(|_| CategoryLabel(r.random_range(1..=2))).collect()
}

pub fn random_state(seed: u64, n: usize, m: usize, qs: usize, qp: usize, d: usize) -> (ModelState, DMatrix<f64>) {
    let mut r = rng(seed);
    let qt = qs + qp;
    let config = LatentConfig::new(qs, qp, m).unwrap();
    let means = DMatrix::from_fn(n, qt, |_, _| r.random_range(-1.5..1.5));
    let vars = DMatrix::from_fn(n, qt, |_, _| r.random_range(0.05..0.8));
    let labels = random_labels(&mut r, n);
    let z = DMatrix::from_fn(m, qt, |_, _| r.random_range(-1.5..1.5));
    let zl: Vec<_> = (0..m).map(|j| CategoryLabel(1 + (j % 2) as u32)).collect();
    let kernel = random_kernel(&mut r, qs, qp);
    let y = DMatrix::from_fn(n, d, |_, _| r.random_range(-2.0..2.0));
    let state = ModelState {
        config,
        q: VariationalPosterior::new(means, vars).unwrap(),
        labels,
        inducing: InducingSet::new(z, zl).unwrap(),
        kernel,
        jitter: JitterPolicy::default(),
        data: DataRef {
            name: "random".into(),
            fingerprint: 0,
            n,
            d,
            category_count: 2,
            label_names: vec!["1".into(), "2".into()],
            label_column: None,
            feature_names: vec![],
            standardization: Standardization::identity(d),
        },
    };
    (state, y)
}

/// Composite kernel written out directly from its definition.
pub fn k_direct(p: &KernelParams, a: &[f64], la: CategoryLabel, b: &[f64], lb: CategoryLabel) -> f64 {
    let qs = p.shared.lengthscales.len();
    let eq = |v: f64, ls: &[f64], x: &[f64], y: &[f64]| {
        let r2: f64 = ls.iter().zip(x.iter().zip(y)).map(|(l, (u, w))| ((u - w) / l).powi(2)).sum();
        v * (-0.5 * r2).exp()
    };
    let mut k = 0.0;
    if qs > 0 {
        k += eq(p.shared.variance, &p.shared.lengthscales, &a[..qs], &b[..qs]);
    }
    if !p.private.lengthscales.is_empty() && la == lb {
        k += eq(p.private.variance, &p.private.lengthscales, &a[qs..], &b[qs..]);
    }
    k
}

/// Exact GP log marginal likelihood of every column of `y` with inputs `x`.
pub fn dense_log_marginal(x: &DMatrix<f64>, labels: &[CategoryLabel], p: &KernelParams, y: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let row = |i: usize| x.row(i).iter().copied().collect::<Vec<_>>();
    let mut k = DMatrix::from_fn(n, n, |i, j| k_direct(p, &row(i), labels[i], &row(j), labels[j]));
    for i in 0..n {
        k[(i, i)] += p.noise_variance;
    }
    let ch = k.cholesky().expect("dense covariance must be positive definite");
    let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let alpha = ch.solve(y);
    let quad = y.component_mul(&alpha).sum();
    let d = y.ncols() as f64;
    -0.5 * quad - 0.5 * d * logdet - 0.5 * d * n as f64 * (2.0 * std::f64::consts::PI).ln()
}
