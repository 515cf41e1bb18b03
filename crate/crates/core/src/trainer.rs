//! Fitting and using the model: initialization, bound maximization, test-time
//! latent inference, bound-difference classification and per-category
//! sampling.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bound::{collapsed_bound, elbo_and_gradient, kl_unchecked, summarize, CollapsedStats};
use crate::dataio::{standardize, Dataset};
use crate::error::{Result, SclvmError};
use crate::kernels::{gram_rows, CategoryLabel, KernelParams};
use crate::linalg::add_diag;
use crate::model::{default_kernel, fingerprint, DataRef, FittedModel, LatentConfig, ModelState};
use crate::optim::{lbfgs_maximize, Adam, LbfgsOptions};
use crate::psi::{self, InducingSet, VariationalPosterior};

/// Initial posterior variance of every latent coordinate.
pub const INIT_VARIANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    pub optimizer: OptimizerKind,
    pub step_size: f64,
    /// Relative ELBO change below which an iteration counts as stalled; ten
    /// stalled iterations in a row stop the fit.
    pub convergence_tol: f64,
    pub seed: u64,
    /// Inducing labels are never optimized; kept for the record.
    pub fixed_inducing_labels: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 1000,
            optimizer: OptimizerKind::Adam,
            step_size: 1e-2,
            convergence_tol: 1e-7,
            seed: 0,
            fixed_inducing_labels: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(SclvmError::contract("max_iters must be at least 1"));
        }
        if !(self.convergence_tol > 0.0) || !(self.step_size > 0.0) {
            return Err(SclvmError::contract("convergence_tol and step_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    MaxIters,
    Converged,
    /// The objective failed at some iterate; the best state so far is kept.
    NumericalFailure(String),
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: FittedModel,
    /// ELBO at every evaluated iterate, in order.
    pub trace: Vec<f64>,
    pub termination: Termination,
}

impl FitOutcome {
    pub fn initial_elbo(&self) -> f64 {
        self.trace[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: CategoryLabel,
    /// Bound increase from adding the test point under this label.
    pub bound: f64,
    pub log_prior: f64,
    pub posterior_prob: f64,
}

/// Standardized training matrix for `data` under `state`'s statistics.
pub fn training_matrix(data: &Dataset, state: &ModelState) -> DMatrix<f64> {
    state.data.standardization.apply(&data.y)
}

pub fn initialize(data: &Dataset, config: LatentConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    data.validate()?;
    let n = data.n();
    if n < 2 || data.d() < 1 {
        return Err(SclvmError::Init(format!(
            "need at least 2 rows and 1 column, got {}x{}",
            n,
            data.d()
        )));
    }
    let (std_data, st) = standardize(data);
    let y = &std_data.y;
    let col_vars: Vec<f64> = (0..y.ncols())
        .map(|j| y.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64)
        .collect();
    if col_vars.iter().all(|v| *v <= 1e-300) {
        return Err(SclvmError::Init("every column has zero variance".into()));
    }

    let qt = config.q_total();
    let means = pca_scores(y, qt, seed);
    let q = VariationalPosterior::new(means, DMatrix::from_element(n, qt, INIT_VARIANCE))?;
    let inducing = init_inducing(&q.means, &data.labels, data.category_count, config, seed)?;
    let mean_var = col_vars.iter().sum::<f64>() / col_vars.len() as f64;
    let kernel = default_kernel(config, 0.1 * mean_var);

    Ok(ModelState {
        config,
        q,
        labels: data.labels.clone(),
        inducing,
        kernel,
        jitter: Default::default(),
        data: DataRef {
            name: data.name.clone(),
            fingerprint: fingerprint(&data.y, &data.labels),
            n,
            d: data.d(),
            category_count: data.category_count,
            label_names: data.label_names.clone(),
            label_column: data.label_column.clone(),
            feature_names: data.feature_names.clone(),
            standardization: st,
        },
    })
}

/// Leading principal-component scores of the (centred) rows of `y`, each
/// scaled to unit variance. Components beyond the data rank are filled with
/// standard normal draws.
fn pca_scores(y: &DMatrix<f64>, k: usize, seed: u64) -> DMatrix<f64> {
    let n = y.nrows();
    let cov = y.tr_mul(y) / n as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
    let mut out = DMatrix::zeros(n, k);
    for c in 0..k {
        let usable = order
            .get(c)
            .filter(|&&i| eig.eigenvalues[i] > 1e-10 * eig.eigenvalues[order[0]].max(1e-300));
        match usable {
            Some(&i) => {
                let mut v = eig.eigenvectors.column(i).into_owned();
                // Sign convention: largest-magnitude loading positive.
                let imax = v.iamax();
                if v[imax] < 0.0 {
                    v = -v;
                }
                let s = y * v;
                let sd = (s.norm_squared() / n as f64).sqrt();
                out.set_column(c, &(s / sd));
            }
            None => {
                for i in 0..n {
                    out[(i, c)] = StandardNormal.sample(&mut rng);
                }
            }
        }
    }
    out
}

/// Per-category inducing quotas proportional to `sqrt(count)`, at least two
/// each (one each when `M < 2C`), summing to `M`.
pub fn inducing_quotas(counts: &[usize], m: usize) -> Result<Vec<usize>> {
    let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    let c = present.len();
    if c == 0 {
        return Err(SclvmError::Init("no categories present".into()));
    }
    if m < c {
        return Err(SclvmError::Init(format!(
            "{m} inducing points cannot cover {c} categories"
        )));
    }
    let min_each = if m >= 2 * c { 2 } else { 1 };
    let w: Vec<f64> = present.iter().map(|&i| (counts[i] as f64).sqrt()).collect();
    let wsum: f64 = w.iter().sum();
    let ideal: Vec<f64> = w.iter().map(|x| m as f64 * x / wsum).collect();
    let mut quota: Vec<usize> = ideal.iter().map(|x| (x.floor() as usize).max(min_each)).collect();
    loop {
        let total: usize = quota.iter().sum();
        if total == m {
            break;
        }
        if total < m {
            let j = (0..c)
                .max_by(|&a, &b| (ideal[a] - quota[a] as f64).total_cmp(&(ideal[b] - quota[b] as f64)).then(b.cmp(&a)))
                .unwrap();
            quota[j] += 1;
        } else {
            let j = (0..c)
                .filter(|&j| quota[j] > min_each)
                .max_by(|&a, &b| (quota[a] as f64 - ideal[a]).total_cmp(&(quota[b] as f64 - ideal[b])).then(b.cmp(&a)))
                .ok_or_else(|| SclvmError::Init("cannot satisfy inducing quotas".into()))?;
            quota[j] -= 1;
        }
    }
    let mut out = vec![0; counts.len()];
    for (k, &i) in present.iter().enumerate() {
        out[i] = quota[k];
    }
    Ok(out)
}

fn init_inducing(
    means: &DMatrix<f64>,
    labels: &[CategoryLabel],
    category_count: usize,
    config: LatentConfig,
    seed: u64,
) -> Result<InducingSet> {
    let mut counts = vec![0; category_count];
    for l in labels {
        counts[l.index()] += 1;
    }
    let quotas = inducing_quotas(&counts, config.n_inducing)?;
    let m: usize = quotas.iter().sum();
    let qs = config.q_shared;
    let qp = config.q_private;
    let mut inputs = DMatrix::zeros(m, qs + qp);
    let mut ind_labels = Vec::with_capacity(m);

    if qs > 0 {
        let shared = means.columns(0, qs).into_owned();
        let centroids = kmeans(&shared, m, seed);
        inputs.columns_mut(0, qs).copy_from(&centroids);
    }
    let mut slot = 0;
    for (c, &k) in quotas.iter().enumerate() {
        if k == 0 {
            continue;
        }
        if qp > 0 {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].index() == c).collect();
            let pts = DMatrix::from_fn(rows.len(), qp, |i, j| means[(rows[i], qs + j)]);
            let centroids = kmeans(&pts, k, seed);
            inputs.view_mut((slot, qs), (k, qp)).copy_from(&centroids);
        }
        ind_labels.extend(std::iter::repeat_n(CategoryLabel(c as u32 + 1), k));
        slot += k;
    }
    InducingSet::new(inputs, ind_labels)
}

/// Lloyd's algorithm with k-means++ seeding. When `k` exceeds the number of
/// points the extra centroids are small perturbations of the points.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> DMatrix<f64> {
    let n = points.nrows();
    let d = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| points.row(i).into_owned();
    let dist2 = |a: &nalgebra::RowDVector<f64>, b: &nalgebra::RowDVector<f64>| (a - b).norm_squared();

    if k >= n {
        return DMatrix::from_fn(k, d, |i, j| {
            let base = points[(i % n, j)];
            if i < n {
                base
            } else {
                base + 1e-3 * ((i / n) as f64) * if (i + j) % 2 == 0 { 1.0 } else { -1.0 }
            }
        });
    }

    let mut centers: Vec<nalgebra::RowDVector<f64>> = vec![row(rng.random_range(0..n))];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(&row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if t < *w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick);
        for i in 0..n {
            nearest[i] = nearest[i].min(dist2(&row(i), &c));
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let r = row(i);
            let best = (0..k)
                .min_by(|&a, &b| dist2(&r, &centers[a]).total_cmp(&dist2(&r, &centers[b])))
                .unwrap();
            if best != assign[i] {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![nalgebra::RowDVector::zeros(d); k];
        let mut cnt = vec![0usize; k];
        for i in 0..n {
            sums[assign[i]] += row(i);
            cnt[assign[i]] += 1;
        }
        for c in 0..k {
            if cnt[c] > 0 {
                centers[c] = &sums[c] / cnt[c] as f64;
            } else {
                // Re-seed an empty cluster at the point farthest from its centre.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(&row(a), &centers[assign[a]]).total_cmp(&dist2(&row(b), &centers[assign[b]]))
                    })
                    .unwrap();
                centers[c] = row(far);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    DMatrix::from_fn(k, d, |i, j| centers[i][j])
}

impl FittedModel {
    /// Wraps a state with the data summary of the standardized matrix `y`.
    pub fn from_state(state: ModelState, y: &DMatrix<f64>) -> Result<FittedModel> {
        let report = crate::bound::elbo(y, &state)?;
        let (_, stats) = summarize(y, &state.q, &state.labels, &state.inducing, &state.kernel);
        Ok(FittedModel {
            state,
            psi1_t_y: stats.b,
            y_sq: stats.yy,
            elbo: report.elbo,
        })
    }
}

/// Fits by maximizing the bound from [`initialize`]. The returned model is
/// the best iterate seen.
pub fn fit(data: &Dataset, config: LatentConfig, opts: &FitOptions) -> Result<FitOutcome> {
    opts.validate()?;
    let state0 = initialize(data, config, opts.seed)?;
    let y = training_matrix(data, &state0);
    fit_from(state0, &y, opts)
}

/// Maximizes the bound starting from an explicit state. `y` must be the
/// standardized training matrix.
pub fn fit_from(state0: ModelState, y: &DMatrix<f64>, opts: &FitOptions) -> Result<FitOutcome> {
    opts.validate()?;
    let mut work = state0.clone();
    let mut eval = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        work.unpack(theta)?;
        let (r, g) = elbo_and_gradient(y, &work)?;
        Ok((r.elbo, g.to_vec()))
    };

    let theta0 = state0.pack();
    let mut trace = Vec::new();
    let mut best = (f64::NEG_INFINITY, theta0.clone());
    let mut termination = Termination::MaxIters;

    match opts.optimizer {
        OptimizerKind::Adam => {
            let mut theta = theta0;
            let mut adam = Adam::new(theta.len(), opts.step_size);
            let mut stalled = 0;
            for it in 0..opts.max_iters {
                let (value, grad) = match eval(&theta) {
                    Ok(v) => v,
                    Err(e) if it == 0 => return Err(e),
                    Err(e) => {
                        termination = Termination::NumericalFailure(e.to_string());
                        break;
                    }
                };
                if let Some(&prev) = trace.last() {
                    let rel = ((value - prev) / f64::max(f64::abs(prev), 1.0)).abs();
                    stalled = if rel < opts.convergence_tol { stalled + 1 } else { 0 };
                }
                trace.push(value);
                if value > best.0 {
                    best = (value, theta.clone());
                }
                if stalled >= 10 {
                    termination = Termination::Converged;
                    break;
                }
                if it % 100 == 0 {
                    debug!("iter {it}: elbo {value:.6}");
                }
                adam.step(&mut theta, &grad);
            }
        }
        OptimizerKind::Lbfgs => {
            let (v0, _) = eval(&theta0)?;
            trace.push(v0);
            best = (v0, theta0.clone());
            let lopts = LbfgsOptions {
                max_iters: opts.max_iters.saturating_sub(1).max(1),
                tol: opts.convergence_tol,
                ..Default::default()
            };
            let mut stalled = 0;
            let res = lbfgs_maximize(&mut eval, theta0, &lopts, |_, value, theta| {
                let prev = *trace.last().unwrap();
                let rel = ((value - prev) / f64::max(f64::abs(prev), 1.0)).abs();
                stalled = if rel < opts.convergence_tol { stalled + 1 } else { 0 };
                trace.push(value);
                if value > best.0 {
                    best = (value, theta.to_vec());
                }
                stalled < 10
            })?;
            termination = match res.stop {
                crate::optim::LbfgsStop::MaxIters => Termination::MaxIters,
                crate::optim::LbfgsStop::LineSearchFailed => {
                    Termination::NumericalFailure("line search made no progress".into())
                }
                _ => Termination::Converged,
            };
        }
    }

    let mut state = state0;
    state.unpack(&best.1)?;
    let model = FittedModel::from_state(state, y)?;
    Ok(FitOutcome {
        model,
        trace,
        termination,
    })
}

/// Options for single-point latent inference.
#[derive(Clone, Debug, PartialEq)]
pub struct InferOptions {
    pub max_iters: usize,
    /// Number of starting points (nearest training reconstructions of the
    /// hypothesized category).
    pub restarts: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            max_iters: 100,
            restarts: 3,
        }
    }
}

/// Optimized posterior of a held-out point and the bound increase it causes.
#[derive(Clone, Debug, PartialEq)]
pub struct TestInference {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub bound_delta: f64,
}

/// Everything derived from a fitted model that is reused across predictions.
pub struct Predictor<'a> {
    model: &'a FittedModel,
    kuu: DMatrix<f64>,
    base: CollapsedStats,
    base_f: f64,
    /// `A⁻¹ Ψ1ᵀY` for the predictive mean.
    c: DMatrix<f64>,
    chol_k: Cholesky<f64, Dyn>,
    chol_a: Cholesky<f64, Dyn>,
    /// Predictive means at the training posterior means (N×D, standardized).
    recon: DMatrix<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a FittedModel) -> Result<Self> {
        let s = &model.state;
        s.validate()?;
        let parts = psi::psi_parts(&s.q, &s.labels, &s.inducing, &s.kernel);
        let base = CollapsedStats {
            n: s.n_points() as f64,
            psi0: parts.psi0,
            psi2: parts.psi2,
            b: model.psi1_t_y.clone(),
            yy: model.y_sq.clone(),
        };
        let kuu = gram_rows(&s.inducing.inputs, &s.inducing.labels, &s.kernel);
        let cb = collapsed_bound(&base, &kuu, s.kernel.noise_variance, &s.jitter, false)?;
        let mut kj = kuu.clone();
        add_diag(&mut kj, cb.rel * kuu.diagonal().mean());
        let beta = 1.0 / s.kernel.noise_variance;
        let mut a = &kj + &base.psi2 * beta;
        crate::linalg::symmetrize(&mut a);
        let chol_k = Cholesky::new(kj).ok_or_else(|| SclvmError::numerical("K_uu not factorizable"))?;
        let chol_a = Cholesky::new(a).ok_or_else(|| SclvmError::numerical("K_uu + Ψ2/σ² not factorizable"))?;
        let kxu = crate::kernels::cross_gram_rows(&s.q.means, &s.labels, &s.inducing.inputs, &s.inducing.labels, &s.kernel);
        let recon = &kxu * &cb.c * beta;
        Ok(Predictor {
            model,
            kuu,
            base_f: cb.total(),
            c: cb.c,
            base,
            chol_k,
            chol_a,
            recon,
        })
    }

    fn kernel(&self) -> &KernelParams {
        &self.model.state.kernel
    }

    fn check_label(&self, c: CategoryLabel) -> Result<()> {
        if self.model.state.inducing.has_label(c) {
            Ok(())
        } else {
            Err(SclvmError::UnknownLabel(c.0))
        }
    }

    fn check_row(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.model.d() {
            return Err(SclvmError::contract(format!(
                "test point has {} features, model expects {}",
                y.len(),
                self.model.d()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SclvmError::data("test point contains non-finite values"));
        }
        Ok(())
    }

    /// Bound increase and its gradient w.r.t. (mean, log-variance) of the
    /// new point. `y` is standardized.
    fn delta_and_grad(&self, y: &[f64], label: CategoryLabel, phi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s = &self.model.state;
        let qt = s.config.q_total();
        let q = VariationalPosterior {
            means: DMatrix::from_row_slice(1, qt, &phi[..qt]),
            variances: DMatrix::from_row_slice(1, qt, &phi[qt..]).map(f64::exp),
        };
        let labels = [label];
        let parts = psi::psi_parts(&q, &labels, &s.inducing, &s.kernel);
        let psi1 = parts.psi1();
        let yrow = DMatrix::from_row_slice(1, y.len(), y);
        let stats = CollapsedStats {
            n: self.base.n + 1.0,
            psi0: self.base.psi0 + parts.psi0,
            psi2: &self.base.psi2 + &parts.psi2,
            b: &self.base.b + psi1.tr_mul(&yrow),
            yy: self.base.yy.iter().zip(y).map(|(a, v)| a + v * v).collect(),
        };
        let cb = collapsed_bound(&stats, &self.kuu, s.kernel.noise_variance, &s.jitter, true)?;
        let kl = kl_unchecked(&q.means, &q.variances);
        let delta = cb.total() - self.base_f - kl;
        let sens = cb.sens.as_ref().expect("sensitivities requested");
        let g1 = &yrow * sens.b.transpose();
        let pg = psi::backprop(&q, &labels, &s.inducing, &s.kernel, &parts, sens.psi0, &g1, &sens.psi2);
        let mut grad = Vec::with_capacity(2 * qt);
        grad.extend((0..qt).map(|j| pg.means[(0, j)] - q.means[(0, j)]));
        grad.extend((0..qt).map(|j| pg.log_variances[(0, j)] - 0.5 * (q.variances[(0, j)] - 1.0)));
        Ok((delta, grad))
    }

    /// Optimizes a fresh posterior for `y_star` (data units) under the
    /// hypothesized label with all global parameters frozen.
    pub fn infer(&self, y_star: &[f64], hypothesis: CategoryLabel, opts: &InferOptions) -> Result<TestInference> {
        self.check_label(hypothesis)?;
        self.check_row(y_star)?;
        let s = &self.model.state;
        let y = s.data.standardization.apply_row(y_star);
        let qt = s.config.q_total();

        // Start from the training points of this category whose
        // reconstructions are closest to y.
        let mut cands: Vec<(f64, usize)> = (0..s.n_points())
            .filter(|&i| s.labels[i] == hypothesis)
            .map(|i| {
                let d: f64 = self.recon.row(i).iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut starts: Vec<Vec<f64>> = cands
            .iter()
            .take(opts.restarts.max(1))
            .map(|&(_, i)| {
                let mut phi: Vec<f64> = s.q.means.row(i).iter().copied().collect();
                phi.extend(s.q.variances.row(i).iter().map(|v| v.ln()));
                phi
            })
            .collect();
        if starts.is_empty() {
            let mut phi = vec![0.0; qt];
            phi.extend(std::iter::repeat_n(INIT_VARIANCE.ln(), qt));
            starts.push(phi);
        }

        let lopts = LbfgsOptions {
            max_iters: opts.max_iters,
            tol: 1e-10,
            ..Default::default()
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut last_err = None;
        for phi0 in starts {
            match lbfgs_maximize(|phi| self.delta_and_grad(&y, hypothesis, phi), phi0, &lopts, |_, _, _| true) {
                Ok(r) => {
                    if best.as_ref().is_none_or(|b| r.value > b.0) {
                        best = Some((r.value, r.x));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        match best {
            Some((delta, phi)) => Ok(TestInference {
                mean: phi[..qt].to_vec(),
                variance: phi[qt..].iter().map(|v| v.exp()).collect(),
                bound_delta: delta,
            }),
            None => Err(SclvmError::Inference {
                message: last_err.map(|e| e.to_string()).unwrap_or_default(),
                best_delta: None,
            }),
        }
    }

    /// Posterior over categories from bound differences plus log priors,
    /// sorted by decreasing probability.
    pub fn classify(&self, y_star: &[f64], class_log_priors: &[f64], opts: &InferOptions) -> Result<Vec<ClassScore>> {
        let s = &self.model.state;
        if class_log_priors.len() != s.data.category_count {
            return Err(SclvmError::contract(format!(
                "{} class log-priors for {} categories",
                class_log_priors.len(),
                s.data.category_count
            )));
        }
        if class_log_priors.iter().any(|p| !p.is_finite()) {
            return Err(SclvmError::contract("class log-priors must be finite"));
        }
        let mut scores = Vec::new();
        for c in self.model.category_labels() {
            let inf = self.infer(y_star, c, opts)?;
            scores.push(ClassScore {
                label: c,
                bound: inf.bound_delta,
                log_prior: class_log_priors[c.index()],
                posterior_prob: 0.0,
            });
        }
        let max = scores
            .iter()
            .map(|s| s.bound + s.log_prior)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s.bound + s.log_prior - max).exp()).sum();
        for sc in scores.iter_mut() {
            sc.posterior_prob = (sc.bound + sc.log_prior - max).exp() / z;
        }
        scores.sort_by(|a, b| b.posterior_prob.total_cmp(&a.posterior_prob).then(a.label.cmp(&b.label)));
        Ok(scores)
    }

    /// Predictive mean (standardized, length D) and latent-function variance
    /// at a labeled latent point.
    pub fn predict_latent(&self, x: &[f64], label: CategoryLabel) -> (DVector<f64>, f64) {
        let s = &self.model.state;
        let p = self.kernel();
        let m = s.inducing.len();
        let kx = DVector::from_fn(m, |j, _| {
            let z: Vec<f64> = s.inducing.inputs.row(j).iter().copied().collect();
            p.eval_rows(x, label, &z, s.inducing.labels[j])
        });
        let beta = 1.0 / p.noise_variance;
        let mean = self.c.tr_mul(&kx) * beta;
        let kinv_k = self.chol_k.solve(&kx);
        let ainv_k = self.chol_a.solve(&kx);
        let var = p.diag_value() - kx.dot(&kinv_k) + kx.dot(&ainv_k);
        (mean, var.max(0.0))
    }

    /// `n` samples in data units for category `label`.
    pub fn generate(&self, label: CategoryLabel, n: usize, seed: u64) -> Result<DMatrix<f64>> {
        self.check_label(label)?;
        let s = &self.model.state;
        let qt = s.config.q_total();
        let d = self.model.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let x: Vec<f64> = (0..qt).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (mean, var) = self.predict_latent(&x, label);
            let sd = (var + s.kernel.noise_variance).sqrt();
            for j in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                out[(i, j)] = mean[j] + sd * e;
            }
        }
        Ok(s.data.standardization.invert(&out))
    }
}

pub fn infer_test_latent(
    y_star: &[f64],
    hypothesis: CategoryLabel,
    model: &FittedModel,
    opts: &InferOptions,
) -> Result<TestInference> {
    Predictor::new(model)?.infer(y_star, hypothesis, opts)
}

pub fn classify(y_star: &[f64], model: &FittedModel, class_log_priors: &[f64]) -> Result<Vec<ClassScore>> {
    Predictor::new(model)?.classify(y_star, class_log_priors, &InferOptions::default())
}

pub fn generate(model: &FittedModel, label: CategoryLabel, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    Predictor::new(model)?.generate(label, n, seed)
}

/// Log of the training category frequencies.
pub fn empirical_log_priors(model: &FittedModel) -> Vec<f64> {
    let s = &model.state;
    let mut counts = vec![0usize; s.data.category_count];
    for l in &s.labels {
        counts[l.index()] += 1;
    }
    let n = s.labels.len() as f64;
    counts.iter().map(|&c| ((c as f64).max(0.5) / n).ln()).collect()
}
