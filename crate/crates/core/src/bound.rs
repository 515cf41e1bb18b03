//! Collapsed sparse variational lower bound and its gradients.
//!
//! With `β = 1/σ²`, `A = K_uu + β Ψ2` and `b_d = Ψ1ᵀ y_d`, each output
//! dimension contributes
//!
//! ```text
//! F_d = -N/2 ln(2πσ²) + ½ ln|K_uu| - ½ ln|A| - β/2 y_dᵀy_d
//!       + β²/2 b_dᵀ A⁻¹ b_d - β/2 ψ0 + β/2 tr(K_uu⁻¹ Ψ2)
//! ```
//!
//! and the bound is `Σ_d F_d - KL(q(X) ‖ N(0, I))`. The N×N matrix
//! `W = βI - β² Ψ1 A⁻¹ Ψ1ᵀ` is never formed: the data only enters through
//! `Ψ1ᵀ Y` (M×D) and the per-column sums of squares.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SclvmError};
use crate::kernels::{gram_rows, JitterPolicy, KernelParams};
use crate::linalg::{add_diag, log_det, symmetrize};
use crate::model::ModelState;
use crate::psi::{self, EqGradient, InducingSet, PsiStats, VariationalPosterior};

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub elbo: f64,
    /// `F_d` for every output dimension.
    pub data_fit_terms: Vec<f64>,
    pub kl: f64,
    /// `Σ_d β/2 (tr(K_uu⁻¹Ψ2) - ψ0)`.
    pub trace_term: f64,
    /// `Σ_d ½ (ln|K_uu| - ln|A|)`.
    pub log_det_term: f64,
}

/// Gradient of the bound on the unconstrained scale, one field per parameter
/// group. Absent kernel blocks have no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboGradient {
    pub means: DMatrix<f64>,
    pub log_variances: DMatrix<f64>,
    pub inducing: DMatrix<f64>,
    pub shared: Option<EqGradient>,
    pub private: Option<EqGradient>,
    pub log_noise: f64,
}

impl ElboGradient {
    /// Flattened in the order of [`ModelState::pack`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for m in [&self.means, &self.log_variances, &self.inducing] {
            for i in 0..m.nrows() {
                v.extend(m.row(i).iter());
            }
        }
        for g in [&self.shared, &self.private].into_iter().flatten() {
            v.push(g.log_variance);
            v.extend(&g.log_lengthscales);
        }
        v.push(self.log_noise);
        v
    }
}

pub fn kl_to_prior(q: &VariationalPosterior) -> Result<f64> {
    q.validate()?;
    Ok(kl_unchecked(&q.means, &q.variances))
}

/// Gradient of the KL term with respect to the means and log-variances.
pub fn kl_gradient(q: &VariationalPosterior) -> (DMatrix<f64>, DMatrix<f64>) {
    (q.means.clone(), q.variances.map(|s| 0.5 * (s - 1.0)))
}

pub(crate) fn kl_unchecked(means: &DMatrix<f64>, variances: &DMatrix<f64>) -> f64 {
    means
        .iter()
        .zip(variances.iter())
        .map(|(m, s)| 0.5 * (s + m * m - 1.0 - s.ln()))
        .sum()
}

/// Data summary the bound depends on.
#[derive(Clone, Debug)]
pub(crate) struct CollapsedStats {
    pub n: f64,
    pub psi0: f64,
    pub psi2: DMatrix<f64>,
    /// `Ψ1ᵀ Y`, M×D.
    pub b: DMatrix<f64>,
    /// `y_dᵀ y_d` per column.
    pub yy: Vec<f64>,
}

/// Sensitivities of `Σ_d F_d` with respect to its inputs.
#[derive(Clone, Debug)]
pub(crate) struct BoundSensitivity {
    pub psi0: f64,
    /// w.r.t. `Ψ1ᵀY`, M×D.
    pub b: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
    /// w.r.t. the jitter-free inducing Gram matrix, jitter path included.
    pub kuu: DMatrix<f64>,
    pub log_noise: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct CollapsedBound {
    pub per_dim: Vec<f64>,
    pub trace_term: f64,
    pub log_det_term: f64,
    /// `A⁻¹ Ψ1ᵀY`, reused by the predictive equations.
    pub c: DMatrix<f64>,
    /// Relative jitter level at which both factorizations succeeded.
    pub rel: f64,
    pub sens: Option<BoundSensitivity>,
}

impl CollapsedBound {
    pub fn total(&self) -> f64 {
        self.per_dim.iter().sum()
    }
}

/// Evaluates `F_d` for every column from the data summary. `kuu` is the
/// jitter-free inducing Gram matrix.
pub(crate) fn collapsed_bound(
    stats: &CollapsedStats,
    kuu: &DMatrix<f64>,
    noise_variance: f64,
    policy: &JitterPolicy,
    want_sens: bool,
) -> Result<CollapsedBound> {
    let m = kuu.nrows();
    let d = stats.b.ncols();
    let n = stats.n;
    let beta = 1.0 / noise_variance;
    let mean_diag = kuu.diagonal().mean();

    let mut factors = None;
    for rel in policy.levels() {
        let mut kj = kuu.clone();
        add_diag(&mut kj, rel * mean_diag);
        let Some(lk) = nalgebra::Cholesky::new(kj.clone()) else { continue };
        let mut a = &stats.psi2 * beta + &kj;
        symmetrize(&mut a);
        let Some(la) = nalgebra::Cholesky::new(a) else { continue };
        factors = Some((rel, lk, la));
        break;
    }
    let (rel, lk, la) = factors.ok_or_else(|| {
        SclvmError::numerical(format!(
            "factorization of K_uu ({m}x{m}) and K_uu + Ψ2/σ² failed up to relative jitter {:e}",
            policy.max
        ))
    })?;

    let ld_k = log_det(&lk);
    let ld_a = log_det(&la);
    let k_inv = lk.inverse();
    let c = la.solve(&stats.b);
    let tr_kpsi = k_inv.component_mul(&stats.psi2).sum();

    let base = -0.5 * n * (2.0 * PI * noise_variance).ln() + 0.5 * (ld_k - ld_a) + 0.5 * beta * (tr_kpsi - stats.psi0);
    let mut per_dim = Vec::with_capacity(d);
    let mut quad_total = 0.0;
    for j in 0..d {
        let quad = stats.b.column(j).dot(&c.column(j));
        quad_total += quad;
        per_dim.push(base - 0.5 * beta * stats.yy[j] + 0.5 * beta * beta * quad);
    }
    if per_dim.iter().any(|f| !f.is_finite()) {
        return Err(SclvmError::numerical("bound evaluated to a non-finite value"));
    }
    let df = d as f64;
    let trace_term = df * 0.5 * beta * (tr_kpsi - stats.psi0);
    let log_det_term = df * 0.5 * (ld_k - ld_a);

    let sens = want_sens.then(|| {
        let p_inv = la.inverse();
        let cct = &c * c.transpose();
        // dF/dA
        let mut g_a = &p_inv * (-0.5 * df) - &cct * (0.5 * beta * beta);
        symmetrize(&mut g_a);
        let mut g_psi2 = &g_a * beta + &k_inv * (0.5 * df * beta);
        symmetrize(&mut g_psi2);
        let mut g_k = &k_inv * (0.5 * df) + &g_a - (&k_inv * &stats.psi2 * &k_inv) * (0.5 * df * beta);
        symmetrize(&mut g_k);
        // Jitter is rel · tr(K)/M, so each diagonal entry also moves it.
        let tr_gk = g_k.trace();
        add_diag(&mut g_k, rel * tr_gk / m as f64);

        let yy_total: f64 = stats.yy.iter().sum();
        let g_a_psi2 = g_a.component_mul(&stats.psi2).sum();
        let d_beta = -0.5 * yy_total + beta * quad_total + g_a_psi2 - 0.5 * df * stats.psi0 + 0.5 * df * tr_kpsi;
        BoundSensitivity {
            psi0: -0.5 * df * beta,
            b: &c * (beta * beta),
            psi2: g_psi2,
            kuu: g_k,
            log_noise: -0.5 * n * df - beta * d_beta,
        }
    });

    Ok(CollapsedBound {
        per_dim,
        trace_term,
        log_det_term,
        c,
        rel,
        sens,
    })
}

/// `F_d` for a single output column given precomputed psi statistics and the
/// jitter-free inducing Gram matrix.
pub fn f_tilde(y_d: &[f64], stats: &PsiStats, kuu: &DMatrix<f64>, noise_variance: f64) -> Result<f64> {
    let n = stats.psi1.nrows();
    let m = stats.psi1.ncols();
    if y_d.len() != n {
        return Err(SclvmError::contract(format!(
            "y_d has {} entries, Ψ1 has {} rows",
            y_d.len(),
            n
        )));
    }
    if kuu.shape() != (m, m) || stats.psi2.shape() != (m, m) {
        return Err(SclvmError::contract("K_uu and Ψ2 must be M×M with M = Ψ1 columns"));
    }
    if !(noise_variance > 0.0) {
        return Err(SclvmError::contract("noise variance must be positive"));
    }
    let y = DVector::from_column_slice(y_d);
    let b = stats.psi1.tr_mul(&y);
    let cs = CollapsedStats {
        n: n as f64,
        psi0: stats.psi0,
        psi2: stats.psi2.clone(),
        b: DMatrix::from_column_slice(m, 1, b.as_slice()),
        yy: vec![y.norm_squared()],
    };
    Ok(collapsed_bound(&cs, kuu, noise_variance, &JitterPolicy::default(), false)?.per_dim[0])
}

fn check_data(y: &DMatrix<f64>, state: &ModelState) -> Result<()> {
    state.validate()?;
    if y.nrows() != state.n_points() {
        return Err(SclvmError::contract(format!(
            "Y has {} rows, model has {} latent points",
            y.nrows(),
            state.n_points()
        )));
    }
    Ok(())
}

pub(crate) fn summarize(
    y: &DMatrix<f64>,
    q: &VariationalPosterior,
    labels: &[crate::kernels::CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
) -> (psi::PsiParts, CollapsedStats) {
    let parts = psi::psi_parts(q, labels, u, p);
    let psi1 = parts.psi1();
    let b = psi1.tr_mul(y);
    let yy = (0..y.ncols()).map(|j| y.column(j).norm_squared()).collect();
    let stats = CollapsedStats {
        n: q.n_points() as f64,
        psi0: parts.psi0,
        psi2: parts.psi2.clone(),
        b,
        yy,
    };
    (parts, stats)
}

pub fn elbo(y: &DMatrix<f64>, state: &ModelState) -> Result<BoundReport> {
    check_data(y, state)?;
    let (_, stats) = summarize(y, &state.q, &state.labels, &state.inducing, &state.kernel);
    let kuu = gram_rows(&state.inducing.inputs, &state.inducing.labels, &state.kernel);
    let cb = collapsed_bound(&stats, &kuu, state.kernel.noise_variance, &state.jitter, false)?;
    Ok(report(&cb, kl_unchecked(&state.q.means, &state.q.variances)))
}

fn report(cb: &CollapsedBound, kl: f64) -> BoundReport {
    BoundReport {
        elbo: cb.total() - kl,
        data_fit_terms: cb.per_dim.clone(),
        kl,
        trace_term: cb.trace_term,
        log_det_term: cb.log_det_term,
    }
}

pub fn elbo_gradient(y: &DMatrix<f64>, state: &ModelState) -> Result<ElboGradient> {
    Ok(elbo_and_gradient(y, state)?.1)
}

/// Bound and exact gradient in one pass.
pub fn elbo_and_gradient(y: &DMatrix<f64>, state: &ModelState) -> Result<(BoundReport, ElboGradient)> {
    check_data(y, state)?;
    let p = &state.kernel;
    let u = &state.inducing;
    let (parts, stats) = summarize(y, &state.q, &state.labels, u, p);
    let kuu = gram_rows(&u.inputs, &u.labels, p);
    let cb = collapsed_bound(&stats, &kuu, p.noise_variance, &state.jitter, true)?;
    let sens = cb.sens.as_ref().expect("sensitivities requested");

    let g1 = y * sens.b.transpose();
    let pg = psi::backprop(&state.q, &state.labels, u, p, &parts, sens.psi0, &g1, &sens.psi2);
    let (gz, gks, gkp) = gram_backprop(u, p, &sens.kuu);

    let (kl_means, kl_log_vars) = kl_gradient(&state.q);
    let means = pg.means - kl_means;
    let log_variances = pg.log_variances - kl_log_vars;
    let inducing = pg.inducing + gz;
    let mut shared = pg.shared;
    shared.add(&gks);
    let mut private = pg.private;
    private.add(&gkp);

    let grad = ElboGradient {
        means,
        log_variances,
        inducing,
        shared: p.shared.is_active().then_some(shared),
        private: p.private.is_active().then_some(private),
        log_noise: sens.log_noise,
    };
    Ok((report(&cb, kl_unchecked(&state.q.means, &state.q.variances)), grad))
}

/// Pulls a sensitivity on the jitter-free Gram matrix back to the inducing
/// inputs and kernel parameters.
pub(crate) fn gram_backprop(
    u: &InducingSet,
    p: &KernelParams,
    g: &DMatrix<f64>,
) -> (DMatrix<f64>, EqGradient, EqGradient) {
    let m = u.len();
    let qt = p.q_total();
    let qs = p.q_shared();
    let mut gz = DMatrix::zeros(m, qt);
    let mut gs = EqGradient::zeros(p.q_shared());
    let mut gp = EqGradient::zeros(p.q_private());
    for (params, offset, gated, out) in [(&p.shared, 0, false, &mut gs), (&p.private, qs, true, &mut gp)] {
        if !params.is_active() {
            continue;
        }
        let ls2: Vec<f64> = params.lengthscales.iter().map(|l| l * l).collect();
        for b in 0..m {
            for a in 0..=b {
                if gated && u.labels[a] != u.labels[b] {
                    continue;
                }
                let za: Vec<f64> = (0..params.dims()).map(|q| u.inputs[(a, offset + q)]).collect();
                let zb: Vec<f64> = (0..params.dims()).map(|q| u.inputs[(b, offset + q)]).collect();
                let k = params.eval_unchecked(&za, &zb);
                let mult = if a == b { 1.0 } else { 2.0 };
                let w = mult * g[(a, b)] * k;
                out.log_variance += w;
                if a == b {
                    continue;
                }
                for q in 0..params.dims() {
                    let dl = za[q] - zb[q];
                    gz[(a, offset + q)] -= w * dl / ls2[q];
                    gz[(b, offset + q)] += w * dl / ls2[q];
                    out.log_lengthscales[q] += w * dl * dl / ls2[q];
                }
            }
        }
    }
    (gz, gs, gp)
}
