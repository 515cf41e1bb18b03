//! Exponentiated-quadratic kernels over labeled latent points.
//!
//! The composite covariance is `k = k_s(x_s, x_s') + [c = c'] k'(x_p, x_p')`.
//! Both components use the ARD form `v · exp(-½ Σ_q (a_q - b_q)² / ℓ_q²)`.
//! A block with zero dimensions is absent from the model and contributes
//! nothing; this is how the label-blind (`Q_p = 0`) configuration is expressed.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SclvmError};

/// Opaque category id in `1..=C`. Only equality is meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryLabel(pub u32);

impl CategoryLabel {
    pub fn id(self) -> u32 {
        self.0
    }

    /// Zero-based position, for indexing per-class arrays.
    pub fn index(self) -> usize {
        (self.0 as usize).saturating_sub(1)
    }
}

impl std::fmt::Display for CategoryLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint {
    pub shared: Vec<f64>,
    pub private: Vec<f64>,
    pub label: CategoryLabel,
}

impl LatentPoint {
    pub fn new(shared: Vec<f64>, private: Vec<f64>, label: CategoryLabel) -> Self {
        LatentPoint {
            shared,
            private,
            label,
        }
    }

    /// Splits a full latent row `[x_s, x_p]` after `q_shared` coordinates.
    pub fn from_row(row: &[f64], q_shared: usize, label: CategoryLabel) -> Self {
        LatentPoint {
            shared: row[..q_shared].to_vec(),
            private: row[q_shared..].to_vec(),
            label,
        }
    }
}

/// Parameters of one ARD exponentiated-quadratic kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqKernelParams {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl EqKernelParams {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let p = EqKernelParams {
            variance,
            lengthscales,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit variance and unit lengthscales over `dims` inputs.
    pub fn unit(dims: usize) -> Self {
        EqKernelParams {
            variance: 1.0,
            lengthscales: vec![1.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.lengthscales.len()
    }

    /// A zero-dimensional block is absent from the composite kernel.
    pub fn is_active(&self) -> bool {
        !self.lengthscales.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(SclvmError::contract(format!(
                "kernel variance must be positive and finite, got {}",
                self.variance
            )));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(SclvmError::contract(format!(
                "lengthscales must be positive and finite, got {l}"
            )));
        }
        Ok(())
    }

    /// `v · exp(-½ Σ (a-b)²/ℓ²)` without dimension checks.
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        if !self.is_active() {
            return 0.0;
        }
        let mut r2 = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / l;
            r2 += d * d;
        }
        self.variance * (-0.5 * r2).exp()
    }

    fn check_len(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.dims() {
            return Err(SclvmError::contract(format!(
                "{what} has length {}, kernel expects {}",
                v.len(),
                self.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub shared: EqKernelParams,
    pub private: EqKernelParams,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(shared: EqKernelParams, private: EqKernelParams, noise_variance: f64) -> Result<Self> {
        let p = KernelParams {
            shared,
            private,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn q_shared(&self) -> usize {
        self.shared.dims()
    }

    pub fn q_private(&self) -> usize {
        self.private.dims()
    }

    pub fn q_total(&self) -> usize {
        self.q_shared() + self.q_private()
    }

    /// Prior variance of the latent function at any point: `v_s + v_p` over
    /// the active blocks.
    pub fn diag_value(&self) -> f64 {
        let mut v = 0.0;
        if self.shared.is_active() {
            v += self.shared.variance;
        }
        if self.private.is_active() {
            v += self.private.variance;
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.shared.validate()?;
        self.private.validate()?;
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(SclvmError::contract(format!(
                "noise variance must be positive and finite, got {}",
                self.noise_variance
            )));
        }
        if self.q_total() == 0 {
            return Err(SclvmError::contract(
                "latent space must have at least one dimension",
            ));
        }
        Ok(())
    }

    /// Composite kernel between two full latent rows.
    pub(crate) fn eval_rows(&self, a: &[f64], ca: CategoryLabel, b: &[f64], cb: CategoryLabel) -> f64 {
        let qs = self.q_shared();
        let mut k = self.shared.eval_unchecked(&a[..qs], &b[..qs]);
        if ca == cb {
            k += self.private.eval_unchecked(&a[qs..], &b[qs..]);
        }
        k
    }
}

pub fn eval_shared(a: &[f64], b: &[f64], p: &EqKernelParams) -> Result<f64> {
    p.check_len(a, "shared input a")?;
    p.check_len(b, "shared input b")?;
    Ok(p.eval_unchecked(a, b))
}

/// Label-gated private kernel: `k'(a_p, b_p)` when labels agree, exactly 0
/// otherwise.
pub fn eval_private(a: &LatentPoint, b: &LatentPoint, p: &EqKernelParams) -> Result<f64> {
    p.check_len(&a.private, "private input a")?;
    p.check_len(&b.private, "private input b")?;
    if a.label != b.label {
        return Ok(0.0);
    }
    Ok(p.eval_unchecked(&a.private, &b.private))
}

pub fn eval_composite(a: &LatentPoint, b: &LatentPoint, p: &KernelParams) -> Result<f64> {
    Ok(eval_shared(&a.shared, &b.shared, &p.shared)? + eval_private(a, b, &p.private)?)
}

/// Gram matrix of the composite kernel with `jitter` added to the diagonal.
pub fn gram(points: &[LatentPoint], p: &KernelParams, jitter: f64) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(SclvmError::contract("gram needs at least one point"));
    }
    if jitter < 0.0 {
        return Err(SclvmError::contract("jitter must be nonnegative"));
    }
    let m = points.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = eval_composite(&points[i], &points[j], p)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += jitter;
    }
    Ok(k)
}

/// Jitter-free composite Gram matrix over the rows of `inputs`.
pub(crate) fn gram_rows(inputs: &DMatrix<f64>, labels: &[CategoryLabel], p: &KernelParams) -> DMatrix<f64> {
    let m = inputs.nrows();
    let rows: Vec<Vec<f64>> = (0..m).map(|i| row_vec(inputs, i)).collect();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = p.eval_rows(&rows[i], labels[i], &rows[j], labels[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Composite cross-covariance between the rows of `a` and the rows of `b`.
pub(crate) fn cross_gram_rows(
    a: &DMatrix<f64>,
    a_labels: &[CategoryLabel],
    b: &DMatrix<f64>,
    b_labels: &[CategoryLabel],
    p: &KernelParams,
) -> DMatrix<f64> {
    let b_rows: Vec<Vec<f64>> = (0..b.nrows()).map(|j| row_vec(b, j)).collect();
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        let ra = row_vec(a, i);
        for (j, rb) in b_rows.iter().enumerate() {
            k[(i, j)] = p.eval_rows(&ra, a_labels[i], rb, b_labels[j]);
        }
    }
    k
}

pub(crate) fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Diagonal jitter schedule shared by every factorization of a kernel matrix.
///
/// The jitter is `relative · mean(diag K)`, starting at `initial` and growing
/// by `growth` after each failed factorization until it would exceed `max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial: f64,
    pub growth: f64,
    pub max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            initial: 1e-6,
            growth: 10.0,
            max: 1e-2,
        }
    }
}

impl JitterPolicy {
    /// Relative jitter levels to try, in order.
    pub fn levels(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut rel = self.initial;
        while rel <= self.max * (1.0 + 1e-12) {
            out.push(rel);
            if self.growth <= 1.0 || rel == 0.0 {
                break;
            }
            rel *= self.growth;
        }
        out
    }
}

/// Cholesky factor of `k + jitter·I` under the jitter schedule. Returns the
/// factor and the relative jitter level that succeeded.
pub fn jittered_cholesky(k: &DMatrix<f64>, policy: &JitterPolicy) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mean_diag = k.diagonal().mean();
    for rel in policy.levels() {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += rel * mean_diag;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, rel));
        }
    }
    Err(SclvmError::numerical(format!(
        "Cholesky failed for {}x{} kernel matrix up to relative jitter {:e}",
        k.nrows(),
        k.ncols(),
        policy.max
    )))
}
