//! Model state, configuration and the flat unconstrained parameter layout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataio::Standardization;
use crate::error::{Result, SclvmError};
use crate::kernels::{CategoryLabel, EqKernelParams, JitterPolicy, KernelParams};
use crate::psi::{InducingSet, VariationalPosterior};

/// Latent dimensionality split and number of inducing points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub q_shared: usize,
    pub q_private: usize,
    pub n_inducing: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            q_shared: 5,
            q_private: 5,
            n_inducing: 50,
        }
    }
}

impl LatentConfig {
    pub fn new(q_shared: usize, q_private: usize, n_inducing: usize) -> Result<Self> {
        let c = LatentConfig {
            q_shared,
            q_private,
            n_inducing,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn q_total(&self) -> usize {
        self.q_shared + self.q_private
    }

    /// The label-blind Bayesian GPLVM special case.
    pub fn is_label_blind(&self) -> bool {
        self.q_private == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_total() == 0 {
            return Err(SclvmError::contract("q_shared + q_private must be at least 1"));
        }
        if self.n_inducing == 0 {
            return Err(SclvmError::contract("n_inducing must be positive"));
        }
        Ok(())
    }
}

/// Identity of the training data plus what is needed to map back to data units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRef {
    pub name: String,
    /// FNV-1a digest of the raw observation bits and labels.
    pub fingerprint: u64,
    pub n: usize,
    pub d: usize,
    pub category_count: usize,
    pub label_names: Vec<String>,
    pub label_column: Option<String>,
    pub feature_names: Vec<String>,
    pub standardization: Standardization,
}

impl DataRef {
    pub fn label_name(&self, c: CategoryLabel) -> String {
        self.label_names
            .get(c.index())
            .cloned()
            .unwrap_or_else(|| c.to_string())
    }

    pub fn label_for_name(&self, name: &str) -> Option<CategoryLabel> {
        self.label_names
            .iter()
            .position(|l| l == name)
            .map(|i| CategoryLabel(i as u32 + 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: LatentConfig,
    pub q: VariationalPosterior,
    /// Observed category of each training point.
    pub labels: Vec<CategoryLabel>,
    pub inducing: InducingSet,
    pub kernel: KernelParams,
    pub jitter: JitterPolicy,
    pub data: DataRef,
}

impl ModelState {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.q.validate()?;
        self.kernel.validate()?;
        let qt = self.config.q_total();
        if self.kernel.q_shared() != self.config.q_shared || self.kernel.q_private() != self.config.q_private {
            return Err(SclvmError::contract("kernel lengthscale counts disagree with the latent config"));
        }
        if self.q.dims() != qt || self.inducing.inputs.ncols() != qt {
            return Err(SclvmError::contract("latent dimensionality disagrees with the config"));
        }
        if self.labels.len() != self.q.n_points() {
            return Err(SclvmError::contract("one label per posterior point is required"));
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.q.n_points()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.n_points(), self.inducing.len(), self.config)
    }

    /// Flattens every continuous parameter onto its unconstrained scale.
    pub fn pack(&self) -> Vec<f64> {
        let lay = self.layout();
        let mut v = Vec::with_capacity(lay.len());
        push_row_major(&mut v, &self.q.means);
        push_row_major(&mut v, &self.q.variances.map(f64::ln));
        push_row_major(&mut v, &self.inducing.inputs);
        for block in [&self.kernel.shared, &self.kernel.private] {
            if block.is_active() {
                v.push(block.variance.ln());
                v.extend(block.lengthscales.iter().map(|l| l.ln()));
            }
        }
        v.push(self.kernel.noise_variance.ln());
        debug_assert_eq!(v.len(), lay.len());
        v
    }

    /// Inverse of [`ModelState::pack`].
    pub fn unpack(&mut self, v: &[f64]) -> Result<()> {
        let lay = self.layout();
        if v.len() != lay.len() {
            return Err(SclvmError::contract(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                lay.len()
            )));
        }
        let (n, m, qt) = (lay.n, lay.m, lay.q);
        let mut at = 0;
        self.q.means = DMatrix::from_row_slice(n, qt, &v[at..at + n * qt]);
        at += n * qt;
        self.q.variances = DMatrix::from_row_slice(n, qt, &v[at..at + n * qt]).map(f64::exp);
        at += n * qt;
        self.inducing.inputs = DMatrix::from_row_slice(m, qt, &v[at..at + m * qt]);
        at += m * qt;
        for block in [&mut self.kernel.shared, &mut self.kernel.private] {
            if block.is_active() {
                block.variance = v[at].exp();
                at += 1;
                for l in block.lengthscales.iter_mut() {
                    *l = v[at].exp();
                    at += 1;
                }
            }
        }
        self.kernel.noise_variance = v[at].exp();
        Ok(())
    }
}

fn push_row_major(v: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        v.extend(m.row(i).iter());
    }
}

/// Offsets of each parameter group in the packed vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub q_shared: usize,
    pub q_private: usize,
}

impl ParamLayout {
    pub fn new(n: usize, m: usize, config: LatentConfig) -> Self {
        ParamLayout {
            n,
            m,
            q: config.q_total(),
            q_shared: config.q_shared,
            q_private: config.q_private,
        }
    }

    pub fn kernel_offset(&self) -> usize {
        2 * self.n * self.q + self.m * self.q
    }

    pub fn len(&self) -> usize {
        let block = |d: usize| if d > 0 { 1 + d } else { 0 };
        self.kernel_offset() + block(self.q_shared) + block(self.q_private) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A trained model plus the data summary needed to predict without the
/// training matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub state: ModelState,
    /// `Ψ1ᵀ Y` over the standardized training data (M×D).
    pub psi1_t_y: DMatrix<f64>,
    /// `y_dᵀ y_d` per output dimension of the standardized training data.
    pub y_sq: Vec<f64>,
    pub elbo: f64,
}

impl FittedModel {
    pub fn d(&self) -> usize {
        self.y_sq.len()
    }

    pub fn category_labels(&self) -> Vec<CategoryLabel> {
        let mut l = self.state.inducing.labels.clone();
        l.sort();
        l.dedup();
        l
    }
}

/// Kernel parameters at the initialization defaults.
pub(crate) fn default_kernel(config: LatentConfig, noise_variance: f64) -> KernelParams {
    KernelParams {
        shared: EqKernelParams::unit(config.q_shared),
        private: EqKernelParams::unit(config.q_private),
        noise_variance,
    }
}

/// FNV-1a over the bit patterns of a matrix (row-major) and a label list.
pub fn fingerprint(y: &DMatrix<f64>, labels: &[CategoryLabel]) -> u64 {
    const PRIME: u64 = 0x100000001b3;
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(&(y.nrows() as u64).to_le_bytes());
    feed(&(y.ncols() as u64).to_le_bytes());
    for i in 0..y.nrows() {
        for v in y.row(i).iter() {
            feed(&v.to_bits().to_le_bytes());
        }
    }
    for l in labels {
        feed(&l.0.to_le_bytes());
    }
    h
}
