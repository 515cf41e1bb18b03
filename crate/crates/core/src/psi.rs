//! Kernel expectations under a factorized Gaussian posterior.
//!
//! For a diagonal posterior `q(x_n) = N(μ_n, diag(s_n))` and the composite
//! kernel, the psi statistics are
//!
//! * `ψ0 = Σ_n E[k(x_n, x_n)]`
//! * `Ψ1[n,m] = E[k(x_n, z_m)]`
//! * `Ψ2[m,m'] = Σ_n E[k(x_n, z_m) k(x_n, z_m')]`
//!
//! Because `q` factorizes across the shared and private coordinates, each
//! `Ψ2` contribution splits into a shared-shared product expectation, a gated
//! private-private one, and two cross terms that are products of `Ψ1`-style
//! factors. Labels are observed, so the gate is a constant under the
//! expectation.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SclvmError};
use crate::kernels::{row_vec, CategoryLabel, EqKernelParams, KernelParams};

/// Exponentials are evaluated from log space and floored here.
const LOG_FLOOR: f64 = -700.0;

/// Rows per work unit. Fixed so that reductions do not depend on the thread
/// count.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

impl VariationalPosterior {
    pub fn new(means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        let q = VariationalPosterior { means, variances };
        q.validate()?;
        Ok(q)
    }

    pub fn n_points(&self) -> usize {
        self.means.nrows()
    }

    pub fn dims(&self) -> usize {
        self.means.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.shape() != self.variances.shape() {
            return Err(SclvmError::contract(format!(
                "posterior means {:?} and variances {:?} differ in shape",
                self.means.shape(),
                self.variances.shape()
            )));
        }
        if self.variances.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(SclvmError::contract("posterior variances must be positive and finite"));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(SclvmError::contract("posterior means must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<CategoryLabel>,
}

impl InducingSet {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<CategoryLabel>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(SclvmError::contract("inducing set must be nonempty"));
        }
        if inputs.nrows() != labels.len() {
            return Err(SclvmError::contract(format!(
                "{} inducing inputs but {} inducing labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(InducingSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_label(&self, c: CategoryLabel) -> bool {
        self.labels.contains(&c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsiStats {
    pub psi0: f64,
    pub psi1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

/// Gradient with respect to one kernel block on the log scale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EqGradient {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl EqGradient {
    pub(crate) fn zeros(dims: usize) -> Self {
        EqGradient {
            log_variance: 0.0,
            log_lengthscales: vec![0.0; dims],
        }
    }

    pub(crate) fn add(&mut self, o: &EqGradient) {
        self.log_variance += o.log_variance;
        for (a, b) in self.log_lengthscales.iter_mut().zip(&o.log_lengthscales) {
            *a += b;
        }
    }
}

/// Gradients of a scalar objective pulled back through the psi statistics.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct PsiGradients {
    pub means: DMatrix<f64>,
    pub log_variances: DMatrix<f64>,
    pub inducing: DMatrix<f64>,
    pub shared: EqGradient,
    pub private: EqGradient,
}

/// Psi statistics with the shared and gated private `Ψ1` blocks kept apart,
/// as needed for back-propagation.
#[derive(Clone, Debug)]
pub(crate) struct PsiParts {
    pub psi0: f64,
    pub shared1: DMatrix<f64>,
    pub private1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

impl PsiParts {
    pub fn psi1(&self) -> DMatrix<f64> {
        &self.shared1 + &self.private1
    }

    pub fn into_stats(self) -> PsiStats {
        let psi1 = self.psi1();
        PsiStats {
            psi0: self.psi0,
            psi1,
            psi2: self.psi2,
        }
    }
}

pub(crate) fn check_shapes(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: Option<&InducingSet>,
    p: &KernelParams,
) -> Result<()> {
    if q.dims() != p.q_total() {
        return Err(SclvmError::contract(format!(
            "posterior has {} latent dimensions, kernel expects {}",
            q.dims(),
            p.q_total()
        )));
    }
    if q.n_points() != labels.len() {
        return Err(SclvmError::contract(format!(
            "posterior has {} points but {} labels were given",
            q.n_points(),
            labels.len()
        )));
    }
    if let Some(u) = u {
        if u.inputs.ncols() != p.q_total() {
            return Err(SclvmError::contract(format!(
                "inducing inputs have {} columns, kernel expects {}",
                u.inputs.ncols(),
                p.q_total()
            )));
        }
        if u.inputs.nrows() != u.labels.len() {
            return Err(SclvmError::contract("inducing inputs and labels differ in count"));
        }
    }
    Ok(())
}

pub fn psi0(q: &VariationalPosterior, labels: &[CategoryLabel], p: &KernelParams) -> Result<f64> {
    check_shapes(q, labels, None, p)?;
    Ok(q.n_points() as f64 * p.diag_value())
}

pub fn psi1(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
) -> Result<DMatrix<f64>> {
    check_shapes(q, labels, Some(u), p)?;
    let (s1, p1) = psi1_blocks(q, labels, u, p);
    Ok(s1 + p1)
}

pub fn psi2(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
) -> Result<DMatrix<f64>> {
    check_shapes(q, labels, Some(u), p)?;
    let (s1, p1) = psi1_blocks(q, labels, u, p);
    Ok(psi2_sum(q, labels, u, p, &s1, &p1))
}

pub fn psi_stats(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
) -> Result<PsiStats> {
    check_shapes(q, labels, Some(u), p)?;
    Ok(psi_parts(q, labels, u, p).into_stats())
}

/// Shapes must already be checked.
pub(crate) fn psi_parts(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
) -> PsiParts {
    let (shared1, private1) = psi1_blocks(q, labels, u, p);
    let psi2 = psi2_sum(q, labels, u, p, &shared1, &private1);
    PsiParts {
        psi0: q.n_points() as f64 * p.diag_value(),
        shared1,
        private1,
        psi2,
    }
}

/// One kernel block together with the column range it reads.
#[derive(Clone, Copy)]
struct Block<'a> {
    params: &'a EqKernelParams,
    offset: usize,
}

impl<'a> Block<'a> {
    fn shared(p: &'a KernelParams) -> Self {
        Block {
            params: &p.shared,
            offset: 0,
        }
    }

    fn private(p: &'a KernelParams) -> Self {
        Block {
            params: &p.private,
            offset: p.q_shared(),
        }
    }

    fn dims(&self) -> usize {
        self.params.dims()
    }

    fn ls2(&self) -> Vec<f64> {
        self.params.lengthscales.iter().map(|l| l * l).collect()
    }
}

/// Per-point constants of the `Ψ1` expectation for one block.
struct Psi1Point {
    log_scale: f64,
    inv_den: Vec<f64>,
}

fn psi1_point(block: Block, ls2: &[f64], s: &[f64]) -> Psi1Point {
    let mut log_scale = block.params.variance.ln();
    let mut inv_den = Vec::with_capacity(ls2.len());
    for (l2, sv) in ls2.iter().zip(s) {
        let den = l2 + sv;
        log_scale += 0.5 * (l2 / den).ln();
        inv_den.push(1.0 / den);
    }
    Psi1Point { log_scale, inv_den }
}

fn psi1_value(pt: &Psi1Point, mu: &[f64], z: &[f64]) -> f64 {
    let mut acc = pt.log_scale;
    for ((m, zz), inv) in mu.iter().zip(z).zip(&pt.inv_den) {
        let d = m - zz;
        acc -= 0.5 * d * d * inv;
    }
    acc.max(LOG_FLOOR).exp()
}

/// Shared block (ungated) and private block (gated on label equality).
fn psi1_blocks(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = q.n_points();
    let m = u.len();
    let mut s1 = DMatrix::zeros(n, m);
    let mut p1 = DMatrix::zeros(n, m);
    for (block, out, gated) in [(Block::shared(p), &mut s1, false), (Block::private(p), &mut p1, true)] {
        if !block.params.is_active() {
            continue;
        }
        let qb = block.dims();
        let ls2 = block.ls2();
        let z: Vec<Vec<f64>> = (0..m)
            .map(|j| u.inputs.row(j).iter().skip(block.offset).take(qb).copied().collect())
            .collect();
        for i in 0..n {
            let mu: Vec<f64> = q.means.row(i).iter().skip(block.offset).take(qb).copied().collect();
            let s: Vec<f64> = q.variances.row(i).iter().skip(block.offset).take(qb).copied().collect();
            let pt = psi1_point(block, &ls2, &s);
            for (j, zj) in z.iter().enumerate() {
                if gated && u.labels[j] != labels[i] {
                    continue;
                }
                out[(i, j)] = psi1_value(&pt, &mu, zj);
            }
        }
    }
    (s1, p1)
}

/// Pairs `(m, m')`, `m ≤ m'`, of inducing points with the midpoint and
/// difference terms per dimension precomputed.
struct PairTable {
    pairs: Vec<(usize, usize)>,
    mid: Vec<f64>,
    /// `Σ_q δ_q² / (4 ℓ_q²)`
    sep: Vec<f64>,
    /// `δ_q / (2 ℓ_q²)` per pair and dimension.
    half: Vec<f64>,
    /// `δ_q² / (2 ℓ_q²)` per pair and dimension.
    sep_ls: Vec<f64>,
    dims: usize,
}

impl PairTable {
    fn new(block: Block, u: &InducingSet, idx: &[usize]) -> Self {
        let dims = block.dims();
        let ls2 = block.ls2();
        let mut pairs = Vec::new();
        let mut mid = Vec::new();
        let mut sep = Vec::new();
        let mut half = Vec::new();
        let mut sep_ls = Vec::new();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a..] {
                pairs.push((i, j));
                let mut s = 0.0;
                for q in 0..dims {
                    let zi = u.inputs[(i, block.offset + q)];
                    let zj = u.inputs[(j, block.offset + q)];
                    let d = zi - zj;
                    mid.push(0.5 * (zi + zj));
                    half.push(d / (2.0 * ls2[q]));
                    sep_ls.push(d * d / (2.0 * ls2[q]));
                    s += d * d / (4.0 * ls2[q]);
                }
                sep.push(s);
            }
        }
        PairTable {
            pairs,
            mid,
            sep,
            half,
            sep_ls,
            dims,
        }
    }
}

/// Pair tables for the shared block (all inducing points) and for the private
/// block (one table per inducing label).
struct Tables {
    shared: Option<PairTable>,
    private: Vec<(CategoryLabel, PairTable)>,
}

impl Tables {
    fn new(u: &InducingSet, p: &KernelParams) -> Self {
        let shared = p
            .shared
            .is_active()
            .then(|| PairTable::new(Block::shared(p), u, &(0..u.len()).collect::<Vec<_>>()));
        let mut private = Vec::new();
        if p.private.is_active() {
            let mut seen: Vec<CategoryLabel> = u.labels.clone();
            seen.sort();
            seen.dedup();
            for c in seen {
                let idx: Vec<usize> = (0..u.len()).filter(|&j| u.labels[j] == c).collect();
                private.push((c, PairTable::new(Block::private(p), u, &idx)));
            }
        }
        Tables { shared, private }
    }

    fn private_for(&self, c: CategoryLabel) -> Option<&PairTable> {
        self.private.iter().find(|(l, _)| *l == c).map(|(_, t)| t)
    }
}

/// Per-point constants of the `Ψ2` product expectation for one block.
struct Psi2Point {
    log_scale: f64,
    inv_den: Vec<f64>,
}

fn psi2_point(block: Block, ls2: &[f64], s: &[f64]) -> Psi2Point {
    let mut log_scale = 2.0 * block.params.variance.ln();
    let mut inv_den = Vec::with_capacity(ls2.len());
    for (l2, sv) in ls2.iter().zip(s) {
        let den = l2 + 2.0 * sv;
        log_scale += 0.5 * (l2 / den).ln();
        inv_den.push(1.0 / den);
    }
    Psi2Point { log_scale, inv_den }
}

/// `E[k(x, z_m) k(x, z_m')]` for pair `k` of the table.
fn psi2_value(t: &PairTable, k: usize, pt: &Psi2Point, mu: &[f64]) -> f64 {
    let mid = &t.mid[k * t.dims..(k + 1) * t.dims];
    let mut acc = pt.log_scale - t.sep[k];
    for ((m, c), inv) in mu.iter().zip(mid).zip(&pt.inv_den) {
        let e = m - c;
        acc -= e * e * inv;
    }
    acc.max(LOG_FLOOR).exp()
}

fn sub_row(m: &DMatrix<f64>, i: usize, offset: usize, len: usize) -> Vec<f64> {
    (0..len).map(|q| m[(i, offset + q)]).collect()
}

fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(CHUNK).map(|a| a..(a + CHUNK).min(n)).collect()
}

/// Pairwise reduction in a fixed tree shape.
pub(crate) fn tree_reduce<T>(mut items: Vec<T>, f: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(f(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

fn add_vecs(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

fn psi2_sum(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
    s1: &DMatrix<f64>,
    p1: &DMatrix<f64>,
) -> DMatrix<f64> {
    let m = u.len();
    let tables = Tables::new(u, p);
    let sb = Block::shared(p);
    let pb = Block::private(p);
    let (sls2, pls2) = (sb.ls2(), pb.ls2());
    // Row n of Ψ1 as a contiguous column.
    let s1t = s1.transpose();
    let p1t = p1.transpose();

    let partials: Vec<Vec<f64>> = chunks(q.n_points())
        .into_par_iter()
        .map(|range| {
            // Upper triangle, column-major M×M.
            let mut acc = vec![0.0; m * m];
            for i in range {
                if let Some(t) = &tables.shared {
                    let s = sub_row(&q.variances, i, 0, sb.dims());
                    let mu = sub_row(&q.means, i, 0, sb.dims());
                    let pt = psi2_point(sb, &sls2, &s);
                    for (k, &(a, b)) in t.pairs.iter().enumerate() {
                        acc[a + b * m] += psi2_value(t, k, &pt, &mu);
                    }
                }
                if let Some(t) = tables.private_for(labels[i]) {
                    let s = sub_row(&q.variances, i, pb.offset, pb.dims());
                    let mu = sub_row(&q.means, i, pb.offset, pb.dims());
                    let pt = psi2_point(pb, &pls2, &s);
                    for (k, &(a, b)) in t.pairs.iter().enumerate() {
                        acc[a + b * m] += psi2_value(t, k, &pt, &mu);
                    }
                }
                // Cross terms E[k_s]E[k_p] + E[k_p]E[k_s].
                if p.shared.is_active() && p.private.is_active() {
                    let sr = s1t.column(i);
                    let pr = p1t.column(i);
                    for b in 0..m {
                        let (sb_, pb_) = (sr[b], pr[b]);
                        if sb_ == 0.0 && pb_ == 0.0 {
                            continue;
                        }
                        let col = &mut acc[b * m..b * m + b + 1];
                        for (a, v) in col.iter_mut().enumerate() {
                            *v += sr[a] * pb_ + pr[a] * sb_;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let upper = tree_reduce(partials, add_vecs).unwrap_or_else(|| vec![0.0; m * m]);
    let mut out = DMatrix::zeros(m, m);
    for b in 0..m {
        for a in 0..=b {
            let v = upper[a + b * m];
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

/// Chunk-local gradient accumulators.
struct GradChunk {
    start: usize,
    means: Vec<f64>,
    log_vars: Vec<f64>,
    inducing: Vec<f64>,
    shared: EqGradient,
    private: EqGradient,
}

/// Pulls `dF/dψ0`, `dF/dΨ1` (N×M) and `dF/dΨ2` (M×M, symmetric) back to the
/// posterior, the inducing inputs and the kernel parameters.
pub(crate) fn backprop(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
    parts: &PsiParts,
    g0: f64,
    g1: &DMatrix<f64>,
    g2: &DMatrix<f64>,
) -> PsiGradients {
    let n = q.n_points();
    let m = u.len();
    let qt = p.q_total();
    let sb = Block::shared(p);
    let pb = Block::private(p);
    let (sls2, pls2) = (sb.ls2(), pb.ls2());
    let tables = Tables::new(u, p);
    let both = p.shared.is_active() && p.private.is_active();

    // The cross terms of Ψ2 act as extra Ψ1 sensitivities.
    let (g_shared, g_private) = if both {
        (g1 + (&parts.private1 * g2) * 2.0, g1 + (&parts.shared1 * g2) * 2.0)
    } else {
        (g1.clone(), g1.clone())
    };

    let g_shared = g_shared.transpose();
    let g_private = g_private.transpose();
    let z_rows = |block: Block| -> Vec<Vec<f64>> { (0..m).map(|j| sub_row(&u.inputs, j, block.offset, block.dims())).collect() };
    let (z_shared, z_private) = (z_rows(sb), z_rows(pb));

    let results: Vec<GradChunk> = chunks(n)
        .into_par_iter()
        .map(|range| {
            let start = range.start;
            let len = range.len();
            let mut gc = GradChunk {
                start,
                means: vec![0.0; len * qt],
                log_vars: vec![0.0; len * qt],
                inducing: vec![0.0; m * qt],
                shared: EqGradient::zeros(sb.dims()),
                private: EqGradient::zeros(pb.dims()),
            };
            for i in range {
                let li = i - start;
                for (block, ls2, gated) in [(sb, &sls2, false), (pb, &pls2, true)] {
                    if !block.params.is_active() {
                        continue;
                    }
                    let geff = if gated { g_private.column(i) } else { g_shared.column(i) };
                    let zs = if gated { &z_private } else { &z_shared };
                    let qb = block.dims();
                    let mu = sub_row(&q.means, i, block.offset, qb);
                    let s = sub_row(&q.variances, i, block.offset, qb);
                    let eg = if gated { &mut gc.private } else { &mut gc.shared };

                    // Ψ1 block.
                    let pt = psi1_point(block, ls2, &s);
                    for j in 0..m {
                        if gated && u.labels[j] != labels[i] {
                            continue;
                        }
                        let w = geff[j];
                        if w == 0.0 {
                            continue;
                        }
                        let z = &zs[j];
                        let val = psi1_value(&pt, &mu, z);
                        let w = w * val;
                        eg.log_variance += w;
                        for qq in 0..qb {
                            let inv = pt.inv_den[qq];
                            let d = mu[qq] - z[qq];
                            let col = block.offset + qq;
                            gc.means[li * qt + col] -= w * d * inv;
                            gc.inducing[j * qt + col] += w * d * inv;
                            gc.log_vars[li * qt + col] += w * s[qq] * 0.5 * (d * d * inv * inv - inv);
                            eg.log_lengthscales[qq] += w * (1.0 - ls2[qq] * inv + ls2[qq] * d * d * inv * inv);
                        }
                    }

                    // Ψ2 product block.
                    let table = if gated {
                        tables.private_for(labels[i])
                    } else {
                        tables.shared.as_ref()
                    };
                    let Some(t) = table else { continue };
                    let pt2 = psi2_point(block, ls2, &s);
                    // Per-point sums, folded into the chunk after the pair loop.
                    let mut w_total = 0.0;
                    let mut sum_wei = vec![0.0; qb];
                    let mut sum_wee = vec![0.0; qb];
                    let mut sum_wsep = vec![0.0; qb];
                    for (k, &(a, b)) in t.pairs.iter().enumerate() {
                        let gw = g2[(a, b)];
                        if gw == 0.0 {
                            continue;
                        }
                        let mult = if a == b { 1.0 } else { 2.0 };
                        let w = mult * gw * psi2_value(t, k, &pt2, &mu);
                        w_total += w;
                        let mid = &t.mid[k * qb..(k + 1) * qb];
                        let half = &t.half[k * qb..(k + 1) * qb];
                        let sep_ls = &t.sep_ls[k * qb..(k + 1) * qb];
                        for qq in 0..qb {
                            let e = mu[qq] - mid[qq];
                            let wei = w * e * pt2.inv_den[qq];
                            sum_wei[qq] += wei;
                            sum_wee[qq] += wei * e;
                            sum_wsep[qq] += w * sep_ls[qq];
                            gc.inducing[a * qt + block.offset + qq] += wei - w * half[qq];
                            gc.inducing[b * qt + block.offset + qq] += wei + w * half[qq];
                        }
                    }
                    eg.log_variance += 2.0 * w_total;
                    for qq in 0..qb {
                        let inv = pt2.inv_den[qq];
                        let col = block.offset + qq;
                        gc.means[li * qt + col] -= 2.0 * sum_wei[qq];
                        gc.log_vars[li * qt + col] += s[qq] * (2.0 * sum_wee[qq] - w_total) * inv;
                        eg.log_lengthscales[qq] += w_total * (1.0 - ls2[qq] * inv)
                            + sum_wsep[qq]
                            + 2.0 * ls2[qq] * sum_wee[qq] * inv;
                    }
                }
            }
            gc
        })
        .collect();

    let mut means = DMatrix::zeros(n, qt);
    let mut log_variances = DMatrix::zeros(n, qt);
    let mut globals = Vec::with_capacity(results.len());
    for gc in results {
        let len = gc.means.len() / qt.max(1);
        for li in 0..len {
            for c in 0..qt {
                means[(gc.start + li, c)] = gc.means[li * qt + c];
                log_variances[(gc.start + li, c)] = gc.log_vars[li * qt + c];
            }
        }
        globals.push((gc.inducing, gc.shared, gc.private));
    }
    let (ind, mut shared, mut private) = tree_reduce(globals, |mut a, b| {
        a.0 = add_vecs(a.0, b.0);
        a.1.add(&b.1);
        a.2.add(&b.2);
        a
    })
    .unwrap_or_else(|| (vec![0.0; m * qt], EqGradient::zeros(sb.dims()), EqGradient::zeros(pb.dims())));

    // ψ0 = N (v_s + v_p).
    if p.shared.is_active() {
        shared.log_variance += g0 * n as f64 * p.shared.variance;
    }
    if p.private.is_active() {
        private.log_variance += g0 * n as f64 * p.private.variance;
    }

    PsiGradients {
        means,
        log_variances,
        inducing: DMatrix::from_row_slice(m, qt, &ind),
        shared,
        private,
    }
}

/// Monte-Carlo estimate of the psi statistics with per-entry standard errors.
#[derive(Clone, Debug)]
pub struct McPsiEstimate {
    pub stats: PsiStats,
    pub psi0_se: f64,
    pub psi1_se: DMatrix<f64>,
    pub psi2_se: DMatrix<f64>,
    pub n_samples: usize,
}

/// Estimates the psi statistics by sampling `x_n ~ q` and evaluating the
/// composite kernel exactly. Deterministic given `seed`.
pub fn psi_mc_oracle(
    q: &VariationalPosterior,
    labels: &[CategoryLabel],
    u: &InducingSet,
    p: &KernelParams,
    n_samples: usize,
    seed: u64,
) -> Result<McPsiEstimate> {
    check_shapes(q, labels, Some(u), p)?;
    if n_samples < 1000 {
        return Err(SclvmError::contract("Monte-Carlo oracle needs at least 1000 samples"));
    }
    let n = q.n_points();
    let m = u.len();
    let qt = p.q_total();
    let z: Vec<Vec<f64>> = (0..m).map(|j| row_vec(&u.inputs, j)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = n_samples as f64;

    let mut psi0 = 0.0;
    let mut psi0_var = 0.0;
    let mut psi1 = DMatrix::zeros(n, m);
    let mut psi1_se = DMatrix::zeros(n, m);
    let mut psi2 = DMatrix::zeros(m, m);
    let mut psi2_var = DMatrix::zeros(m, m);

    let mut x = vec![0.0; qt];
    let mut k = vec![0.0; m];
    for i in 0..n {
        let mu = row_vec(&q.means, i);
        let sd: Vec<f64> = q.variances.row(i).iter().map(|s| s.sqrt()).collect();
        let mut s0 = 0.0;
        let mut s0sq = 0.0;
        let mut s1 = vec![0.0; m];
        let mut s1sq = vec![0.0; m];
        let mut s2 = vec![0.0; m * m];
        let mut s2sq = vec![0.0; m * m];
        for _ in 0..n_samples {
            for c in 0..qt {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[c] = mu[c] + sd[c] * e;
            }
            let kd = p.eval_rows(&x, labels[i], &x, labels[i]);
            s0 += kd;
            s0sq += kd * kd;
            for j in 0..m {
                k[j] = p.eval_rows(&x, labels[i], &z[j], u.labels[j]);
                s1[j] += k[j];
                s1sq[j] += k[j] * k[j];
            }
            for b in 0..m {
                for a in 0..=b {
                    let v = k[a] * k[b];
                    s2[a + b * m] += v;
                    s2sq[a + b * m] += v * v;
                }
            }
        }
        let var_of_mean = |s: f64, ssq: f64| ((ssq / ns - (s / ns).powi(2)).max(0.0)) / ns;
        psi0 += s0 / ns;
        psi0_var += var_of_mean(s0, s0sq);
        for j in 0..m {
            psi1[(i, j)] = s1[j] / ns;
            psi1_se[(i, j)] = var_of_mean(s1[j], s1sq[j]).sqrt();
        }
        for b in 0..m {
            for a in 0..=b {
                psi2[(a, b)] += s2[a + b * m] / ns;
                psi2_var[(a, b)] += var_of_mean(s2[a + b * m], s2sq[a + b * m]);
            }
        }
    }
    for b in 0..m {
        for a in 0..b {
            psi2[(b, a)] = psi2[(a, b)];
            psi2_var[(b, a)] = psi2_var[(a, b)];
        }
    }
    Ok(McPsiEstimate {
        stats: PsiStats { psi0, psi1, psi2 },
        psi0_se: psi0_var.sqrt(),
        psi1_se,
        psi2_se: psi2_var.map(f64::sqrt),
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{cross_gram_rows, EqKernelParams};
    use approx::assert_relative_eq;

    fn params(vs: f64, vp: f64) -> KernelParams {
        KernelParams::new(
            EqKernelParams::new(vs, vec![0.8, 1.3]).unwrap(),
            EqKernelParams::new(vp, vec![1.1, 0.6]).unwrap(),
            0.1,
        )
        .unwrap()
    }

    fn small_q(n: usize, var: f64) -> VariationalPosterior {
        let means = DMatrix::from_fn(n, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.4 - 0.8);
        VariationalPosterior::new(means, DMatrix::from_element(n, 4, var)).unwrap()
    }

    fn labels(n: usize) -> Vec<CategoryLabel> {
        (0..n).map(|i| CategoryLabel(1 + (i % 2) as u32)).collect()
    }

    fn inducing() -> InducingSet {
        InducingSet::new(
            DMatrix::from_row_slice(3, 4, &[0.1, -0.3, 0.5, 0.0, -0.6, 0.2, -0.1, 0.4, 0.3, 0.3, 0.0, -0.5]),
            vec![CategoryLabel(1), CategoryLabel(2), CategoryLabel(1)],
        )
        .unwrap()
    }

    #[test]
    fn psi0_examples() {
        let p = params(1.5, 0.5);
        let q = small_q(3, 0.2);
        assert_eq!(psi0(&q, &labels(3), &p).unwrap(), 6.0);
        let q1 = small_q(1, 0.2);
        assert_eq!(psi0(&q1, &labels(1), &params(1.0, 1.0)).unwrap(), 2.0);
        let q2 = VariationalPosterior::new(q.means.clone(), q.variances.map(|s| 2.0 * s)).unwrap();
        assert_eq!(psi0(&q2, &labels(3), &p).unwrap(), 6.0);
    }

    #[test]
    fn psi1_deterministic_limit_is_cross_gram() {
        let p = params(1.2, 0.7);
        let q = small_q(5, 1e-12);
        let u = inducing();
        let l = labels(5);
        let got = psi1(&q, &l, &u, &p).unwrap();
        let want = cross_gram_rows(&q.means, &l, &u.inputs, &u.labels, &p);
        for (a, b) in got.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-8);
        }
    }

    #[test]
    fn psi1_mismatched_label_has_no_private_part() {
        let p = params(1.0, 1.0);
        let q = small_q(2, 0.3);
        let l = vec![CategoryLabel(1), CategoryLabel(1)];
        let u = inducing();
        let full = psi1(&q, &l, &u, &p).unwrap();
        let shared_only = KernelParams::new(p.shared.clone(), EqKernelParams::unit(0), 0.1).unwrap();
        let q_shared = VariationalPosterior::new(
            q.means.columns(0, 2).into_owned(),
            q.variances.columns(0, 2).into_owned(),
        )
        .unwrap();
        let u_shared = InducingSet::new(u.inputs.columns(0, 2).into_owned(), u.labels.clone()).unwrap();
        let s = psi1(&q_shared, &l, &u_shared, &shared_only).unwrap();
        // Inducing point 1 has label 2: shared expectation only, exactly.
        assert_eq!(full[(0, 1)], s[(0, 1)]);
        assert_eq!(full[(1, 1)], s[(1, 1)]);
        assert!(full[(0, 0)] > s[(0, 0)]);
    }

    #[test]
    fn psi2_deterministic_limit() {
        let p = params(1.3, 0.9);
        let q = small_q(4, 1e-12);
        let l = labels(4);
        let u = InducingSet::new(q.means.clone(), l.clone()).unwrap();
        let s = psi_stats(&q, &l, &u, &p).unwrap();
        let want = s.psi1.transpose() * &s.psi1;
        for (a, b) in s.psi2.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-6);
        }
        assert_eq!(s.psi2, s.psi2.transpose());
    }

    #[test]
    fn psi2_all_mismatched_is_shared_only() {
        let p = params(1.0, 2.0);
        let q = small_q(1, 0.4);
        let l = vec![CategoryLabel(3)];
        let u = inducing();
        let full = psi2(&q, &l, &u, &p).unwrap();
        let shared_only = KernelParams::new(p.shared.clone(), EqKernelParams::unit(0), 0.1).unwrap();
        let qs = VariationalPosterior::new(
            q.means.columns(0, 2).into_owned(),
            q.variances.columns(0, 2).into_owned(),
        )
        .unwrap();
        let us = InducingSet::new(u.inputs.columns(0, 2).into_owned(), u.labels.clone()).unwrap();
        let s = psi2(&qs, &l, &us, &shared_only).unwrap();
        assert_eq!(full, s);
    }

    #[test]
    fn mc_oracle_zero_variance_is_exact() {
        let p = params(1.0, 0.5);
        let q = small_q(2, 1e-300);
        let l = labels(2);
        let u = inducing();
        let est = psi_mc_oracle(&q, &l, &u, &p, 1000, 3).unwrap();
        let want = cross_gram_rows(&q.means, &l, &u.inputs, &u.labels, &p);
        for (a, b) in est.stats.psi1.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        assert_relative_eq!(est.stats.psi0, 3.0, max_relative = 1e-14);
        assert_eq!(est.psi0_se, 0.0);
        assert!(psi_mc_oracle(&q, &l, &u, &p, 999, 3).is_err());
    }

    #[test]
    fn mc_oracle_psi0_constant_under_spread() {
        let p = params(1.5, 0.5);
        let q = small_q(3, 2.0);
        let est = psi_mc_oracle(&q, &labels(3), &inducing(), &p, 2000, 1).unwrap();
        assert_relative_eq!(est.stats.psi0, 6.0, max_relative = 1e-12);
        assert!(est.psi0_se < 1e-6);
    }

    #[test]
    fn shape_errors() {
        let p = params(1.0, 1.0);
        let q = small_q(2, 0.1);
        assert!(psi0(&q, &labels(3), &p).is_err());
        let u = InducingSet::new(DMatrix::zeros(2, 3), vec![CategoryLabel(1); 2]).unwrap();
        assert!(psi1(&q, &labels(2), &u, &p).is_err());
        assert!(InducingSet::new(DMatrix::zeros(2, 4), vec![CategoryLabel(1)]).is_err());
        assert!(VariationalPosterior::new(DMatrix::zeros(1, 2), DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn tree_reduce_order() {
        let v: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        assert_eq!(tree_reduce(v, |a, b| format!("({a}{b})")).unwrap(), "(((ab)(cd))e)");
    }
}
