//! Tensor-Train vectors.
//!
//! A D-dimensional tensor `T[i_1, .., i_D]` is stored as a chain of cores
//! `G_d` of shape `(r_{d-1}, n_d, r_d)` with `r_0 = r_D = 1`, such that
//!
//! ```text
//! T[i_1, .., i_D] = G_1[:, i_1, :] · G_2[:, i_2, :] · … · G_D[:, i_D, :]
//! ```
//!
//! Every core is one contiguous buffer in `(left, mode, right)` row-major
//! order, i.e. entry `(a, j, b)` lives at `(a * n + j) * r_right + b`. Dense
//! tensors use row-major order with the last index fastest, which is also
//! the flattening used when a tensor is read as a vector of length `Π n_d`.
//!
//! Only the two contractions the variational bound needs are provided:
//! the inner product with a Kronecker product of vectors and the quadratic
//! form with a Kronecker product of matrices. Both expose their left/right
//! partial contractions so that value and gradient share one sweep.

use nalgebra::{DMatrix, SVD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kron::KroneckerMatrix;

/// Default ceiling on the number of entries [`TtVector::to_dense`] will build.
pub const DEFAULT_DENSE_CAP: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub struct TtCore {
    left: usize,
    size: usize,
    right: usize,
    data: Vec<f64>,
}

impl TtCore {
    pub fn zeros(left: usize, size: usize, right: usize) -> Self {
        TtCore {
            left,
            size,
            right,
            data: vec![0.0; left * size * right],
        }
    }

    pub fn from_vec(left: usize, size: usize, right: usize, data: Vec<f64>) -> Result<Self> {
        if left == 0 || size == 0 || right == 0 {
            return Err(Error::InvalidInput("core dimensions must be positive".into()));
        }
        if data.len() != left * size * right {
            return Err(Error::Shape(format!(
                "core ({left}, {size}, {right}) needs {} entries, got {}",
                left * size * right,
                data.len()
            )));
        }
        Ok(TtCore {
            left,
            size,
            right,
            data,
        })
    }

    /// `(r_left, n, r_right)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.left, self.size, self.right)
    }

    #[inline]
    pub fn at(&self, a: usize, j: usize, b: usize) -> f64 {
        self.data[(a * self.size + j) * self.right + b]
    }

    #[inline]
    fn idx(&self, a: usize, j: usize, b: usize) -> usize {
        (a * self.size + j) * self.right + b
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }
}

/// Dense row-major tensor, used for TT-SVD input and for reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} is empty"
            )));
        }
        let total = checked_product(&shape)
            .ok_or_else(|| Error::InvalidInput("tensor size overflows".into()))?;
        if data.len() != total {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {total} values, got {}",
                data.len()
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let total = checked_product(&shape)
            .ok_or_else(|| Error::InvalidInput("tensor size overflows".into()))?;
        let mut data = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..total {
            data.push(f(&idx));
            increment_multi_index(&mut idx, &shape);
        }
        DenseTensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Row-major increment of a multi-index (last index fastest).
pub(crate) fn increment_multi_index(idx: &mut [usize], shape: &[usize]) {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

fn checked_product(v: &[usize]) -> Option<usize> {
    v.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n))
}

/// One factor of a Kronecker product of vectors, stored as a window of
/// `values` starting at `offset` inside a vector of length `len`; every entry
/// outside the window is zero. Interpolation weights use a 4-wide window.
#[derive(Clone, Copy, Debug)]
pub struct KronFactor<'a> {
    pub len: usize,
    pub offset: usize,
    pub values: &'a [f64],
}

impl<'a> KronFactor<'a> {
    pub fn dense(values: &'a [f64]) -> Self {
        KronFactor {
            len: values.len(),
            offset: 0,
            values,
        }
    }

    pub fn window(len: usize, offset: usize, values: &'a [f64]) -> Self {
        KronFactor {
            len,
            offset,
            values,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        out[self.offset..self.offset + self.values.len()].copy_from_slice(self.values);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtVector {
    cores: Vec<TtCore>,
}

impl TtVector {
    pub fn new(cores: Vec<TtCore>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::InvalidInput("a TT vector needs at least one core".into()));
        }
        if cores[0].left != 1 || cores[cores.len() - 1].right != 1 {
            return Err(Error::Shape("boundary TT ranks must be 1".into()));
        }
        for (d, pair) in cores.windows(2).enumerate() {
            if pair[0].right != pair[1].left {
                return Err(Error::Shape(format!(
                    "core {d} right rank {} does not match core {} left rank {}",
                    pair[0].right,
                    d + 1,
                    pair[1].left
                )));
            }
        }
        Ok(TtVector { cores })
    }

    /// All-zero TT vector with the given mode sizes and bond ranks
    /// (`ranks` has length `D + 1`, ends equal to 1).
    pub fn zeros(mode_sizes: &[usize], ranks: &[usize]) -> Result<Self> {
        check_ranks(mode_sizes, ranks)?;
        let cores = mode_sizes
            .iter()
            .enumerate()
            .map(|(d, &n)| TtCore::zeros(ranks[d], n, ranks[d + 1]))
            .collect();
        TtVector::new(cores)
    }

    /// Cores with i.i.d. `N(0, std²)` entries.
    pub fn random<R: Rng + ?Sized>(
        mode_sizes: &[usize],
        ranks: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidInput(format!("bad standard deviation {std}: {e}")))?;
        let mut tt = TtVector::zeros(mode_sizes, ranks)?;
        for core in &mut tt.cores {
            for v in core.data.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        Ok(tt)
    }

    pub fn num_dims(&self) -> usize {
        self.cores.len()
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.size).collect()
    }

    /// `r_0, .., r_D`
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![1];
        r.extend(self.cores.iter().map(|c| c.right));
        r
    }

    pub fn cores(&self) -> &[TtCore] {
        &self.cores
    }

    /// Mutable access for in-place optimizer updates; shapes cannot change.
    pub fn cores_mut(&mut self) -> &mut [TtCore] {
        &mut self.cores
    }

    pub fn num_params(&self) -> usize {
        self.cores.iter().map(|c| c.data.len()).sum()
    }

    /// Zero cores of matching shapes, for gradient accumulation.
    pub fn zeros_like_cores(&self) -> Vec<TtCore> {
        self.cores
            .iter()
            .map(|c| TtCore::zeros(c.left, c.size, c.right))
            .collect()
    }

    /// Single tensor entry by direct evaluation of the core product.
    pub fn entry(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.cores.len() {
            return Err(Error::Shape(format!(
                "index has {} components, tensor has {} dimensions",
                index.len(),
                self.cores.len()
            )));
        }
        let mut row = vec![1.0];
        for (core, &i) in self.cores.iter().zip(index) {
            if i >= core.size {
                return Err(Error::Shape(format!("index {i} out of range {}", core.size)));
            }
            let mut next = vec![0.0; core.right];
            for (a, &ra) in row.iter().enumerate() {
                for (b, nb) in next.iter_mut().enumerate() {
                    *nb += ra * core.at(a, i, b);
                }
            }
            row = next;
        }
        Ok(row[0])
    }

    /// TT-SVD with per-unfolding truncation.
    ///
    /// `max_ranks` holds either one bound applied to every interior bond or
    /// `D - 1` bounds; `usize::MAX` means unbounded. The singular-value
    /// threshold per unfolding is `tol · ‖T‖_F / √(D − 1)`.
    pub fn from_dense(tensor: &DenseTensor, max_ranks: &[usize], tol: f64) -> Result<Self> {
        let shape = tensor.shape().to_vec();
        let ndim = shape.len();
        if tensor.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("tensor has non-finite entries".into()));
        }
        if !(tol >= 0.0) || !tol.is_finite() {
            return Err(Error::InvalidInput(format!("tolerance {tol} must be >= 0")));
        }
        let bounds: Vec<usize> = match max_ranks.len() {
            1 => vec![max_ranks[0]; ndim.saturating_sub(1)],
            n if n + 1 == ndim => max_ranks.to_vec(),
            0 if ndim == 1 => vec![],
            n => {
                return Err(Error::Shape(format!(
                    "{n} rank bounds given for a {ndim}-dimensional tensor"
                )))
            }
        };
        if bounds.contains(&0) {
            return Err(Error::InvalidInput("rank bounds must be positive".into()));
        }
        if ndim == 1 {
            let core = TtCore::from_vec(1, shape[0], 1, tensor.data().to_vec())?;
            return TtVector::new(vec![core]);
        }

        let norm = tensor.frobenius_norm();
        if norm == 0.0 {
            let cores = shape.iter().map(|&n| TtCore::zeros(1, n, 1)).collect();
            return TtVector::new(cores);
        }
        let delta = tol * norm / ((ndim - 1) as f64).sqrt();
        let mut cores = Vec::with_capacity(ndim);
        let mut rest: Vec<f64> = tensor.data().to_vec();
        let mut rank = 1usize;
        let mut remaining: usize = shape.iter().product();

        for d in 0..ndim - 1 {
            let rows = rank * shape[d];
            remaining /= shape[d];
            let cols = remaining;
            let unfolding = DMatrix::from_row_slice(rows, cols, &rest);
            let energy = unfolding.norm_squared();
            let svd = SVD::try_new(unfolding, true, true, 5.0 * f64::EPSILON, 0)
                .ok_or_else(|| Error::Numeric(format!("SVD of unfolding {d} did not converge")))?;
            let sigma = &svd.singular_values;
            // Σσ² must equal ‖A‖²; a mismatch means the factorization is unusable.
            if (sigma.norm_squared() - energy).abs() > 1e-10 * energy {
                return Err(Error::Numeric(format!("SVD of unfolding {d} lost accuracy")));
            }
            let u = svd.u.as_ref().expect("requested U");
            let vt = svd.v_t.as_ref().expect("requested V^T");

            let new_rank = truncation_rank(sigma.as_slice(), delta, rows.max(cols)).min(bounds[d]);

            let mut core = TtCore::zeros(rank, shape[d], new_rank);
            for row in 0..rows {
                for b in 0..new_rank {
                    core.data[row * new_rank + b] = u[(row, b)];
                }
            }
            cores.push(core);

            rest = vec![0.0; new_rank * cols];
            for b in 0..new_rank {
                let s = sigma[b];
                for c in 0..cols {
                    rest[b * cols + c] = s * vt[(b, c)];
                }
            }
            rank = new_rank;
        }
        cores.push(TtCore::from_vec(rank, shape[ndim - 1], 1, rest)?);
        TtVector::new(cores)
    }

    pub fn to_dense(&self) -> Result<DenseTensor> {
        self.to_dense_capped(DEFAULT_DENSE_CAP)
    }

    /// Dense reconstruction; fails when `Π n_d` exceeds `cap`.
    pub fn to_dense_capped(&self, cap: usize) -> Result<DenseTensor> {
        let shape = self.mode_sizes();
        let total = checked_product(&shape).unwrap_or(usize::MAX);
        if total > cap {
            return Err(Error::ResourceLimit {
                entries: total,
                cap,
            });
        }
        // Sweep left to right keeping a (prefix entries) x r_d block.
        let mut acc = vec![1.0];
        let mut prefix = 1usize;
        for core in &self.cores {
            let (rl, n, rr) = core.shape();
            let mut next = vec![0.0; prefix * n * rr];
            for p in 0..prefix {
                for a in 0..rl {
                    let x = acc[p * rl + a];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        let out = &mut next[(p * n + j) * rr..(p * n + j + 1) * rr];
                        let src = &core.data[core.idx(a, j, 0)..core.idx(a, j, 0) + rr];
                        for (o, s) in out.iter_mut().zip(src) {
                            *o += x * s;
                        }
                    }
                }
            }
            acc = next;
            prefix *= n;
        }
        DenseTensor::new(shape, acc)
    }

    fn check_factors(&self, w: &[KronFactor<'_>]) -> Result<()> {
        if w.len() != self.cores.len() {
            return Err(Error::Shape(format!(
                "{} Kronecker factors for a {}-dimensional TT vector",
                w.len(),
                self.cores.len()
            )));
        }
        for (d, (f, core)) in w.iter().zip(&self.cores).enumerate() {
            if f.len != core.size || f.offset + f.values.len() > f.len {
                return Err(Error::Shape(format!(
                    "factor {d}: length {} (window {}+{}) vs mode size {}",
                    f.len,
                    f.offset,
                    f.values.len(),
                    core.size
                )));
            }
        }
        Ok(())
    }

    /// Inner product of the flattened tensor with `w_1 ⊗ … ⊗ w_D`.
    pub fn dot_kron(&self, w: &[KronFactor<'_>]) -> Result<f64> {
        self.check_factors(w)?;
        let mut row = vec![1.0];
        for (core, f) in self.cores.iter().zip(w) {
            row = contract_left(core, &row, f);
        }
        Ok(row[0])
    }

    /// Left and right partial contractions against `w`; the value and all
    /// core/factor gradients are read off the result.
    pub fn contract_kron(&self, w: &[KronFactor<'_>]) -> Result<KronContraction> {
        self.check_factors(w)?;
        let ndim = self.cores.len();
        let mut left = Vec::with_capacity(ndim + 1);
        left.push(vec![1.0]);
        for (core, f) in self.cores.iter().zip(w) {
            let next = contract_left(core, left.last().unwrap(), f);
            left.push(next);
        }
        let mut right = vec![Vec::new(); ndim + 1];
        right[ndim] = vec![1.0];
        for d in (0..ndim).rev() {
            right[d] = contract_right(&self.cores[d], &right[d + 1], &w[d]);
        }
        Ok(KronContraction { left, right })
    }

    /// ∂(dot_kron)/∂G_d for every core.
    pub fn dot_kron_grad(&self, w: &[KronFactor<'_>]) -> Result<Vec<TtCore>> {
        let c = self.contract_kron(w)?;
        let mut grads = self.zeros_like_cores();
        c.accumulate_core_grads(1.0, w, &mut grads);
        Ok(grads)
    }

    fn check_matrix(&self, a: &KroneckerMatrix) -> Result<()> {
        if a.factors().len() != self.cores.len() {
            return Err(Error::Shape(format!(
                "{} Kronecker factors for a {}-dimensional TT vector",
                a.factors().len(),
                self.cores.len()
            )));
        }
        for (d, (f, core)) in a.factors().iter().zip(&self.cores).enumerate() {
            if f.nrows() != core.size || f.ncols() != core.size {
                return Err(Error::Shape(format!(
                    "factor {d} is {}x{}, mode size is {}",
                    f.nrows(),
                    f.ncols(),
                    core.size
                )));
            }
        }
        Ok(())
    }

    /// `μᵀ A μ` with `A = A_1 ⊗ … ⊗ A_D`, never materializing `μ` or `A`.
    pub fn quad_form_kron(&self, a: &KroneckerMatrix) -> Result<f64> {
        self.check_matrix(a)?;
        let mut m = vec![1.0];
        for (core, f) in self.cores.iter().zip(a.factors()) {
            m = quad_left(core, &m, f);
        }
        Ok(m[0])
    }

    pub fn contract_quad(&self, a: &KroneckerMatrix) -> Result<QuadContraction> {
        self.check_matrix(a)?;
        let ndim = self.cores.len();
        let mut left = Vec::with_capacity(ndim + 1);
        left.push(vec![1.0]);
        for (core, f) in self.cores.iter().zip(a.factors()) {
            let next = quad_left(core, left.last().unwrap(), f);
            left.push(next);
        }
        let mut right = vec![Vec::new(); ndim + 1];
        right[ndim] = vec![1.0];
        for d in (0..ndim).rev() {
            right[d] = quad_right(&self.cores[d], &right[d + 1], &a.factors()[d]);
        }
        Ok(QuadContraction { left, right })
    }

    /// ∂(μᵀAμ)/∂G_d for every core, `A` held constant.
    pub fn quad_form_kron_grad(&self, a: &KroneckerMatrix) -> Result<Vec<TtCore>> {
        let c = self.contract_quad(a)?;
        let mut grads = self.zeros_like_cores();
        c.accumulate_core_grads(1.0, self, a, &mut grads);
        Ok(grads)
    }
}

fn check_ranks(mode_sizes: &[usize], ranks: &[usize]) -> Result<()> {
    if mode_sizes.is_empty() || mode_sizes.contains(&0) {
        return Err(Error::InvalidInput(format!("bad mode sizes {mode_sizes:?}")));
    }
    if ranks.len() != mode_sizes.len() + 1 {
        return Err(Error::Shape(format!(
            "{} ranks for {} modes",
            ranks.len(),
            mode_sizes.len()
        )));
    }
    if ranks[0] != 1 || ranks[ranks.len() - 1] != 1 || ranks.contains(&0) {
        return Err(Error::Shape(format!("invalid TT ranks {ranks:?}")));
    }
    Ok(())
}

/// Bond ranks `r_0..r_D` capped at `max_rank` and at the largest rank an
/// exact representation could need.
pub fn feasible_ranks(mode_sizes: &[usize], max_rank: usize) -> Vec<usize> {
    let ndim = mode_sizes.len();
    let mut ranks = vec![1; ndim + 1];
    for d in 1..ndim {
        let left = checked_product(&mode_sizes[..d]).unwrap_or(usize::MAX);
        let right = checked_product(&mode_sizes[d..]).unwrap_or(usize::MAX);
        ranks[d] = max_rank.min(left).min(right).max(1);
    }
    ranks
}

/// Smallest rank whose discarded tail has norm ≤ delta, ignoring singular
/// values at round-off level.
fn truncation_rank(sigma: &[f64], delta: f64, max_dim: usize) -> usize {
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let noise = smax * f64::EPSILON * max_dim as f64;
    let mut numerical = sigma.iter().filter(|&&s| s > noise).count();
    let mut tail = 0.0;
    while numerical > 0 {
        let s = sigma[numerical - 1];
        if tail + s * s > delta * delta {
            break;
        }
        tail += s * s;
        numerical -= 1;
    }
    numerical.max(1)
}

/// `row · Σ_j w[j] G[:, j, :]`
fn contract_left(core: &TtCore, row: &[f64], f: &KronFactor<'_>) -> Vec<f64> {
    let (rl, _, rr) = core.shape();
    let mut out = vec![0.0; rr];
    for (k, &wj) in f.values.iter().enumerate() {
        if wj == 0.0 {
            continue;
        }
        let j = f.offset + k;
        for a in 0..rl {
            let x = row[a] * wj;
            if x == 0.0 {
                continue;
            }
            let base = core.idx(a, j, 0);
            for (o, g) in out.iter_mut().zip(&core.data[base..base + rr]) {
                *o += x * g;
            }
        }
    }
    out
}

/// `Σ_j w[j] G[:, j, :] · col`
fn contract_right(core: &TtCore, col: &[f64], f: &KronFactor<'_>) -> Vec<f64> {
    let (rl, _, rr) = core.shape();
    let mut out = vec![0.0; rl];
    for (k, &wj) in f.values.iter().enumerate() {
        if wj == 0.0 {
            continue;
        }
        let j = f.offset + k;
        for (a, o) in out.iter_mut().enumerate() {
            let base = core.idx(a, j, 0);
            let dot: f64 = core.data[base..base + rr]
                .iter()
                .zip(col)
                .map(|(g, c)| g * c)
                .sum();
            *o += wj * dot;
        }
    }
    out
}

/// Cached partial contractions of `⟨μ, w_1 ⊗ … ⊗ w_D⟩`.
///
/// `left[d]` is the row vector obtained from cores `0..d` (length `r_d`),
/// `right[d]` the column vector from cores `d..D`.
#[derive(Clone, Debug)]
pub struct KronContraction {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
}

impl KronContraction {
    pub fn value(&self) -> f64 {
        self.left.last().map(|v| v[0]).unwrap_or(0.0)
    }

    pub fn left(&self, d: usize) -> &[f64] {
        &self.left[d]
    }

    pub fn right(&self, d: usize) -> &[f64] {
        &self.right[d]
    }

    /// `grads[d] += scale · ∂value/∂G_d`, touching only the window rows.
    pub fn accumulate_core_grads(&self, scale: f64, w: &[KronFactor<'_>], grads: &mut [TtCore]) {
        for (d, (g, f)) in grads.iter_mut().zip(w).enumerate() {
            let left = &self.left[d];
            let right = &self.right[d + 1];
            let (rl, _, rr) = g.shape();
            for (k, &wj) in f.values.iter().enumerate() {
                let c = scale * wj;
                if c == 0.0 {
                    continue;
                }
                let j = f.offset + k;
                for a in 0..rl {
                    let x = c * left[a];
                    if x == 0.0 {
                        continue;
                    }
                    let base = g.idx(a, j, 0);
                    for (o, r) in g.data[base..base + rr].iter_mut().zip(right) {
                        *o += x * r;
                    }
                }
            }
        }
    }

    /// `∂value/∂w_d[j]` for `j` in `offset..offset + count`.
    pub fn factor_grad(&self, tt: &TtVector, d: usize, offset: usize, count: usize) -> Vec<f64> {
        let core = &tt.cores[d];
        let left = &self.left[d];
        let right = &self.right[d + 1];
        let (rl, _, rr) = core.shape();
        (offset..offset + count)
            .map(|j| {
                let mut s = 0.0;
                for a in 0..rl {
                    let base = core.idx(a, j, 0);
                    let dot: f64 = core.data[base..base + rr]
                        .iter()
                        .zip(right)
                        .map(|(g, r)| g * r)
                        .sum();
                    s += left[a] * dot;
                }
                s
            })
            .collect()
    }
}

/// `H[a, k, b'] = Σ_a' M[a, a'] G[a', k, b']` (M is `rl × rl`, row-major).
fn mix_left(core: &TtCore, m: &[f64], transpose: bool) -> Vec<f64> {
    let (rl, n, rr) = core.shape();
    let mut h = vec![0.0; rl * n * rr];
    for a in 0..rl {
        for ap in 0..rl {
            let x = if transpose { m[ap * rl + a] } else { m[a * rl + ap] };
            if x == 0.0 {
                continue;
            }
            for k in 0..n {
                let src = core.idx(ap, k, 0);
                let dst = (a * n + k) * rr;
                for b in 0..rr {
                    h[dst + b] += x * core.data[src + b];
                }
            }
        }
    }
    h
}

/// `Y[a, j, b] = Σ_k A[j, k] X[a, k, b]` (or `A[k, j]` when transposed).
fn apply_factor(x: &[f64], rl: usize, n: usize, rr: usize, f: &DMatrix<f64>, transpose: bool) -> Vec<f64> {
    let mut y = vec![0.0; rl * n * rr];
    for a in 0..rl {
        for j in 0..n {
            let dst = (a * n + j) * rr;
            for k in 0..n {
                let c = if transpose { f[(k, j)] } else { f[(j, k)] };
                if c == 0.0 {
                    continue;
                }
                let src = (a * n + k) * rr;
                for b in 0..rr {
                    y[dst + b] += c * x[src + b];
                }
            }
        }
    }
    y
}

/// Left sweep step of the quadratic form:
/// `M'[b, b'] = Σ_{j,k} A[j,k] Σ_{a,a'} M[a,a'] G[a,j,b] G[a',k,b']`.
fn quad_left(core: &TtCore, m: &[f64], f: &DMatrix<f64>) -> Vec<f64> {
    let (rl, n, rr) = core.shape();
    let h = mix_left(core, m, false);
    let ha = apply_factor(&h, rl, n, rr, f, false);
    let mut out = vec![0.0; rr * rr];
    for a in 0..rl {
        for j in 0..n {
            let g = &core.data[core.idx(a, j, 0)..core.idx(a, j, 0) + rr];
            let x = &ha[(a * n + j) * rr..(a * n + j + 1) * rr];
            for (b, &gb) in g.iter().enumerate() {
                if gb == 0.0 {
                    continue;
                }
                for (bp, &xb) in x.iter().enumerate() {
                    out[b * rr + bp] += gb * xb;
                }
            }
        }
    }
    out
}

/// Right sweep step:
/// `M'[a, a'] = Σ_{j,k} A[j,k] Σ_{b,b'} G[a,j,b] M[b,b'] G[a',k,b']`.
fn quad_right(core: &TtCore, m: &[f64], f: &DMatrix<f64>) -> Vec<f64> {
    let (rl, n, rr) = core.shape();
    // T[a', k, b] = Σ_b' G[a', k, b'] M[b, b']
    let mut t = vec![0.0; rl * n * rr];
    for ap in 0..rl {
        for k in 0..n {
            let g = &core.data[core.idx(ap, k, 0)..core.idx(ap, k, 0) + rr];
            let dst = (ap * n + k) * rr;
            for b in 0..rr {
                t[dst + b] = g.iter().zip(&m[b * rr..(b + 1) * rr]).map(|(x, y)| x * y).sum();
            }
        }
    }
    let ta = apply_factor(&t, rl, n, rr, f, false);
    let mut out = vec![0.0; rl * rl];
    for a in 0..rl {
        for ap in 0..rl {
            let mut s = 0.0;
            for j in 0..n {
                let g = &core.data[core.idx(a, j, 0)..core.idx(a, j, 0) + rr];
                let x = &ta[(ap * n + j) * rr..(ap * n + j + 1) * rr];
                s += g.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
            }
            out[a * rl + ap] = s;
        }
    }
    out
}

/// Cached partial contractions of `μᵀ (A_1 ⊗ … ⊗ A_D) μ`; `left[d]` and
/// `right[d]` are `r_d × r_d` row-major matrices.
#[derive(Clone, Debug)]
pub struct QuadContraction {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
}

impl QuadContraction {
    pub fn value(&self) -> f64 {
        self.left.last().map(|v| v[0]).unwrap_or(0.0)
    }

    /// `grads[d] += scale · ∂(μᵀAμ)/∂G_d`.
    pub fn accumulate_core_grads(
        &self,
        scale: f64,
        tt: &TtVector,
        a: &KroneckerMatrix,
        grads: &mut [TtCore],
    ) {
        for (d, g) in grads.iter_mut().enumerate() {
            let core = &tt.cores[d];
            let f = &a.factors()[d];
            let (rl, n, rr) = core.shape();
            let right = &self.right[d + 1];
            for transpose in [false, true] {
                let h = mix_left(core, &self.left[d], transpose);
                let ha = apply_factor(&h, rl, n, rr, f, transpose);
                for row in 0..rl * n {
                    let x = &ha[row * rr..(row + 1) * rr];
                    for b in 0..rr {
                        let s: f64 = if transpose {
                            (0..rr).map(|bp| x[bp] * right[bp * rr + b]).sum()
                        } else {
                            x.iter().zip(&right[b * rr..(b + 1) * rr]).map(|(p, q)| p * q).sum()
                        };
                        g.data[row * rr + b] += scale * s;
                    }
                }
            }
        }
    }

    /// `B_d[j, k] = ∂(μᵀAμ)/∂A_d[j, k]`.
    pub fn factor_grad(&self, tt: &TtVector, d: usize) -> DMatrix<f64> {
        let core = &tt.cores[d];
        let (rl, n, rr) = core.shape();
        let h = mix_left(core, &self.left[d], false);
        let right = &self.right[d + 1];
        // M[a, k, b] = Σ_b' H[a, k, b'] R[b, b']
        let mut m = vec![0.0; rl * n * rr];
        for row in 0..rl * n {
            for b in 0..rr {
                m[row * rr + b] = h[row * rr..(row + 1) * rr]
                    .iter()
                    .zip(&right[b * rr..(b + 1) * rr])
                    .map(|(p, q)| p * q)
                    .sum();
            }
        }
        let mut out = DMatrix::zeros(n, n);
        for a in 0..rl {
            for j in 0..n {
                let g = &core.data[core.idx(a, j, 0)..core.idx(a, j, 0) + rr];
                for k in 0..n {
                    let x = &m[(a * n + k) * rr..(a * n + k + 1) * rr];
                    out[(j, k)] += g.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        }
        out
    }
}
