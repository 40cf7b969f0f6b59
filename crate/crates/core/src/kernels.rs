//! Product RBF kernel and the learned linear input embedding.
//!
//! The kernel factorizes over dimensions as
//! `k(x, x') = Π_d σ_f^{2/D} exp(−(x_d − x'_d)² / (2 l_d²))`,
//! so every per-dimension Gram matrix carries an equal share of the signal
//! variance and their Kronecker product is the full Gram matrix on the grid.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

/// Relative diagonal jitter added to every per-dimension Gram matrix.
pub const JITTER: f64 = 1e-6;

/// Largest embedding dimension a grid can reasonably cover.
pub const MAX_EMBED_DIM: usize = 10;

/// Standard deviation of normalized embedding outputs. Grids for embedded
/// features cover [-1, 1], so three standard deviations fit inside.
pub const EMBED_OUTPUT_STD: f64 = 1.0 / 3.0;

/// RBF hyperparameters, stored as logs.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfParams {
    dims: usize,
    /// One entry when lengthscales are tied, otherwise `dims` entries.
    log_lengthscales: Vec<f64>,
    log_variance: f64,
}

/// Derivatives of a per-dimension Gram matrix in log-parameter space.
#[derive(Clone, Debug)]
pub struct DimMatrixGrad {
    pub log_lengthscale: DMatrix<f64>,
    pub log_variance: DMatrix<f64>,
}

impl RbfParams {
    /// `lengthscales` has length 1 (tied) or `dims` (one per dimension).
    pub fn new(dims: usize, lengthscales: &[f64], variance: f64) -> Result<Self> {
        if dims == 0 {
            return Err(Error::InvalidInput("kernel needs at least one dimension".into()));
        }
        if lengthscales.len() != 1 && lengthscales.len() != dims {
            return Err(Error::Shape(format!(
                "{} lengthscales for {dims} dimensions",
                lengthscales.len()
            )));
        }
        if lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidInput(format!("lengthscales {lengthscales:?} must be positive")));
        }
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidInput(format!("variance {variance} must be positive")));
        }
        Ok(RbfParams {
            dims,
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_variance: variance.ln(),
        })
    }

    pub fn from_logs(dims: usize, log_lengthscales: Vec<f64>, log_variance: f64) -> Result<Self> {
        if log_lengthscales.len() != 1 && log_lengthscales.len() != dims {
            return Err(Error::Shape(format!(
                "{} lengthscales for {dims} dimensions",
                log_lengthscales.len()
            )));
        }
        Ok(RbfParams {
            dims,
            log_lengthscales,
            log_variance,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn is_tied(&self) -> bool {
        self.log_lengthscales.len() == 1 && self.dims > 1
    }

    /// Index into the lengthscale storage used by dimension `d`.
    pub fn lengthscale_slot(&self, d: usize) -> usize {
        if self.log_lengthscales.len() == 1 {
            0
        } else {
            d
        }
    }

    pub fn lengthscale(&self, d: usize) -> f64 {
        self.log_lengthscales[self.lengthscale_slot(d)].exp()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn log_lengthscales(&self) -> &[f64] {
        &self.log_lengthscales
    }

    pub fn log_lengthscales_mut(&mut self) -> &mut [f64] {
        &mut self.log_lengthscales
    }

    pub fn log_variance(&self) -> f64 {
        self.log_variance
    }

    pub fn log_variance_mut(&mut self) -> &mut f64 {
        &mut self.log_variance
    }

    pub(crate) fn log_variance_ref(&self) -> &f64 {
        &self.log_variance
    }

    /// Both log-parameter slots at once.
    pub fn log_params_mut(&mut self) -> (&mut [f64], &mut f64) {
        (&mut self.log_lengthscales, &mut self.log_variance)
    }

    /// `σ_f^{2/D}`, the variance carried by each factor.
    pub fn factor_variance(&self) -> f64 {
        (self.log_variance / self.dims as f64).exp()
    }

    /// One factor of the product kernel.
    pub fn eval_dim(&self, d: usize, a: f64, b: f64) -> f64 {
        let l = self.lengthscale(d);
        let r = (a - b) / l;
        self.factor_variance() * (-0.5 * r * r).exp()
    }

    /// Full kernel as the product of all factors.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.dims).map(|d| self.eval_dim(d, x[d], y[d])).product()
    }

    /// Gram matrix of dimension `d` on `grid`, plus `JITTER · σ_f^{2/D}` on
    /// the diagonal.
    pub fn dim_matrix(&self, d: usize, grid: &[f64]) -> Result<DMatrix<f64>> {
        check_grid(grid)?;
        let n = grid.len();
        let jitter = JITTER * self.factor_variance();
        let mut k = DMatrix::zeros(n, n);
        for p in 0..n {
            k[(p, p)] = self.factor_variance() + jitter;
            for q in 0..p {
                let v = self.eval_dim(d, grid[p], grid[q]);
                k[(p, q)] = v;
                k[(q, p)] = v;
            }
        }
        Ok(k)
    }

    /// Elementwise derivatives of [`dim_matrix`](Self::dim_matrix) with
    /// respect to `log l_d` and `log σ_f²`. The jitter scales with the factor
    /// variance, so the variance derivative is the whole matrix divided by D.
    pub fn dim_matrix_grad(&self, d: usize, grid: &[f64]) -> Result<DimMatrixGrad> {
        let k = self.dim_matrix(d, grid)?;
        let n = grid.len();
        let l2 = self.lengthscale(d).powi(2);
        let mut dl = DMatrix::zeros(n, n);
        for p in 0..n {
            for q in 0..p {
                let r2 = (grid[p] - grid[q]).powi(2) / l2;
                let v = k[(p, q)] * r2;
                dl[(p, q)] = v;
                dl[(q, p)] = v;
            }
        }
        let dv = &k / self.dims as f64;
        Ok(DimMatrixGrad {
            log_lengthscale: dl,
            log_variance: dv,
        })
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("grid has non-finite points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Learned projection `x ↦ P x` followed by a fixed affine normalization
/// using running statistics of the projected training inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEmbedding {
    projection: DMatrix<f64>,
    running_mean: Vec<f64>,
    running_std: Vec<f64>,
}

impl LinearEmbedding {
    pub fn new(projection: DMatrix<f64>) -> Result<Self> {
        let (d, input) = projection.shape();
        if d == 0 || d > input {
            return Err(Error::Shape(format!(
                "embedding maps {input} inputs to {d} outputs; need 1 <= d <= D"
            )));
        }
        if d > MAX_EMBED_DIM {
            return Err(Error::Config(format!(
                "embedding dimension {d} exceeds {MAX_EMBED_DIM}"
            )));
        }
        Ok(LinearEmbedding {
            projection,
            running_mean: vec![0.0; d],
            running_std: vec![1.0; d],
        })
    }

    /// Entries uniform on `[−1/√D, 1/√D]`.
    pub fn random<R: Rng + ?Sized>(output_dim: usize, input_dim: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let p = DMatrix::from_fn(output_dim, input_dim, |_, _| rng.random_range(-bound..=bound));
        LinearEmbedding::new(p)
    }

    pub fn with_stats(mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != self.output_dim() || std.len() != self.output_dim() {
            return Err(Error::Shape("embedding statistics have the wrong length".into()));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("embedding std must be positive".into()));
        }
        self.running_mean = mean;
        self.running_std = std;
        Ok(self)
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.projection
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_std(&self) -> &[f64] {
        &self.running_std
    }

    /// `P x`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, embedding expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok((0..self.output_dim())
            .map(|k| (0..self.input_dim()).map(|j| self.projection[(k, j)] * x[j]).sum())
            .collect())
    }

    /// `∂(uᵀ P x)/∂P = u xᵀ`.
    pub fn embed_grad(&self, x: &[f64], upstream: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.input_dim() || upstream.len() != self.output_dim() {
            return Err(Error::Shape("embedding gradient shapes do not match".into()));
        }
        Ok(DMatrix::from_fn(self.output_dim(), self.input_dim(), |k, j| upstream[k] * x[j]))
    }

    /// Projection followed by `(z − mean) / std · EMBED_OUTPUT_STD`.
    pub fn normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.embed(x)?;
        for (k, v) in z.iter_mut().enumerate() {
            *v = (*v - self.running_mean[k]) / self.running_std[k] * EMBED_OUTPUT_STD;
        }
        Ok(z)
    }

    /// Gradient with respect to `P` of `uᵀ normalized(x)`, statistics fixed.
    pub fn normalized_grad(&self, x: &[f64], upstream: &[f64]) -> Result<DMatrix<f64>> {
        let scaled: Vec<f64> = upstream
            .iter()
            .enumerate()
            .map(|(k, u)| u * EMBED_OUTPUT_STD / self.running_std[k])
            .collect();
        self.embed_grad(x, &scaled)
    }

    /// Recompute the statistics from a set of inputs.
    pub fn reset_stats<'a>(&mut self, inputs: impl Iterator<Item = &'a [f64]>) -> Result<()> {
        let (mean, std) = self.batch_stats(inputs)?;
        self.running_mean = mean;
        self.running_std = std;
        Ok(())
    }

    /// Exponential moving average update from one minibatch.
    pub fn update_stats<'a>(&mut self, inputs: impl Iterator<Item = &'a [f64]>, momentum: f64) -> Result<()> {
        let (mean, std) = self.batch_stats(inputs)?;
        for k in 0..self.output_dim() {
            self.running_mean[k] = (1.0 - momentum) * self.running_mean[k] + momentum * mean[k];
            self.running_std[k] = (1.0 - momentum) * self.running_std[k] + momentum * std[k];
        }
        Ok(())
    }

    fn batch_stats<'a>(&self, inputs: impl Iterator<Item = &'a [f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.output_dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for x in inputs {
            let z = self.embed(x)?;
            for k in 0..d {
                sum[k] += z[k];
                sq[k] += z[k] * z[k];
            }
            n += 1;
        }
        if n == 0 {
            return Ok((self.running_mean.clone(), self.running_std.clone()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / nf - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok((mean, std))
    }
}
