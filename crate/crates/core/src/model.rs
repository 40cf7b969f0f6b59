//! The TT-GP model: parameters, cached kernel algebra, latent moments, KL
//! divergence and prediction.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureScaling, TargetScaling, TaskKind};
use crate::error::{Error, Result};
use crate::interp::{weights_nd, Grid, InterpWeights};
use crate::kernels::{LinearEmbedding, RbfParams};
use crate::kron::{multiplicity, window_quad_form, KroneckerChol, KroneckerMatrix};
use crate::tt::{feasible_ranks, KronContraction, KronFactor, TtCore, TtVector};

/// Standard deviation of the initial mean cores is this value over `√r`.
pub const MEAN_INIT_SCALE: f64 = 0.05;

/// How the variational parameters of a class map to its mean and covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// The stored TT is `μ` and the stored factors are the Cholesky factors of `Σ`.
    Direct,
    /// The stored TT is `ρ` with `μ = (⊗ L_d) ρ`, and the stored factors are
    /// `S_d` with `Σ_d = L_d S_d S_dᵀ L_dᵀ`, where `L_d` is the Cholesky
    /// factor of the prior factor `K_d`. The KL term no longer involves
    /// `K⁻¹`, which keeps the optimization well conditioned.
    Whitened,
}

/// Variational posterior of one latent process: a TT vector and Kronecker
/// triangular factors, interpreted according to the model's
/// [`Parameterization`].
///
/// `cov_raw[d]` is lower triangular with the logarithm of the diagonal
/// stored on its diagonal; entries above the diagonal are unused.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPosterior {
    pub mean: TtVector,
    pub cov_raw: Vec<DMatrix<f64>>,
}

impl ClassPosterior {
    /// Raw parameters reproducing the given Cholesky factors.
    pub fn raw_from_lower(lower: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        lower
            .iter()
            .map(|l| {
                let n = l.nrows();
                if l.ncols() != n {
                    return Err(Error::Shape("Cholesky factor must be square".into()));
                }
                let mut raw = DMatrix::zeros(n, n);
                for j in 0..n {
                    if !(l[(j, j)] > 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "Cholesky diagonal entry {j} is {}, must be positive",
                            l[(j, j)]
                        )));
                    }
                    raw[(j, j)] = l[(j, j)].ln();
                    for k in 0..j {
                        raw[(j, k)] = l[(j, k)];
                    }
                }
                Ok(raw)
            })
            .collect()
    }

    pub fn lower(&self, d: usize) -> DMatrix<f64> {
        lower_from_raw(&self.cov_raw[d])
    }

    pub fn lower_factors(&self) -> Vec<DMatrix<f64>> {
        self.cov_raw.iter().map(lower_from_raw).collect()
    }

    pub fn cov_chol(&self) -> Result<KroneckerChol> {
        KroneckerChol::from_lower(self.lower_factors())
    }
}

pub(crate) fn lower_from_raw(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = raw.nrows();
    DMatrix::from_fn(n, n, |j, k| match j.cmp(&k) {
        std::cmp::Ordering::Greater => raw[(j, k)],
        std::cmp::Ordering::Equal => raw[(j, j)].exp(),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Settings for [`TtGpModel::init`].
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub task: TaskKind,
    /// Number of latent processes: 1 for regression, C ≥ 2 for classification.
    pub num_classes: usize,
    pub grid: Grid,
    pub tt_rank: usize,
    pub kernel: RbfParams,
    /// One kernel per class instead of a shared one.
    pub per_class_kernels: bool,
    pub embedding: Option<LinearEmbedding>,
    /// Initial ν² (regression only).
    pub noise_variance: f64,
    pub parameterization: Parameterization,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtGpModel {
    parameterization: Parameterization,
    grid: Grid,
    kernels: Vec<RbfParams>,
    embedding: Option<LinearEmbedding>,
    log_noise: Option<f64>,
    classes: Vec<ClassPosterior>,
    pub feature_scaling: Option<FeatureScaling>,
    pub target_scaling: Option<TargetScaling>,
    /// Original label value of each class (classification).
    pub label_values: Vec<f64>,
}

impl TtGpModel {
    /// Assembles a model from its parts, checking consistency.
    /// `log_noise` is `Some` exactly for regression models.
    pub fn new(
        parameterization: Parameterization,
        grid: Grid,
        kernels: Vec<RbfParams>,
        embedding: Option<LinearEmbedding>,
        log_noise: Option<f64>,
        classes: Vec<ClassPosterior>,
    ) -> Result<Self> {
        let dims = grid.num_dims();
        let sizes = grid.mode_sizes();
        match log_noise {
            Some(v) if !v.is_finite() => {
                return Err(Error::InvalidInput("log noise variance is not finite".into()))
            }
            Some(_) if classes.len() != 1 => {
                return Err(Error::InvalidInput(format!(
                    "regression models have one latent process, got {}",
                    classes.len()
                )))
            }
            None if classes.len() < 2 => {
                return Err(Error::InvalidInput(format!(
                    "classification needs at least 2 classes, got {}",
                    classes.len()
                )))
            }
            _ => {}
        }
        if kernels.len() != 1 && kernels.len() != classes.len() {
            return Err(Error::InvalidInput(format!(
                "{} kernels for {} classes; expected 1 or one per class",
                kernels.len(),
                classes.len()
            )));
        }
        for k in &kernels {
            if k.dims() != dims {
                return Err(Error::Shape(format!(
                    "kernel has {} dimensions, grid has {dims}",
                    k.dims()
                )));
            }
        }
        if let Some(e) = &embedding {
            if e.output_dim() != dims {
                return Err(Error::Shape(format!(
                    "embedding outputs {} dimensions, grid has {dims}",
                    e.output_dim()
                )));
            }
        }
        for (c, cls) in classes.iter().enumerate() {
            if cls.mean.mode_sizes() != sizes {
                return Err(Error::Shape(format!(
                    "class {c} mean has mode sizes {:?}, grid has {sizes:?}",
                    cls.mean.mode_sizes()
                )));
            }
            if cls.cov_raw.len() != dims
                || cls.cov_raw.iter().zip(&sizes).any(|(m, &n)| m.nrows() != n || m.ncols() != n)
            {
                return Err(Error::Shape(format!(
                    "class {c} covariance factors do not match the grid"
                )));
            }
            let finite = cls.mean.cores().iter().all(|g| g.data().iter().all(|v| v.is_finite()))
                && cls.cov_raw.iter().all(|m| m.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Numeric(format!("class {c} has non-finite parameters")));
            }
        }
        Ok(TtGpModel {
            parameterization,
            grid,
            kernels,
            embedding,
            log_noise,
            classes,
            feature_scaling: None,
            target_scaling: None,
            label_values: Vec::new(),
        })
    }

    /// Prior-matched initialization: `Σ^c = K_mm` and small random TT cores.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        if config.tt_rank == 0 {
            return Err(Error::Config("TT-rank must be at least 1".into()));
        }
        let (num_classes, log_noise) = match config.task {
            TaskKind::Regression => {
                if !(config.noise_variance > 0.0 && config.noise_variance.is_finite()) {
                    return Err(Error::Config(format!(
                        "noise variance {} must be positive",
                        config.noise_variance
                    )));
                }
                (1, Some(config.noise_variance.ln()))
            }
            TaskKind::Classification => (config.num_classes, None),
        };
        if num_classes == 0 {
            return Err(Error::Config("number of classes must be positive".into()));
        }
        let sizes = config.grid.mode_sizes();
        let ranks = feasible_ranks(&sizes, config.tt_rank);
        let std = MEAN_INIT_SCALE / (config.tt_rank as f64).sqrt();
        let kernels = if config.per_class_kernels {
            vec![config.kernel.clone(); num_classes]
        } else {
            vec![config.kernel.clone()]
        };
        let points: Vec<Vec<f64>> = config.grid.axes().iter().map(|a| a.points()).collect();
        let mut classes = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let mean = TtVector::random(&sizes, &ranks, std, rng)?;
            let cov_raw = match config.parameterization {
                Parameterization::Direct => {
                    let kernel = &kernels[if kernels.len() == 1 { 0 } else { c }];
                    let kfac: Vec<DMatrix<f64>> = (0..sizes.len())
                        .map(|d| kernel.dim_matrix(d, &points[d]))
                        .collect::<Result<_>>()?;
                    let chol = KroneckerMatrix::new(kfac)?.cholesky()?;
                    ClassPosterior::raw_from_lower(chol.lower_factors())?
                }
                Parameterization::Whitened => sizes.iter().map(|&n| DMatrix::zeros(n, n)).collect(),
            };
            classes.push(ClassPosterior { mean, cov_raw });
        }
        TtGpModel::new(
            config.parameterization,
            config.grid.clone(),
            kernels,
            config.embedding.clone(),
            log_noise,
            classes,
        )
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn task(&self) -> TaskKind {
        if self.log_noise.is_some() {
            TaskKind::Regression
        } else {
            TaskKind::Classification
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Input feature count expected by the model.
    pub fn input_dim(&self) -> usize {
        match &self.embedding {
            Some(e) => e.input_dim(),
            None => self.grid.num_dims(),
        }
    }

    pub fn kernels(&self) -> &[RbfParams] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [RbfParams] {
        &mut self.kernels
    }

    pub fn kernel_index(&self, c: usize) -> usize {
        if self.kernels.len() == 1 {
            0
        } else {
            c
        }
    }

    pub fn embedding(&self) -> Option<&LinearEmbedding> {
        self.embedding.as_ref()
    }

    pub fn embedding_mut(&mut self) -> Option<&mut LinearEmbedding> {
        self.embedding.as_mut()
    }

    pub fn log_noise(&self) -> Option<f64> {
        self.log_noise
    }

    pub fn noise_variance(&self) -> Option<f64> {
        self.log_noise.map(f64::exp)
    }

    pub fn set_log_noise(&mut self, v: f64) -> Result<()> {
        match &mut self.log_noise {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(Error::InvalidInput("classification models carry no noise".into())),
        }
    }

    pub fn classes(&self) -> &[ClassPosterior] {
        &self.classes
    }

    pub fn classes_mut(&mut self) -> &mut [ClassPosterior] {
        &mut self.classes
    }

    /// Grid coordinates of a raw input (after the optional embedding).
    pub fn grid_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("input has non-finite features".into()));
        }
        match &self.embedding {
            Some(e) => e.normalized(x),
            None => Ok(x.to_vec()),
        }
    }

    /// Factorizes the kernel and covariance factors once for repeated use.
    pub fn prepare(&self) -> Result<PreparedModel<'_>> {
        let points: Vec<Vec<f64>> = self.grid.axes().iter().map(|a| a.points()).collect();
        let kernels = self
            .kernels
            .iter()
            .map(|kernel| {
                let factors: Vec<DMatrix<f64>> = (0..points.len())
                    .map(|d| kernel.dim_matrix(d, &points[d]))
                    .collect::<Result<_>>()?;
                let k = KroneckerMatrix::new(factors)?;
                let chol = k.cholesky()?;
                let kinv = chol.inverse();
                Ok(KernelCache {
                    k,
                    chol,
                    kinv,
                    variance: kernel.variance(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = self
            .classes
            .iter()
            .enumerate()
            .map(|(c, cls)| {
                let raw_lower = cls.lower_factors();
                let lower: Vec<DMatrix<f64>> = match self.parameterization {
                    Parameterization::Direct => raw_lower.clone(),
                    Parameterization::Whitened => kernels[self.kernel_index(c)]
                        .chol
                        .lower_factors()
                        .iter()
                        .zip(&raw_lower)
                        .map(|(l, s)| l * s)
                        .collect(),
                };
                let sigma = KroneckerMatrix::new(lower.iter().map(|l| l * l.transpose()).collect())?;
                Ok(ClassCache {
                    raw_lower,
                    lower,
                    sigma,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedModel {
            model: self,
            points,
            kernels,
            classes,
        })
    }

    /// The variational mean `μ^c` as a TT vector over the grid.
    pub fn mean_tt(&self, c: usize) -> Result<TtVector> {
        let prep = self.prepare()?;
        prep.check_class(c)?;
        Ok(prep.mean_tt(c))
    }

    /// Cholesky factors of `Σ^c`, one per dimension.
    pub fn cov_chol(&self, c: usize) -> Result<KroneckerChol> {
        let prep = self.prepare()?;
        prep.check_class(c)?;
        KroneckerChol::from_lower(prep.classes[c].lower.clone())
    }

    pub fn latent_moments(&self, c: usize, x: &[f64]) -> Result<(f64, f64)> {
        self.prepare()?.latent_moments(c, x)
    }

    pub fn kl_term(&self, c: usize) -> Result<f64> {
        self.prepare()?.kl_term(c)
    }

    /// Predictive means and observation variances in original target units.
    /// Inputs are raw features; stored feature scaling is applied first.
    pub fn predict_regression(&self, rows: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
        let noise = self
            .noise_variance()
            .ok_or_else(|| Error::InvalidInput("model is not a regression model".into()))?;
        let prep = self.prepare()?;
        let mut means = Vec::with_capacity(rows.len());
        let mut vars = Vec::with_capacity(rows.len());
        for row in rows {
            let x = self.scale_features(row)?;
            let (m, s) = prep.latent_moments(0, &x)?;
            let (m, v) = match self.target_scaling {
                Some(t) => (t.invert(m), (s + noise) * t.std * t.std),
                None => (m, s + noise),
            };
            means.push(m);
            vars.push(v);
        }
        Ok((means, vars))
    }

    /// Class indices and softmax-of-means scores; ties go to the lowest index.
    pub fn predict_classification(&self, rows: &[&[f64]]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        if self.task() != TaskKind::Classification {
            return Err(Error::InvalidInput("model is not a classification model".into()));
        }
        let prep = self.prepare()?;
        let mut labels = Vec::with_capacity(rows.len());
        let mut scores = Vec::with_capacity(rows.len());
        for row in rows {
            let x = self.scale_features(row)?;
            let means = prep.class_means(&x)?;
            let p = softmax(&means);
            let mut best = 0;
            for c in 1..p.len() {
                if means[c] > means[best] {
                    best = c;
                }
            }
            labels.push(best);
            scores.push(p);
        }
        Ok((labels, scores))
    }

    fn scale_features(&self, row: &[f64]) -> Result<Vec<f64>> {
        match &self.feature_scaling {
            Some(s) => {
                if s.means.len() != row.len() {
                    return Err(Error::Shape(format!(
                        "input has {} features, model expects {}",
                        row.len(),
                        s.means.len()
                    )));
                }
                Ok(s.apply(row))
            }
            None => Ok(row.to_vec()),
        }
    }

    /// Trainable parameters as named flat blocks, in a fixed order shared
    /// with [`ElboGrad::blocks`](crate::elbo::ElboGrad::blocks).
    pub fn param_blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (c, cls) in self.classes.iter().enumerate() {
            for (d, core) in cls.mean.cores().iter().enumerate() {
                out.push(ParamBlock::new(format!("class{c}.core{d}"), ParamGroup::Variational, core.data()));
            }
            for (d, m) in cls.cov_raw.iter().enumerate() {
                out.push(ParamBlock::new(format!("class{c}.cov{d}"), ParamGroup::Variational, m.as_slice()));
            }
        }
        for (k, kernel) in self.kernels.iter().enumerate() {
            out.push(ParamBlock::new(
                format!("kernel{k}.log_lengthscales"),
                ParamGroup::Hyper,
                kernel.log_lengthscales(),
            ));
            out.push(ParamBlock::new(
                format!("kernel{k}.log_variance"),
                ParamGroup::Hyper,
                std::slice::from_ref(kernel.log_variance_ref()),
            ));
        }
        if let Some(v) = &self.log_noise {
            out.push(ParamBlock::new("log_noise".into(), ParamGroup::Hyper, std::slice::from_ref(v)));
        }
        if let Some(e) = &self.embedding {
            out.push(ParamBlock::new("embedding.projection".into(), ParamGroup::Hyper, e.projection().as_slice()));
        }
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let mut out = Vec::new();
        for (c, cls) in self.classes.iter_mut().enumerate() {
            for (d, core) in cls.mean.cores_mut().iter_mut().enumerate() {
                out.push(ParamBlockMut::new(format!("class{c}.core{d}"), ParamGroup::Variational, core.data_mut()));
            }
            for (d, m) in cls.cov_raw.iter_mut().enumerate() {
                out.push(ParamBlockMut::new(format!("class{c}.cov{d}"), ParamGroup::Variational, m.as_mut_slice()));
            }
        }
        for (k, kernel) in self.kernels.iter_mut().enumerate() {
            let (ls, lv) = kernel.log_params_mut();
            out.push(ParamBlockMut::new(format!("kernel{k}.log_lengthscales"), ParamGroup::Hyper, ls));
            out.push(ParamBlockMut::new(
                format!("kernel{k}.log_variance"),
                ParamGroup::Hyper,
                std::slice::from_mut(lv),
            ));
        }
        if let Some(v) = &mut self.log_noise {
            out.push(ParamBlockMut::new("log_noise".into(), ParamGroup::Hyper, std::slice::from_mut(v)));
        }
        if let Some(e) = &mut self.embedding {
            out.push(ParamBlockMut::new(
                "embedding.projection".into(),
                ParamGroup::Hyper,
                e.projection_mut().as_mut_slice(),
            ));
        }
        out
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.param_blocks().iter().map(|b| b.values.len()).sum()
    }
}

/// Which learning-rate group a parameter block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// TT cores and covariance factors.
    Variational,
    /// Kernel hyperparameters, noise and embedding.
    Hyper,
}

#[derive(Debug)]
pub struct ParamBlock<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub values: &'a [f64],
}

impl<'a> ParamBlock<'a> {
    pub fn new(name: String, group: ParamGroup, values: &'a [f64]) -> Self {
        ParamBlock { name, group, values }
    }
}

#[derive(Debug)]
pub struct ParamBlockMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub values: &'a mut [f64],
}

impl<'a> ParamBlockMut<'a> {
    pub fn new(name: String, group: ParamGroup, values: &'a mut [f64]) -> Self {
        ParamBlockMut { name, group, values }
    }
}

pub(crate) struct KernelCache {
    pub k: KroneckerMatrix,
    pub chol: KroneckerChol,
    pub kinv: KroneckerMatrix,
    pub variance: f64,
}

pub(crate) struct ClassCache {
    /// Lower factors of the stored parameters (`S_d` when whitened).
    pub raw_lower: Vec<DMatrix<f64>>,
    /// Cholesky factors of `Σ_d`.
    pub lower: Vec<DMatrix<f64>>,
    pub sigma: KroneckerMatrix,
}

/// A model with its kernel factors, Cholesky factors and inverses computed.
pub struct PreparedModel<'a> {
    pub(crate) model: &'a TtGpModel,
    pub(crate) points: Vec<Vec<f64>>,
    pub(crate) kernels: Vec<KernelCache>,
    pub(crate) classes: Vec<ClassCache>,
}

/// Forward quantities of one latent process at one point.
pub(crate) struct Moments {
    pub m: f64,
    pub s_raw: f64,
    pub contraction: KronContraction,
    /// `w_dᵀ K_d w_d`.
    pub p: Vec<f64>,
    /// `‖Σ-factorᵀ w_d‖²`.
    pub q: Vec<f64>,
    /// Direct: `L_Σᵀ w_d`. Whitened: `S_dᵀ u_d`. Truncated after the last
    /// window index.
    pub v: Vec<Vec<f64>>,
    /// Whitened only: `u_d = L_Kᵀ w_d`, truncated likewise.
    pub u: Vec<Vec<f64>>,
}

impl Moments {
    pub fn s(&self) -> f64 {
        self.s_raw.max(0.0)
    }
}

impl<'a> PreparedModel<'a> {
    pub fn model(&self) -> &TtGpModel {
        self.model
    }

    pub fn latent_moments(&self, c: usize, x: &[f64]) -> Result<(f64, f64)> {
        self.check_class(c)?;
        let z = self.model.grid_input(x)?;
        let w = weights_nd(&self.model.grid, &z)?;
        let mo = self.moments(c, &w)?;
        Ok((mo.m, mo.s()))
    }

    /// Latent means of every class at one input (model input space).
    pub fn class_means(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.model.grid_input(x)?;
        let w = weights_nd(&self.model.grid, &z)?;
        (0..self.model.num_classes())
            .map(|c| self.moments(c, &w).map(|mo| mo.m))
            .collect()
    }

    pub(crate) fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.model.num_classes() {
            return Err(Error::InvalidInput(format!(
                "class {c} out of range for {} classes",
                self.model.num_classes()
            )));
        }
        Ok(())
    }

    pub(crate) fn moments(&self, c: usize, w: &InterpWeights) -> Result<Moments> {
        let factors = w.factors();
        let kc = &self.kernels[self.model.kernel_index(c)];
        let cc = &self.classes[c];
        let tt = &self.model.classes[c].mean;
        match self.model.parameterization {
            Parameterization::Direct => {
                let contraction = tt.contract_kron(&factors)?;
                let p: Vec<f64> = factors
                    .iter()
                    .zip(kc.k.factors())
                    .map(|(f, k)| window_quad_form(k, f))
                    .collect();
                let v: Vec<Vec<f64>> = factors
                    .iter()
                    .zip(&cc.lower)
                    .map(|(f, l)| lower_t_times_window(l, f))
                    .collect();
                let q: Vec<f64> = v.iter().map(|v| norm_sq(v)).collect();
                let s_raw = kc.variance - p.iter().product::<f64>() + q.iter().product::<f64>();
                Ok(Moments {
                    m: contraction.value(),
                    s_raw,
                    contraction,
                    p,
                    q,
                    v,
                    u: Vec::new(),
                })
            }
            Parameterization::Whitened => {
                let u: Vec<Vec<f64>> = factors
                    .iter()
                    .zip(kc.chol.lower_factors())
                    .map(|(f, l)| lower_t_times_window(l, f))
                    .collect();
                let ufac: Vec<KronFactor<'_>> = u
                    .iter()
                    .zip(&factors)
                    .map(|(u, f)| KronFactor::window(f.len, 0, u))
                    .collect();
                let contraction = tt.contract_kron(&ufac)?;
                let v: Vec<Vec<f64>> = u
                    .iter()
                    .zip(&cc.raw_lower)
                    .map(|(u, s)| lower_t_times_window(s, &KronFactor::window(s.nrows(), 0, u)))
                    .collect();
                let p: Vec<f64> = u.iter().map(|u| norm_sq(u)).collect();
                let q: Vec<f64> = v.iter().map(|v| norm_sq(v)).collect();
                let s_raw = kc.variance - p.iter().product::<f64>() + q.iter().product::<f64>();
                Ok(Moments {
                    m: contraction.value(),
                    s_raw,
                    contraction,
                    p,
                    q,
                    v,
                    u,
                })
            }
        }
    }

    pub(crate) fn mean_tt(&self, c: usize) -> TtVector {
        let mut tt = self.model.classes[c].mean.clone();
        if self.model.parameterization == Parameterization::Whitened {
            let kc = &self.kernels[self.model.kernel_index(c)];
            for (core, l) in tt.cores_mut().iter_mut().zip(kc.chol.lower_factors()) {
                mode_multiply(core, l);
            }
        }
        tt
    }

    /// `KL(q(u_c) ‖ p(u_c))`.
    pub fn kl_term(&self, c: usize) -> Result<f64> {
        self.check_class(c)?;
        Ok(self.kl_parts(c)?.value())
    }

    pub(crate) fn kl_parts(&self, c: usize) -> Result<KlParts> {
        let model = self.model;
        let kc = &self.kernels[model.kernel_index(c)];
        let cc = &self.classes[c];
        let sizes = model.grid.mode_sizes();
        let raw_logdet: f64 = model.classes[c]
            .cov_raw
            .iter()
            .enumerate()
            .map(|(d, raw)| 2.0 * multiplicity(&sizes, d) * raw.diagonal().sum())
            .sum();
        let tt = &model.classes[c].mean;
        match model.parameterization {
            Parameterization::Direct => {
                let traces: Vec<f64> = kc
                    .kinv
                    .factors()
                    .iter()
                    .zip(cc.sigma.factors())
                    .map(|(a, b)| a.component_mul(&b.transpose()).sum())
                    .collect();
                Ok(KlParts {
                    logdet_ratio: kc.chol.log_det() - raw_logdet,
                    num_points: model.grid.num_points(),
                    traces,
                    quad: tt.contract_quad(&kc.kinv)?,
                })
            }
            Parameterization::Whitened => {
                let traces: Vec<f64> = cc.raw_lower.iter().map(|s| s.norm_squared()).collect();
                Ok(KlParts {
                    logdet_ratio: -raw_logdet,
                    num_points: model.grid.num_points(),
                    traces,
                    quad: tt.contract_quad(&KroneckerMatrix::identity(&sizes)?)?,
                })
            }
        }
    }
}

pub(crate) struct KlParts {
    /// `log|K| − log|Σ|`.
    pub logdet_ratio: f64,
    pub num_points: f64,
    pub traces: Vec<f64>,
    pub quad: crate::tt::QuadContraction,
}

impl KlParts {
    pub fn value(&self) -> f64 {
        0.5 * (self.logdet_ratio - self.num_points
            + self.traces.iter().product::<f64>()
            + self.quad.value())
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `Lᵀ w` for lower-triangular `L` and a windowed `w`; entries past the
/// window end are zero and omitted.
pub(crate) fn lower_t_times_window(l: &DMatrix<f64>, w: &KronFactor<'_>) -> Vec<f64> {
    let end = w.offset + w.values.len();
    let mut v = vec![0.0; end];
    for (p, &wp) in w.values.iter().enumerate() {
        let j = w.offset + p;
        for (k, vk) in v.iter_mut().enumerate().take(j + 1) {
            *vk += l[(j, k)] * wp;
        }
    }
    v
}

/// Replaces `G[a, j, b]` by `Σ_k M[j, k] G[a, k, b]`.
fn mode_multiply(core: &mut TtCore, m: &DMatrix<f64>) {
    let (rl, n, rr) = core.shape();
    let old = core.data().to_vec();
    let out = core.data_mut();
    for a in 0..rl {
        for j in 0..n {
            for b in 0..rr {
                out[(a * n + j) * rr + b] = (0..n).map(|k| m[(j, k)] * old[(a * n + k) * rr + b]).sum();
            }
        }
    }
}

pub(crate) fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(a: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(a);
    a.iter().map(|v| (v - lse).exp()).collect()
}
