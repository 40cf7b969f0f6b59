//! Evidence lower bounds for regression and softmax classification, with
//! analytic gradients in unconstrained parameter space.

use nalgebra::DMatrix;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::interp::{weights_nd, InterpWeights};
use crate::kron::multiplicity;
use crate::kron::KroneckerMatrix;
use crate::model::{
    log_sum_exp, softmax, Moments, ParamBlock, ParamGroup, Parameterization, PreparedModel, TtGpModel,
};
use crate::tt::{KronFactor, TtCore};

/// Points per reduction chunk. Partial sums are combined in chunk order, so
/// results do not depend on the number of worker threads.
pub const CHUNK_SIZE: usize = 64;

/// Targets of a minibatch.
#[derive(Clone, Copy, Debug)]
pub enum BatchTargets<'a> {
    Real(&'a [f64]),
    Labels(&'a [usize]),
}

impl BatchTargets<'_> {
    pub fn len(&self) -> usize {
        match self {
            BatchTargets::Real(y) => y.len(),
            BatchTargets::Labels(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradient of the ELBO with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboGrad {
    /// Per class, per dimension.
    pub cores: Vec<Vec<TtCore>>,
    /// Per class, per dimension; same layout as the raw covariance factors.
    pub cov: Vec<Vec<DMatrix<f64>>>,
    /// Per kernel.
    pub log_lengthscales: Vec<Vec<f64>>,
    pub log_variance: Vec<f64>,
    pub log_noise: Option<f64>,
    pub embedding: Option<DMatrix<f64>>,
}

impl ElboGrad {
    /// Named blocks in the order of [`TtGpModel::param_blocks`].
    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (c, (cores, cov)) in self.cores.iter().zip(&self.cov).enumerate() {
            for (d, g) in cores.iter().enumerate() {
                out.push(ParamBlock::new(format!("class{c}.core{d}"), ParamGroup::Variational, g.data()));
            }
            for (d, m) in cov.iter().enumerate() {
                out.push(ParamBlock::new(format!("class{c}.cov{d}"), ParamGroup::Variational, m.as_slice()));
            }
        }
        for (k, (ls, lv)) in self.log_lengthscales.iter().zip(&self.log_variance).enumerate() {
            out.push(ParamBlock::new(format!("kernel{k}.log_lengthscales"), ParamGroup::Hyper, ls));
            out.push(ParamBlock::new(
                format!("kernel{k}.log_variance"),
                ParamGroup::Hyper,
                std::slice::from_ref(lv),
            ));
        }
        if let Some(v) = &self.log_noise {
            out.push(ParamBlock::new("log_noise".into(), ParamGroup::Hyper, std::slice::from_ref(v)));
        }
        if let Some(e) = &self.embedding {
            out.push(ParamBlock::new("embedding.projection".into(), ParamGroup::Hyper, e.as_slice()));
        }
        out
    }
}

/// Raw accumulators: gradients with respect to the stored triangular factors,
/// the kernel factor matrices and their Cholesky factors, chained to
/// log-space at the end.
struct Acc {
    value: f64,
    grad: Option<GradAcc>,
}

struct GradAcc {
    cores: Vec<Vec<TtCore>>,
    lower: Vec<Vec<DMatrix<f64>>>,
    kfac: Vec<Vec<DMatrix<f64>>>,
    kchol: Vec<Vec<DMatrix<f64>>>,
    log_variance: Vec<f64>,
    log_noise: f64,
    embedding: Option<DMatrix<f64>>,
}

impl GradAcc {
    fn zeros(model: &TtGpModel) -> Self {
        let sizes = model.grid().mode_sizes();
        let square = || sizes.iter().map(|&n| DMatrix::zeros(n, n)).collect::<Vec<_>>();
        GradAcc {
            cores: model.classes().iter().map(|c| c.mean.zeros_like_cores()).collect(),
            lower: model.classes().iter().map(|_| square()).collect(),
            kfac: model.kernels().iter().map(|_| square()).collect(),
            kchol: model.kernels().iter().map(|_| square()).collect(),
            log_variance: vec![0.0; model.kernels().len()],
            log_noise: 0.0,
            embedding: model
                .embedding()
                .map(|e| DMatrix::zeros(e.output_dim(), e.input_dim())),
        }
    }

    fn add(&mut self, other: &GradAcc) {
        for (a, b) in self.cores.iter_mut().zip(&other.cores) {
            for (ga, gb) in a.iter_mut().zip(b) {
                for (x, y) in ga.data_mut().iter_mut().zip(gb.data()) {
                    *x += y;
                }
            }
        }
        for (a, b) in self.lower.iter_mut().zip(&other.lower) {
            for (ma, mb) in a.iter_mut().zip(b) {
                *ma += mb;
            }
        }
        for (a, b) in self.kfac.iter_mut().zip(&other.kfac) {
            for (ma, mb) in a.iter_mut().zip(b) {
                *ma += mb;
            }
        }
        for (a, b) in self.kchol.iter_mut().zip(&other.kchol) {
            for (ma, mb) in a.iter_mut().zip(b) {
                *ma += mb;
            }
        }
        for (a, b) in self.log_variance.iter_mut().zip(&other.log_variance) {
            *a += b;
        }
        self.log_noise += other.log_noise;
        if let (Some(a), Some(b)) = (&mut self.embedding, &other.embedding) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        for g in self.cores.iter_mut().flatten() {
            g.scale(s);
        }
        for m in self.lower.iter_mut().flatten() {
            *m *= s;
        }
        for m in self.kfac.iter_mut().flatten() {
            *m *= s;
        }
        for m in self.kchol.iter_mut().flatten() {
            *m *= s;
        }
        self.log_variance.iter_mut().for_each(|v| *v *= s);
        self.log_noise *= s;
        if let Some(e) = &mut self.embedding {
            *e *= s;
        }
    }
}

/// `(Π v, [Π_{e≠d} v_e]_d)` without division.
fn products_excluding(v: &[f64]) -> (f64, Vec<f64>) {
    let n = v.len();
    let mut prefix = vec![1.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] * v[i];
    }
    let mut out = vec![1.0; n];
    let mut suffix = 1.0;
    for i in (0..n).rev() {
        out[i] = prefix[i] * suffix;
        suffix *= v[i];
    }
    (prefix[n], out)
}

impl TtGpModel {
    pub fn elbo_regression(&self, x: &[&[f64]], y: &[f64], n_total: usize) -> Result<f64> {
        self.elbo(x, BatchTargets::Real(y), n_total)
    }

    pub fn elbo_classification(&self, x: &[&[f64]], labels: &[usize], n_total: usize) -> Result<f64> {
        self.elbo(x, BatchTargets::Labels(labels), n_total)
    }

    /// Stochastic ELBO: `n_total/|batch|` times the batch data term, minus
    /// the KL terms of all classes.
    pub fn elbo(&self, x: &[&[f64]], targets: BatchTargets<'_>, n_total: usize) -> Result<f64> {
        Ok(self.evaluate(x, targets, n_total, false, None)?.0)
    }

    /// ELBO value and gradient. `pool` spreads chunks over worker threads.
    pub fn elbo_grad(
        &self,
        x: &[&[f64]],
        targets: BatchTargets<'_>,
        n_total: usize,
        pool: Option<&ThreadPool>,
    ) -> Result<(f64, ElboGrad)> {
        let (v, g) = self.evaluate(x, targets, n_total, true, pool)?;
        Ok((v, g.expect("gradient requested")))
    }

    /// Per-point expected log-likelihood terms (the lower bound for
    /// classification), unscaled and without KL.
    pub fn data_terms(&self, x: &[&[f64]], targets: BatchTargets<'_>) -> Result<Vec<f64>> {
        self.check_batch(x, targets, x.len())?;
        let prep = self.prepare()?;
        (0..x.len())
            .map(|i| point_term(&prep, x[i], targets, i, None))
            .collect()
    }

    fn check_batch(&self, x: &[&[f64]], targets: BatchTargets<'_>, n_total: usize) -> Result<()> {
        if x.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                x.len(),
                targets.len()
            )));
        }
        if x.is_empty() && n_total > 0 {
            return Err(Error::InvalidInput("empty batch with a nonzero dataset size".into()));
        }
        match (targets, self.log_noise()) {
            (BatchTargets::Real(y), Some(_)) => {
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("regression targets must be finite".into()));
                }
            }
            (BatchTargets::Labels(l), None) => {
                if let Some(bad) = l.iter().find(|&&c| c >= self.num_classes()) {
                    return Err(Error::InvalidInput(format!(
                        "label {bad} out of range for {} classes",
                        self.num_classes()
                    )));
                }
            }
            (BatchTargets::Real(_), None) => {
                return Err(Error::InvalidInput("real targets given to a classification model".into()))
            }
            (BatchTargets::Labels(_), Some(_)) => {
                return Err(Error::InvalidInput("class labels given to a regression model".into()))
            }
        }
        Ok(())
    }

    fn evaluate(
        &self,
        x: &[&[f64]],
        targets: BatchTargets<'_>,
        n_total: usize,
        want_grad: bool,
        pool: Option<&ThreadPool>,
    ) -> Result<(f64, Option<ElboGrad>)> {
        self.check_batch(x, targets, n_total)?;
        let prep = self.prepare()?;
        let n = x.len();
        let ranges: Vec<(usize, usize)> = (0..n)
            .step_by(CHUNK_SIZE)
            .map(|s| (s, (s + CHUNK_SIZE).min(n)))
            .collect();
        let run = |&(lo, hi): &(usize, usize)| -> Result<Acc> {
            let mut acc = Acc {
                value: 0.0,
                grad: want_grad.then(|| GradAcc::zeros(self)),
            };
            for i in lo..hi {
                acc.value += point_term(&prep, x[i], targets, i, acc.grad.as_mut())?;
            }
            Ok(acc)
        };
        let partials: Vec<Result<Acc>> = match pool {
            Some(pool) if ranges.len() > 1 => pool.install(|| ranges.par_iter().map(run).collect()),
            _ => ranges.iter().map(run).collect(),
        };

        let mut total = Acc {
            value: 0.0,
            grad: want_grad.then(|| GradAcc::zeros(self)),
        };
        for part in partials {
            let part = part?;
            total.value += part.value;
            if let (Some(t), Some(p)) = (&mut total.grad, &part.grad) {
                t.add(p);
            }
        }
        if n > 0 {
            let scale = n_total as f64 / n as f64;
            total.value *= scale;
            if let Some(g) = &mut total.grad {
                g.scale(scale);
            }
        }
        for c in 0..self.num_classes() {
            total.value -= kl_term_and_grad(&prep, c, total.grad.as_mut())?;
        }
        if !total.value.is_finite() {
            return Err(Error::Numeric(format!("ELBO evaluated to {}", total.value)));
        }
        let grad = match total.grad {
            Some(g) => Some(finish_grad(&prep, g)?),
            None => None,
        };
        Ok((total.value, grad))
    }
}

/// Data term of point `i`; accumulates its gradient when `grad` is given.
fn point_term(
    prep: &PreparedModel<'_>,
    x: &[f64],
    targets: BatchTargets<'_>,
    i: usize,
    grad: Option<&mut GradAcc>,
) -> Result<f64> {
    let model = prep.model();
    let z = model.grid_input(x)?;
    let w = weights_nd(model.grid(), &z)?;
    let num_classes = model.num_classes();
    let moments: Vec<Moments> = (0..num_classes)
        .map(|c| prep.moments(c, &w))
        .collect::<Result<_>>()?;

    // value and derivatives with respect to each m^c and s^c
    let (value, gm, gs, gnoise) = match targets {
        BatchTargets::Real(y) => {
            let noise = model.noise_variance().expect("regression model");
            let mo = &moments[0];
            let r = y[i] - mo.m;
            let s = mo.s();
            let value = -0.5 * (2.0 * std::f64::consts::PI * noise).ln() - (r * r + s) / (2.0 * noise);
            let gs = if mo.s_raw > 0.0 { -0.5 / noise } else { 0.0 };
            (value, vec![r / noise], vec![gs], -0.5 + (r * r + s) / (2.0 * noise))
        }
        BatchTargets::Labels(l) => {
            let y = l[i];
            let a: Vec<f64> = moments.iter().map(|mo| mo.m + 0.5 * mo.s()).collect();
            let value = moments[y].m - log_sum_exp(&a);
            let p = softmax(&a);
            let gm = (0..num_classes)
                .map(|c| f64::from(u8::from(c == y)) - p[c])
                .collect();
            let gs = (0..num_classes)
                .map(|c| if moments[c].s_raw > 0.0 { -0.5 * p[c] } else { 0.0 })
                .collect();
            (value, gm, gs, 0.0)
        }
    };
    if let Some(g) = grad {
        accumulate_point_grad(prep, x, &w, &moments, &gm, &gs, g)?;
        g.log_noise += gnoise;
    }
    Ok(value)
}

fn accumulate_point_grad(
    prep: &PreparedModel<'_>,
    x: &[f64],
    w: &InterpWeights,
    moments: &[Moments],
    gm: &[f64],
    gs: &[f64],
    g: &mut GradAcc,
) -> Result<()> {
    let model = prep.model();
    let mut dz = vec![0.0; w.stencils().len()];
    let want_dz = model.embedding().is_some();
    for (c, mo) in moments.iter().enumerate() {
        match model.parameterization() {
            Parameterization::Direct => direct_point_grad(prep, c, w, mo, gm[c], gs[c], want_dz, &mut dz, g),
            Parameterization::Whitened => whitened_point_grad(prep, c, w, mo, gm[c], gs[c], want_dz, &mut dz, g),
        }
    }
    if let (Some(e), Some(ge)) = (model.embedding(), &mut g.embedding) {
        *ge += e.normalized_grad(x, &dz)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn direct_point_grad(
    prep: &PreparedModel<'_>,
    c: usize,
    w: &InterpWeights,
    mo: &Moments,
    gm: f64,
    gs: f64,
    want_dz: bool,
    dz: &mut [f64],
    g: &mut GradAcc,
) {
    let model = prep.model();
    let factors = w.factors();
    let ki = model.kernel_index(c);
    let kc = &prep.kernels[ki];
    let mean = &model.classes()[c].mean;
    mo.contraction.accumulate_core_grads(gm, &factors, &mut g.cores[c]);
    if want_dz && gm != 0.0 {
        for (d, st) in w.stencils().iter().enumerate() {
            let fg = mo.contraction.factor_grad(mean, d, st.start, st.weights.len());
            dz[d] += gm * fg.iter().zip(&st.dweights).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if gs == 0.0 {
        return;
    }
    let (_, p_ex) = products_excluding(&mo.p);
    let (_, q_ex) = products_excluding(&mo.q);
    g.log_variance[ki] += gs * kc.variance;
    let lower = &prep.classes[c].lower;
    for (d, st) in w.stencils().iter().enumerate() {
        let o = st.start;
        let wv = &st.weights;
        let kmat = &kc.k.factors()[d];
        let kg = &mut g.kfac[ki][d];
        let cp = -gs * p_ex[d];
        for (a, &wa) in wv.iter().enumerate() {
            for (b, &wb) in wv.iter().enumerate() {
                kg[(o + a, o + b)] += cp * wa * wb;
            }
        }
        let cq = gs * q_ex[d];
        let v = &mo.v[d];
        let lg = &mut g.lower[c][d];
        for (a, &wa) in wv.iter().enumerate() {
            let j = o + a;
            for k in 0..=j {
                lg[(j, k)] += 2.0 * cq * wa * v[k];
            }
        }
        if want_dz {
            let l = &lower[d];
            let mut t = 0.0;
            for (a, &da) in st.dweights.iter().enumerate() {
                if da == 0.0 {
                    continue;
                }
                let j = o + a;
                let kw: f64 = wv.iter().enumerate().map(|(b, &wb)| kmat[(j, o + b)] * wb).sum();
                let lv: f64 = (0..=j).map(|k| l[(j, k)] * v[k]).sum();
                t += da * (cp * 2.0 * kw + cq * 2.0 * lv);
            }
            dz[d] += t;
        }
    }
}

/// With `u_d = L_dᵀ w_d` and `t_d = S_dᵀ u_d`: `m = ⟨ρ, ⊗u_d⟩`,
/// `s = σ_f² − Π‖u_d‖² + Π‖t_d‖²`.
#[allow(clippy::too_many_arguments)]
fn whitened_point_grad(
    prep: &PreparedModel<'_>,
    c: usize,
    w: &InterpWeights,
    mo: &Moments,
    gm: f64,
    gs: f64,
    want_dz: bool,
    dz: &mut [f64],
    g: &mut GradAcc,
) {
    let model = prep.model();
    let ki = model.kernel_index(c);
    let kc = &prep.kernels[ki];
    let rho = &model.classes()[c].mean;
    let sizes = model.grid().mode_sizes();
    let ufac: Vec<KronFactor<'_>> = mo
        .u
        .iter()
        .zip(&sizes)
        .map(|(u, &n)| KronFactor::window(n, 0, u))
        .collect();
    mo.contraction.accumulate_core_grads(gm, &ufac, &mut g.cores[c]);
    let (_, p_ex) = products_excluding(&mo.p);
    let (_, q_ex) = products_excluding(&mo.q);
    if gs != 0.0 {
        g.log_variance[ki] += gs * kc.variance;
    }
    for (d, st) in w.stencils().iter().enumerate() {
        let u = &mo.u[d];
        let t = &mo.v[d];
        let len = u.len();
        let mut ubar = if gm != 0.0 {
            let mut fg = mo.contraction.factor_grad(rho, d, 0, len);
            fg.iter_mut().for_each(|v| *v *= gm);
            fg
        } else {
            vec![0.0; len]
        };
        if gs != 0.0 {
            let s = &prep.classes[c].raw_lower[d];
            let cp = -2.0 * gs * p_ex[d];
            let cq = 2.0 * gs * q_ex[d];
            let sg = &mut g.lower[c][d];
            for j in 0..len {
                let st_j: f64 = (0..=j).map(|k| s[(j, k)] * t[k]).sum();
                ubar[j] += cp * u[j] + cq * st_j;
                for k in 0..=j {
                    sg[(j, k)] += cq * u[j] * t[k];
                }
            }
        }
        let l = &kc.chol.lower_factors()[d];
        let lg = &mut g.kchol[ki][d];
        let mut t_dz = 0.0;
        for (a, (&wa, &da)) in st.weights.iter().zip(&st.dweights).enumerate() {
            let j = st.start + a;
            let mut lu = 0.0;
            for k in 0..=j {
                lg[(j, k)] += wa * ubar[k];
                lu += l[(j, k)] * ubar[k];
            }
            t_dz += da * lu;
        }
        if want_dz {
            dz[d] += t_dz;
        }
    }
}

/// Returns `KL(q(u_c) ‖ p(u_c))` and subtracts its gradient into `grad`.
fn kl_term_and_grad(prep: &PreparedModel<'_>, c: usize, grad: Option<&mut GradAcc>) -> Result<f64> {
    let parts = prep.kl_parts(c)?;
    let value = parts.value();
    let Some(g) = grad else {
        return Ok(value);
    };
    let model = prep.model();
    let ki = model.kernel_index(c);
    let kc = &prep.kernels[ki];
    let cc = &prep.classes[c];
    let tt = &model.classes()[c].mean;
    let sizes = model.grid().mode_sizes();
    let (_, t_ex) = products_excluding(&parts.traces);

    match model.parameterization() {
        Parameterization::Direct => {
            parts.quad.accumulate_core_grads(-0.5, tt, &kc.kinv, &mut g.cores[c]);
            for d in 0..sizes.len() {
                let mult = multiplicity(&sizes, d);
                let kinv = &kc.kinv.factors()[d];
                let l = &cc.lower[d];
                // −∂KL/∂L_d = diag(c_d / L_jj) − T_{≠d} K_d⁻¹ L_d, lower part
                let kl_l = kinv * l;
                let lg = &mut g.lower[c][d];
                for j in 0..sizes[d] {
                    for k in 0..=j {
                        lg[(j, k)] -= t_ex[d] * kl_l[(j, k)];
                    }
                    lg[(j, j)] += mult / l[(j, j)];
                }
                // −∂KL/∂K_d = −½ (c_d K⁻¹ − T_{≠d} K⁻¹ Σ_d K⁻¹ − K⁻¹ B_d K⁻¹)
                let b = parts.quad.factor_grad(tt, d);
                let sigma = &cc.sigma.factors()[d];
                let inner = sigma * t_ex[d] + b;
                let term = kinv * mult - kinv * inner * kinv;
                g.kfac[ki][d] -= term * 0.5;
            }
        }
        Parameterization::Whitened => {
            let eye = KroneckerMatrix::identity(&sizes)?;
            parts.quad.accumulate_core_grads(-0.5, tt, &eye, &mut g.cores[c]);
            for d in 0..sizes.len() {
                let mult = multiplicity(&sizes, d);
                let s = &cc.raw_lower[d];
                let sg = &mut g.lower[c][d];
                for j in 0..sizes[d] {
                    for k in 0..=j {
                        sg[(j, k)] -= t_ex[d] * s[(j, k)];
                    }
                    sg[(j, j)] += mult / s[(j, j)];
                }
            }
        }
    }
    Ok(value)
}

/// Gradient with respect to a symmetric matrix `K = L Lᵀ` given the
/// gradient with respect to its Cholesky factor `L`.
fn cholesky_backward(l: &DMatrix<f64>, lbar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.transpose() * lbar;
    for j in 0..n {
        p[(j, j)] *= 0.5;
        for k in j + 1..n {
            p[(j, k)] = 0.0;
        }
    }
    let p = (&p + p.transpose()) * 0.5;
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("Cholesky factor has a positive diagonal");
    linv.transpose() * p * linv
}

fn finish_grad(prep: &PreparedModel<'_>, acc: GradAcc) -> Result<ElboGrad> {
    let model = prep.model();
    let cov = acc
        .lower
        .into_iter()
        .zip(&prep.classes)
        .map(|(per_dim, cc)| {
            per_dim
                .into_iter()
                .zip(&cc.raw_lower)
                .map(|(gl, l)| {
                    let n = gl.nrows();
                    DMatrix::from_fn(n, n, |j, k| match j.cmp(&k) {
                        std::cmp::Ordering::Greater => gl[(j, k)],
                        std::cmp::Ordering::Equal => gl[(j, j)] * l[(j, j)],
                        std::cmp::Ordering::Less => 0.0,
                    })
                })
                .collect()
        })
        .collect();
    let mut log_lengthscales = Vec::with_capacity(model.kernels().len());
    let mut log_variance = acc.log_variance;
    for (ki, kernel) in model.kernels().iter().enumerate() {
        let mut ls = vec![0.0; kernel.log_lengthscales().len()];
        for (d, points) in prep.points.iter().enumerate() {
            let dm = kernel.dim_matrix_grad(d, points)?;
            let mut gk = acc.kfac[ki][d].clone();
            let lbar = &acc.kchol[ki][d];
            if lbar.iter().any(|&v| v != 0.0) {
                gk += cholesky_backward(&prep.kernels[ki].chol.lower_factors()[d], lbar);
            }
            ls[kernel.lengthscale_slot(d)] += gk.component_mul(&dm.log_lengthscale).sum();
            log_variance[ki] += gk.component_mul(&dm.log_variance).sum();
        }
        log_lengthscales.push(ls);
    }
    Ok(ElboGrad {
        cores: acc.cores,
        cov,
        log_lengthscales,
        log_variance,
        log_noise: model.log_noise().map(|_| acc.log_noise),
        embedding: acc.embedding,
    })
}
