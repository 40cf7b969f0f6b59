//! Shared helpers for the integration tests: random model construction, a
//! brute-force dense evaluator built only from public parameter values, and
//! a finite-difference gradient checker.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ttgp::data::TaskKind;
use ttgp::elbo::BatchTargets;
use ttgp::interp::Grid;
use ttgp::kernels::{LinearEmbedding, RbfParams};
use ttgp::model::{ModelConfig, Parameterization, TtGpModel};
use ttgp::tt::TtVector;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub task: TaskKind,
    pub dims: usize,
    pub m0: usize,
    pub rank: usize,
    pub classes: usize,
    pub parameterization: Parameterization,
    pub per_class_kernels: bool,
    pub tied: bool,
    /// Raw input dimension of a linear embedding in front of the grid.
    pub embed_from: Option<usize>,
}

impl ModelSpec {
    pub fn regression(dims: usize, m0: usize, rank: usize) -> Self {
        ModelSpec {
            task: TaskKind::Regression,
            dims,
            m0,
            rank,
            classes: 1,
            parameterization: Parameterization::Whitened,
            per_class_kernels: false,
            tied: false,
            embed_from: None,
        }
    }

    pub fn classification(dims: usize, m0: usize, rank: usize, classes: usize) -> Self {
        ModelSpec {
            task: TaskKind::Classification,
            classes,
            ..ModelSpec::regression(dims, m0, rank)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embed_from.unwrap_or(self.dims)
    }
}

/// Model on the grid `[-1, 1]^D` (interior) with every parameter block
/// randomized away from its initial value.
pub fn random_model(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> TtGpModel {
    let ls: Vec<f64> = if spec.tied {
        vec![rng.random_range(0.4..0.8)]
    } else {
        (0..spec.dims).map(|_| rng.random_range(0.4..0.8)).collect()
    };
    let embedding = spec.embed_from.map(|input| {
        let mut e = LinearEmbedding::random(spec.dims, input, rng).unwrap();
        let pts: Vec<Vec<f64>> = (0..64).map(|_| normal_vec(rng, input, 1.0)).collect();
        e.reset_stats(pts.iter().map(Vec::as_slice)).unwrap();
        e
    });
    let config = ModelConfig {
        task: spec.task,
        num_classes: spec.classes,
        grid: Grid::build(&vec![(-1.0, 1.0); spec.dims], spec.m0).unwrap(),
        tt_rank: spec.rank,
        kernel: RbfParams::new(spec.dims, &ls, rng.random_range(0.6..1.6)).unwrap(),
        per_class_kernels: spec.per_class_kernels,
        embedding,
        noise_variance: rng.random_range(0.05..0.4),
        parameterization: spec.parameterization,
    };
    let mut model = TtGpModel::init(&config, rng).unwrap();
    let direct = spec.parameterization == Parameterization::Direct;
    let n01 = Normal::new(0.0, 1.0).unwrap();
    for block in model.param_blocks_mut() {
        let name = block.name.clone();
        if name.contains(".core") {
            for v in block.values.iter_mut() {
                *v = 0.6 * n01.sample(rng);
            }
        } else if name.contains(".cov") {
            let n = (block.values.len() as f64).sqrt() as usize;
            for j in 0..n {
                for i in 0..n {
                    let v = &mut block.values[j * n + i];
                    if i == j {
                        *v = if direct { -0.7 } else { -0.3 } + 0.3 * n01.sample(rng);
                    } else if i > j {
                        *v = if direct { 0.15 } else { 0.25 } * n01.sample(rng);
                    }
                }
            }
        } else if name.ends_with("log_lengthscales") && spec.per_class_kernels {
            for v in block.values.iter_mut() {
                *v += 0.1 * n01.sample(rng);
            }
        } else if name == "embedding.projection" {
            for v in block.values.iter_mut() {
                *v += 0.2 * n01.sample(rng);
            }
        }
    }
    model
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Points strictly inside `[-1, 1]^D`, where no stencil is clamped.
pub fn interior_points(rng: &mut ChaCha8Rng, n: usize, dims: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dims).map(|_| rng.random_range(-0.97..0.97)).collect())
        .collect()
}

pub fn refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

// ---------------------------------------------------------------------------
// Dense oracle

/// Keys cubic convolution kernel written in the generic `a` form.
pub fn keys(s: f64) -> f64 {
    let a = -0.5;
    let u = s.abs();
    if u < 1.0 {
        (a + 2.0) * u.powi(3) - (a + 3.0) * u.powi(2) + 1.0
    } else if u < 2.0 {
        a * u.powi(3) - 5.0 * a * u.powi(2) + 8.0 * a * u - 4.0 * a
    } else {
        0.0
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

fn kron_all(ms: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(1, 1, 1.0);
    for m in ms {
        out = kron(&out, m);
    }
    out
}

/// Dense vector of a TT tensor, first index slowest.
pub fn tt_dense(tt: &TtVector) -> DVector<f64> {
    let mut acc: Vec<f64> = vec![1.0];
    let mut rank = 1;
    for core in tt.cores() {
        let (rl, n, rr) = core.shape();
        assert_eq!(rl, rank);
        let prefixes = acc.len() / rl;
        let mut next = vec![0.0; prefixes * n * rr];
        for p in 0..prefixes {
            for j in 0..n {
                for b in 0..rr {
                    let mut s = 0.0;
                    for a in 0..rl {
                        s += acc[p * rl + a] * core.at(a, j, b);
                    }
                    next[(p * n + j) * rr + b] = s;
                }
            }
        }
        acc = next;
        rank = rr;
    }
    DVector::from_vec(acc)
}

pub struct DenseClass {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Cholesky factor of `sigma`.
    pub sigma_lower: DMatrix<f64>,
    pub kernel: usize,
}

pub struct DenseKernel {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub k: DMatrix<f64>,
    pub lower: DMatrix<f64>,
}

/// Every quantity materialized densely, from raw parameter values only.
pub struct DenseOracle {
    pub starts: Vec<f64>,
    pub spacings: Vec<f64>,
    pub sizes: Vec<usize>,
    pub kernels: Vec<DenseKernel>,
    pub classes: Vec<DenseClass>,
    pub noise: Option<f64>,
}

fn lower_from_raw(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = raw.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        l[(i, i)] = raw[(i, i)].exp();
        for j in 0..i {
            l[(i, j)] = raw[(i, j)];
        }
    }
    l
}

impl DenseOracle {
    pub fn new(model: &TtGpModel) -> Self {
        assert!(model.embedding().is_none(), "oracle covers grid inputs only");
        let axes = model.grid().axes();
        let dims = axes.len();
        let starts: Vec<f64> = axes.iter().map(|a| a.start()).collect();
        let spacings: Vec<f64> = axes.iter().map(|a| a.spacing()).collect();
        let sizes: Vec<usize> = axes.iter().map(|a| a.size()).collect();
        let mut factor_lowers = Vec::new();
        let kernels: Vec<DenseKernel> = model
            .kernels()
            .iter()
            .map(|kp| {
                let variance = kp.log_variance().exp();
                let per = variance.powf(1.0 / dims as f64);
                let lengthscales: Vec<f64> = (0..dims)
                    .map(|d| {
                        let ls = kp.log_lengthscales();
                        (if ls.len() == 1 { ls[0] } else { ls[d] }).exp()
                    })
                    .collect();
                let factors: Vec<DMatrix<f64>> = (0..dims)
                    .map(|d| {
                        let n = sizes[d];
                        DMatrix::from_fn(n, n, |i, j| {
                            let r = (i as f64 - j as f64) * spacings[d] / lengthscales[d];
                            per * (-0.5 * r * r).exp() + if i == j { 1e-6 * per } else { 0.0 }
                        })
                    })
                    .collect();
                let lowers: Vec<DMatrix<f64>> = factors
                    .iter()
                    .map(|f| f.clone().cholesky().expect("SPD kernel factor").l())
                    .collect();
                factor_lowers.push(lowers.clone());
                DenseKernel {
                    variance,
                    lengthscales,
                    k: kron_all(&factors),
                    lower: kron_all(&lowers),
                }
            })
            .collect();
        let classes = model
            .classes()
            .iter()
            .enumerate()
            .map(|(c, cls)| {
                let kernel = if kernels.len() == 1 { 0 } else { c };
                let s_lower: Vec<DMatrix<f64>> = cls.cov_raw.iter().map(lower_from_raw).collect();
                let raw_mu = tt_dense(&cls.mean);
                let s_full = kron_all(&s_lower);
                let (mu, sigma_lower) = match model.parameterization() {
                    Parameterization::Direct => (raw_mu, s_full),
                    Parameterization::Whitened => {
                        let l = &kernels[kernel].lower;
                        (l * raw_mu, l * s_full)
                    }
                };
                DenseClass {
                    sigma: &sigma_lower * sigma_lower.transpose(),
                    mu,
                    sigma_lower,
                    kernel,
                }
            })
            .collect();
        DenseOracle {
            starts,
            spacings,
            sizes,
            kernels,
            classes,
            noise: model.noise_variance(),
        }
    }

    pub fn num_points(&self) -> usize {
        self.sizes.iter().product()
    }

    /// Dense interpolation weights of an interior point.
    pub fn weights(&self, x: &[f64]) -> DVector<f64> {
        let per: Vec<DMatrix<f64>> = (0..self.sizes.len())
            .map(|d| {
                DMatrix::from_fn(self.sizes[d], 1, |j, _| {
                    let node = self.starts[d] + j as f64 * self.spacings[d];
                    keys((x[d] - node) / self.spacings[d])
                })
            })
            .collect();
        let w = kron_all(&per);
        DVector::from_column_slice(w.as_slice())
    }

    /// `(m, s)` of class `c` at `x`, with `s` floored at zero.
    pub fn moments(&self, c: usize, x: &[f64]) -> (f64, f64) {
        let cls = &self.classes[c];
        let k = &self.kernels[cls.kernel];
        let w = self.weights(x);
        let m = w.dot(&cls.mu);
        let s = k.variance - (w.transpose() * &k.k * &w)[0] + (w.transpose() * &cls.sigma * &w)[0];
        (m, s.max(0.0))
    }

    /// `KL(N(μ, Σ) ‖ N(0, K))` through triangular solves.
    pub fn kl(&self, c: usize) -> f64 {
        let cls = &self.classes[c];
        let k = &self.kernels[cls.kernel];
        let lk = &k.lower;
        let a = lk.solve_lower_triangular(&cls.mu).expect("triangular solve");
        let b = lk
            .solve_lower_triangular(&cls.sigma_lower)
            .expect("triangular solve");
        let logdet_k: f64 = 2.0 * lk.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let logdet_s: f64 = 2.0 * cls.sigma_lower.diagonal().iter().map(|v| v.abs().ln()).sum::<f64>();
        0.5 * (b.norm_squared() + a.norm_squared() - self.num_points() as f64 + logdet_k - logdet_s)
    }

    pub fn regression_term(&self, x: &[f64], y: f64) -> f64 {
        let noise = self.noise.expect("regression oracle");
        let (m, s) = self.moments(0, x);
        -0.5 * (2.0 * std::f64::consts::PI * noise).ln() - ((y - m).powi(2) + s) / (2.0 * noise)
    }

    pub fn classification_term(&self, x: &[f64], label: usize) -> f64 {
        let moments: Vec<(f64, f64)> = (0..self.classes.len()).map(|c| self.moments(c, x)).collect();
        let a: Vec<f64> = moments.iter().map(|(m, s)| m + 0.5 * s).collect();
        let top = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + a.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        moments[label].0 - lse
    }

    pub fn elbo_regression(&self, x: &[Vec<f64>], y: &[f64], n_total: usize) -> f64 {
        let data: f64 = x.iter().zip(y).map(|(x, &y)| self.regression_term(x, y)).sum();
        n_total as f64 / x.len() as f64 * data - self.kl(0)
    }

    pub fn elbo_classification(&self, x: &[Vec<f64>], labels: &[usize], n_total: usize) -> f64 {
        let data: f64 = x
            .iter()
            .zip(labels)
            .map(|(x, &l)| self.classification_term(x, l))
            .sum();
        let kl: f64 = (0..self.classes.len()).map(|c| self.kl(c)).sum();
        n_total as f64 / x.len() as f64 * data - kl
    }

    /// Exact GP log marginal likelihood `log N(y | 0, K_nn + ν² I)` with the
    /// un-interpolated product RBF kernel.
    pub fn exact_log_marginal(&self, x: &[Vec<f64>], y: &[f64]) -> f64 {
        let k = &self.kernels[0];
        let noise = self.noise.expect("regression oracle");
        let n = x.len();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let r2: f64 = (0..x[i].len())
                .map(|d| ((x[i][d] - x[j][d]) / k.lengthscales[d]).powi(2))
                .sum();
            k.variance * (-0.5 * r2).exp() + if i == j { noise } else { 0.0 }
        });
        let chol = cov.cholesky().expect("SPD marginal covariance");
        let l = chol.l();
        let alpha = l.solve_lower_triangular(&DVector::from_column_slice(y)).unwrap();
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (alpha.norm_squared() + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Per-block relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` between the
/// analytic gradient and central differences of the ELBO.
pub fn gradient_errors(
    model: &TtGpModel,
    x: &[Vec<f64>],
    targets: BatchTargets<'_>,
    n_total: usize,
    step: f64,
) -> Vec<(String, f64, f64)> {
    let xr = refs(x);
    let (_, grad) = model.elbo_grad(&xr, targets, n_total, None).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grad
        .blocks()
        .iter()
        .map(|b| (b.name.clone(), b.values.to_vec()))
        .collect();
    let mut out = Vec::new();
    for (bi, (name, g)) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; g.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                {
                    let mut blocks = m.param_blocks_mut();
                    assert_eq!(&blocks[bi].name, name);
                    blocks[bi].values[k] += delta;
                }
                m.elbo(&xr, targets, n_total).unwrap()
            };
            *slot = (eval(step) - eval(-step)) / (2.0 * step);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nf: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = na.max(nf);
        let rel = if scale < 1e-9 { diff } else { diff / scale };
        out.push((name.clone(), rel, scale));
    }
    out
}
