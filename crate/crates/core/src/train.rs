//! Adam optimizer and the minibatch training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskKind, Targets};
use crate::elbo::{BatchTargets, ElboGrad};
use crate::error::{Error, Result};
use crate::interp::{weights_nd, Grid};
use crate::kernels::{LinearEmbedding, RbfParams, MAX_EMBED_DIM};
use crate::model::{ModelConfig, ParamGroup, Parameterization, TtGpModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub m0: usize,
    pub tt_rank: usize,
    /// Output dimension of the learned linear embedding; 0 disables it.
    pub embed_dim: usize,
    pub lengthscale: f64,
    pub variance: f64,
    pub noise: f64,
    /// Tie lengthscales across dimensions.
    pub tied_lengthscales: bool,
    pub per_class_kernels: bool,
    pub parameterization: Parameterization,
    /// Held-out evaluation every this many epochs (the last epoch always).
    pub eval_every: usize,
    /// After this many epochs the kernel, noise and embedding blocks use a
    /// tenth of the learning rate.
    pub hyper_lr_drop_after: Option<usize>,
    /// Momentum of the running embedding statistics.
    pub embed_momentum: f64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            m0: 10,
            tt_rank: 5,
            embed_dim: 0,
            lengthscale: 1.0,
            variance: 1.0,
            noise: 0.1,
            tied_lengthscales: false,
            per_class_kernels: false,
            parameterization: Parameterization::Whitened,
            eval_every: 1,
            hyper_lr_drop_after: None,
            embed_momentum: 0.1,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} must lie strictly between 0 and 1"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if self.m0 < 4 {
            return bad(format!("m0 = {} is below the cubic stencil width 4", self.m0));
        }
        if self.tt_rank == 0 {
            return bad("TT-rank must be at least 1".into());
        }
        if self.embed_dim > MAX_EMBED_DIM {
            return bad(format!("embedding dimension {} exceeds {MAX_EMBED_DIM}", self.embed_dim));
        }
        for (name, v) in [
            ("lengthscale", self.lengthscale),
            ("variance", self.variance),
            ("noise", self.noise),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("initial {name} {v} must be positive"));
            }
        }
        if self.eval_every == 0 {
            return bad("evaluation cadence must be positive".into());
        }
        if !(self.embed_momentum >= 0.0 && self.embed_momentum <= 1.0) {
            return bad("embedding momentum must lie in [0, 1]".into());
        }
        if self.workers == 0 {
            return bad("worker count must be positive".into());
        }
        Ok(())
    }
}

/// Per-block Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub names: Vec<String>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &TtGpModel) -> Self {
        let blocks = model.param_blocks();
        AdamState {
            step: 0,
            names: blocks.iter().map(|b| b.name.clone()).collect(),
            first: blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            second: blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
        }
    }

    /// One ascent step. `lr` gives the learning rate of each group.
    pub fn update(
        &mut self,
        model: &mut TtGpModel,
        grad: &ElboGrad,
        lr: impl Fn(ParamGroup) -> f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<()> {
        let gblocks = grad.blocks();
        let mut pblocks = model.param_blocks_mut();
        if gblocks.len() != pblocks.len() || pblocks.len() != self.names.len() {
            return Err(Error::Shape(format!(
                "{} parameter blocks, {} gradient blocks, {} optimizer blocks",
                pblocks.len(),
                gblocks.len(),
                self.names.len()
            )));
        }
        for (i, (p, g)) in pblocks.iter().zip(&gblocks).enumerate() {
            if p.name != g.name || p.name != self.names[i] || p.values.len() != g.values.len()
                || p.values.len() != self.first[i].len()
            {
                return Err(Error::Shape(format!("block {} does not match its gradient", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in pblocks.iter_mut().zip(&gblocks).enumerate() {
            let rate = lr(p.group);
            adam_step(p.values, g.values, &mut self.first[i], &mut self.second[i], rate, beta1, beta2, epsilon, c1, c2);
        }
        Ok(())
    }
}

/// Bias-corrected Adam ascent on one block.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bias1: f64,
    bias2: f64,
) {
    for k in 0..params.len() {
        let g = grads[k];
        first[k] = beta1 * first[k] + (1.0 - beta1) * g;
        second[k] = beta2 * second[k] + (1.0 - beta2) * g * g;
        let mhat = first[k] / bias1;
        let vhat = second[k] / bias2;
        params[k] += lr * mhat / (vhat.sqrt() + epsilon);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the minibatch ELBO estimates over the epoch.
    pub elbo: f64,
    /// Held-out r² or accuracy; NaN when not evaluated this epoch.
    pub metric: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// Model with the best held-out metric (the final model without held-out data).
    pub model: TtGpModel,
    pub history: Vec<EpochRecord>,
    pub state: AdamState,
    /// Metric of the returned model, if held-out data was given.
    pub best_metric: Option<f64>,
}

/// Writes the history as CSV with columns `epoch,elbo,metric,seconds`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,elbo,metric,seconds\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.elbo, r.metric, r.seconds));
    }
    s
}

/// Builds an initialized model for the training split.
pub fn init_model(train: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TtGpModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let (grid, embedding) = if config.embed_dim > 0 {
        if config.embed_dim > train.num_features {
            return Err(Error::Config(format!(
                "embedding dimension {} exceeds the {} input features",
                config.embed_dim, train.num_features
            )));
        }
        let mut e = LinearEmbedding::random(config.embed_dim, train.num_features, rng)?;
        e.reset_stats(train.rows())?;
        (Grid::build(&vec![(-1.0, 1.0); config.embed_dim], config.m0)?, Some(e))
    } else {
        let ranges: Vec<(f64, f64)> = train
            .feature_ranges()
            .into_iter()
            .map(|(lo, hi)| if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) })
            .collect();
        (Grid::build(&ranges, config.m0)?, None)
    };
    let dims = grid.num_dims();
    let ls = if config.tied_lengthscales {
        vec![config.lengthscale]
    } else {
        vec![config.lengthscale; dims]
    };
    let (task, num_classes) = match &train.targets {
        Targets::Real(_) => (TaskKind::Regression, 1),
        Targets::Labels(_) => (TaskKind::Classification, train.num_classes()),
    };
    let mc = ModelConfig {
        task,
        num_classes,
        grid,
        tt_rank: config.tt_rank,
        kernel: RbfParams::new(dims, &ls, config.variance)?,
        per_class_kernels: config.per_class_kernels,
        embedding,
        noise_variance: config.noise,
        parameterization: config.parameterization,
    };
    let mut model = TtGpModel::init(&mc, rng)?;
    model.feature_scaling = train.feature_scaling.clone();
    model.target_scaling = train.target_scaling;
    model.label_values = train.label_values.clone();
    Ok(model)
}

/// Held-out r² (regression, original units) or accuracy (classification)
/// of a model on a dataset in model input space.
pub fn evaluate(model: &TtGpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let prep = model.prepare()?;
    match &data.targets {
        Targets::Real(_) => {
            let y = data.original_targets().expect("regression targets");
            let mut pred = Vec::with_capacity(data.len());
            for row in data.rows() {
                let (m, _) = prep.latent_moments(0, row)?;
                pred.push(match model.target_scaling {
                    Some(t) => t.invert(m),
                    None => m,
                });
            }
            Ok(r_squared(&y, &pred))
        }
        Targets::Labels(labels) => {
            let mut correct = 0usize;
            for (row, &l) in data.rows().zip(labels) {
                let means = prep.class_means(row)?;
                let mut best = 0;
                for c in 1..means.len() {
                    if means[c] > means[best] {
                        best = c;
                    }
                }
                correct += usize::from(best == l);
            }
            Ok(correct as f64 / data.len() as f64)
        }
    }
}

/// Fraction of points with at least one coordinate outside the grid interior.
pub fn clamped_fraction(model: &TtGpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut n = 0usize;
    for row in data.rows() {
        let z = model.grid_input(row)?;
        n += usize::from(weights_nd(model.grid(), &z)?.any_clamped());
    }
    Ok(n as f64 / data.len() as f64)
}

pub fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Trains on a standardized dataset; `heldout` drives best-model selection.
pub fn train(train: &Dataset, heldout: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(h) = heldout {
        if h.task() != train.task() || h.num_features != train.num_features {
            return Err(Error::data("held-out set does not match the training set"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_model(train, config, &mut rng)?;
    let mut state = AdamState::new(&model);
    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?,
        )
    } else {
        None
    };

    let mut best: Option<(f64, TtGpModel)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let rows: Vec<&[f64]> = train.rows().collect();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let hyper_scale = match config.hyper_lr_drop_after {
            Some(after) if epoch > after => 0.1,
            _ => 1.0,
        };
        let lr = |g: ParamGroup| match g {
            ParamGroup::Variational => config.learning_rate,
            ParamGroup::Hyper => config.learning_rate * hyper_scale,
        };
        let mut elbo_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let x: Vec<&[f64]> = idx.iter().map(|&i| rows[i]).collect();
            let (value, grad) = match &train.targets {
                Targets::Real(y) => {
                    let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                    model.elbo_grad(&x, BatchTargets::Real(&yb), n, pool.as_ref())?
                }
                Targets::Labels(l) => {
                    let lb: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
                    model.elbo_grad(&x, BatchTargets::Labels(&lb), n, pool.as_ref())?
                }
            };
            state.update(&mut model, &grad, lr, config.beta1, config.beta2, config.epsilon)?;
            if let Some(e) = model.embedding_mut() {
                e.update_stats(x.iter().copied(), config.embed_momentum)?;
            }
            elbo_sum += value;
            batches += 1;
        }
        let elbo = elbo_sum / batches as f64;
        let evaluate_now = epoch % config.eval_every == 0 || epoch == config.epochs;
        let metric = match heldout {
            Some(h) if evaluate_now => {
                let m = evaluate(&model, h)?;
                if best.as_ref().is_none_or(|(b, _)| m > *b) {
                    best = Some((m, model.clone()));
                }
                m
            }
            _ => f64::NAN,
        };
        let seconds = start.elapsed().as_secs_f64();
        log::info!("epoch {epoch}: elbo {elbo:.6e}, metric {metric:.5}, {seconds:.2}s");
        history.push(EpochRecord {
            epoch,
            elbo,
            metric,
            seconds,
        });
    }

    let (model, best_metric) = match (best, heldout) {
        (Some((m, best_model)), _) => (best_model, Some(m)),
        (None, Some(h)) => {
            let m = evaluate(&model, h)?;
            (model, Some(m))
        }
        (None, None) => (model, None),
    };
    Ok(TrainOutcome {
        model,
        history,
        state,
        best_metric,
    })
}
