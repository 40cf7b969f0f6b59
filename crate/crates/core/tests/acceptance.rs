//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The two benchmark datasets are read from `$TTGP_DATA_DIR` (default:
//! `data/` at the workspace root):
//! - `powerplant.csv`: combined cycle power plant data, four features then
//!   the target, optional header row;
//! - `svmguide1`: LIBSVM training file, with `svmguide1.t` used as the
//!   held-out set when present.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use ttgp::checkpoint::{load_checkpoint, save_checkpoint};
use ttgp::data::{csv_has_header, load_csv, load_libsvm, prepare, Dataset, RawTable, TaskKind};
use ttgp::demo::{rank_study, synthetic_tensor};
use ttgp::elbo::BatchTargets;
use ttgp::interp::{weights_1d, Grid};
use ttgp::kernels::RbfParams;
use ttgp::model::Parameterization;
use ttgp::train::{evaluate, train, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("TTGP_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")))
}

fn err(e: ttgp::Error) -> String {
    e.to_string()
}

fn powerplant() -> Outcome {
    let path = data_dir().join("powerplant.csv");
    if !path.exists() {
        return Err(format!("dataset not found at {}", path.display()));
    }
    let header = csv_has_header(&path).map_err(err)?;
    let raw = load_csv(&path, None, header, true).map_err(err)?;
    let (tr, te) = prepare(raw, TaskKind::Regression, 0.1, 0).map_err(err)?;
    let config = TrainConfig {
        epochs: 100,
        batch_size: 256,
        learning_rate: 0.01,
        m0: 35,
        tt_rank: 30,
        eval_every: 5,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&tr, te.as_ref(), &config).map_err(err)?;
    let per_epoch = start.elapsed().as_secs_f64() / config.epochs as f64;
    let r2 = out.best_metric.unwrap_or(f64::NAN);
    ensure(r2 >= 0.93, || format!("held-out r2 {r2:.4} < 0.93"))?;
    ensure(per_epoch < 30.0, || format!("{per_epoch:.1} s/epoch"))?;
    Ok(format!("r2 {r2:.4}, {per_epoch:.2} s/epoch"))
}

fn svmguide1() -> Outcome {
    let dir = data_dir();
    let path = dir.join("svmguide1");
    if !path.exists() {
        return Err(format!("dataset not found at {}", path.display()));
    }
    let train_raw = load_libsvm(&path, None).map_err(err)?;
    let test_path = dir.join("svmguide1.t");
    let (tr, te) = if test_path.exists() {
        let test_raw = load_libsvm(&test_path, Some(train_raw.num_features)).map_err(err)?;
        let n_train = train_raw.len();
        let mut all = train_raw;
        all.features.extend(test_raw.features);
        all.targets.extend(test_raw.targets);
        // one label mapping for both parts
        let data = Dataset::from_raw(all, TaskKind::Classification).map_err(err)?;
        let mut tr = data.subset(&(0..n_train).collect::<Vec<_>>());
        let mut te = data.subset(&(n_train..data.len()).collect::<Vec<_>>());
        let (fs, ts) = tr.fit_scaling();
        tr.standardize_with(&fs, ts).map_err(err)?;
        te.standardize_with(&fs, ts).map_err(err)?;
        (tr, te)
    } else {
        let (tr, te) = prepare(train_raw, TaskKind::Classification, 0.1, 0).map_err(err)?;
        (tr, te.expect("non-zero test fraction"))
    };
    let config = TrainConfig {
        epochs: 50,
        batch_size: 256,
        learning_rate: 0.01,
        m0: 20,
        tt_rank: 15,
        eval_every: 5,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&tr, Some(&te), &config).map_err(err)?;
    let per_epoch = start.elapsed().as_secs_f64() / config.epochs as f64;
    let acc = out.best_metric.unwrap_or(f64::NAN);
    ensure(acc >= 0.955, || format!("held-out accuracy {acc:.4} < 0.955"))?;
    ensure(per_epoch < 10.0, || format!("{per_epoch:.1} s/epoch"))?;
    Ok(format!("accuracy {acc:.4} on {} rows, {per_epoch:.2} s/epoch", te.len()))
}

fn ttsvd_demo() -> Outcome {
    let tensor = synthetic_tensor(4, 5, 0.1, 0).map_err(err)?;
    let rows = rank_study(&tensor, 25).map_err(err)?;
    for w in rows.windows(2) {
        ensure(w[1].mse <= w[0].mse, || format!("mse rises from r={} to r={}", w[0].rank, w[1].rank))?;
    }
    let last = rows.last().ok_or("no ranks studied")?;
    ensure(last.rank == 25 && last.mse < 1e-20, || format!("mse {:e} at r={}", last.mse, last.rank))?;
    // strict growth while the approximation is still inexact
    for w in rows.windows(2).filter(|w| w[0].mse > 1e-20) {
        ensure(w[1].cosine > w[0].cosine, || {
            format!("cosine does not increase from r={} to r={}", w[0].rank, w[1].rank)
        })?;
    }
    Ok(format!("mse {:e} at r=25", last.mse))
}

fn tiny_spec(i: usize, rng: &mut ChaCha8Rng, classification: bool) -> ModelSpec {
    let dims = 1 + i % 3;
    let m0 = 4 + rng.random_range(0..2);
    let rank = 1 + rng.random_range(0..3);
    let mut spec = if classification {
        ModelSpec::classification(dims, m0, rank, 2 + i % 2)
    } else {
        ModelSpec::regression(dims, m0, rank)
    };
    spec.parameterization = if i.is_multiple_of(2) {
        Parameterization::Whitened
    } else {
        Parameterization::Direct
    };
    spec
}

fn dense_oracle() -> Outcome {
    let mut rng = rng(1000);
    let mut worst: f64 = 0.0;
    for classification in [false, true] {
        for i in 0..20 {
            let spec = tiny_spec(i, &mut rng, classification);
            let model = random_model(&spec, &mut rng);
            let n = rng.random_range(1..=50);
            let x = interior_points(&mut rng, n, spec.dims);
            let oracle = DenseOracle::new(&model);
            let (fast, slow) = if classification {
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.classes)).collect();
                (
                    model.elbo_classification(&refs(&x), &labels, n).map_err(err)?,
                    oracle.elbo_classification(&x, &labels, n),
                )
            } else {
                let y = normal_vec(&mut rng, n, 1.0);
                (model.elbo_regression(&refs(&x), &y, n).map_err(err)?, oracle.elbo_regression(&x, &y, n))
            };
            let e = rel_err(fast, slow);
            ensure(e < 1e-8, || format!("instance {i}: relative error {e:e}"))?;
            worst = worst.max(e);
        }
    }
    Ok(format!("40 instances, worst relative error {worst:.1e}"))
}

fn gradient_suite() -> Outcome {
    let mut rng = rng(2000);
    let mut worst: f64 = 0.0;
    let mut seen = std::collections::BTreeSet::new();
    for classification in [false, true] {
        for i in 0..10 {
            let dims = 1 + i % 3;
            let mut spec = if classification {
                ModelSpec::classification(dims, 5, 1 + i % 3, 2 + i % 2)
            } else {
                ModelSpec::regression(dims, 5, 1 + i % 3)
            };
            if i % 2 == 1 {
                spec.parameterization = Parameterization::Direct;
            }
            spec.embed_from = (i % 3 == 1).then_some(dims + 1);
            let model = random_model(&spec, &mut rng);
            let n = rng.random_range(3..12);
            let x: Vec<Vec<f64>> = match spec.embed_from {
                Some(d) => (0..n).map(|_| normal_vec(&mut rng, d, 0.8)).collect(),
                None => interior_points(&mut rng, n, dims),
            };
            let errors = if classification {
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.classes)).collect();
                gradient_errors(&model, &x, BatchTargets::Labels(&labels), 2 * n, 1e-5)
            } else {
                let y = normal_vec(&mut rng, n, 1.0);
                gradient_errors(&model, &x, BatchTargets::Real(&y), 2 * n, 1e-5)
            };
            for (name, rel, _) in errors {
                ensure(rel < 1e-4, || format!("block {name}: relative error {rel:e}"))?;
                worst = worst.max(rel);
                let kind = name.split('.').next_back().unwrap_or_default();
                seen.insert(if kind.starts_with("core") || kind.starts_with("cov") {
                    kind.trim_end_matches(char::is_numeric).to_string()
                } else {
                    kind.to_string()
                });
            }
        }
    }
    for block in ["core", "cov", "log_lengthscales", "log_variance", "log_noise", "projection"] {
        ensure(seen.contains(block), || format!("block {block} never checked"))?;
    }
    Ok(format!("20 instances, worst relative error {worst:.1e}"))
}

fn bounds() -> Outcome {
    let mut rng = rng(3000);
    let mut min_kl = f64::INFINITY;
    for i in 0..100 {
        let spec = tiny_spec(i, &mut rng, i % 2 == 0);
        let model = random_model(&spec, &mut rng);
        for c in 0..model.num_classes() {
            let kl = model.kl_term(c).map_err(err)?;
            ensure(kl >= -1e-8, || format!("model {i} class {c}: KL {kl}"))?;
            min_kl = min_kl.min(kl);
        }
    }

    let samples = 100_000;
    for i in 0..20 {
        let classes = 2 + i % 3;
        let spec = ModelSpec::classification(1 + i % 2, 5, 2, classes);
        let model = random_model(&spec, &mut rng);
        let x = interior_points(&mut rng, 1, spec.dims);
        let label = rng.random_range(0..classes);
        let bound = model.data_terms(&refs(&x), BatchTargets::Labels(&[label])).map_err(err)?[0];
        let moments: Vec<(f64, f64)> = (0..classes)
            .map(|c| model.latent_moments(c, &x[0]))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let mut f = vec![0.0; classes];
        for _ in 0..samples {
            for (c, (m, s)) in moments.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                f[c] = m + s.sqrt() * z;
            }
            let top = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = f[label] - top - f.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / samples as f64;
        let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
        ensure(bound <= mean + 3.0 * se, || format!("point {i}: bound {bound} vs MC {mean} ± {se}"))?;
    }

    for i in 0..20 {
        let spec = tiny_spec(i, &mut rng, false);
        let model = random_model(&spec, &mut rng);
        let n = rng.random_range(1..=30);
        let x = interior_points(&mut rng, n, spec.dims);
        let y = normal_vec(&mut rng, n, 1.0);
        let elbo = model.elbo_regression(&refs(&x), &y, n).map_err(err)?;
        let lml = DenseOracle::new(&model).exact_log_marginal(&x, &y);
        ensure(elbo <= lml + 1e-6, || format!("instance {i}: elbo {elbo} > log marginal {lml}"))?;
    }
    Ok(format!("min KL {min_kl:.2e}; MC and marginal-likelihood bounds hold"))
}

/// Largest error of `k(x, y) ≈ Σ_j w_j(x) k(z_j, y)` over test points x
/// and a fixed set of targets y.
fn cross_covariance_error(m0: usize, kernel: &RbfParams) -> Result<f64, String> {
    let grid = Grid::build(&[(-1.0, 1.0)], m0).map_err(err)?;
    let axis = &grid.axes()[0];
    let targets: Vec<f64> = (0..41).map(|i| -1.0 + 0.05 * i as f64).collect();
    let mut worst: f64 = 0.0;
    for i in 0..=400 {
        let x = -1.0 + 2.0 * i as f64 / 400.0;
        let s = weights_1d(axis, x).map_err(err)?;
        for &y in &targets {
            let approx: f64 = (0..4).map(|k| s.weights[k] * kernel.eval(&[axis.point(s.start + k)], &[y])).sum();
            worst = worst.max((approx - kernel.eval(&[x], &[y])).abs());
        }
    }
    Ok(worst)
}

fn interpolation() -> Outcome {
    let grid = Grid::build(&[(-1.0, 1.0)], 16).map_err(err)?;
    let axis = &grid.axes()[0];
    for j in 1..axis.size() - 2 {
        let s = weights_1d(axis, axis.point(j)).map_err(err)?;
        for k in 0..4 {
            let expected = if s.start + k == j { 1.0 } else { 0.0 };
            ensure((s.weights[k] - expected).abs() < 1e-12, || format!("node {j} is not one-hot"))?;
        }
    }
    let mut rng = rng(4000);
    for _ in 0..1000 {
        let s = weights_1d(axis, rng.random_range(-1.0..=1.0)).map_err(err)?;
        let total: f64 = s.weights.iter().sum();
        ensure((total - 1.0).abs() <= 1e-10, || format!("weights sum to {total}"))?;
    }
    let kernel = RbfParams::new(1, &[0.5], 1.0).map_err(err)?;
    let coarse = cross_covariance_error(16, &kernel)?;
    let fine = cross_covariance_error(32, &kernel)?;
    let ratio = fine / coarse;
    ensure(ratio <= 0.6, || format!("error ratio {ratio:.3}"))?;
    Ok(format!("max error {coarse:.2e} -> {fine:.2e}, ratio {ratio:.3}"))
}

fn sine_data(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let features: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets = features.iter().map(|x| x.sin() + noise.sample(&mut rng)).collect();
    RawTable { num_features: 1, features, targets }
}

fn blobs_data(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.6).unwrap();
    let (mut features, mut targets) = (Vec::new(), Vec::new());
    for i in 0..n {
        let c = i % 3;
        let angle = 2.0 * std::f64::consts::PI * c as f64 / 3.0;
        features.push(3.0 * angle.cos() + noise.sample(&mut rng));
        features.push(3.0 * angle.sin() + noise.sample(&mut rng));
        targets.push(c as f64);
    }
    RawTable { num_features: 2, features, targets }
}

fn synthetic_config() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 64,
        learning_rate: 0.05,
        m0: 16,
        tt_rank: 3,
        ..TrainConfig::default()
    }
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let (tr, te) = prepare(sine_data(600, 1), TaskKind::Regression, 0.2, 1).map_err(err)?;
    let te = te.expect("held-out part");
    let sine = train(&tr, Some(&te), &synthetic_config()).map_err(err)?;
    let r2 = evaluate(&sine.model, &te).map_err(err)?;

    let (tr, te) = prepare(blobs_data(600, 2), TaskKind::Classification, 0.2, 2).map_err(err)?;
    let te = te.expect("held-out part");
    let blobs = train(&tr, Some(&te), &synthetic_config()).map_err(err)?;
    let acc = evaluate(&blobs.model, &te).map_err(err)?;
    let seconds = start.elapsed().as_secs_f64();

    ensure(r2 >= 0.95, || format!("sine r2 {r2:.4}"))?;
    ensure(acc >= 0.95, || format!("blobs accuracy {acc:.4}"))?;
    ensure(seconds < 60.0, || format!("took {seconds:.1} s"))?;
    Ok(format!("sine r2 {r2:.4}, blobs accuracy {acc:.4}, {seconds:.1} s"))
}

fn determinism() -> Outcome {
    let (tr, te) = prepare(blobs_data(300, 3), TaskKind::Classification, 0.2, 3).map_err(err)?;
    let config = TrainConfig { epochs: 5, ..synthetic_config() };
    let a = train(&tr, te.as_ref(), &config).map_err(err)?;
    let b = train(&tr, te.as_ref(), &config).map_err(err)?;
    let bits = |h: &[ttgp::train::EpochRecord]| -> Vec<(u64, u64)> {
        h.iter().map(|r| (r.elbo.to_bits(), r.metric.to_bits())).collect()
    };
    ensure(bits(&a.history) == bits(&b.history), || "histories differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&a.model, Some(&a.state), &path).map_err(err)?;
    let (loaded, _) = load_checkpoint(&path).map_err(err)?;
    let rows: Vec<&[f64]> = (0..32).map(|i| tr.row(i)).collect();
    let ttgp::data::Targets::Labels(labels) = &tr.targets else {
        return Err("expected labels".into());
    };
    let before = a.model.elbo_classification(&rows, &labels[..32], tr.len()).map_err(err)?;
    let after = loaded.elbo_classification(&rows, &labels[..32], tr.len()).map_err(err)?;
    ensure(before.to_bits() == after.to_bits(), || format!("ELBO {before} became {after}"))?;
    Ok(format!("{} epochs reproduced; checkpoint ELBO {before}", a.history.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("powerplant regression", powerplant),
        ("svmguide1 classification", svmguide1),
        ("TT-SVD rank study", ttsvd_demo),
        ("dense-oracle ELBO equivalence", dense_oracle),
        ("gradient suite", gradient_suite),
        ("bound properties", bounds),
        ("interpolation", interpolation),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("determinism and persistence", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({detail})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
