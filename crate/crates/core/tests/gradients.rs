//! Analytic ELBO gradients against central finite differences, block by block.

mod common;

use common::*;
use rand::Rng;
use ttgp::elbo::BatchTargets;
use ttgp::model::Parameterization;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn spec(i: usize, classification: bool) -> ModelSpec {
    let dims = 1 + i % 3;
    let mut s = if classification {
        ModelSpec::classification(dims, 5, 1 + i % 3, 2 + i % 2)
    } else {
        ModelSpec::regression(dims, 5, 1 + i % 3)
    };
    s.parameterization = if i.is_multiple_of(2) {
        Parameterization::Whitened
    } else {
        Parameterization::Direct
    };
    s.embed_from = (i % 3 == 1).then_some(dims + 1);
    s.per_class_kernels = classification && i % 4 == 2;
    s.tied = i % 5 == 4;
    s
}

fn check(errors: &[(String, f64, f64)], label: &str) {
    for (name, rel, scale) in errors {
        assert!(*rel < TOL, "{label}: block {name} relative error {rel:.2e} (norm {scale:.2e})");
    }
}

fn inputs(spec: &ModelSpec, rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    match spec.embed_from {
        // embedded points land near the grid centre after normalization
        Some(d) => (0..n).map(|_| normal_vec(rng, d, 0.8)).collect(),
        None => interior_points(rng, n, spec.dims),
    }
}

#[test]
fn regression_blocks_match_finite_differences() {
    let mut rng = rng(11);
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..10 {
        let spec = spec(i, false);
        let model = random_model(&spec, &mut rng);
        let n = rng.random_range(3..12);
        let x = inputs(&spec, &mut rng, n);
        let y = normal_vec(&mut rng, n, 1.0);
        let errors = gradient_errors(&model, &x, BatchTargets::Real(&y), 3 * n, STEP);
        check(&errors, &format!("regression instance {i}"));
        seen.extend(errors.iter().map(|e| e.0.split('.').next_back().unwrap().to_string()));
    }
    for block in ["log_lengthscales", "log_variance", "log_noise", "projection"] {
        assert!(seen.contains(block), "block {block} never checked");
    }
}

#[test]
fn classification_blocks_match_finite_differences() {
    let mut rng = rng(12);
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..10 {
        let spec = spec(i, true);
        let model = random_model(&spec, &mut rng);
        let n = rng.random_range(3..12);
        let x = inputs(&spec, &mut rng, n);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.classes)).collect();
        let errors = gradient_errors(&model, &x, BatchTargets::Labels(&labels), 2 * n, STEP);
        check(&errors, &format!("classification instance {i}"));
        seen.extend(errors.iter().map(|e| e.0.split('.').next_back().unwrap().to_string()));
    }
    for block in ["log_lengthscales", "log_variance", "projection"] {
        assert!(seen.contains(block), "block {block} never checked");
    }
}

/// Small full-batch ascent steps never decrease the ELBO.
#[test]
fn full_batch_ascent_is_monotone() {
    let mut rng = rng(13);
    for parameterization in [Parameterization::Whitened, Parameterization::Direct] {
        let mut spec = ModelSpec::regression(2, 6, 2);
        spec.parameterization = parameterization;
        let mut model = random_model(&spec, &mut rng);
        let x = interior_points(&mut rng, 30, 2);
        let y: Vec<f64> = x.iter().map(|r| (2.0 * r[0]).sin() * r[1].cos()).collect();
        let xr = refs(&x);
        let mut prev = model.elbo_regression(&xr, &y, 30).unwrap();
        for it in 0..50 {
            let (_, grad) = model.elbo_grad(&xr, BatchTargets::Real(&y), 30, None).unwrap();
            let g: Vec<Vec<f64>> = grad.blocks().iter().map(|b| b.values.to_vec()).collect();
            let norm: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let step = 1e-3 / norm.max(1.0);
            for (block, gb) in model.param_blocks_mut().into_iter().zip(&g) {
                for (v, d) in block.values.iter_mut().zip(gb) {
                    *v += step * d;
                }
            }
            let next = model.elbo_regression(&xr, &y, 30).unwrap();
            assert!(next >= prev - 1e-10, "{parameterization:?} iteration {it}: {prev} -> {next}");
            prev = next;
        }
    }
}
