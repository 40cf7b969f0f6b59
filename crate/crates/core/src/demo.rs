//! TT-rank approximation study: how well TT-SVD truncations of a dense
//! tensor reproduce it as the rank bound grows.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tt::{DenseTensor, TtVector};

/// Largest tensor the demo will materialize.
pub const MAX_DEMO_ENTRIES: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankRow {
    pub rank: usize,
    pub mse: f64,
    pub cosine: f64,
}

/// `Π_d sin(π i_d / m0)` with 1-based `i_d`, plus iid `N(0, noise²)`.
pub fn synthetic_tensor(dims: usize, m0: usize, noise: f64, seed: u64) -> Result<DenseTensor> {
    if dims == 0 || m0 == 0 {
        return Err(Error::InvalidInput(format!("synthetic tensor needs dims ≥ 1 and m0 ≥ 1, got {dims} and {m0}")));
    }
    check_size(&vec![m0; dims])?;
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidInput(format!("noise level {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = std::f64::consts::PI / m0 as f64;
    DenseTensor::from_fn(vec![m0; dims], |idx| {
        let smooth: f64 = idx.iter().map(|&i| (step * (i + 1) as f64).sin()).product();
        smooth + normal.sample(&mut rng)
    })
}

/// Parses a tensor file: the first non-empty line lists the mode sizes, the
/// rest holds the values in row-major order (last index fastest). Values and
/// sizes may be separated by whitespace or commas; `#` starts a comment.
pub fn parse_tensor(text: &str) -> Result<DenseTensor> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (shape_line, header) = lines.next().ok_or_else(|| Error::data("tensor file is empty"))?;
    let shape = tokens(header)
        .map(|t| match t.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(data_at(shape_line, format!("bad mode size {t:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if shape.is_empty() {
        return Err(data_at(shape_line, "shape line is empty".into()));
    }
    check_size(&shape)?;
    let mut values = Vec::new();
    for (line, body) in lines {
        for t in tokens(body) {
            let v: f64 = t
                .parse()
                .map_err(|_| data_at(line, format!("bad value {t:?}")))?;
            if !v.is_finite() {
                return Err(data_at(line, format!("non-finite value {t:?}")));
            }
            values.push(v);
        }
    }
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        return Err(Error::data(format!(
            "shape {shape:?} needs {expected} values, file has {}",
            values.len()
        )));
    }
    DenseTensor::new(shape, values)
}

pub fn load_tensor(path: &Path) -> Result<DenseTensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tensor(&text).map_err(|e| e.at_path(path))
}

/// One row per rank bound `1..=max_rank`.
pub fn rank_study(tensor: &DenseTensor, max_rank: usize) -> Result<Vec<RankRow>> {
    if max_rank == 0 {
        return Err(Error::InvalidInput("max rank must be at least 1".into()));
    }
    let truth = tensor.data();
    let norm = tensor.frobenius_norm();
    (1..=max_rank)
        .map(|rank| {
            let approx = TtVector::from_dense(tensor, &[rank], 0.0)?.to_dense()?;
            let mut sq = 0.0;
            let mut dot = 0.0;
            let mut approx_sq = 0.0;
            for (&t, &a) in truth.iter().zip(approx.data()) {
                sq += (t - a) * (t - a);
                dot += t * a;
                approx_sq += a * a;
            }
            let denom = norm * approx_sq.sqrt();
            Ok(RankRow {
                rank,
                mse: sq / truth.len() as f64,
                cosine: if denom > 0.0 { dot / denom } else { 0.0 },
            })
        })
        .collect()
}

fn tokens(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty())
}

fn data_at(line: usize, message: String) -> Error {
    Error::Data {
        path: None,
        line: Some(line),
        message,
    }
}

fn check_size(shape: &[usize]) -> Result<()> {
    let entries = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .unwrap_or(usize::MAX);
    if entries > MAX_DEMO_ENTRIES {
        return Err(Error::ResourceLimit {
            entries,
            cap: MAX_DEMO_ENTRIES,
        });
    }
    Ok(())
}
