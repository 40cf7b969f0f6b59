//! Binary checkpoint files.
//!
//! Layout (little-endian): magic, format version, payload length, a header
//! with the structural sizes, named blocks of `f64` values (name length,
//! name, value count, values), then a CRC-32 of everything before it.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::{FeatureScaling, TargetScaling};
use crate::error::{CheckpointError, Error, Result};
use crate::interp::{Grid, GridAxis};
use crate::kernels::{LinearEmbedding, RbfParams};
use crate::model::{ClassPosterior, Parameterization, TtGpModel};
use crate::train::AdamState;
use crate::tt::{TtCore, TtVector};

pub const MAGIC: &[u8; 8] = b"TTGPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Structural description stored ahead of the parameter blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub regression: bool,
    pub parameterization: Parameterization,
    pub mode_sizes: Vec<usize>,
    pub num_classes: usize,
    pub num_kernels: usize,
    pub lengthscale_count: usize,
    pub tt_ranks: Vec<usize>,
    /// `(output, input)` dimensions, `(0, 0)` without an embedding.
    pub embedding_shape: (usize, usize),
    pub has_feature_scaling: bool,
    pub has_target_scaling: bool,
    pub adam_step: Option<u64>,
}

pub fn save_checkpoint(model: &TtGpModel, state: Option<&AdamState>, path: &Path) -> Result<()> {
    let bytes = encode(model, state)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(TtGpModel, Option<AdamState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads only the header, after verifying the checksum.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let mut r = verified_reader(bytes)?;
    Ok(read_header_fields(&mut r)?)
}

pub fn encode(model: &TtGpModel, state: Option<&AdamState>) -> Result<Vec<u8>> {
    let ranks = model.classes()[0].mean.ranks();
    if model.classes().iter().any(|c| c.mean.ranks() != ranks) {
        return Err(Error::InvalidInput("classes with different TT-ranks cannot be saved".into()));
    }
    let grid = model.grid();
    let header = CheckpointHeader {
        regression: model.log_noise().is_some(),
        parameterization: model.parameterization(),
        mode_sizes: grid.mode_sizes(),
        num_classes: model.num_classes(),
        num_kernels: model.kernels().len(),
        lengthscale_count: model.kernels()[0].log_lengthscales().len(),
        tt_ranks: ranks,
        embedding_shape: model.embedding().map_or((0, 0), |e| (e.output_dim(), e.input_dim())),
        has_feature_scaling: model.feature_scaling.is_some(),
        has_target_scaling: model.target_scaling.is_some(),
        adam_step: state.map(|s| s.step),
    };

    let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
    blocks.push(("grid.start".into(), grid.axes().iter().map(|a| a.start()).collect()));
    blocks.push(("grid.spacing".into(), grid.axes().iter().map(|a| a.spacing()).collect()));
    for b in model.param_blocks() {
        blocks.push((b.name, b.values.to_vec()));
    }
    if let Some(e) = model.embedding() {
        blocks.push(("embedding.running_mean".into(), e.running_mean().to_vec()));
        blocks.push(("embedding.running_std".into(), e.running_std().to_vec()));
    }
    if let Some(s) = &model.feature_scaling {
        blocks.push(("scaling.feature_means".into(), s.means.clone()));
        blocks.push(("scaling.feature_stds".into(), s.stds.clone()));
    }
    if let Some(t) = model.target_scaling {
        blocks.push(("scaling.target".into(), vec![t.mean, t.std]));
    }
    blocks.push(("label_values".into(), model.label_values.clone()));
    if let Some(s) = state {
        for (i, name) in s.names.iter().enumerate() {
            blocks.push((format!("adam.first.{name}"), s.first[i].clone()));
            blocks.push((format!("adam.second.{name}"), s.second[i].clone()));
        }
    }

    let mut body = Vec::new();
    write_header(&mut body, &header);
    put_u32(&mut body, blocks.len() as u32);
    for (name, values) in &blocks {
        put_u32(&mut body, name.len() as u32);
        body.extend_from_slice(name.as_bytes());
        put_u64(&mut body, values.len() as u64);
        for v in values {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(body.len() + 28);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, body.len() as u64);
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(TtGpModel, Option<AdamState>)> {
    let mut r = verified_reader(bytes)?;
    let header = read_header_fields(&mut r)?;
    let count = r.u32()? as usize;
    let mut blocks: HashMap<String, Vec<f64>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| malformed("block name is not UTF-8"))?;
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if blocks.insert(name.clone(), values).is_some() {
            return Err(malformed(&format!("duplicate block {name}")).into());
        }
    }
    if !r.at_end() {
        return Err(malformed("trailing bytes after the last block").into());
    }
    build(&header, blocks)
}

fn build(h: &CheckpointHeader, mut blocks: HashMap<String, Vec<f64>>) -> Result<(TtGpModel, Option<AdamState>)> {
    let dims = h.mode_sizes.len();
    let mut take = |name: &str, len: Option<usize>| -> Result<Vec<f64>> {
        let v = blocks
            .remove(name)
            .ok_or_else(|| malformed(&format!("missing block {name}")))?;
        if let Some(n) = len {
            if v.len() != n {
                return Err(malformed(&format!("block {name} has {} values, expected {n}", v.len())).into());
            }
        }
        Ok(v)
    };

    let starts = take("grid.start", Some(dims))?;
    let spacings = take("grid.spacing", Some(dims))?;
    let axes = (0..dims)
        .map(|d| GridAxis::new(starts[d], spacings[d], h.mode_sizes[d]))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| malformed(&e.to_string()))?;
    let grid = Grid::new(axes).map_err(|e| malformed(&e.to_string()))?;

    let mut classes = Vec::with_capacity(h.num_classes);
    for c in 0..h.num_classes {
        let mut cores = Vec::with_capacity(dims);
        for d in 0..dims {
            let (rl, n, rr) = (h.tt_ranks[d], h.mode_sizes[d], h.tt_ranks[d + 1]);
            let data = take(&format!("class{c}.core{d}"), Some(rl * n * rr))?;
            cores.push(TtCore::from_vec(rl, n, rr, data)?);
        }
        let mut cov_raw = Vec::with_capacity(dims);
        for d in 0..dims {
            let n = h.mode_sizes[d];
            let data = take(&format!("class{c}.cov{d}"), Some(n * n))?;
            cov_raw.push(DMatrix::from_column_slice(n, n, &data));
        }
        classes.push(ClassPosterior {
            mean: TtVector::new(cores).map_err(|e| malformed(&e.to_string()))?,
            cov_raw,
        });
    }
    let mut kernels = Vec::with_capacity(h.num_kernels);
    for k in 0..h.num_kernels {
        let ls = take(&format!("kernel{k}.log_lengthscales"), Some(h.lengthscale_count))?;
        let lv = take(&format!("kernel{k}.log_variance"), Some(1))?;
        kernels.push(RbfParams::from_logs(dims, ls, lv[0]).map_err(|e| malformed(&e.to_string()))?);
    }
    let log_noise = if h.regression {
        Some(take("log_noise", Some(1))?[0])
    } else {
        None
    };
    let embedding = if h.embedding_shape != (0, 0) {
        let (out, inp) = h.embedding_shape;
        let p = take("embedding.projection", Some(out * inp))?;
        let mean = take("embedding.running_mean", Some(out))?;
        let std = take("embedding.running_std", Some(out))?;
        Some(
            LinearEmbedding::new(DMatrix::from_column_slice(out, inp, &p))
                .and_then(|e| e.with_stats(mean, std))
                .map_err(|e| malformed(&e.to_string()))?,
        )
    } else {
        None
    };
    let mut model = TtGpModel::new(h.parameterization, grid, kernels, embedding, log_noise, classes)
        .map_err(|e| malformed(&e.to_string()))?;
    if h.has_feature_scaling {
        let n = model.input_dim();
        model.feature_scaling = Some(FeatureScaling {
            means: take("scaling.feature_means", Some(n))?,
            stds: take("scaling.feature_stds", Some(n))?,
        });
    }
    if h.has_target_scaling {
        let t = take("scaling.target", Some(2))?;
        model.target_scaling = Some(TargetScaling { mean: t[0], std: t[1] });
    }
    model.label_values = take("label_values", None)?;

    let state = match h.adam_step {
        Some(step) => {
            let mut s = AdamState::new(&model);
            s.step = step;
            for i in 0..s.names.len() {
                let len = s.first[i].len();
                s.first[i] = take(&format!("adam.first.{}", s.names[i]), Some(len))?;
                s.second[i] = take(&format!("adam.second.{}", s.names[i]), Some(len))?;
            }
            Some(s)
        }
        None => None,
    };
    if let Some(name) = blocks.keys().next() {
        return Err(malformed(&format!("unexpected block {name}")).into());
    }
    Ok((model, state))
}

fn malformed(msg: &str) -> CheckpointError {
    CheckpointError::Malformed(msg.to_string())
}

/// Checks magic, version, length and checksum; returns a reader over the
/// payload.
fn verified_reader(bytes: &[u8]) -> Result<Reader<'_>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body_len = r.u64()? as usize;
    let body_start = r.pos;
    let end = body_start.checked_add(body_len).ok_or(CheckpointError::Truncated)?;
    if bytes.len() < end + 4 {
        return Err(CheckpointError::Truncated);
    }
    if bytes.len() > end + 4 {
        return Err(malformed("trailing bytes after the checksum"));
    }
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    Ok(Reader {
        buf: &bytes[..end],
        pos: body_start,
    })
}

fn write_header(out: &mut Vec<u8>, h: &CheckpointHeader) {
    out.push(u8::from(h.regression));
    out.push(match h.parameterization {
        Parameterization::Direct => 0,
        Parameterization::Whitened => 1,
    });
    put_u32(out, h.mode_sizes.len() as u32);
    for &m in &h.mode_sizes {
        put_u32(out, m as u32);
    }
    put_u32(out, h.num_classes as u32);
    put_u32(out, h.num_kernels as u32);
    put_u32(out, h.lengthscale_count as u32);
    for &r in &h.tt_ranks {
        put_u32(out, r as u32);
    }
    put_u32(out, h.embedding_shape.0 as u32);
    put_u32(out, h.embedding_shape.1 as u32);
    out.push(u8::from(h.has_feature_scaling) | (u8::from(h.has_target_scaling) << 1));
    match h.adam_step {
        Some(s) => {
            out.push(1);
            put_u64(out, s);
        }
        None => out.push(0),
    }
}

fn read_header_fields(r: &mut Reader<'_>) -> Result<CheckpointHeader, CheckpointError> {
    let regression = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(malformed(&format!("bad task tag {v}"))),
    };
    let parameterization = match r.u8()? {
        0 => Parameterization::Direct,
        1 => Parameterization::Whitened,
        v => return Err(malformed(&format!("bad parameterization tag {v}"))),
    };
    let dims = r.u32()? as usize;
    if dims == 0 || dims > 64 {
        return Err(malformed(&format!("implausible dimension count {dims}")));
    }
    let mode_sizes = (0..dims).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let num_classes = r.u32()? as usize;
    let num_kernels = r.u32()? as usize;
    let lengthscale_count = r.u32()? as usize;
    let tt_ranks = (0..=dims).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let embedding_shape = (r.u32()? as usize, r.u32()? as usize);
    let flags = r.u8()?;
    let adam_step = match r.u8()? {
        0 => None,
        1 => Some(r.u64()?),
        v => return Err(malformed(&format!("bad optimizer tag {v}"))),
    };
    Ok(CheckpointHeader {
        regression,
        parameterization,
        mode_sizes,
        num_classes,
        num_kernels,
        lengthscale_count,
        tt_ranks,
        embedding_shape,
        has_feature_scaling: flags & 1 != 0,
        has_target_scaling: flags & 2 != 0,
        adam_step,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}
