//! Binary model checkpoints.
//!
//! Layout (little-endian): `"GSCK"`, version `u16`, the model config
//! (input dim `u32`, classes `u32`, hidden count `u8`, hidden dims `u32`
//! each, dropout `f64`, bn momentum `f64`, bn epsilon `f64`), then every
//! parameter array as `dim count u8 | dims u32... | f64 payload`, and a
//! CRC32 of all preceding bytes. Per trunk layer the arrays are weight,
//! bias, gamma, beta, running mean, running var; then head weight and bias.

use std::path::Path;

use crate::dataset::ByteReader;
use crate::error::{Error, Result};
use crate::model::{Head, ModelConfig, Parameters, TrunkLayer};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_array(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &Parameters) -> Vec<u8> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.num_classes as u32).to_le_bytes());
    out.push(cfg.hidden_dims.len() as u8);
    for &d in &cfg.hidden_dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in [cfg.dropout_p, cfg.bn_momentum, cfg.bn_epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &params.layers {
        let (fan_in, width) = l.weight.shape();
        put_array(&mut out, &[fan_in, width], l.weight.data());
        for v in [&l.bias, &l.bn_gamma, &l.bn_beta, &l.running_mean, &l.running_var] {
            put_array(&mut out, &[width], v);
        }
    }
    let (rows, cols) = params.head.weight.shape();
    put_array(&mut out, &[rows, cols], params.head.weight.data());
    put_array(&mut out, &[cols], &params.head.bias);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_array(r: &mut ByteReader<'_>, expected: &[usize]) -> Result<Vec<f64>> {
    let ndim = r.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    if dims != expected {
        return Err(Error::Shape(format!("checkpoint array has dims {dims:?}, expected {expected:?}")));
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    Ok(data)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Parameters> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let input_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let depth = r.u8()? as usize;
    let mut hidden_dims = Vec::with_capacity(depth);
    for _ in 0..depth {
        hidden_dims.push(r.u32()? as usize);
    }
    let config = ModelConfig {
        input_dim,
        hidden_dims,
        num_classes,
        dropout_p: r.f64()?,
        bn_momentum: r.f64()?,
        bn_epsilon: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let mut layers = Vec::with_capacity(depth);
    let mut fan_in = input_dim;
    for &width in &config.hidden_dims {
        let weight = Matrix::from_vec_unchecked(fan_in, width, read_array(&mut r, &[fan_in, width])?);
        let mut vecs = Vec::with_capacity(5);
        for _ in 0..5 {
            vecs.push(read_array(&mut r, &[width])?);
        }
        let mut it = vecs.into_iter();
        layers.push(TrunkLayer {
            weight,
            bias: it.next().unwrap(),
            bn_gamma: it.next().unwrap(),
            bn_beta: it.next().unwrap(),
            running_mean: it.next().unwrap(),
            running_var: it.next().unwrap(),
        });
        fan_in = width;
    }
    let head_weight = read_array(&mut r, &[fan_in, num_classes])?;
    let head_bias = read_array(&mut r, &[num_classes])?;
    r.finish_with_crc()?;
    Ok(Parameters {
        config,
        layers,
        head: Head {
            weight: Matrix::from_vec_unchecked(fan_in, num_classes, head_weight),
            bias: head_bias,
        },
    })
}

pub fn save_checkpoint(params: &Parameters, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it was written for `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Parameters> {
    let params = load_checkpoint(path)?;
    if &params.config != expected {
        return Err(Error::Shape(format!(
            "checkpoint config {:?} does not match expected {:?}",
            params.config, expected
        )));
    }
    Ok(params)
}
