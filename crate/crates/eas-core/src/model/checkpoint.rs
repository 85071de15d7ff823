//! Binary checkpoint format. Fixed little-endian layout: magic, version,
//! config header, then each tensor in name order as (name, dims, f64 data,
//! trainable flag). Data is stored as f64 regardless of the active precision,
//! so checkpoints are portable across builds.

use super::{Model, ModelConfig, ModelError};
use crate::autodiff::{NamedParamSet, Real, Tensor};
use crate::problems::ProblemKind;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"EASCKPT\0";
const VERSION: u32 = 1;

pub fn save(model: &Model, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(model.config.d as u32).to_le_bytes())?;
    w.write_all(&(model.config.d_h as u32).to_le_bytes())?;
    w.write_all(&(model.config.c_clip as f64).to_le_bytes())?;
    let kind = match model.config.kind {
        ProblemKind::Tsp => 0u8,
        ProblemKind::Cvrp => 1u8,
    };
    w.write_all(&[kind])?;
    let count = model.params.iter().count() as u32;
    w.write_all(&count.to_le_bytes())?;
    for (name, entry) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = entry.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in entry.tensor.data() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
        w.write_all(&[entry.trainable as u8])?;
    }
    w.flush()?;
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8, ModelError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<Model, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let d = read_u32(&mut r)? as usize;
    let d_h = read_u32(&mut r)? as usize;
    let c_clip = read_f64(&mut r)? as Real;
    let kind = match read_u8(&mut r)? {
        0 => ProblemKind::Tsp,
        1 => ProblemKind::Cvrp,
        k => return Err(ModelError::CorruptCheckpoint(format!("unknown problem kind tag {k}"))),
    };
    let config = ModelConfig::new(d, d_h, c_clip, kind)
        .map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
    let count = read_u32(&mut r)? as usize;

    let mut params = NamedParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(ModelError::CorruptCheckpoint(format!("tensor name of {name_len} bytes")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| ModelError::CorruptCheckpoint("tensor name is not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim == 0 || ndim > 2 {
            return Err(ModelError::CorruptCheckpoint(format!("tensor {name} has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        if len == 0 || len > 1 << 28 {
            return Err(ModelError::CorruptCheckpoint(format!("tensor {name} has {len} elements")));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(&mut r)? as Real);
        }
        let trainable = match read_u8(&mut r)? {
            0 => false,
            1 => true,
            b => return Err(ModelError::CorruptCheckpoint(format!("bad trainable flag {b}"))),
        };
        let tensor = Tensor::new(shape, data)
            .map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
        params
            .insert(&name, tensor, trainable)
            .map_err(|_| ModelError::CorruptCheckpoint(format!("duplicate tensor {name}")))?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelError::CorruptCheckpoint("trailing bytes after last tensor".into()));
    }

    let expected = Model::expected_shapes(&config);
    let got: Vec<(&str, Vec<usize>)> =
        params.iter().map(|(n, e)| (n, e.tensor.shape().to_vec())).collect();
    if got.len() != expected.len()
        || got.iter().zip(&expected).any(|(g, e)| g.0 != e.0 || g.1 != e.1)
    {
        return Err(ModelError::CorruptCheckpoint(
            "tensor names or shapes do not match the header config".into(),
        ));
    }
    Ok(Model { config, params })
}
