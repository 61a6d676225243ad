//! Checkpoint archive: one file holding a version tag, the resolved config,
//! stage/step/optimizer counters, and named parameter arrays with declared
//! shapes. Parameters are written sorted by name so identical states produce
//! identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"GZDF";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub opt_t: u64,
    pub model_hash: String,
    pub config_toml: String,
    /// Model parameters plus optimizer moments (`opt.m.*`, `opt.v.*`).
    pub params: ParamStore,
}

impl Checkpoint {
    /// Drop every array under the given prefixes (including their optimizer
    /// moments). Returns the number of arrays removed.
    pub fn strip_prefixes(&mut self, prefixes: &[&str]) -> usize {
        let mut removed = 0;
        for p in prefixes {
            removed += self.params.remove_prefix(p);
            removed += self.params.remove_prefix(&format!("opt.m.{p}"));
            removed += self.params.remove_prefix(&format!("opt.v.{p}"));
        }
        removed
    }

    /// Split model parameters (by prefix) from optimizer state.
    pub fn model_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in self.params.iter() {
            if !k.starts_with("opt.") {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u64(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Numeric("checkpoint string not utf-8".into()))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    w.write_all(&[ckpt.stage])?;
    write_u64(&mut w, ckpt.step)?;
    write_u64(&mut w, ckpt.opt_t)?;
    write_str(&mut w, &ckpt.model_hash)?;
    write_str(&mut w, &ckpt.config_toml)?;

    let mut names: Vec<&String> = ckpt.params.names().collect();
    names.sort();
    write_u64(&mut w, names.len() as u64)?;
    for name in names {
        let arr = ckpt.params.get(name).unwrap();
        write_str(&mut w, name)?;
        write_u32(&mut w, arr.ndim() as u32)?;
        for &d in arr.shape() {
            write_u64(&mut w, d as u64)?;
        }
        for &v in arr.as_slice().expect("parameter arrays are contiguous") {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Chain(format!("cannot open checkpoint {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Chain(format!("{} is not a checkpoint archive", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Chain(format!("unsupported checkpoint version {version}")));
    }
    let mut stage = [0u8; 1];
    r.read_exact(&mut stage)?;
    let step = read_u64(&mut r)?;
    let opt_t = read_u64(&mut r)?;
    let model_hash = read_str(&mut r)?;
    let config_toml = read_str(&mut r)?;

    let count = read_u64(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        params.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
    }
    Ok(Checkpoint { stage: stage[0], step, opt_t, model_hash, config_toml, params })
}

/// Check that every expected parameter exists with the declared shape.
pub fn validate_shapes(found: &ParamStore, expected: &ParamStore) -> Result<()> {
    for (name, arr) in expected.iter() {
        match found.get(name) {
            None => {
                return Err(Error::Chain(format!("checkpoint is missing parameter {name}")));
            }
            Some(got) if got.shape() != arr.shape() => {
                return Err(Error::Chain(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    arr.shape()
                )));
            }
            _ => {}
        }
    }
    Ok(())
}
