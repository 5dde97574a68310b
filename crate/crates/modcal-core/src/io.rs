//! Binary tensor blobs and the self-describing parameter container.
//!
//! Blob layout (little-endian throughout):
//!
//! ```text
//! magic   4 bytes  "MTB1"
//! dtype   u32      0 = f32, 1 = f64
//! ndim    u32
//! dims    ndim x u32
//! payload row-major scalars
//! ```
//!
//! Dataset tensors are stored as f32; checkpoint parameters as f64 so a save/load
//! round-trip reproduces training state bit-exactly.
//!
//! Checkpoint container layout: magic `"MCC1"`, `u32` JSON header length, JSON header
//! (kind, version, flat config map, tensor count), then per tensor a `u32` name length,
//! the name bytes, and a blob.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamSet;
use crate::error::{Error, Result};

const BLOB_MAGIC: &[u8; 4] = b"MTB1";
const CKPT_MAGIC: &[u8; 4] = b"MCC1";

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

pub fn write_tensor(w: &mut impl Write, t: &ArrayD<f64>, dtype: Dtype) -> Result<()> {
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&(match dtype {
        Dtype::F32 => 0u32,
        Dtype::F64 => 1u32,
    })
    .to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &x in t.iter() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &x in t.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<ArrayD<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::load("bad tensor blob magic"));
    }
    let dtype = match read_u32(r)? {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::load(format!("unknown tensor dtype tag {other}"))),
    };
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::load(format!("implausible tensor rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(r)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
        .map_err(|e| Error::load(format!("tensor blob shape mismatch: {e}")))
}

pub fn write_tensor_file(path: &Path, t: &ArrayD<f64>, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::load(format!("{}: {e}", path.display())))?,
    );
    read_tensor(&mut r)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    version: u32,
    config: BTreeMap<String, String>,
    tensors: usize,
}

/// Parameter container: kind tag + flat config + named f64 tensors.
pub struct Checkpoint {
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub params: ParamSet,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: &BTreeMap<String, String>,
    params: &ParamSet,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = CheckpointHeader {
        kind: kind.to_owned(),
        version: 1,
        config: config.clone(),
        tensors: params.len(),
    };
    let header_json = serde_json::to_vec(&header)?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (name, value) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, value, Dtype::F64)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::load(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::load(format!("{}: not a checkpoint file", path.display())));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut params = ParamSet::new();
    for _ in 0..header.tensors {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::load("bad tensor name"))?;
        params.insert(name, read_tensor(&mut r)?);
    }
    Ok(Checkpoint { kind: header.kind, config: header.config, params })
}

/// SHA-256 of one file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 8192];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// SHA-256 over a directory tree: relative paths (sorted) and file contents.
pub fn sha256_dir(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        let mut r = BufReader::new(File::open(root.join(&rel))?);
        let mut buf = [0u8; 8192];
        loop {
            let n = r.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().into_owned());
        }
    }
    Ok(())
}

/// Convenience: `Arc`-wrapped tensor copy for sharing across threads.
pub fn shared(t: ArrayD<f64>) -> Arc<ArrayD<f64>> {
    Arc::new(t)
}
