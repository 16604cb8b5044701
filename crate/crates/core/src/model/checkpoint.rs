//! Flat binary checkpoint: `NTRN1`, u32 LE length + spec JSON, then every
//! parameter tensor as u32 rank, u32 extents, LE f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NTRN1";

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("checkpoint: {e}"))
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit u32")))?;
    w.write_all(&v.to_le_bytes()).map_err(fmt_err)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(fmt_err)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(fmt_err)?;
    let json = serde_json::to_vec(model.spec()).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(w, json.len())?;
    w.write_all(&json).map_err(fmt_err)?;
    for p in model.params() {
        put_u32(w, p.rank())?;
        for &e in p.shape() {
            put_u32(w, e)?;
        }
        let mut buf = Vec::with_capacity(p.len() * 4);
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(fmt_err)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(fmt_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let n = get_u32(r)?;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json).map_err(fmt_err)?;
    let spec: ModelSpec = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
    let mut model = Model::build(spec, &mut Rng::new(0))?;
    let expected: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut values = Vec::with_capacity(expected.len());
    for shape in expected {
        let rank = get_u32(r)?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(get_u32(r)?);
        }
        if dims != shape {
            return Err(Error::Format(format!(
                "checkpoint tensor {dims:?} does not match model parameter {shape:?}"
            )));
        }
        let len: usize = dims.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(fmt_err)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        values.push(Tensor::new(dims, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(fmt_err)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    model.set_params(&values)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
