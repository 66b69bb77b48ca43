//! Binary model checkpoints: `TSLM` magic, format version, model config,
//! then named little-endian f32 parameter blobs.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Float, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSLM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.n_encoder_blocks,
        c.n_decoder_blocks,
        c.d_model,
        c.n_heads,
        c.d_ff,
        c.vocab,
        c.max_context,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.seed.to_le_bytes());
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        put_matrix(&mut buf, &p.value);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor whose errors carry the byte offset.
pub(crate) struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(data: &'a [u8], path: &'a Path) -> Self {
        Self {
            cur: Cursor::new(data),
            path,
        }
    }

    pub(crate) fn position(&self) -> u64 {
        self.cur.position()
    }

    pub(crate) fn remaining(&self) -> usize {
        self.cur.get_ref().len().saturating_sub(self.cur.position() as usize)
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let offset = self.cur.position();
        let mut b = vec![0u8; n];
        self.cur.read_exact(&mut b).map_err(|_| Error::Format {
            path: self.path.into(),
            offset,
            msg: format!("truncated: wanted {n} bytes"),
        })?;
        Ok(b)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.bytes(rows * cols * 4)?;
        let vals: Vec<Float> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Float)
            .collect();
        Matrix::from_vec(rows, cols, vals)
    }

    pub(crate) fn fail(&self, msg: String) -> Error {
        Error::Format {
            path: self.path.into(),
            offset: self.cur.position(),
            msg,
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&data, path);
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            offset: 0,
            msg: "bad magic, expected TSLM".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        n_encoder_blocks: dims[0],
        n_decoder_blocks: dims[1],
        d_model: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        vocab: dims[5],
        max_context: dims[6],
        seed: r.u64()?,
    };
    let mut model = Model::new(config).map_err(|e| r.fail(e.to_string()))?;
    let n = r.u32()? as usize;
    let mut params = model.params_mut();
    if n != params.len() {
        return Err(r.fail(format!("expected {} parameters, found {n}", params.len())));
    }
    for p in params.iter_mut() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| r.fail("non-utf8 name".into()))?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if name != p.name || (rows, cols) != p.shape() {
            return Err(r.fail(format!(
                "parameter `{name}` {rows}x{cols} does not match expected `{}` {:?}",
                p.name,
                p.shape()
            )));
        }
        p.value = r.matrix(rows, cols)?;
    }
    Ok(model)
}

pub(crate) fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}
