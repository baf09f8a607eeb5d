//! Versioned binary container for model parameters: a JSON metadata
//! header followed by named MLP blocks with raw little-endian f64 arrays.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::matrix::Matrix;
use super::mlp::{MlpParams, OutputActivation};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"QANN";
const VERSION: u32 = 1;

/// A loaded checkpoint: caller-defined metadata plus named parameter blocks.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    blocks: Vec<(String, MlpParams)>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&MlpParams> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|(n, _)| n.as_str()).collect()
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, meta: &serde_json::Value, blocks: &[(&str, &MlpParams)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta_bytes).map_err(io_err)?;
    w.write_all(&(blocks.len() as u32).to_le_bytes()).map_err(io_err)?;

    for (name, params) in blocks {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        for dim in [params.in_dim, params.hidden_dim, params.out_dim] {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&[params.output.tag()]).map_err(io_err)?;
        for &v in params.flatten().iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::format(path, None, "bad magic bytes; not a checkpoint"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::format(path, None, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r, path)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(io_err)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;

    let n_blocks = read_u32(&mut r, path)? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(path, None, "block name is not utf-8"))?;
        let in_dim = read_u32(&mut r, path)? as usize;
        let hidden_dim = read_u32(&mut r, path)? as usize;
        let out_dim = read_u32(&mut r, path)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io_err)?;
        let output = OutputActivation::from_tag(tag[0])?;
        if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
            return Err(Error::format(path, None, format!("block `{name}` has a zero dimension")));
        }

        let mut params = MlpParams {
            in_dim,
            hidden_dim,
            out_dim,
            w1: Matrix::zeros(hidden_dim, in_dim),
            b1: vec![0.0; hidden_dim],
            w2: Matrix::zeros(out_dim, hidden_dim),
            b2: vec![0.0; out_dim],
            output,
        };
        let count = params.param_count();
        let mut flat = vec![0.0; count];
        let mut buf = [0u8; 8];
        for slot in flat.iter_mut() {
            r.read_exact(&mut buf).map_err(io_err)?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::format(path, None, format!("non-finite parameter in block `{name}`")));
            }
            *slot = v;
        }
        params.unflatten(&flat);
        blocks.push((name, params));
    }
    Ok(Checkpoint { meta, blocks })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}
