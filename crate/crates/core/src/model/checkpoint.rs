//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, the five `ModelConfig` fields as
//! u32, a u32 block count, then named blocks. Each block is a u32 name
//! length, UTF-8 name, u32 rank, u32 dims, and the payload as
//! little-endian 64-bit floats. Model blocks use their canonical names;
//! anything else (optimizer moments, training progress) rides along as
//! extra blocks and is returned verbatim. `load(save(p)) == p` bitwise.

use super::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PWMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A loaded checkpoint: model weights plus any extra named blocks.
pub struct Checkpoint {
    pub params: ModelParams,
    pub extras: BTreeMap<String, Tensor>,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize parameters (and optional extra blocks) to a byte buffer.
pub fn encode_checkpoint(params: &ModelParams, extras: &[(String, Tensor)]) -> Vec<u8> {
    let blocks = params.blocks();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        params.config.embed_dim,
        params.config.num_layers,
        params.config.num_heads,
        params.config.ff_hidden,
        params.config.decoder_hidden,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&((blocks.len() + extras.len()) as u32).to_le_bytes());
    for (name, t) in &blocks {
        write_block(&mut out, name, t);
    }
    for (name, t) in extras {
        write_block(&mut out, name, t);
    }
    out
}

/// Write a checkpoint atomically (temp file in the same directory, then
/// rename), so failures never leave a partial file behind.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    extras: &[(String, Tensor)],
) -> Result<(), ModelError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, extras);
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::BadCheckpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse a checkpoint from bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic string".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {}",
            version
        )));
    }
    let config = ModelConfig {
        embed_dim: cur.u32()? as usize,
        num_layers: cur.u32()? as usize,
        num_heads: cur.u32()? as usize,
        ff_hidden: cur.u32()? as usize,
        decoder_hidden: cur.u32()? as usize,
    };
    config.validate().map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;

    let count = cur.u32()? as usize;
    let mut blocks: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| ModelError::BadCheckpoint("non-utf8 block name".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = cur.f64s(numel)?;
        if blocks.insert(name.clone(), Tensor::new(&shape, data)).is_some() {
            return Err(ModelError::BadCheckpoint(format!("duplicate block {}", name)));
        }
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::BadCheckpoint("trailing bytes".into()));
    }

    let params = ModelParams::from_blocks(config, |name| blocks.remove(name))?;
    Ok(Checkpoint {
        params,
        extras: blocks,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let config = ModelConfig {
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ff_hidden: 12,
            decoder_hidden: 6,
        };
        let params = ModelParams::init(config, 123).unwrap();
        let extras = vec![("opt.step".to_string(), Tensor::scalar(17.0))];
        let bytes = encode_checkpoint(&params, &extras);
        let loaded = decode_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.extras["opt.step"].item(), 17.0);
        // bitwise: re-encoding reproduces the same bytes
        let extras2: Vec<(String, Tensor)> =
            loaded.extras.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert_eq!(encode_checkpoint(&loaded.params, &extras2), bytes);
    }

    #[test]
    fn tampered_magic_refused() {
        let params = ModelParams::init(
            ModelConfig {
                embed_dim: 4,
                num_layers: 1,
                num_heads: 1,
                ff_hidden: 4,
                decoder_hidden: 4,
            },
            0,
        )
        .unwrap();
        let mut bytes = encode_checkpoint(&params, &[]);
        bytes[0] ^= 0xff;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(ModelError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn truncated_file_refused() {
        let params = ModelParams::init(
            ModelConfig {
                embed_dim: 4,
                num_layers: 1,
                num_heads: 1,
                ff_hidden: 4,
                decoder_hidden: 4,
            },
            0,
        )
        .unwrap();
        let bytes = encode_checkpoint(&params, &[]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
