//! Binary model checkpoints. Layout: magic "KDA1", config fields as
//! little-endian u32s and f64s, the init seed as two u32 words, then each
//! parameter as name-length/name/shape-rank/shape/raw little-endian f64s.
//! Round-trips are bit-exact.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use super::{KdaModel, ModelConfig, ModelError, UnimodalMode};

const MAGIC: &[u8; 4] = b"KDA1";

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            cur: Cursor::new(bytes),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<Vec<u8>, ModelError> {
        let mut buf = vec![0u8; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| ModelError::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, ModelError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn at_end(&mut self) -> bool {
        let mut probe = [0u8; 1];
        self.cur.read(&mut probe).map_or(true, |n| n == 0)
    }
}

/// Serialize the model to its binary checkpoint encoding.
pub fn encode_checkpoint(model: &KdaModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let c = &model.config;
    for dim in [
        c.audio_dim,
        c.visual_dim,
        c.text_dim,
        c.hidden_dim,
        c.common_dim,
    ] {
        put_u32(&mut buf, dim as u32);
    }
    put_u32(&mut buf, c.unimodal.as_u32());
    put_f64(&mut buf, c.dropout_enc);
    put_f64(&mut buf, c.dropout_proj);
    put_f64(&mut buf, c.dropout_dec);
    put_u32(&mut buf, (model.seed & 0xFFFF_FFFF) as u32);
    put_u32(&mut buf, (model.seed >> 32) as u32);

    let params = model.named_parameters();
    put_u32(&mut buf, params.len() as u32);
    for (name, tensor) in &params {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        put_u32(&mut buf, shape.len() as u32);
        for d in &shape {
            put_u32(&mut buf, *d as u32);
        }
        for v in tensor.data().iter() {
            put_f64(&mut buf, *v);
        }
    }
    buf
}

/// Parse a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<KdaModel, ModelError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let audio_dim = r.u32("audio_dim")? as usize;
    let visual_dim = r.u32("visual_dim")? as usize;
    let text_dim = r.u32("text_dim")? as usize;
    let hidden_dim = r.u32("hidden_dim")? as usize;
    let common_dim = r.u32("common_dim")? as usize;
    let mode = r.u32("unimodal_mode")?;
    let unimodal = UnimodalMode::from_u32(mode)
        .ok_or_else(|| ModelError::Checkpoint(format!("unknown unimodal mode {mode}")))?;
    let dropout_enc = r.f64("dropout_enc")?;
    let dropout_proj = r.f64("dropout_proj")?;
    let dropout_dec = r.f64("dropout_dec")?;
    let seed_lo = r.u32("seed_lo")? as u64;
    let seed_hi = r.u32("seed_hi")? as u64;
    let config = ModelConfig {
        audio_dim,
        visual_dim,
        text_dim,
        hidden_dim,
        common_dim,
        dropout_enc,
        dropout_proj,
        dropout_dec,
        unimodal,
    };
    let model = KdaModel::init(config, (seed_hi << 32) | seed_lo)?;

    let count = r.u32("parameter count")? as usize;
    let params = model.named_parameters();
    if count != params.len() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint has {count} parameters, config implies {}",
            params.len()
        )));
    }
    for (expected_name, tensor) in &params {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::Checkpoint("parameter name is not utf-8".to_string()))?;
        if &name != expected_name {
            return Err(ModelError::Checkpoint(format!(
                "parameter order mismatch: found '{name}', expected '{expected_name}'"
            )));
        }
        let rank = r.u32("shape rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("shape dim")? as usize);
        }
        if shape != tensor.shape() {
            return Err(ModelError::Checkpoint(format!(
                "parameter '{name}' has shape {shape:?}, config implies {:?}",
                tensor.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64("parameter data")?);
        }
        tensor.set_data(data)?;
    }
    if !r.at_end() {
        return Err(ModelError::Checkpoint(
            "trailing bytes after last parameter".to_string(),
        ));
    }
    Ok(model)
}

/// Write the model checkpoint to `path`.
pub fn save_checkpoint(model: &KdaModel, path: &Path) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(model);
    let mut file = fs::File::create(path)
        .map_err(|e| ModelError::Io(format!("create {}: {e}", path.display())))?;
    file.write_all(&bytes)
        .map_err(|e| ModelError::Io(format!("write {}: {e}", path.display())))?;
    Ok(())
}

/// Load a model checkpoint from `path`.
pub fn load_checkpoint(path: &Path) -> Result<KdaModel, ModelError> {
    let bytes =
        fs::read(path).map_err(|e| ModelError::Io(format!("read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
