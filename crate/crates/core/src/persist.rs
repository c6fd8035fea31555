//! Versioned binary containers: a magic line, a JSON header line, then a raw
//! little-endian payload. Used for encoder checkpoints and chunk indices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "CTXEMB-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_container<H: Serialize>(path: &Path, magic: &str, header: &H, payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(header).expect("headers always serialize");
    (|| {
        writeln!(w, "{magic}")?;
        writeln!(w, "{header}")?;
        w.write_all(payload)?;
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &str) -> Result<(H, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if line.trim_end() != magic {
        return Err(Error::Checkpoint(format!("{}: expected `{magic}` file", path.display())));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header = serde_json::from_str(&line)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    Ok((header, payload))
}

pub fn f64s_to_bytes<'a>(values: impl IntoIterator<Item = &'a f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Checkpoint("payload is not a whole number of f64 values".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: EncoderConfig,
    checksum: String,
    tensors: Vec<TensorEntry>,
}

/// Writes config and parameters; reloading is bit-exact.
pub fn save_checkpoint(path: &Path, encoder: &Encoder) -> Result<()> {
    let params = &encoder.params;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: encoder.config.clone(),
        checksum: params.checksum(),
        tensors: params
            .tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
    };
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    for t in params.tensors() {
        f64s_to_bytes(t.iter(), &mut payload);
    }
    write_container(path, CHECKPOINT_MAGIC, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder> {
    let (header, payload): (CheckpointHeader, _) = read_container(path, CHECKPOINT_MAGIC)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let values = bytes_to_f64s(&payload)?;
    let mut params = EncoderParams::init(&header.config)?;
    let expected: usize = params.num_scalars();
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload holds {} values, config needs {expected}",
            values.len()
        )));
    }
    let mut offset = 0;
    for (t, entry) in params.tensors_mut().into_iter().zip(&header.tensors) {
        if [t.nrows(), t.ncols()] != entry.shape {
            return Err(Error::Checkpoint(format!("tensor `{}` has unexpected shape", entry.name)));
        }
        let n = t.len();
        *t = Array2::from_shape_vec(t.raw_dim(), values[offset..offset + n].to_vec()).expect("shape checked");
        offset += n;
    }
    if params.checksum() != header.checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    Encoder::from_parts(header.config, params)
}
