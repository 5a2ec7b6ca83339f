//! Binary checkpoint container.
//!
//! Layout: `TRJM`, a version byte, a little-endian u32 header length, a JSON
//! header `{"config": …, "tensors": [{"name", "shape", "dtype"}]}`, then every
//! tensor's f64 values little-endian in header order. A tied output matrix is
//! not stored; it is the embedding table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TrajectoryModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRJM";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(model: &TrajectoryModel, mut w: impl Write) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        tensors: model
            .params()
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in model.params().iter() {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<TrajectoryModel> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated preamble".into()))?;
    if &magic[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a trajectory model checkpoint".into()));
    }
    if magic[4] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", magic[4])));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| Error::Checkpoint("truncated preamble".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut stored = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("tensor `{}` has dtype {}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated payload for `{}`", entry.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        stored.push((entry.name, Tensor::new(&entry.shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    TrajectoryModel::from_params(header.config, stored)
}

pub fn save_checkpoint(model: &TrajectoryModel, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<TrajectoryModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;
    use crate::rng::RngState;

    fn model(arch: Architecture, tied: bool) -> TrajectoryModel {
        let mut c = ModelConfig::for_architecture(arch, 7).with_width(4);
        c.head_count = 2;
        c.tied_output = tied;
        TrajectoryModel::new(c, &mut RngState::new(3)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for arch in [Architecture::Lstm, Architecture::Transformer] {
            for tied in [false, true] {
                let m = model(arch, tied);
                let mut bytes = Vec::new();
                write_checkpoint(&m, &mut bytes).unwrap();
                assert_eq!(&bytes[..4], b"TRJM");
                assert_eq!(bytes[4], 1);
                let back = read_checkpoint(&bytes[..]).unwrap();
                assert_eq!(back.config(), m.config());
                assert_eq!(back.params(), m.params());
                let mut again = Vec::new();
                write_checkpoint(&back, &mut again).unwrap();
                assert_eq!(bytes, again);
            }
        }
    }

    #[test]
    fn payload_size_matches_header() {
        let m = model(Architecture::Lstm, true);
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 9 + hlen + 8 * m.parameter_count());
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + hlen]).unwrap();
        let names: Vec<&str> = header["tensors"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
        assert!(!names.contains(&"head.weight"));
        assert!(names.contains(&"head.projection"));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = model(Architecture::Transformer, false);
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(read_checkpoint(&wrong[..]), Err(Error::Checkpoint(_))));
    }
}
