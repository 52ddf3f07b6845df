//! Versioned binary checkpoint container.
//!
//! Layout: 4-byte magic `MPCK`, u32 format version, u32 header length, a JSON
//! architecture descriptor (including the training seed), u32 tensor count,
//! then each tensor as u32 rank, u32 dims, and little-endian f64 values.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint does not match the expected model: {0}")]
    ModelMismatch(String),
}

/// Writes a descriptor plus parameter tensors (in declaration order).
pub fn save<T: Serialize>(
    path: &Path,
    descriptor: &T,
    tensors: &[&Tensor],
) -> Result<(), CheckpointError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(descriptor)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Corrupt(format!("file ends inside {what}"))
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(reader: &mut impl Read, what: &str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(reader, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads a descriptor plus parameter tensors written by [`save`].
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<(T, Vec<Tensor>), CheckpointError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut input, "version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = read_u32(&mut input, "header length")? as usize;
    if header_len > 16 << 20 {
        return Err(CheckpointError::Corrupt(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header = vec![0u8; header_len];
    read_exact(&mut input, &mut header, "header")?;
    let descriptor: T = serde_json::from_slice(&header)?;

    let n_tensors = read_u32(&mut input, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for i in 0..n_tensors {
        let rank = read_u32(&mut input, "tensor rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {i} has implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input, "tensor dims")? as usize);
        }
        let len: usize = shape.iter().product();
        if len > 64 << 20 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {i} has implausible size {len}"
            )));
        }
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            read_exact(&mut input, &mut buf, "tensor data")?;
            data.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        tensors.push(
            Tensor::from_vec(&shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("tensor {i}: {e}")))?,
        );
    }
    let mut rest = [0u8; 1];
    match input.read(&mut rest)? {
        0 => Ok((descriptor, tensors)),
        _ => Err(CheckpointError::Corrupt(
            "trailing bytes after final tensor".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Desc {
        model: String,
        seed: u64,
        // Values with no short decimal form; parsing them back bit-exactly
        // needs a correctly-rounded float parser (serde_json float_roundtrip).
        stats: Vec<f64>,
    }

    fn sample_desc() -> Desc {
        Desc {
            model: "test".into(),
            seed: 99,
            stats: vec![
                0.010754568620967977,
                -0.01399119333386474,
                f64::MIN_POSITIVE,
                1.0 + f64::EPSILON,
            ],
        }
    }

    fn sample_tensors() -> Vec<Tensor> {
        vec![
            Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 1e300, -0.0])
                .unwrap(),
            Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let desc = sample_desc();
        let tensors = sample_tensors();
        save(&path, &desc, &tensors.iter().collect::<Vec<_>>()).unwrap();
        let (loaded_desc, loaded): (Desc, _) = load(&path).unwrap();
        assert_eq!(loaded_desc, desc);
        for (a, b) in loaded_desc.stats.iter().zip(&desc.stats) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded, tensors);
    }

    #[test]
    fn wrong_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let desc = sample_desc();
        save(&path, &desc, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load::<Desc>(&path),
            Err(CheckpointError::VersionMismatch { found: 999, .. })
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let desc = sample_desc();
        let tensors = sample_tensors();
        save(&path, &desc, &tensors.iter().collect::<Vec<_>>()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load::<Desc>(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(matches!(load::<Desc>(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let desc = sample_desc();
        save(&path, &desc, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load::<Desc>(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }
}
