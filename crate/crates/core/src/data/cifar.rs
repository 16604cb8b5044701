//! CIFAR-10 binary records: one label byte then 3072 channel-major pixels.

use std::path::Path;

use crate::error::{Error, Result};

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
const RECORD: usize = 1 + CIFAR_PIXELS;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CifarRecords {
    pub labels: Vec<u8>,
    /// `labels.len() × 3072` bytes.
    pub pixels: Vec<u8>,
}

impl CifarRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: CifarRecords) {
        self.labels.extend(other.labels);
        self.pixels.extend(other.pixels);
    }
}

pub fn decode_cifar(bytes: &[u8]) -> Result<CifarRecords> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "cifar batch of {} bytes is not a whole number of {RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut out = CifarRecords {
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * CIFAR_PIXELS),
    };
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("cifar label {} out of range", rec[0])));
        }
        out.labels.push(rec[0]);
        out.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(out)
}

pub fn encode_cifar(records: &CifarRecords) -> Result<Vec<u8>> {
    if records.pixels.len() != records.labels.len() * CIFAR_PIXELS {
        return Err(Error::Dimension(format!(
            "{} labels need {} pixel bytes, got {}",
            records.labels.len(),
            records.labels.len() * CIFAR_PIXELS,
            records.pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(records.len() * RECORD);
    for (i, &y) in records.labels.iter().enumerate() {
        out.push(y);
        out.extend_from_slice(&records.pixels[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]);
    }
    Ok(out)
}

pub fn read_cifar(path: &Path) -> Result<CifarRecords> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_cifar(path: &Path, records: &CifarRecords) -> Result<()> {
    std::fs::write(path, encode_cifar(records)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_record() {
        let r = CifarRecords {
            labels: vec![3, 9],
            pixels: (0..2 * CIFAR_PIXELS).map(|i| (i % 251) as u8).collect(),
        };
        let b = encode_cifar(&r).unwrap();
        assert_eq!(b.len(), 2 * 3073);
        assert_eq!(decode_cifar(&b).unwrap(), r);
        assert!(decode_cifar(&b[..b.len() - 1]).is_err());
    }
}
