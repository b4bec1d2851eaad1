//! Cold-tier spill file for sealed chunks of one (layer, head) stream.
//!
//! Layout, all little-endian:
//!
//! ```text
//! 0   4  magic "AKVC"
//! 4   4  version (u32, = 1)
//! 8   4  chunk size c (u32)
//! 12  4  head dim d (u32)
//! 16 16  reserved, zero
//! 32 ..  per chunk: keys (c*d f32) then values (c*d f32)
//! ```

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::linalg::DenseMatrix;

pub const SPILL_MAGIC: &[u8; 4] = b"AKVC";
pub const SPILL_VERSION: u32 = 1;
pub const SPILL_HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum SpillError {
    #[error("spill i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad spill magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported spill version {0}")]
    VersionUnsupported(u32),
    #[error("spill file truncated at byte {offset}")]
    Truncated { offset: u64 },
    #[error("chunk shape {rows}x{cols} does not match spill header {c}x{d}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        c: usize,
        d: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpillHeader {
    pub chunk_size: u32,
    pub dim: u32,
}

impl SpillHeader {
    pub fn encode(&self) -> [u8; SPILL_HEADER_LEN] {
        let mut buf = [0u8; SPILL_HEADER_LEN];
        buf[0..4].copy_from_slice(SPILL_MAGIC);
        buf[4..8].copy_from_slice(&SPILL_VERSION.to_le_bytes());
        buf[8..12].copy_from_slice(&self.chunk_size.to_le_bytes());
        buf[12..16].copy_from_slice(&self.dim.to_le_bytes());
        buf
    }

    pub fn decode(buf: &[u8; SPILL_HEADER_LEN]) -> Result<Self, SpillError> {
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if &magic != SPILL_MAGIC {
            return Err(SpillError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != SPILL_VERSION {
            return Err(SpillError::VersionUnsupported(version));
        }
        Ok(Self {
            chunk_size: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
            dim: u32::from_le_bytes(buf[12..16].try_into().unwrap()),
        })
    }
}

/// Append-only writer of full chunks.
pub struct SpillWriter {
    header: SpillHeader,
    out: BufWriter<File>,
    chunks: usize,
}

impl SpillWriter {
    pub fn create(path: &Path, chunk_size: usize, dim: usize) -> Result<Self, SpillError> {
        let header = SpillHeader {
            chunk_size: chunk_size as u32,
            dim: dim as u32,
        };
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&header.encode())?;
        Ok(Self {
            header,
            out,
            chunks: 0,
        })
    }

    pub fn write_chunk(
        &mut self,
        keys: &DenseMatrix,
        values: &DenseMatrix,
    ) -> Result<(), SpillError> {
        let (c, d) = (self.header.chunk_size as usize, self.header.dim as usize);
        for m in [keys, values] {
            if m.rows() != c || m.cols() != d {
                return Err(SpillError::ShapeMismatch {
                    rows: m.rows(),
                    cols: m.cols(),
                    c,
                    d,
                });
            }
        }
        write_f32s(&mut self.out, keys.as_slice())?;
        write_f32s(&mut self.out, values.as_slice())?;
        self.chunks += 1;
        Ok(())
    }

    pub fn chunks_written(&self) -> usize {
        self.chunks
    }

    pub fn flush(&mut self) -> Result<(), SpillError> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for SpillWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// A decoded spill file: header plus `(keys, values)` per chunk.
pub fn read_spill(
    path: &Path,
) -> Result<(SpillHeader, Vec<(DenseMatrix, DenseMatrix)>), SpillError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < SPILL_HEADER_LEN {
        return Err(SpillError::Truncated {
            offset: bytes.len() as u64,
        });
    }
    let header = SpillHeader::decode(bytes[..SPILL_HEADER_LEN].try_into().unwrap())?;
    let (c, d) = (header.chunk_size as usize, header.dim as usize);
    let block = c * d * 4;
    let body = &bytes[SPILL_HEADER_LEN..];
    let mut chunks = Vec::new();
    if block == 0 {
        return Ok((header, chunks));
    }
    let mut pos = 0;
    while pos < body.len() {
        if body.len() - pos < 2 * block {
            return Err(SpillError::Truncated {
                offset: (SPILL_HEADER_LEN + body.len()) as u64,
            });
        }
        let keys = DenseMatrix::from_vec(c, d, read_f32s(&body[pos..pos + block])).unwrap();
        let values =
            DenseMatrix::from_vec(c, d, read_f32s(&body[pos + block..pos + 2 * block])).unwrap();
        chunks.push((keys, values));
        pos += 2 * block;
    }
    Ok((header, chunks))
}

pub(crate) fn write_f32s<W: Write>(out: &mut W, data: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&buf)
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let h = SpillHeader {
            chunk_size: 32,
            dim: 128,
        };
        let buf = h.encode();
        assert_eq!(&buf[0..4], b"AKVC");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..12], &[32, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[128, 0, 0, 0]);
        assert!(buf[16..].iter().all(|&b| b == 0));
        assert_eq!(SpillHeader::decode(&buf).unwrap(), h);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = SpillHeader {
            chunk_size: 2,
            dim: 2,
        }
        .encode();
        buf[4] = 9;
        assert!(matches!(
            SpillHeader::decode(&buf),
            Err(SpillError::VersionUnsupported(9))
        ));
        buf[0] = b'X';
        assert!(matches!(
            SpillHeader::decode(&buf),
            Err(SpillError::BadMagic(_))
        ));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.akvc");
        let odd = [f32::MIN_POSITIVE, -0.0, 1.0e-40, f32::MAX, -3.25, 7.0];
        let keys = DenseMatrix::from_vec(3, 2, odd.to_vec()).unwrap();
        let values = DenseMatrix::from_vec(3, 2, odd.iter().rev().copied().collect()).unwrap();
        {
            let mut w = SpillWriter::create(&path, 3, 2).unwrap();
            w.write_chunk(&keys, &values).unwrap();
            w.write_chunk(&values, &keys).unwrap();
            assert!(w.write_chunk(&keys.slice_rows(0, 2), &values).is_err());
        }
        let (h, chunks) = read_spill(&path).unwrap();
        assert_eq!(
            h,
            SpillHeader {
                chunk_size: 3,
                dim: 2
            }
        );
        assert_eq!(chunks.len(), 2);
        let bits = |m: &DenseMatrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&chunks[0].0), bits(&keys));
        assert_eq!(bits(&chunks[0].1), bits(&values));
        assert_eq!(bits(&chunks[1].0), bits(&values));

        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 4).unwrap();
        assert!(matches!(
            read_spill(&path),
            Err(SpillError::Truncated { .. })
        ));
    }
}
