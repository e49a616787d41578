//! Bag files: `"DBMB"`, version `u32`, `n u32`, `d u32`, then `n*d` `f32`
//! values row-major, all little-endian. Values are widened to `f64` on read.

use std::fs;
use std::path::Path;

use crate::checkpoint::ByteReader;
use crate::error::{Error, FormatError, Result};
use crate::numerics::DenseMatrix;

pub const BAG_MAGIC: [u8; 4] = *b"DBMB";
pub const BAG_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_bag(embeddings: &DenseMatrix) -> Result<Vec<u8>> {
    if embeddings.rows() == 0 {
        return Err(FormatError::EmptyBag.into());
    }
    let (n, d) = embeddings.shape();
    let (n32, d32) = (
        u32::try_from(n).map_err(|_| Error::arg("bag too large"))?,
        u32::try_from(d).map_err(|_| Error::arg("bag too wide"))?,
    );
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(&BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for (i, &v) in embeddings.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i).into());
        }
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Reads only the `(n, d)` header.
pub fn decode_bag_header(bytes: &[u8]) -> Result<(usize, usize)> {
    let mut r = ByteReader::new(bytes);
    r.magic(BAG_MAGIC)?;
    let version = r.u32("version")?;
    if version != BAG_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: BAG_VERSION,
        }
        .into());
    }
    let n = r.u32("instance count")? as usize;
    let d = r.u32("width")? as usize;
    if n == 0 {
        return Err(FormatError::EmptyBag.into());
    }
    Ok((n, d))
}

pub fn decode_bag(bytes: &[u8]) -> Result<DenseMatrix> {
    let (n, d) = decode_bag_header(bytes)?;
    let mut r = ByteReader::new(bytes);
    r.take(HEADER_LEN, "header")?;
    let body = r.take(n * d * 4, "embedding values")?;
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()).into());
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i).into());
        }
        data.push(f64::from(v));
    }
    DenseMatrix::new(n, d, data)
}

pub fn write_bag(embeddings: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_bag(embeddings)?).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    decode_bag(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `(n, d)` from the first 16 bytes of the file.
pub fn read_bag_header(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_bag_header(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_matrix;
    use crate::rng::rng_for;

    #[test]
    fn round_trip_at_f32_precision() {
        let mut rng = rng_for(1, "bagfile", 0);
        let m = random_matrix(&mut rng, 3, 4, 1.0);
        let back = decode_bag(&encode_bag(&m).unwrap()).unwrap();
        let want = m.map(|v| f64::from(v as f32));
        assert_eq!(back, want);
    }

    #[test]
    fn layout_is_little_endian() {
        let m = DenseMatrix::from_rows(&[[1.0, -2.0]]);
        let bytes = encode_bag(&m).unwrap();
        assert_eq!(&bytes[..4], b"DBMB");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn truncation() {
        let bytes = encode_bag(&DenseMatrix::filled(3, 2, 0.5)).unwrap();
        assert!(matches!(
            decode_bag(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
        assert!(matches!(
            decode_bag(&bytes[..10]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
    }

    #[test]
    fn rejects_empty_and_bad_magic_and_version() {
        let mut bytes = encode_bag(&DenseMatrix::filled(1, 2, 0.5)).unwrap();
        let mut zero = bytes.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_bag(&zero), Err(Error::Format(FormatError::EmptyBag))));
        assert!(encode_bag(&DenseMatrix::zeros(0, 3)).is_err());

        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(
            decode_bag(&v),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 2, .. }))
        ));
        bytes[1] = b'X';
        assert!(matches!(decode_bag(&bytes), Err(Error::Format(FormatError::BadMagic { .. }))));
    }
}
