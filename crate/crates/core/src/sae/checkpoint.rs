//! SAE checkpoint format.
//!
//! ```text
//! magic     "FPOS"
//! version   u32 (= 1)
//! m, d      u32 each
//! alpha_l1  f64
//! W_enc     m·d f32, row-major
//! b         m f32
//! W_dec     m·d f32, row-major
//! ```

use super::SparseAutoencoder;
use crate::autodiff::{Array, Scalar};
use crate::error::Result;
use crate::io::ByteReader;

pub const SAE_MAGIC: &[u8; 4] = b"FPOS";
pub const SAE_VERSION: u32 = 1;

pub fn write_sae<T: Scalar>(sae: &SparseAutoencoder<T>) -> Vec<u8> {
    let (m, d) = (sae.width(), sae.dim());
    let mut out = Vec::with_capacity(24 + 4 * (2 * m * d + m));
    out.extend_from_slice(SAE_MAGIC);
    out.extend_from_slice(&SAE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&sae.alpha_l1().to_le_bytes());
    for arr in [sae.w_enc(), sae.b(), sae.w_dec()] {
        for &x in arr.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_sae<T: Scalar>(bytes: &[u8]) -> Result<SparseAutoencoder<T>> {
    let mut r = ByteReader::new(bytes, "SAE checkpoint");
    r.expect_magic(SAE_MAGIC)?;
    let version = r.u32()?;
    if version != SAE_VERSION {
        return Err(r.malformed(format!("unsupported version {version}")));
    }
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let alpha = r.f64()?;
    let mut read = |shape: &[usize]| -> Result<Array<T>> {
        let n = shape.iter().product();
        let data = r.f32_vec(n)?.into_iter().map(|x| T::of(x as f64)).collect();
        Array::new(shape.to_vec(), data)
    };
    let w_enc = read(&[m, d])?;
    let b = read(&[m])?;
    let w_dec = read(&[m, d])?;
    r.finish()?;
    SparseAutoencoder::new(w_enc, b, w_dec, alpha)
}

impl<T: Scalar> SparseAutoencoder<T> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_file(path, &write_sae(self))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        read_sae(&crate::io::read_file(path)?)
    }

    /// 64-bit content hash of the serialized checkpoint.
    pub fn checksum(&self) -> u64 {
        crate::io::content_hash(&write_sae(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_in_single_precision() {
        let s = SparseAutoencoder::<f32>::init(4, 12, 0.01, 9).unwrap();
        let bytes = write_sae(&s);
        assert_eq!(bytes.len(), 24 + 4 * (2 * 12 * 4 + 12));
        let back: SparseAutoencoder<f32> = read_sae(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.checksum(), s.checksum());
    }

    #[test]
    fn rejects_damage() {
        let s = SparseAutoencoder::<f32>::init(4, 12, 0.01, 9).unwrap();
        let bytes = write_sae(&s);
        assert!(read_sae::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_sae::<f32>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(read_sae::<f32>(&long).is_err());
    }
}
