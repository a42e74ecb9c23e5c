//! Model checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    "FPOM"
//! version  u32 (= 1)
//! vocab, d_model, layers, heads, context, d_ff   u32 each
//! n_arrays u32
//! arrays   f32 elements, parameter declaration order, shapes implied by config
//! ```

use super::{LmConfig, TinyLM};
use crate::autodiff::{Array, ParamSet, Scalar};
use crate::error::Result;
use crate::io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPOM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar>(model: &TinyLM<T>) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(40 + 4 * model.params().element_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.vocab, c.d_model, c.layers, c.heads, c.context, c.d_ff] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for arr in model.params().arrays() {
        for &x in arr.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TinyLM<T>> {
    let mut r = ByteReader::new(bytes, "model checkpoint");
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.malformed(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = LmConfig {
        vocab: dims[0],
        d_model: dims[1],
        layers: dims[2],
        heads: dims[3],
        context: dims[4],
        d_ff: dims[5],
    };
    let template = TinyLM::<T>::zeros(config)?;
    let n_arrays = r.u32()? as usize;
    if n_arrays != template.params().len() {
        return Err(r.malformed(format!(
            "{n_arrays} arrays, config implies {}",
            template.params().len()
        )));
    }
    let mut params = ParamSet::new();
    for (_, name, arr) in template.params().iter() {
        let data = r.f32_vec(arr.len())?;
        let values = data.into_iter().map(|x| T::of(x as f64)).collect();
        params.add(name, Array::new(arr.shape().to_vec(), values)?);
    }
    r.finish()?;
    TinyLM::from_params(config, params)
}

impl<T: Scalar> TinyLM<T> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_file(path, &write_checkpoint(self))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        read_checkpoint(&crate::io::read_file(path)?)
    }

    /// 64-bit content hash of the serialized checkpoint.
    pub fn checksum(&self) -> u64 {
        crate::io::content_hash(&write_checkpoint(self))
    }
}
