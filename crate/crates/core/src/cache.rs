//! Offline reference cache.
//!
//! For every preference pair the cache holds the length-normalized
//! reference log-ratio and the top-k pooled SAE activations of both
//! responses, so alignment can run without the reference model.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! header (46 bytes)
//!   magic "FPOC" | version u32 | N u64 | k u32 | m u32
//!   tap layer u32 | tap kind u8 | pooling u8
//!   SAE checksum u64 | reference checksum u64
//! N entries (8 + 4 + 16k bytes each)
//!   pair_id u64 | gamma f32
//!   chosen:   k × (index u32, value f32)
//!   rejected: k × (index u32, value f32)
//! ```
//!
//! Sides with fewer than `k` stored features are padded with index
//! `0xFFFFFFFF` and value `0`. The stored gamma is computed at `β = 1`;
//! losses scale it by their own `β`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Scalar;
use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::model::{Tap, TapKind, TinyLM};
use crate::sae::{pool, PoolingMode, PooledActivation, SparseAutoencoder};

pub const CACHE_MAGIC: &[u8; 4] = b"FPOC";
pub const CACHE_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 46;
pub const PAD_INDEX: u32 = u32::MAX;

/// Bytes per stored pair: id, gamma and `2k` index/value slots.
pub fn entry_bytes(k: usize) -> usize {
    8 + 4 + 16 * k
}

/// Serialized size of a cache with `n` entries.
pub fn payload_bytes(n: usize, k: usize) -> usize {
    HEADER_BYTES + n * entry_bytes(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CacheHeader {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub tap: Tap,
    pub pooling: PoolingMode,
    pub sae_checksum: u64,
    pub ref_checksum: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefCacheEntry<T> {
    pub pair_id: u64,
    /// `log π_ref(y_w|x)/|y_w| − log π_ref(y_l|x)/|y_l|`.
    pub gamma: T,
    /// Top-k pooled activations of `y_w`, ascending by index.
    pub chosen: Vec<(u32, T)>,
    pub rejected: Vec<(u32, T)>,
}

impl<T: Scalar> RefCacheEntry<T> {
    /// `β`-scaled reference margin.
    pub fn gamma_ref_ln(&self, beta: f64) -> T {
        T::of(beta) * self.gamma
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefCache<T> {
    header: CacheHeader,
    entries: Vec<RefCacheEntry<T>>,
    index: HashMap<u64, usize>,
}

impl<T: Scalar> RefCache<T> {
    pub fn new(header: CacheHeader, entries: Vec<RefCacheEntry<T>>) -> Result<Self> {
        if header.n != entries.len() {
            return Err(Error::Contract(format!(
                "header declares {} entries, got {}",
                header.n,
                entries.len()
            )));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.pair_id, i).is_some() {
                return Err(Error::Config(format!("duplicate pair id {} in cache", e.pair_id)));
            }
            for side in [&e.chosen, &e.rejected] {
                if side.len() > header.k
                    || side.windows(2).any(|w| w[0].0 >= w[1].0)
                    || side.iter().any(|&(i, v)| i as usize >= header.m || !(v >= T::zero()))
                {
                    return Err(Error::Contract(format!(
                        "entry {} has an invalid feature list",
                        e.pair_id
                    )));
                }
            }
            if !e.gamma.is_finite() {
                return Err(Error::Contract(format!("entry {} has non-finite gamma", e.pair_id)));
            }
        }
        Ok(Self {
            header,
            entries,
            index,
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn entries(&self) -> &[RefCacheEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, pair_id: u64) -> Result<&RefCacheEntry<T>> {
        self.index
            .get(&pair_id)
            .map(|&i| &self.entries[i])
            .ok_or(Error::CacheMiss(pair_id))
    }

    /// Number of cached scalars, `N·(2k + 1)`.
    pub fn cached_floats(&self) -> usize {
        self.header.n * (2 * self.header.k + 1)
    }

    /// Refuses to proceed unless both artifacts match the header.
    pub fn verify_checksums(&self, sae_checksum: u64, ref_checksum: u64) -> Result<()> {
        if self.header.sae_checksum != sae_checksum {
            return Err(Error::Checksum {
                what: "SAE",
                expected: self.header.sae_checksum,
                found: sae_checksum,
            });
        }
        if self.header.ref_checksum != ref_checksum {
            return Err(Error::Checksum {
                what: "reference model",
                expected: self.header.ref_checksum,
                found: ref_checksum,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(payload_bytes(h.n, h.k));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.n as u64).to_le_bytes());
        out.extend_from_slice(&(h.k as u32).to_le_bytes());
        out.extend_from_slice(&(h.m as u32).to_le_bytes());
        out.extend_from_slice(&(h.tap.layer as u32).to_le_bytes());
        out.push(h.tap.kind.code());
        out.push(h.pooling.code());
        out.extend_from_slice(&h.sae_checksum.to_le_bytes());
        out.extend_from_slice(&h.ref_checksum.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_BYTES);
        for e in &self.entries {
            out.extend_from_slice(&e.pair_id.to_le_bytes());
            out.extend_from_slice(&(e.gamma.as_f64() as f32).to_le_bytes());
            for side in [&e.chosen, &e.rejected] {
                for slot in 0..h.k {
                    let (i, v) = side.get(slot).copied().unwrap_or((PAD_INDEX, T::zero()));
                    out.extend_from_slice(&i.to_le_bytes());
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "reference cache");
        r.expect_magic(CACHE_MAGIC)?;
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(r.malformed(format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let k = r.u32()? as usize;
        let m = r.u32()? as usize;
        let layer = r.u32()? as usize;
        let kind = r.u8()?;
        let kind = TapKind::from_code(kind).ok_or_else(|| r.malformed(format!("tap kind {kind}")))?;
        let pooling = r.u8()?;
        let pooling =
            PoolingMode::from_code(pooling).ok_or_else(|| r.malformed(format!("pooling {pooling}")))?;
        let header = CacheHeader {
            n,
            k,
            m,
            tap: Tap { layer, kind },
            pooling,
            sae_checksum: r.u64()?,
            ref_checksum: r.u64()?,
        };
        if bytes.len() != payload_bytes(n, k) {
            return Err(r.malformed(format!(
                "{} bytes, header implies {}",
                bytes.len(),
                payload_bytes(n, k)
            )));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let pair_id = r.u64()?;
            let gamma = T::of(r.f32()? as f64);
            let mut sides = [Vec::with_capacity(k), Vec::with_capacity(k)];
            for side in &mut sides {
                for _ in 0..k {
                    let i = r.u32()?;
                    let v = r.f32()?;
                    if i != PAD_INDEX {
                        side.push((i, T::of(v as f64)));
                    }
                }
            }
            let [chosen, rejected] = sides;
            entries.push(RefCacheEntry {
                pair_id,
                gamma,
                chosen,
                rejected,
            });
        }
        r.finish()?;
        Self::new(header, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read_file(path)?)
    }

    /// One JSON object per line: the header first, then every entry.
    pub fn export_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        serde_json::to_writer(&mut buf, &self.header)?;
        buf.push(b'\n');
        for e in &self.entries {
            let line = RefCacheEntry {
                pair_id: e.pair_id,
                gamma: e.gamma.as_f64(),
                chosen: e.chosen.iter().map(|&(i, v)| (i, v.as_f64())).collect(),
                rejected: e.rejected.iter().map(|&(i, v)| (i, v.as_f64())).collect(),
            };
            serde_json::to_writer(&mut buf, &line)?;
            buf.write_all(b"\n").map_err(|err| Error::io(path, err))?;
        }
        crate::io::write_file(path, &buf)
    }
}

/// Pooled SAE activation of response `y` at `tap`.
pub fn pooled_activation<T: Scalar>(
    model: &TinyLM<T>,
    sae: &SparseAutoencoder<T>,
    tap: Tap,
    pooling: PoolingMode,
    x: &[u32],
    y: &[u32],
) -> Result<PooledActivation<T>> {
    let trace = model.response_trace(x, y, &[tap])?;
    pool(&sae.encode_rows(&trace.taps[0])?, pooling)
}

/// Reference quantities of both responses of one pair.
pub(crate) fn reference_entry<T: Scalar>(
    reference: &TinyLM<T>,
    sae: &SparseAutoencoder<T>,
    tap: Tap,
    pooling: PoolingMode,
    k: usize,
    pair: &PreferencePair,
) -> Result<RefCacheEntry<T>> {
    let gamma = crate::losses::gamma_ref_ln(reference, &pair.x, &pair.y_w, &pair.y_l, 1.0)?;
    let chosen = pooled_activation(reference, sae, tap, pooling, &pair.x, &pair.y_w)?.top_k(k)?;
    let rejected = pooled_activation(reference, sae, tap, pooling, &pair.x, &pair.y_l)?.top_k(k)?;
    Ok(RefCacheEntry {
        pair_id: pair.pair_id,
        gamma,
        chosen,
        rejected,
    })
}

/// Precomputes the cache for `pairs`. Entries follow dataset order.
pub fn precompute<T: Scalar>(
    pairs: &[PreferencePair],
    reference: &TinyLM<T>,
    sae: &SparseAutoencoder<T>,
    tap: Tap,
    pooling: PoolingMode,
    k: usize,
) -> Result<RefCache<T>> {
    if tap.layer >= reference.config().layers {
        return Err(Error::Config(format!(
            "tap layer {} not present in a {}-layer reference",
            tap.layer,
            reference.config().layers
        )));
    }
    if sae.dim() != reference.config().d_model {
        return Err(Error::Dimension {
            expected: reference.config().d_model,
            got: sae.dim(),
        });
    }
    if k == 0 || k > sae.width() {
        return Err(Error::Config(format!("k = {k} must lie in 1..={}", sae.width())));
    }
    let entries = pairs
        .par_iter()
        .map(|p| reference_entry(reference, sae, tap, pooling, k, p))
        .collect::<Result<Vec<_>>>()?;
    RefCache::new(
        CacheHeader {
            n: entries.len(),
            k,
            m: sae.width(),
            tap,
            pooling,
            sae_checksum: sae.checksum(),
            ref_checksum: reference.checksum(),
        },
        entries,
    )
}
