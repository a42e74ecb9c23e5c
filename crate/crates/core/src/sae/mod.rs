//! Sparse autoencoder over hidden states.
//!
//! `c = ReLU(W_enc·h + b)` and `ĥ = W_decᵀ·c`, with `W_enc` and `W_dec`
//! both stored `m × d`. Training minimizes `‖h − ĥ‖² + alpha_l1·‖c‖₁`.

mod checkpoint;
mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{top_k_indices, Array, Graph, NodeId, ParamId, ParamSet, Scalar};
use crate::error::{Error, Result};

pub use checkpoint::{read_sae, write_sae, SAE_MAGIC, SAE_VERSION};
pub use train::{collect_activations, train_sae, SaeConfig, SaeReport};

/// Activations above this count as active for L0 and sparsity reporting.
pub const ACTIVE_THRESHOLD: f64 = 1e-6;

const W_ENC: ParamId = ParamId(0);
const B: ParamId = ParamId(1);
const W_DEC: ParamId = ParamId(2);

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAutoencoder<T> {
    params: ParamSet<T>,
    alpha_l1: f64,
}

impl<T: Scalar> SparseAutoencoder<T> {
    pub fn new(w_enc: Array<T>, b: Array<T>, w_dec: Array<T>, alpha_l1: f64) -> Result<Self> {
        if w_enc.shape().len() != 2 || w_enc.shape() != w_dec.shape() {
            return Err(Error::Contract(format!(
                "encoder {:?} and decoder {:?} must both be m x d",
                w_enc.shape(),
                w_dec.shape()
            )));
        }
        let m = w_enc.rows();
        if b.shape() != [m] {
            return Err(Error::Dimension {
                expected: m,
                got: b.len(),
            });
        }
        if !(alpha_l1 >= 0.0) {
            return Err(Error::Config(format!("alpha_l1 must be >= 0, got {alpha_l1}")));
        }
        let mut params = ParamSet::new();
        params.add("w_enc", w_enc);
        params.add("b", b);
        params.add("w_dec", w_dec);
        Ok(Self { params, alpha_l1 })
    }

    /// Tied random init: unit-norm decoder rows, `W_enc = W_dec`, `b = 0`.
    pub fn init(d: usize, m: usize, alpha_l1: f64, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::Config("SAE dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut w: Vec<f64> = (0..m * d).map(|_| normal.sample(&mut rng)).collect();
        for row in w.chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let w = Array::from_f64(&[m, d], &w)?;
        Self::new(w.clone(), Array::zeros(&[m]), w, alpha_l1)
    }

    /// `m = 2d` dictionary `[I; −I]` for encoder and decoder with zero bias.
    ///
    /// `ReLU(h) − ReLU(−h) = h`, so `decode(encode(h)) = h` for every `h`.
    pub fn exact_reconstruction(d: usize) -> Result<Self> {
        let mut w = Array::zeros(&[2 * d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = T::one();
            w.data_mut()[(d + i) * d + i] = -T::one();
        }
        Self::new(w.clone(), Array::zeros(&[2 * d]), w, 0.0)
    }

    pub fn width(&self) -> usize {
        self.w_enc().rows()
    }

    pub fn dim(&self) -> usize {
        self.w_enc().cols()
    }

    pub fn alpha_l1(&self) -> f64 {
        self.alpha_l1
    }

    pub fn is_overcomplete(&self) -> bool {
        self.width() > self.dim()
    }

    pub fn w_enc(&self) -> &Array<T> {
        self.params.get(W_ENC)
    }

    pub fn b(&self) -> &Array<T> {
        self.params.get(B)
    }

    pub fn w_dec(&self) -> &Array<T> {
        self.params.get(W_DEC)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> SparseAutoencoder<U> {
        SparseAutoencoder {
            params: self.params.cast(),
            alpha_l1: self.alpha_l1,
        }
    }

    pub fn encode(&self, h: &[T]) -> Result<Vec<T>> {
        Ok(self.encode_rows(&Array::matrix(1, h.len(), h.to_vec())?)?.into_data())
    }

    /// Encodes every row of `[n, d]` hidden states into `[n, m]`.
    pub fn encode_rows(&self, h: &Array<T>) -> Result<Array<T>> {
        let (m, d) = (self.width(), self.dim());
        if h.cols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: h.cols(),
            });
        }
        let n = h.len() / d;
        let mut c = Vec::with_capacity(n * m);
        for _ in 0..n {
            c.extend_from_slice(self.b().data());
        }
        T::gemm(n, d, m, h.data(), false, self.w_enc().data(), true, T::one(), &mut c);
        c.iter_mut().for_each(|x| *x = x.max(T::zero()));
        Array::matrix(n, m, c)
    }

    pub fn decode(&self, c: &[T]) -> Result<Vec<T>> {
        let (m, d) = (self.width(), self.dim());
        if c.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: c.len(),
            });
        }
        let mut h = vec![T::zero(); d];
        T::gemm(1, m, d, c, false, self.w_dec().data(), false, T::zero(), &mut h);
        Ok(h)
    }

    /// `‖h − decode(encode(h))‖² + alpha_l1·‖encode(h)‖₁`.
    pub fn loss(&self, h: &[T]) -> Result<T> {
        let c = self.encode(h)?;
        let rec = self.decode(&c)?;
        let err: T = h.iter().zip(&rec).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let l1: T = c.iter().copied().sum();
        Ok(err + T::of(self.alpha_l1) * l1)
    }

    /// Adds the weights to `g` as trainable leaves.
    pub fn leaves(&self, g: &mut Graph<T>) -> SaeNodes {
        SaeNodes {
            w_enc: g.param(&self.params, W_ENC),
            b: g.param(&self.params, B),
            w_dec: g.param(&self.params, W_DEC),
        }
    }

    /// Adds the weights to `g` as constants, for use inside a policy loss.
    pub fn frozen(&self, g: &mut Graph<T>) -> SaeNodes {
        SaeNodes {
            w_enc: g.constant(Arc::new(self.w_enc().clone())),
            b: g.constant(Arc::new(self.b().clone())),
            w_dec: g.constant(Arc::new(self.w_dec().clone())),
        }
    }

    /// Per-row objective averaged over the `[n, d]` rows of `h`.
    pub fn build_loss(&self, g: &mut Graph<T>, nodes: &SaeNodes, h: NodeId) -> Result<NodeId> {
        let n = g.shape(h).first().copied().unwrap_or(1);
        let c = nodes.encode(g, h)?;
        let rec = g.matmul(c, nodes.w_dec)?;
        let diff = g.sub(h, rec)?;
        let sq = g.square(diff)?;
        let err = g.sum(sq)?;
        let l1 = g.sum(c)?;
        let l1 = g.scale(l1, T::of(self.alpha_l1))?;
        let total = g.add(err, l1)?;
        g.scale(total, T::one() / T::of(n as f64))
    }
}

/// SAE weights inside one graph.
#[derive(Clone, Copy, Debug)]
pub struct SaeNodes {
    pub w_enc: NodeId,
    pub b: NodeId,
    pub w_dec: NodeId,
}

impl SaeNodes {
    /// `[n, d]` hidden rows to `[n, m]` activations.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, h: NodeId) -> Result<NodeId> {
        let pre = g.matmul_nt(h, self.w_enc)?;
        let pre = g.add_row(pre, self.b)?;
        g.relu(pre)
    }
}

/// How per-token activations are aggregated over a response.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    #[default]
    Mean,
    Sum,
}

impl PoolingMode {
    pub fn code(self) -> u8 {
        match self {
            PoolingMode::Mean => 0,
            PoolingMode::Sum => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PoolingMode::Mean),
            1 => Some(PoolingMode::Sum),
            _ => None,
        }
    }

    /// `[T, m]` activations to a pooled `[m]` node.
    pub fn build<T: Scalar>(self, g: &mut Graph<T>, acts: NodeId) -> Result<NodeId> {
        match self {
            PoolingMode::Mean => g.mean_rows(acts),
            PoolingMode::Sum => g.sum_rows(acts),
        }
    }
}

/// Response-level activation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledActivation<T> {
    pub values: Vec<T>,
    /// Number of token rows that were pooled.
    pub tokens: usize,
}

impl<T: Scalar> PooledActivation<T> {
    /// `(index, value)` pairs of the `k` largest entries, ascending by index.
    pub fn top_k(&self, k: usize) -> Result<Vec<(u32, T)>> {
        Ok(topk_indices(&self.values, k)?
            .into_iter()
            .map(|i| (i as u32, self.values[i]))
            .collect())
    }

    /// Dense length-`m` vector from sparse pairs; missing indices are zero.
    pub fn densify(m: usize, pairs: &[(u32, T)]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); m];
        for &(i, v) in pairs {
            let slot = out.get_mut(i as usize).ok_or(Error::Dimension {
                expected: m,
                got: i as usize + 1,
            })?;
            *slot = v;
        }
        Ok(out)
    }
}

/// Indices of the `k` largest values, ascending; ties go to the smaller
/// index.
pub fn topk_indices<T: Scalar>(c: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > c.len() {
        return Err(Error::Contract(format!(
            "top-k size {k} must lie in 1..={}",
            c.len()
        )));
    }
    Ok(top_k_indices(c, k))
}

/// Elementwise mean or sum of `[T, m]` per-token activations.
pub fn pool<T: Scalar>(acts: &Array<T>, mode: PoolingMode) -> Result<PooledActivation<T>> {
    let (t, m) = (acts.rows(), acts.cols());
    if acts.is_empty() || t == 0 {
        return Err(Error::Empty("token range to pool"));
    }
    let mut values = vec![T::zero(); m];
    for r in 0..t {
        for (v, &a) in values.iter_mut().zip(acts.row(r)) {
            *v += a;
        }
    }
    if mode == PoolingMode::Mean {
        let inv = T::one() / T::of(t as f64);
        values.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(PooledActivation { values, tokens: t })
}

/// Sparsity statistics of `[n, m]` activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    /// Mean count of entries above [`ACTIVE_THRESHOLD`] per row.
    pub mean_l0: f64,
    /// Mean over rows with non-zero mass of the share carried by the
    /// `top_n` largest entries.
    pub top_mass: f64,
    pub top_n: usize,
}

pub fn sparsity_stats<T: Scalar>(acts: &Array<T>, top_n: usize) -> SparsityStats {
    let rows = acts.rows();
    let mut l0 = 0usize;
    let (mut share, mut counted) = (0.0, 0usize);
    let mut sorted = Vec::with_capacity(acts.cols());
    for r in 0..rows {
        let row = acts.row(r);
        l0 += row.iter().filter(|x| x.as_f64() > ACTIVE_THRESHOLD).count();
        let total: f64 = row.iter().map(|x| x.as_f64().abs()).sum();
        if total > 0.0 {
            sorted.clear();
            sorted.extend(row.iter().map(|x| x.as_f64().abs()));
            sorted.sort_by(|a, b| b.total_cmp(a));
            share += sorted.iter().take(top_n).sum::<f64>() / total;
            counted += 1;
        }
    }
    SparsityStats {
        mean_l0: if rows == 0 { 0.0 } else { l0 as f64 / rows as f64 },
        top_mass: if counted == 0 { 1.0 } else { share / counted as f64 },
        top_n,
    }
}
