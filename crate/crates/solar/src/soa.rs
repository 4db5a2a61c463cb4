//! Second-Order Attention block.
//!
//! A residual non-local layer: query and key projections of the feature map
//! produce a row-stochastic attention matrix over all spatial locations,
//! which mixes a value projection back into the map through a zero-initialized
//! output projection. With the output projection at zero the block is an
//! exact identity, so freshly inserted blocks never disturb an existing
//! pipeline.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pooling::FeatureMap;

/// Row-sum tolerance for [`AttentionMap`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Parameters of one attention block.
///
/// `wq`/`wk` are the query/key heads of shape `[d_qk, d]`, `wv` the value
/// head and `w_out` the output projection, both `[d, d]`. All four act as
/// 1x1 convolutions, i.e. per-location linear maps. `alpha` scales the
/// query-key logits and defaults to `1/sqrt(d_qk)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoaParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub w_out: Array2<f64>,
    pub alpha: f64,
}

impl SoaParams {
    pub fn channels(&self) -> usize {
        self.wq.dim().1
    }

    pub fn qk_dim(&self) -> usize {
        self.wq.dim().0
    }

    /// True while the output projection is all zeros, i.e. the block is
    /// still an exact identity on any input.
    pub fn is_identity(&self) -> bool {
        self.w_out.iter().all(|&v| v == 0.0)
    }
}

/// Row-stochastic attention over all `h*w` spatial locations.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    z: Array2<f64>,
}

impl AttentionMap {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        let (rows, cols) = z.dim();
        if rows != cols {
            return Err(Error::validation(format!(
                "attention map must be square, got {rows}x{cols}"
            )));
        }
        for (i, row) in z.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(format!(
                    "attention row {i} sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::validation(format!(
                    "attention row {i} has entries outside [0, 1]"
                )));
            }
        }
        Ok(AttentionMap { z })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.z
    }

    /// Attention row for the flattened location `i = r*w + c`.
    pub fn row(&self, location: usize) -> Array1<f64> {
        self.z.row(location).to_owned()
    }

    pub fn locations(&self) -> usize {
        self.z.dim().0
    }
}

/// Initialize a block for `d`-channel maps.
///
/// The query/key heads reduce channels by `reduction`; `d` must divide
/// evenly. Head weights are drawn from a zero-mean normal with variance
/// `2/d`; the output projection starts at zero. Draws are rounded to f32
/// precision so a fresh block round-trips exactly through checkpoints.
pub fn init_soa(d: usize, reduction: usize, seed: u64) -> Result<SoaParams> {
    if reduction == 0 || d == 0 {
        return Err(Error::validation("channel count and reduction must be positive"));
    }
    if d % reduction != 0 {
        return Err(Error::validation(format!(
            "channel count {d} is not divisible by reduction {reduction}"
        )));
    }
    let d_qk = d / reduction;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("valid std");
    let mut draw = |shape: (usize, usize)| {
        Array2::from_shape_fn(shape, |_| normal.sample(&mut rng) as f32 as f64)
    };
    Ok(SoaParams {
        wq: draw((d_qk, d)),
        wk: draw((d_qk, d)),
        wv: draw((d, d)),
        w_out: Array2::zeros((d, d)),
        alpha: 1.0 / (d_qk as f64).sqrt(),
    })
}

/// Project a feature map through the three heads.
///
/// Returns `(q, k, v)` with `q` and `k` of shape `[d_qk, h*w]` (column `i`
/// is the projection of flattened location `i`) and `v` of shape `[h*w, d]`.
pub fn project_heads(
    f: &FeatureMap,
    params: &SoaParams,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if f.channels() != params.channels() {
        return Err(Error::validation(format!(
            "feature map has {} channels but block expects {}",
            f.channels(),
            params.channels()
        )));
    }
    let locs = f.as_locations(); // (n, d)
    let q = params.wq.dot(&locs.t());
    let k = params.wk.dot(&locs.t());
    let v = locs.dot(&params.wv.t());
    Ok((q, k, v))
}

/// Row-wise softmax of `alpha * q^T k`.
///
/// Normalization runs over the key index (columns); each row is stabilized
/// by subtracting its maximum logit before exponentiation.
pub fn attention_map(q: &Array2<f64>, k: &Array2<f64>, alpha: f64) -> Result<AttentionMap> {
    if q.dim() != k.dim() {
        return Err(Error::validation(format!(
            "query and key shapes differ: {:?} vs {:?}",
            q.dim(),
            k.dim()
        )));
    }
    let logits = q.t().dot(k) * alpha;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::validation("attention logits are not finite"));
    }
    AttentionMap::new(row_softmax(&logits))
}

fn row_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut z = logits.clone();
    for mut row in z.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    z
}

/// Intermediate products of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SoaCache {
    /// (n, d_qk) query rows
    q: Array2<f64>,
    /// (n, d_qk) key rows
    k: Array2<f64>,
    /// (n, d) value rows
    v: Array2<f64>,
    /// (n, n) attention
    z: Array2<f64>,
    /// (n, d) attention-mixed values `z . v`
    mixed: Array2<f64>,
}

impl SoaCache {
    pub fn attention(&self) -> &Array2<f64> {
        &self.z
    }
}

/// Parameter and input gradients of one block.
#[derive(Debug, Clone)]
pub struct SoaGrads {
    pub d_input: Array3<f64>,
    pub d_wq: Array2<f64>,
    pub d_wk: Array2<f64>,
    pub d_wv: Array2<f64>,
    pub d_w_out: Array2<f64>,
}

/// Apply the block: `out_i = f_i + w_out . (sum_j z[i,j] v_j)`.
///
/// Returns the re-weighted map and the attention matrix for inspection.
pub fn soa_forward(f: &FeatureMap, params: &SoaParams) -> Result<(FeatureMap, AttentionMap)> {
    let (out, cache) = soa_forward_cached(f, params)?;
    Ok((out, AttentionMap::new(cache.z)?))
}

/// Forward pass that also returns the cache needed by [`soa_backward`].
pub fn soa_forward_cached(f: &FeatureMap, params: &SoaParams) -> Result<(FeatureMap, SoaCache)> {
    let (q, k, v) = project_heads(f, params)?;
    let q = q.t().to_owned(); // (n, d_qk)
    let k = k.t().to_owned();
    let logits = q.dot(&k.t()) * params.alpha;
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::validation("attention logits are not finite"));
    }
    let z = row_softmax(&logits);
    let mixed = z.dot(&v); // (n, d)
    let out = f.as_locations().to_owned() + mixed.dot(&params.w_out.t());
    let map = FeatureMap::from_locations(out, f.height(), f.width())?;
    Ok((map, SoaCache { q, k, v, z, mixed }))
}

/// Backward pass for [`soa_forward_cached`].
///
/// `d_out` is the upstream gradient w.r.t. the block output in `[h, w, d]`
/// layout; the returned gradients cover the input map and all four weights.
pub fn soa_backward(
    f: &FeatureMap,
    params: &SoaParams,
    cache: &SoaCache,
    d_out: &Array3<f64>,
) -> SoaGrads {
    let (h, w, d) = f.data().dim();
    let n = h * w;
    let x = f.as_locations();
    let dy = d_out
        .view()
        .into_shape_with_order((n, d))
        .expect("gradient must match feature map layout")
        .to_owned();

    // Residual branch.
    let mut dx = dy.clone();

    // Output projection: y = x + mixed . w_out^T
    let d_w_out = dy.t().dot(&cache.mixed);
    let d_mixed = dy.dot(&params.w_out);

    // mixed = z . v
    let dz = d_mixed.dot(&cache.v.t());
    let dv = cache.z.t().dot(&d_mixed);

    // Softmax rows: dl_i = z_i * (dz_i - <dz_i, z_i>)
    let mut dl = Array2::zeros((n, n));
    for i in 0..n {
        let zi = cache.z.row(i);
        let dzi = dz.row(i);
        let dot = zi.dot(&dzi);
        for j in 0..n {
            dl[[i, j]] = zi[j] * (dzi[j] - dot);
        }
    }

    // logits = alpha * q . k^T
    let dq = dl.dot(&cache.k) * params.alpha;
    let dk = dl.t().dot(&cache.q) * params.alpha;

    // q = x . wq^T, k = x . wk^T, v = x . wv^T
    dx += &dq.dot(&params.wq);
    dx += &dk.dot(&params.wk);
    dx += &dv.dot(&params.wv);
    let d_wq = dq.t().dot(&x);
    let d_wk = dk.t().dot(&x);
    let d_wv = dv.t().dot(&x);

    let d_input = dx
        .into_shape_with_order((h, w, d))
        .expect("shape restored from feature map dims");
    SoaGrads { d_input, d_wq, d_wk, d_wv, d_w_out }
}
