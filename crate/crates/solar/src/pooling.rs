//! Generalized-mean pooling, feature clipping, l2 normalization and the
//! learned whitening projection: the first-order descriptor head.
//!
//! The pooled vector for channel `c` is `((1/N) * sum_i f[i,c]^p)^(1/p)`
//! over the `N = h*w` spatial locations. `p = 1` is average pooling and
//! large `p` approaches max pooling. Feature magnitudes are clipped to a
//! minimum of [`CLIP_EPS`] before the power is applied so that large
//! exponents stay numerically stable.

use ndarray::{Array1, Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

/// Minimum feature magnitude admitted into the power mean.
pub const CLIP_EPS: f64 = 1e-6;

/// Unit-norm tolerance for [`Descriptor`] construction.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A rank-3 activation map of shape `[h, w, d]` produced by a backbone.
///
/// Entries are finite by construction; spatial flattening is row-major
/// (location index `i = r * w + c`), which every attention and pooling
/// operation in this crate relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, d) = data.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::validation(format!(
                "feature map must be non-empty, got shape [{h}, {w}, {d}]"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("feature map contains non-finite entries"));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(FeatureMap { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Number of spatial locations `h * w`.
    pub fn locations(&self) -> usize {
        self.height() * self.width()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// View of the map as an `(h*w, d)` matrix, row-major in location.
    pub fn as_locations(&self) -> ArrayView2<'_, f64> {
        let (h, w, d) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((h * w, d))
            .expect("standard layout guaranteed by constructor")
    }

    /// Rebuild a map from an `(h*w, d)` location matrix.
    pub fn from_locations(mat: Array2<f64>, h: usize, w: usize) -> Result<Self> {
        let (n, d) = mat.dim();
        if n != h * w {
            return Err(Error::validation(format!(
                "location matrix has {n} rows, expected {h}*{w}"
            )));
        }
        let data = mat
            .into_shape_with_order((h, w, d))
            .map_err(|e| Error::validation(e.to_string()))?;
        FeatureMap::new(data)
    }
}

/// The learnable GeM exponent. Legal values are `p >= 1`; the ablation
/// sweep additionally restricts itself to `p <= 100`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemParam {
    p: f64,
}

impl GemParam {
    /// Lower bound of the legal range, enforced by construction and by
    /// projection after every optimizer step.
    pub const MIN_P: f64 = 1.0;
    /// Upper bound of the range covered by the ablation sweep tool.
    pub const SWEEP_MAX_P: f64 = 100.0;
    /// Initial value used by fresh models.
    pub const INIT_P: f64 = 3.0;

    pub fn new(p: f64) -> Result<Self> {
        if !p.is_finite() || p < Self::MIN_P {
            return Err(Error::validation(format!(
                "gem exponent must be a finite value >= {}, got {p}",
                Self::MIN_P
            )));
        }
        Ok(GemParam { p })
    }

    pub fn value(&self) -> f64 {
        self.p
    }

    /// Project an arbitrary proposal back into the legal range.
    pub fn project(p: f64) -> f64 {
        p.max(Self::MIN_P)
    }
}

impl Default for GemParam {
    fn default() -> Self {
        GemParam { p: Self::INIT_P }
    }
}

/// Bias-enabled fully-connected layer applied to the pooled descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl WhiteningLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.dim().0 != bias.len() {
            return Err(Error::validation(format!(
                "whitening weight has {} output rows but bias has {} entries",
                weight.dim().0,
                bias.len()
            )));
        }
        if !weight.iter().all(|v| v.is_finite()) || !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("whitening layer contains non-finite entries"));
        }
        Ok(WhiteningLayer { weight, bias })
    }

    /// Dimension-preserving identity initialization.
    pub fn identity(dim: usize) -> Self {
        WhiteningLayer { weight: Array2::eye(dim), bias: Array1::zeros(dim) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim().1
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dim().0
    }
}

/// A unit-norm descriptor vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Array1<f64>,
}

impl Descriptor {
    /// Wrap an already-normalized vector, checking the unit-norm invariant.
    pub fn from_unit(values: Array1<f64>) -> Result<Self> {
        let norm = values.dot(&values).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::validation(format!(
                "descriptor norm {norm} departs from 1 by more than {UNIT_NORM_TOL}"
            )));
        }
        Ok(Descriptor { values })
    }

    /// Wrap a vector without the norm check. Finite-difference probes and
    /// other numeric tooling need descriptors nudged slightly off the unit
    /// sphere; everything else should go through [`Descriptor::from_unit`].
    pub fn from_unit_unchecked(values: Array1<f64>) -> Self {
        Descriptor { values }
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Squared Euclidean distance to another descriptor.
    pub fn squared_distance(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Inner product; on unit vectors this is the retrieval similarity.
    pub fn similarity(&self, other: &Descriptor) -> f64 {
        self.values.dot(&other.values)
    }
}

/// Clamp every entry of `f` to at least `eps`.
pub fn clip_features(f: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::validation(format!("clip epsilon must be positive, got {eps}")));
    }
    let data = f.data().mapv(|v| v.max(eps));
    FeatureMap::new(data)
}

/// Generalized-mean pooling over the spatial locations of `f`.
///
/// The map is clipped to [`CLIP_EPS`] internally, so callers may pass raw
/// backbone activations. Returns one value per channel.
pub fn gem_pool(f: &FeatureMap, p: &GemParam) -> Array1<f64> {
    let clipped = clip_features(f, CLIP_EPS).expect("CLIP_EPS is positive");
    gem_pool_preclipped(&clipped, p)
}

/// GeM pooling on a map whose entries are already >= the clip epsilon.
pub fn gem_pool_preclipped(f: &FeatureMap, p: &GemParam) -> Array1<f64> {
    let locs = f.as_locations();
    let n = locs.dim().0 as f64;
    let p_val = p.value();
    Array1::from_shape_fn(f.channels(), |c| {
        let s: f64 = locs.column(c).iter().map(|&v| v.powf(p_val)).sum::<f64>() / n;
        s.powf(1.0 / p_val)
    })
}

/// Gradients of GeM pooling.
///
/// Given the upstream gradient `d_out` w.r.t. the pooled vector, returns the
/// gradient w.r.t. the (unclipped) feature map and w.r.t. the exponent.
/// Entries clipped away (below [`CLIP_EPS`]) receive zero gradient.
pub fn gem_pool_backward(f: &FeatureMap, p: &GemParam, d_out: &Array1<f64>) -> (Array3<f64>, f64) {
    let p_val = p.value();
    let (h, w, d) = f.data().dim();
    let n = (h * w) as f64;
    let mut d_f = Array3::zeros((h, w, d));
    let mut d_p = 0.0;
    for c in 0..d {
        let mut s = 0.0;
        let mut s_lng = 0.0; // d/dp of the inner power sum
        for r in 0..h {
            for col in 0..w {
                let x = f.data()[[r, col, c]].max(CLIP_EPS);
                let xp = x.powf(p_val);
                s += xp;
                s_lng += xp * x.ln();
            }
        }
        s /= n;
        s_lng /= n;
        let y = s.powf(1.0 / p_val);
        let g = d_out[c];
        // dy/dx_i = y^(1-p) * x_i^(p-1) / N, masked where the clip was active
        let scale = y.powf(1.0 - p_val) / n;
        for r in 0..h {
            for col in 0..w {
                let raw = f.data()[[r, col, c]];
                if raw >= CLIP_EPS {
                    d_f[[r, col, c]] = g * scale * raw.powf(p_val - 1.0);
                }
            }
        }
        // dy/dp = y * (-ln(S)/p^2 + S'/(p*S))
        d_p += g * y * (-s.ln() / (p_val * p_val) + s_lng / (p_val * s));
    }
    (d_f, d_p)
}

/// Scale a vector to unit Euclidean norm.
pub fn l2_normalize(v: &Array1<f64>) -> Result<Descriptor> {
    let norm = v.dot(v).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::validation(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Descriptor::from_unit(v / norm)
}

/// Gradient of [`l2_normalize`] w.r.t. its input.
pub fn l2_normalize_backward(v: &Array1<f64>, d_out: &Array1<f64>) -> Array1<f64> {
    let norm = v.dot(v).sqrt();
    let y = v / norm;
    let proj = y.dot(d_out);
    (d_out - &(&y * proj)) / norm
}

/// Apply the whitening projection `W v + b`.
pub fn whiten(v: &Array1<f64>, layer: &WhiteningLayer) -> Result<Array1<f64>> {
    if v.len() != layer.input_dim() {
        return Err(Error::validation(format!(
            "whitening expects input dimension {}, got {}",
            layer.input_dim(),
            v.len()
        )));
    }
    Ok(layer.weight.dot(v) + &layer.bias)
}

/// Gradients of [`whiten`]: returns (d_input, d_weight, d_bias).
pub fn whiten_backward(
    v: &Array1<f64>,
    layer: &WhiteningLayer,
    d_out: &Array1<f64>,
) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    let d_in = layer.weight.t().dot(d_out);
    let mut d_weight = Array2::zeros(layer.weight.dim());
    for i in 0..layer.output_dim() {
        for j in 0..layer.input_dim() {
            d_weight[[i, j]] = d_out[i] * v[j];
        }
    }
    (d_in, d_weight, d_out.clone())
}
