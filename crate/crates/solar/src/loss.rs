//! First-order triplet loss, second-order similarity loss and their
//! weighted combination.
//!
//! Both losses work on squared Euclidean distances between unit-norm
//! descriptors, with no internal re-normalization. The second-order term
//! is `(1/|T|) * sqrt(sum_t ((|a-n|^2 - |p-n|^2))^2)` with the `1/|T|`
//! factor outside the square root.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::Descriptor;

/// Class label attached to descriptors for triplet formation and mining.
pub type ClassId = u32;

/// An (anchor, positive, negative) descriptor triple.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: Descriptor,
    pub positive: Descriptor,
    pub negative: Descriptor,
    pub anchor_class: ClassId,
    pub negative_class: ClassId,
}

impl Triplet {
    pub fn new(
        anchor: Descriptor,
        positive: Descriptor,
        negative: Descriptor,
        anchor_class: ClassId,
        negative_class: ClassId,
    ) -> Result<Self> {
        if anchor_class == negative_class {
            return Err(Error::validation(format!(
                "triplet negative shares class {anchor_class} with its anchor"
            )));
        }
        Ok(Triplet { anchor, positive, negative, anchor_class, negative_class })
    }
}

/// Loss hyperparameters: triplet margin and second-order weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 1.25, lambda: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::validation(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::validation(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Value of the combined objective together with its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub fos: f64,
    pub sos: f64,
}

/// Per-triplet gradients w.r.t. the three descriptors.
#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub d_anchor: Array1<f64>,
    pub d_positive: Array1<f64>,
    pub d_negative: Array1<f64>,
}

fn require_non_empty(triplets: &[Triplet]) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::validation("loss requires a non-empty triplet set"));
    }
    Ok(())
}

/// Mean hinge loss `max(0, |a-p|^2 - |a-n|^2 + m)` over the set.
pub fn fos_loss(triplets: &[Triplet], margin: f64) -> Result<f64> {
    require_non_empty(triplets)?;
    let sum: f64 = triplets
        .iter()
        .map(|t| {
            let ap = t.anchor.squared_distance(&t.positive);
            let an = t.anchor.squared_distance(&t.negative);
            (ap - an + margin).max(0.0)
        })
        .sum();
    Ok(sum / triplets.len() as f64)
}

/// Second-order similarity loss over the set.
pub fn sos_loss(triplets: &[Triplet]) -> Result<f64> {
    require_non_empty(triplets)?;
    let sum_sq: f64 = triplets
        .iter()
        .map(|t| {
            let an = t.anchor.squared_distance(&t.negative);
            let pn = t.positive.squared_distance(&t.negative);
            (an - pn) * (an - pn)
        })
        .sum();
    Ok(sum_sq.sqrt() / triplets.len() as f64)
}

/// Combined objective `fos + lambda * sos`.
pub fn total_loss(triplets: &[Triplet], cfg: &LossConfig) -> Result<f64> {
    Ok(loss_terms(triplets, cfg)?.total)
}

/// Combined objective with both terms reported separately.
pub fn loss_terms(triplets: &[Triplet], cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let fos = fos_loss(triplets, cfg.margin)?;
    let sos = sos_loss(triplets)?;
    Ok(LossTerms { total: fos + cfg.lambda * sos, fos, sos })
}

/// Loss terms and per-triplet descriptor gradients of the combined
/// objective.
///
/// At the hinge kink (argument exactly zero) the first-order term
/// contributes no gradient, and likewise the second-order term when all
/// inner differences vanish.
pub fn total_loss_backward(
    triplets: &[Triplet],
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<TripletGrads>)> {
    let terms = loss_terms(triplets, cfg)?;
    let count = triplets.len() as f64;
    let dim = triplets[0].anchor.dim();

    // Root of the summed squared inner differences, needed for the SOS term.
    let root: f64 = triplets
        .iter()
        .map(|t| {
            let an = t.anchor.squared_distance(&t.negative);
            let pn = t.positive.squared_distance(&t.negative);
            (an - pn) * (an - pn)
        })
        .sum::<f64>()
        .sqrt();

    let mut grads = Vec::with_capacity(triplets.len());
    for t in triplets {
        let a = t.anchor.values();
        let p = t.positive.values();
        let n = t.negative.values();
        let mut d_a = Array1::zeros(dim);
        let mut d_p = Array1::zeros(dim);
        let mut d_n = Array1::zeros(dim);

        let ap = t.anchor.squared_distance(&t.positive);
        let an = t.anchor.squared_distance(&t.negative);
        if ap - an + cfg.margin > 0.0 {
            let scale = 2.0 / count;
            d_a = d_a + (n - p) * scale;
            d_p = d_p + (p - a) * scale;
            d_n = d_n + (n - a) * (-scale);
        }

        if cfg.lambda > 0.0 && root > 0.0 {
            let pn = t.positive.squared_distance(&t.negative);
            let delta = an - pn;
            let coeff = cfg.lambda * delta / (count * root);
            d_a = d_a + (a - n) * (2.0 * coeff);
            d_p = d_p + (p - n) * (-2.0 * coeff);
            d_n = d_n + (p - a) * (2.0 * coeff);
        }

        grads.push(TripletGrads { d_anchor: d_a, d_positive: d_p, d_negative: d_n });
    }
    Ok((terms, grads))
}
