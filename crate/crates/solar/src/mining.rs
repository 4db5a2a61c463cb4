//! Epoch-level anchor sampling and hard-negative mining.
//!
//! Negatives are the nearest pool descriptors drawn from classes other
//! than the anchor's, at most one per class so that every triplet in an
//! anchor's group comes from a separate class. Ties are broken by
//! ascending item id to keep mining reproducible across platforms.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::loss::{ClassId, Triplet};
use crate::pooling::Descriptor;

/// A read-only pool of labeled descriptors to mine negatives from.
#[derive(Debug, Clone)]
pub struct LabeledPool {
    descriptors: Vec<Descriptor>,
    class_ids: Vec<ClassId>,
    item_ids: Vec<String>,
}

impl LabeledPool {
    pub fn new(
        descriptors: Vec<Descriptor>,
        class_ids: Vec<ClassId>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        if descriptors.len() != class_ids.len() || descriptors.len() != item_ids.len() {
            return Err(Error::validation(format!(
                "pool columns disagree: {} descriptors, {} classes, {} ids",
                descriptors.len(),
                class_ids.len(),
                item_ids.len()
            )));
        }
        let unique: BTreeSet<&String> = item_ids.iter().collect();
        if unique.len() != item_ids.len() {
            return Err(Error::validation("pool item ids must be unique"));
        }
        Ok(LabeledPool { descriptors, class_ids, item_ids })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptor(&self, idx: usize) -> &Descriptor {
        &self.descriptors[idx]
    }

    pub fn class(&self, idx: usize) -> ClassId {
        self.class_ids[idx]
    }

    pub fn item_id(&self, idx: usize) -> &str {
        &self.item_ids[idx]
    }
}

/// Knobs of the per-epoch mining procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub anchors_per_epoch: usize,
    pub negatives_per_anchor: usize,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            anchors_per_epoch: 2000,
            negatives_per_anchor: 5,
            pool_size: 20_000,
            seed: 0,
        }
    }
}

impl MiningConfig {
    /// Scaled-down profile for laptop-sized experiments: 64 anchors and a
    /// 512-item pool per epoch, same 5 negatives per anchor.
    pub fn desk_profile(seed: u64) -> Self {
        MiningConfig { anchors_per_epoch: 64, negatives_per_anchor: 5, pool_size: 512, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_epoch == 0 || self.negatives_per_anchor == 0 || self.pool_size == 0 {
            return Err(Error::validation("mining sizes must be positive"));
        }
        Ok(())
    }
}

/// Outcome of anchor sampling: index pairs into the caller's item list,
/// plus a flag telling whether the request exceeded the eligible items.
#[derive(Debug, Clone)]
pub struct AnchorSample {
    /// (anchor index, positive index) pairs
    pub pairs: Vec<(usize, usize)>,
    /// true when fewer eligible anchors existed than were requested
    pub saturated: bool,
}

/// Draw anchors uniformly without replacement and a same-class positive
/// for each.
///
/// Items whose class has a single member cannot anchor a pair and are
/// excluded up front. When the request exceeds the eligible items, every
/// eligible item is used once and the outcome is flagged as saturated.
pub fn sample_anchors(classes: &[ClassId], cfg: &MiningConfig) -> Result<AnchorSample> {
    cfg.validate()?;
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (idx, &class) in classes.iter().enumerate() {
        by_class.entry(class).or_default().push(idx);
    }
    let mut eligible: Vec<usize> = classes
        .iter()
        .enumerate()
        .filter(|(_, class)| by_class[class].len() >= 2)
        .map(|(idx, _)| idx)
        .collect();
    if eligible.is_empty() {
        return Err(Error::validation(
            "no class has two or more members; cannot form anchor/positive pairs",
        ));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    eligible.shuffle(&mut rng);
    let take = cfg.anchors_per_epoch.min(eligible.len());
    let saturated = take < cfg.anchors_per_epoch;

    let mut pairs = Vec::with_capacity(take);
    for &anchor in eligible.iter().take(take) {
        let mates = &by_class[&classes[anchor]];
        // uniform same-class positive, never the anchor itself
        let positive = loop {
            let candidate = mates[rng.gen_range(0..mates.len())];
            if candidate != anchor {
                break candidate;
            }
        };
        pairs.push((anchor, positive));
    }
    Ok(AnchorSample { pairs, saturated })
}

/// Return the `k` nearest pool items to `anchor` among items of other
/// classes, keeping at most one item per class. Ties break by ascending
/// item id. Errors when fewer than `k` distinct other classes exist.
pub fn mine_hard_negatives(
    anchor: &Descriptor,
    anchor_class: ClassId,
    pool: &LabeledPool,
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::validation("k must be positive"));
    }
    let mut candidates: Vec<usize> = (0..pool.len())
        .filter(|&i| pool.class(i) != anchor_class)
        .collect();
    candidates.sort_by(|&a, &b| {
        let da = anchor.squared_distance(pool.descriptor(a));
        let db = anchor.squared_distance(pool.descriptor(b));
        da.partial_cmp(&db)
            .expect("finite distances")
            .then_with(|| pool.item_id(a).cmp(pool.item_id(b)))
    });

    let mut seen = BTreeSet::new();
    let mut picked = Vec::with_capacity(k);
    for idx in candidates {
        if seen.insert(pool.class(idx)) {
            picked.push(idx);
            if picked.len() == k {
                return Ok(picked);
            }
        }
    }
    Err(Error::validation(format!(
        "mining needs {k} distinct classes other than {anchor_class}, pool offers only {}",
        picked.len()
    )))
}

/// Form one triplet per negative, all sharing the anchor and positive.
pub fn build_triplets(
    anchor: &Descriptor,
    anchor_class: ClassId,
    positive: &Descriptor,
    negatives: &[(Descriptor, ClassId)],
) -> Result<Vec<Triplet>> {
    if negatives.is_empty() {
        return Err(Error::validation("triplet construction needs at least one negative"));
    }
    negatives
        .iter()
        .map(|(neg, class)| {
            Triplet::new(anchor.clone(), positive.clone(), neg.clone(), anchor_class, *class)
        })
        .collect()
}
