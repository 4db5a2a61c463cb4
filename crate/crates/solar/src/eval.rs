//! Retrieval and matching metrics.
//!
//! Rankings order database ids by descending inner product of unit
//! descriptors, ties broken by ascending id. Junk ids are removed from a
//! ranking before any metric is computed. The easy/medium/hard protocols
//! reassign the easy and hard ground-truth lists between the positive and
//! junk roles.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::DescriptorModel;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::pooling::{Descriptor, GemParam};

/// Ground truth for one query: a bounding box and the easy/hard/junk id
/// lists. The three lists are pairwise disjoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryGroundTruth {
    pub id: String,
    pub bbox: [u32; 4],
    pub easy: Vec<String>,
    pub hard: Vec<String>,
    pub junk: Vec<String>,
}

/// Ground truth document: one record per query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalGroundTruth {
    pub queries: Vec<QueryGroundTruth>,
}

impl RetrievalGroundTruth {
    pub fn validate(&self) -> Result<()> {
        for q in &self.queries {
            let easy: BTreeSet<_> = q.easy.iter().collect();
            let hard: BTreeSet<_> = q.hard.iter().collect();
            let junk: BTreeSet<_> = q.junk.iter().collect();
            if easy.intersection(&hard).next().is_some()
                || easy.intersection(&junk).next().is_some()
                || hard.intersection(&junk).next().is_some()
            {
                return Err(Error::validation(format!(
                    "query {}: easy/hard/junk lists overlap",
                    q.id
                )));
            }
        }
        Ok(())
    }

    pub fn query(&self, id: &str) -> Option<&QueryGroundTruth> {
        self.queries.iter().find(|q| q.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let gt: RetrievalGroundTruth = serde_json::from_str(text)
            .map_err(|e| Error::format(format!("ground truth: {e}"), e.column() as u64))?;
        gt.validate()?;
        Ok(gt)
    }
}

/// Evaluation difficulty protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Easy,
    Medium,
    Hard,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Easy, Protocol::Medium, Protocol::Hard];

    pub fn parse(s: &str) -> Result<Protocol> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Protocol::Easy),
            "medium" => Ok(Protocol::Medium),
            "hard" => Ok(Protocol::Hard),
            other => Err(Error::validation(format!("unknown protocol {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Easy => "easy",
            Protocol::Medium => "medium",
            Protocol::Hard => "hard",
        }
    }
}

/// Positive and junk id sets for a query under a protocol.
///
/// Medium treats easy and hard ids as positives; easy demotes hard ids to
/// junk; hard demotes easy ids to junk.
pub fn protocol_split(
    gt: &QueryGroundTruth,
    protocol: Protocol,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let easy = gt.easy.iter().cloned();
    let hard = gt.hard.iter().cloned();
    let junk = gt.junk.iter().cloned();
    match protocol {
        Protocol::Easy => (easy.collect(), junk.chain(hard).collect()),
        Protocol::Medium => (easy.chain(hard).collect(), junk.collect()),
        Protocol::Hard => (hard.collect(), junk.chain(easy).collect()),
    }
}

/// A database ranking for one query, most similar first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub ranking: Vec<String>,
}

/// Rank database descriptors against one query by descending inner
/// product, ties by ascending id.
pub fn rank_database(
    query_id: &str,
    query: &Descriptor,
    database: &[(String, Descriptor)],
) -> RankedResult {
    let mut scored: Vec<(f64, &String)> = database
        .iter()
        .map(|(id, d)| (query.similarity(d), id))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite similarities")
            .then_with(|| a.1.cmp(b.1))
    });
    RankedResult {
        query_id: query_id.to_string(),
        ranking: scored.into_iter().map(|(_, id)| id.clone()).collect(),
    }
}

/// Average precision of one junk-filtered ranking.
pub fn average_precision(
    ranked: &[String],
    positives: &BTreeSet<String>,
    junk: &BTreeSet<String>,
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::validation("average precision needs a non-empty positive set"));
    }
    if positives.intersection(junk).next().is_some() {
        return Err(Error::validation("positive and junk sets overlap"));
    }
    let mut hits = 0usize;
    let mut rank = 0usize;
    let mut sum = 0.0;
    for id in ranked {
        if junk.contains(id) {
            continue;
        }
        rank += 1;
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    Ok(sum / positives.len() as f64)
}

/// Precision within the first `k` junk-filtered ranks, with denominator
/// `min(k, |positives|)`.
pub fn precision_at_k(
    ranked: &[String],
    positives: &BTreeSet<String>,
    junk: &BTreeSet<String>,
    k: usize,
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::validation("precision@k needs a non-empty positive set"));
    }
    if k == 0 {
        return Err(Error::validation("k must be positive"));
    }
    let mut rank = 0usize;
    let mut hits = 0usize;
    for id in ranked {
        if junk.contains(id) {
            continue;
        }
        rank += 1;
        if rank > k {
            break;
        }
        if positives.contains(id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / k.min(positives.len()) as f64)
}

/// Per-query metric values plus the ids of queries skipped for having no
/// positives under the protocol.
#[derive(Debug, Clone)]
pub struct MetricOutcome {
    pub value: f64,
    pub skipped: Vec<String>,
}

fn mean_over_queries(
    results: &[RankedResult],
    gt: &RetrievalGroundTruth,
    protocol: Protocol,
    per_query: impl Fn(&[String], &BTreeSet<String>, &BTreeSet<String>) -> Result<f64>,
) -> Result<MetricOutcome> {
    let mut values = Vec::new();
    let mut skipped = Vec::new();
    for result in results {
        let q = gt.query(&result.query_id).ok_or_else(|| {
            Error::validation(format!("no ground truth for query {}", result.query_id))
        })?;
        let (positives, junk) = protocol_split(q, protocol);
        if positives.is_empty() {
            skipped.push(result.query_id.clone());
            continue;
        }
        values.push(per_query(&result.ranking, &positives, &junk)?);
    }
    if values.is_empty() {
        return Err(Error::validation(format!(
            "no query has positives under the {} protocol",
            protocol.name()
        )));
    }
    Ok(MetricOutcome { value: values.iter().sum::<f64>() / values.len() as f64, skipped })
}

/// Mean average precision over queries with positives.
pub fn mean_ap(
    results: &[RankedResult],
    gt: &RetrievalGroundTruth,
    protocol: Protocol,
) -> Result<MetricOutcome> {
    mean_over_queries(results, gt, protocol, average_precision)
}

/// Mean precision at rank `k` (default 10 in the CLI).
pub fn mp_at_k(
    results: &[RankedResult],
    gt: &RetrievalGroundTruth,
    protocol: Protocol,
    k: usize,
) -> Result<MetricOutcome> {
    mean_over_queries(results, gt, protocol, |ranked, pos, junk| {
        precision_at_k(ranked, pos, junk, k)
    })
}

/// Distances of matching and non-matching descriptor pairs.
#[derive(Debug, Clone)]
pub struct VerificationSet {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl VerificationSet {
    pub fn new(positive: Vec<f64>, negative: Vec<f64>) -> Result<Self> {
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::validation("verification needs both pair lists non-empty"));
        }
        if positive.iter().chain(negative.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("verification distances must be finite"));
        }
        Ok(VerificationSet { positive, negative })
    }
}

/// False-positive rate at 95% recall.
///
/// The threshold is the smallest positive-pair distance admitting at
/// least 95% of positive pairs (ceiling rank on the sorted distances);
/// the result is the fraction of negative pairs at or below it.
pub fn fpr_at_95(v: &VerificationSet) -> Result<f64> {
    if v.positive.len() < 20 {
        return Err(Error::validation(format!(
            "fpr@95 needs at least 20 positive pairs, got {}",
            v.positive.len()
        )));
    }
    let mut pos = v.positive.clone();
    pos.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let admit = ((0.95 * pos.len() as f64).ceil() as usize).max(1);
    let threshold = pos[admit - 1];
    let below = v.negative.iter().filter(|&&d| d <= threshold).count();
    Ok(below as f64 / v.negative.len() as f64)
}

/// One point of the exponent sweep.
#[derive(Debug, Clone, Serialize)]
pub struct PSweepPoint {
    pub p: f64,
    /// true for the extra row evaluated at the model's trained exponent
    pub learned: bool,
    pub map_easy: f64,
    pub map_medium: f64,
    pub map_hard: f64,
}

/// Extract descriptors for a list of labeled images, in parallel.
pub fn extract_descriptors(
    model: &DescriptorModel,
    items: &[(String, Image)],
    scales: &[f64],
) -> Result<Vec<(String, Descriptor)>> {
    items
        .par_iter()
        .map(|(id, image)| {
            let d = model.multi_scale_descriptor(image, scales)?;
            Ok((id.clone(), d))
        })
        .collect()
}

/// Rank every query against the database and compute mAP per protocol.
pub fn evaluate_retrieval(
    queries: &[(String, Descriptor)],
    database: &[(String, Descriptor)],
    gt: &RetrievalGroundTruth,
) -> Result<[MetricOutcome; 3]> {
    let results: Vec<RankedResult> = queries
        .iter()
        .map(|(id, d)| rank_database(id, d, database))
        .collect();
    Ok([
        mean_ap(&results, gt, Protocol::Easy)?,
        mean_ap(&results, gt, Protocol::Medium)?,
        mean_ap(&results, gt, Protocol::Hard)?,
    ])
}

/// Evaluate mAP across GeM exponents without retraining.
///
/// Every requested value must lie in `[1, 100]`; the model's own trained
/// exponent is appended as an extra, flagged point.
pub fn p_sweep(
    model: &DescriptorModel,
    queries: &[(String, Image)],
    database: &[(String, Image)],
    gt: &RetrievalGroundTruth,
    p_values: &[f64],
    scales: &[f64],
) -> Result<Vec<PSweepPoint>> {
    for &p in p_values {
        if !(GemParam::MIN_P..=GemParam::SWEEP_MAX_P).contains(&p) {
            return Err(Error::validation(format!(
                "sweep exponent {p} outside [{}, {}]",
                GemParam::MIN_P,
                GemParam::SWEEP_MAX_P
            )));
        }
    }
    let learned = model.gem.value();
    let mut points = Vec::new();
    let mut entries: Vec<(f64, bool)> = p_values.iter().map(|&p| (p, false)).collect();
    entries.push((learned, true));
    for (p, is_learned) in entries {
        let mut swept = model.clone();
        swept.gem = GemParam::new(p)?;
        let q = extract_descriptors(&swept, queries, scales)?;
        let db = extract_descriptors(&swept, database, scales)?;
        let [easy, medium, hard] = evaluate_retrieval(&q, &db, gt)?;
        points.push(PSweepPoint {
            p,
            learned: is_learned,
            map_easy: easy.value,
            map_medium: medium.value,
            map_hard: hard.value,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Quadratic prefix-precision oracle for AP.
    fn oracle_ap(ranked: &[String], positives: &BTreeSet<String>, junk: &BTreeSet<String>) -> f64 {
        let filtered: Vec<&String> = ranked.iter().filter(|id| !junk.contains(*id)).collect();
        let mut sum = 0.0;
        for (idx, id) in filtered.iter().enumerate() {
            if positives.contains(*id) {
                let prefix_hits = filtered[..=idx]
                    .iter()
                    .filter(|x| positives.contains(**x))
                    .count();
                sum += prefix_hits as f64 / (idx + 1) as f64;
            }
        }
        sum / positives.len() as f64
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let ranked = ids(&["a", "b", "c", "d"]);
        let ap = average_precision(&ranked, &set(&["a", "b"]), &set(&[])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_positives_at_ranks_one_and_three() {
        let ranked = ids(&["p1", "x", "p2", "y"]);
        let ap = average_precision(&ranked, &set(&["p1", "p2"]), &set(&[])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ap_junk_between_positives_is_removed() {
        let ranked = ids(&["p1", "j", "p2", "y"]);
        let ap = average_precision(&ranked, &set(&["p1", "p2"]), &set(&["j"])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_rejects_empty_or_overlapping_sets() {
        let ranked = ids(&["a"]);
        assert!(average_precision(&ranked, &set(&[]), &set(&[])).is_err());
        assert!(average_precision(&ranked, &set(&["a"]), &set(&["a"])).is_err());
    }

    #[test]
    fn ap_matches_oracle_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        for _ in 0..100 {
            let n = rng.gen_range(5..50);
            let ranked: Vec<String> = (0..n).map(|i| format!("db{i:02}")).collect();
            let mut shuffled = ranked.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let positives: BTreeSet<String> = ranked
                .iter()
                .filter(|_| rng.gen_bool(0.3))
                .cloned()
                .collect();
            if positives.is_empty() {
                continue;
            }
            let junk: BTreeSet<String> = ranked
                .iter()
                .filter(|id| !positives.contains(*id) && rng.gen_bool(0.2))
                .cloned()
                .collect();
            let fast = average_precision(&shuffled, &positives, &junk).unwrap();
            let slow = oracle_ap(&shuffled, &positives, &junk);
            assert!((fast - slow).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn ap_ignores_order_below_last_positive() {
        let a = ids(&["p", "x", "y", "z"]);
        let b = ids(&["p", "z", "y", "x"]);
        let pos = set(&["p"]);
        let junk = set(&[]);
        assert_eq!(
            average_precision(&a, &pos, &junk).unwrap(),
            average_precision(&b, &pos, &junk).unwrap()
        );
    }

    #[test]
    fn protocol_split_reassigns_lists() {
        let q = QueryGroundTruth {
            id: "q".into(),
            bbox: [0, 0, 10, 10],
            easy: ids(&["e1", "e2"]),
            hard: ids(&["h1"]),
            junk: ids(&["j1"]),
        };
        let (pos, junk) = protocol_split(&q, Protocol::Hard);
        assert_eq!(pos, set(&["h1"]));
        assert_eq!(junk, set(&["j1", "e1", "e2"]));

        let (pos, junk) = protocol_split(&q, Protocol::Medium);
        assert_eq!(pos, set(&["e1", "e2", "h1"]));
        assert_eq!(junk, set(&["j1"]));

        let (pos, junk) = protocol_split(&q, Protocol::Easy);
        assert_eq!(pos, set(&["e1", "e2"]));
        assert_eq!(junk, set(&["j1", "h1"]));

        // outputs stay disjoint and cover easy, hard and junk exactly
        for protocol in Protocol::ALL {
            let (pos, junk) = protocol_split(&q, protocol);
            assert!(pos.intersection(&junk).next().is_none());
            let mut all: BTreeSet<String> = pos.clone();
            all.extend(junk);
            assert_eq!(all, set(&["e1", "e2", "h1", "j1"]));
        }
    }

    fn toy_gt() -> RetrievalGroundTruth {
        RetrievalGroundTruth {
            queries: vec![
                QueryGroundTruth {
                    id: "q1".into(),
                    bbox: [0, 0, 1, 1],
                    easy: ids(&["a", "b"]),
                    hard: ids(&["c"]),
                    junk: ids(&["j"]),
                },
                QueryGroundTruth {
                    id: "q2".into(),
                    bbox: [0, 0, 1, 1],
                    easy: ids(&["d"]),
                    hard: vec![],
                    junk: vec![],
                },
            ],
        }
    }

    #[test]
    fn mean_ap_averages_queries() {
        let gt = toy_gt();
        let results = vec![
            RankedResult { query_id: "q1".into(), ranking: ids(&["a", "b", "c", "d", "j"]) },
            RankedResult { query_id: "q2".into(), ranking: ids(&["x", "d", "a", "b", "c"]) },
        ];
        // q1 medium: positives {a,b,c} at ranks 1,2,3 -> 1.0
        // q2 medium: positive {d} at rank 2 -> 0.5
        let out = mean_ap(&results, &gt, Protocol::Medium).unwrap();
        assert!((out.value - 0.75).abs() < 1e-12);
        assert!(out.skipped.is_empty());

        // single query equals its own ap
        let single = mean_ap(&results[..1], &gt, Protocol::Medium).unwrap();
        assert_eq!(single.value, 1.0);
    }

    #[test]
    fn mean_ap_skips_queries_without_positives() {
        let gt = toy_gt();
        let results = vec![
            RankedResult { query_id: "q1".into(), ranking: ids(&["c", "a", "b"]) },
            RankedResult { query_id: "q2".into(), ranking: ids(&["d"]) },
        ];
        // hard protocol: q2 has no hard ids -> skipped
        let out = mean_ap(&results, &gt, Protocol::Hard).unwrap();
        assert_eq!(out.skipped, vec!["q2".to_string()]);

        // all queries skipped -> error
        let gt_empty = RetrievalGroundTruth {
            queries: vec![QueryGroundTruth {
                id: "q1".into(),
                bbox: [0, 0, 1, 1],
                easy: ids(&["a"]),
                hard: vec![],
                junk: vec![],
            }],
        };
        assert!(mean_ap(&results[..1], &gt_empty, Protocol::Hard).is_err());
    }

    #[test]
    fn mp_at_k_uses_min_denominator() {
        let gt = RetrievalGroundTruth {
            queries: vec![QueryGroundTruth {
                id: "q".into(),
                bbox: [0, 0, 1, 1],
                easy: ids(&["a", "b", "c"]),
                hard: vec![],
                junk: vec![],
            }],
        };
        // 3 positives all within the top 10 of a 12-item ranking -> 1.0
        let mut ranking = ids(&["a", "x1", "b", "x2", "c", "x3", "x4", "x5", "x6", "x7"]);
        ranking.extend(ids(&["x8", "x9"]));
        let results = vec![RankedResult { query_id: "q".into(), ranking }];
        let out = mp_at_k(&results, &gt, Protocol::Medium, 10).unwrap();
        assert_eq!(out.value, 1.0);

        // no hits in the top 10 -> 0.0
        let mut ranking = ids(&["x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9", "x10"]);
        ranking.extend(ids(&["a", "b", "c"]));
        let results = vec![RankedResult { query_id: "q".into(), ranking }];
        let out = mp_at_k(&results, &gt, Protocol::Medium, 10).unwrap();
        assert_eq!(out.value, 0.0);
    }

    /// Counting oracle for mp@k.
    fn oracle_mp(
        ranked: &[String],
        positives: &BTreeSet<String>,
        junk: &BTreeSet<String>,
        k: usize,
    ) -> f64 {
        let filtered: Vec<&String> = ranked.iter().filter(|id| !junk.contains(*id)).collect();
        let hits = filtered
            .iter()
            .take(k)
            .filter(|id| positives.contains(**id))
            .count();
        hits as f64 / k.min(positives.len()) as f64
    }

    #[test]
    fn mp_at_k_matches_oracle_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(67);
        for _ in 0..100 {
            let n = rng.gen_range(5..50);
            let mut ranking: Vec<String> = (0..n).map(|i| format!("d{i:02}")).collect();
            for i in (1..ranking.len()).rev() {
                let j = rng.gen_range(0..=i);
                ranking.swap(i, j);
            }
            let positives: BTreeSet<String> = ranking
                .iter()
                .filter(|_| rng.gen_bool(0.25))
                .cloned()
                .collect();
            if positives.is_empty() {
                continue;
            }
            let junk: BTreeSet<String> = ranking
                .iter()
                .filter(|id| !positives.contains(*id) && rng.gen_bool(0.15))
                .cloned()
                .collect();
            let fast = precision_at_k(&ranking, &positives, &junk, 10).unwrap();
            let slow = oracle_mp(&ranking, &positives, &junk, 10);
            assert!((fast - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn fpr_separated_distributions_score_zero() {
        let v = VerificationSet::new(
            (0..40).map(|i| i as f64 * 0.01).collect(),
            (0..40).map(|i| 10.0 + i as f64).collect(),
        )
        .unwrap();
        assert_eq!(fpr_at_95(&v).unwrap(), 0.0);
    }

    #[test]
    fn fpr_identical_distributions_score_near_95() {
        let pos: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let v = VerificationSet::new(pos.clone(), pos).unwrap();
        assert!((fpr_at_95(&v).unwrap() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn fpr_threshold_uses_ceiling_rank() {
        // positives 1..=100: the 95th smallest distance (ceil(0.95*100))
        // is 95; negatives at or below 95 count as false positives.
        let pos: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let neg: Vec<f64> = vec![50.5, 94.9, 95.0, 95.1, 200.0];
        let v = VerificationSet::new(pos, neg).unwrap();
        assert!((fpr_at_95(&v).unwrap() - 3.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn fpr_monotone_when_negatives_shrink() {
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let pos: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let neg: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..2.0)).collect();
        let v = VerificationSet::new(pos.clone(), neg.clone()).unwrap();
        let base = fpr_at_95(&v).unwrap();
        for i in 0..neg.len() {
            let mut closer = neg.clone();
            closer[i] *= 0.5;
            let v2 = VerificationSet::new(pos.clone(), closer).unwrap();
            assert!(fpr_at_95(&v2).unwrap() >= base);
        }
    }

    #[test]
    fn fpr_rejects_degenerate_input() {
        assert!(VerificationSet::new(vec![], vec![1.0]).is_err());
        assert!(VerificationSet::new(vec![1.0], vec![]).is_err());
        assert!(VerificationSet::new(vec![f64::NAN], vec![1.0]).is_err());
        let too_few = VerificationSet::new(vec![1.0; 19], vec![1.0]).unwrap();
        assert!(fpr_at_95(&too_few).is_err());
    }

    #[test]
    fn ranking_breaks_similarity_ties_by_id() {
        use crate::pooling::l2_normalize;
        use ndarray::arr1;
        let q = l2_normalize(&arr1(&[1.0, 0.0])).unwrap();
        let same = l2_normalize(&arr1(&[0.0, 1.0])).unwrap();
        let db = vec![
            ("zeta".to_string(), same.clone()),
            ("alpha".to_string(), same.clone()),
            ("mid".to_string(), l2_normalize(&arr1(&[1.0, 1.0])).unwrap()),
        ];
        let ranked = rank_database("q", &q, &db);
        assert_eq!(ranked.ranking, ids(&["mid", "alpha", "zeta"]));
    }

    #[test]
    fn ground_truth_json_roundtrip_and_validation() {
        let gt = toy_gt();
        let text = gt.to_json();
        let back = RetrievalGroundTruth::from_json(&text).unwrap();
        assert_eq!(back.queries.len(), 2);
        assert_eq!(back.queries[0].easy, ids(&["a", "b"]));

        let bad = r#"{"queries":[{"id":"q","bbox":[0,0,1,1],"easy":["a"],"hard":["a"],"junk":[]}]}"#;
        assert!(RetrievalGroundTruth::from_json(bad).is_err());
    }

    #[test]
    fn sweep_rejects_out_of_range_exponents() {
        use crate::backbone::BackboneSpec;
        let model = DescriptorModel::init(BackboneSpec::toy_fcn(1, &[]).unwrap(), 1).unwrap();
        let gt = RetrievalGroundTruth { queries: vec![] };
        let err = p_sweep(&model, &[], &[], &gt, &[0.5], &[1.0]);
        assert!(err.is_err());
        let err = p_sweep(&model, &[], &[], &gt, &[101.0], &[1.0]);
        assert!(err.is_err());
    }
}
