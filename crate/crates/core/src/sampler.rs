//! Replacement selection.
//!
//! Given a target segment, every pool entry j gets probability proportional
//! to `exp(-w_j * D_j)` where `D_j` is the feature distance to the target
//! and `w_j` the entry's penalty weight. Selecting an entry bumps its weight
//! by one so heavily used segments fade out over a session.

use std::collections::BTreeSet;

use rand::Rng;

use crate::consensus::AnchorSegment;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::pool::SegmentPool;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSelection {
    pub segment: AnchorSegment,
    pub feature: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementDistribution {
    probs: Vec<f64>,
    /// `-w_j * D_j`, `None` for excluded entries.
    exponents: Vec<Option<f64>>,
}

impl ReplacementDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `ln(p_j / (1 - p_j))`, computed from the exponents directly.
    ///
    /// Stays finite and strictly ordered where `probs()[j]` has already
    /// rounded to 0.0 or 1.0. Excluded entries give -inf, a lone candidate
    /// gives +inf.
    pub fn log_odds(&self, j: usize) -> f64 {
        let Some(ej) = self.exponents.get(j).copied().flatten() else {
            return f64::NEG_INFINITY;
        };
        let others: Vec<f64> = self
            .exponents
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != j)
            .filter_map(|(_, e)| *e)
            .collect();
        let Some(m) = others.iter().copied().reduce(f64::max) else {
            return f64::INFINITY;
        };
        ej - m - compensated_sum(others.iter().map(|e| (e - m).exp())).ln()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn feature_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Softmax of `-w_j * D_j` over the entries where `excluded[j]` is false.
pub fn distribution_from_terms(weights: &[f64], distances: &[f64], excluded: &[bool]) -> Result<ReplacementDistribution> {
    let n = weights.len();
    if distances.len() != n || excluded.len() != n {
        return Err(Error::invalid(format!(
            "{} weights, {} distances, {} exclusion flags",
            n,
            distances.len(),
            excluded.len()
        )));
    }
    let exponents: Vec<Option<f64>> = (0..n)
        .map(|j| (!excluded[j]).then(|| -weights[j] * distances[j]))
        .collect();
    if let Some(bad) = exponents.iter().flatten().find(|e| !e.is_finite()) {
        return Err(Error::invalid(format!("non-finite exponent {bad}")));
    }
    let max = exponents
        .iter()
        .flatten()
        .copied()
        .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))))
        .ok_or_else(|| Error::NoCandidates("every pool entry is excluded".into()))?;
    let unnorm: Vec<f64> = exponents.iter().map(|e| e.map_or(0.0, |e| (e - max).exp())).collect();
    let total = compensated_sum(unnorm.iter().copied());
    Ok(ReplacementDistribution { probs: unnorm.into_iter().map(|u| u / total).collect(), exponents })
}

/// Distribution over `pool` for `target`. The target's own id and every id
/// in `exclude` get probability 0.
pub fn replacement_distribution(
    target: &TargetSelection,
    pool: &SegmentPool,
    exclude: &BTreeSet<String>,
) -> Result<ReplacementDistribution> {
    if target.feature.dim() != pool.dim() {
        return Err(Error::invalid(format!(
            "target feature dim {} != pool dim {}",
            target.feature.dim(),
            pool.dim()
        )));
    }
    let mut weights = Vec::with_capacity(pool.len());
    let mut distances = Vec::with_capacity(pool.len());
    let mut excluded = Vec::with_capacity(pool.len());
    for e in &pool.entries {
        let id = &e.anchor.segment_id;
        weights.push(e.weight);
        distances.push(feature_distance(&target.feature, &e.feature)?);
        excluded.push(*id == target.segment.segment_id || exclude.contains(id));
    }
    distribution_from_terms(&weights, &distances, &excluded).map_err(|e| match e {
        Error::NoCandidates(_) => Error::NoCandidates(format!(
            "no replacement candidates for {:?} in pool {:?}",
            target.segment.segment_id, pool.class_label
        )),
        other => other,
    })
}

/// Inverse-CDF lookup: the first index whose cumulative probability exceeds
/// `u`. Zero-probability entries are never returned.
pub fn sample_with_uniform(dist: &ReplacementDistribution, u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = None;
    for (j, &p) in dist.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = Some(j);
        if u < cum {
            return j;
        }
    }
    // rounding left cum slightly below u
    last.expect("distribution has positive mass")
}

pub fn sample_replacement(dist: &ReplacementDistribution, rng: &mut impl Rng) -> usize {
    sample_with_uniform(dist, rng.random::<f64>())
}

/// Records one selection of entry `index`.
pub fn penalize(pool: &mut SegmentPool, index: usize) -> Result<()> {
    let n = pool.len();
    let entry = pool
        .entries
        .get_mut(index)
        .ok_or_else(|| Error::invalid(format!("pool index {index} out of range for {n} entries")))?;
    entry.weight += 1.0;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::PcaModel;
    use crate::pool::{FeatureSource, PoolEntry};
    use crate::raster::BitMask;
    use proptest::prelude::{any, prop, prop_assert, proptest};
    use rand::SeedableRng;

    fn anchor(id: &str) -> AnchorSegment {
        AnchorSegment {
            mask: BitMask::full(1, 1).unwrap(),
            source_image: "c/img.png".into(),
            class_label: "c".into(),
            segment_id: id.into(),
        }
    }

    /// Pool whose entries sit at the given 1-d feature positions.
    fn pool_1d(xs: &[f64], ws: &[f64]) -> SegmentPool {
        SegmentPool {
            class_label: "c".into(),
            entries: xs
                .iter()
                .zip(ws)
                .enumerate()
                .map(|(j, (&x, &w))| PoolEntry {
                    anchor: anchor(&format!("s{j}")),
                    feature: FeatureVector(vec![x]),
                    weight: w,
                })
                .collect(),
            pca: PcaModel { mean: vec![0.0], components: vec![vec![1.0]], explained_variance: vec![1.0] },
            feature_source: FeatureSource::Builtin,
            corpus_root: None,
        }
    }

    fn target_at(x: f64) -> TargetSelection {
        TargetSelection { segment: anchor("target"), feature: FeatureVector(vec![x]) }
    }

    /// p_j = 1 / sum_k exp(w_j D_j - w_k D_k), evaluated per entry.
    fn oracle(ws: &[f64], ds: &[f64]) -> Vec<f64> {
        (0..ws.len())
            .map(|j| 1.0 / (0..ws.len()).map(|k| (ws[j] * ds[j] - ws[k] * ds[k]).exp()).sum::<f64>())
            .collect()
    }

    #[test]
    fn distance_examples() {
        let a = FeatureVector(vec![0.0, 0.0]);
        assert_eq!(feature_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_distance(&a, &FeatureVector(vec![3.0, 4.0])).unwrap(), 5.0);
        assert!(feature_distance(&a, &FeatureVector(vec![1.0])).is_err());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..128).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..128).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut acc = 0.0;
        for i in 0..128 {
            acc += (x[i] - y[i]).powi(2);
        }
        let d = feature_distance(&FeatureVector(x), &FeatureVector(y)).unwrap();
        assert!((d - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_entry_example() {
        let pool = pool_1d(&[0.0, 2f64.ln()], &[1.0, 1.0]);
        let d = replacement_distribution(&target_at(0.0), &pool, &BTreeSet::new()).unwrap();
        assert!((d.probs()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.probs()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_single() {
        let pool = pool_1d(&[1.0, -1.0, 1.0, -1.0], &[2.0; 4]);
        let d = replacement_distribution(&target_at(0.0), &pool, &BTreeSet::new()).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let excl: BTreeSet<String> = ["s0", "s1", "s3"].iter().map(|s| s.to_string()).collect();
        let d = replacement_distribution(&target_at(0.0), &pool, &excl).unwrap();
        assert_eq!(d.probs(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(sample_with_uniform(&d, 0.0), 2);
        assert_eq!(sample_with_uniform(&d, 0.999), 2);
    }

    #[test]
    fn self_exclusion_and_exhaustion() {
        let mut pool = pool_1d(&[0.0, 1.0], &[1.0, 1.0]);
        pool.entries[0].anchor.segment_id = "target".into();
        let d = replacement_distribution(&target_at(0.0), &pool, &BTreeSet::new()).unwrap();
        assert_eq!(d.probs(), &[0.0, 1.0]);

        let excl: BTreeSet<String> = ["s1".to_string()].into();
        let err = replacement_distribution(&target_at(0.0), &pool, &excl).unwrap_err();
        assert!(matches!(err, Error::NoCandidates(_)), "{err}");
    }

    #[test]
    fn dim_mismatch() {
        let pool = pool_1d(&[0.0], &[1.0]);
        let t = TargetSelection { segment: anchor("t"), feature: FeatureVector(vec![0.0, 0.0]) };
        assert!(replacement_distribution(&t, &pool, &BTreeSet::new()).is_err());
    }

    #[test]
    fn inverse_cdf() {
        let d = distribution_from_terms(&[1.0, 1.0], &[0.0, 0.0], &[false, false]).unwrap();
        assert_eq!(sample_with_uniform(&d, 0.25), 0);
        assert_eq!(sample_with_uniform(&d, 0.75), 1);
        let d = distribution_from_terms(&[1.0; 3], &[0.0; 3], &[true, false, true]).unwrap();
        assert_eq!(sample_with_uniform(&d, 0.0), 1);
    }

    #[test]
    fn log_odds_examples() {
        let d = distribution_from_terms(&[1.0, 1.0], &[0.0, 2f64.ln()], &[false, false]).unwrap();
        assert!((d.log_odds(0) - 2f64.ln()).abs() < 1e-15);
        assert!((d.log_odds(1) + 2f64.ln()).abs() < 1e-15);

        let d = distribution_from_terms(&[1.0, 1.0, 1.0], &[0.0, 80.0, 900.0], &[false, false, true]).unwrap();
        assert_eq!(d.probs()[0], 1.0);
        assert!((d.log_odds(0) - 80.0).abs() < 1e-12);
        assert_eq!(d.log_odds(2), f64::NEG_INFINITY);
        let single = distribution_from_terms(&[1.0], &[3.0], &[false]).unwrap();
        assert_eq!(single.log_odds(0), f64::INFINITY);
    }

    #[test]
    fn empirical_frequencies() {
        let d = distribution_from_terms(&[1.0, 1.0], &[0.0, 2f64.ln()], &[false, false]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let zeros = (0..n).filter(|_| sample_replacement(&d, &mut rng) == 0).count() as f64;
        let p = 2.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((zeros - n as f64 * p).abs() < 3.0 * sigma, "{zeros}");
    }

    #[test]
    fn penalize_counts() {
        let mut pool = pool_1d(&[0.0, 1.0], &[1.0, 1.0]);
        penalize(&mut pool, 1).unwrap();
        assert_eq!(pool.weights(), vec![1.0, 2.0]);
        penalize(&mut pool, 0).unwrap();
        penalize(&mut pool, 0).unwrap();
        penalize(&mut pool, 0).unwrap();
        assert_eq!(pool.weights(), vec![4.0, 2.0]);
        assert!(penalize(&mut pool, 2).is_err());
    }

    #[test]
    fn extreme_exponents_stay_normalized() {
        let d = distribution_from_terms(&[1.0, 1.0, 1.0], &[700.0, 701.0, 1000.0], &[false; 3]).unwrap();
        let s: f64 = d.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(d.probs()[0] > d.probs()[1]);
    }

    #[test]
    fn large_pool_normalization() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let ws: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
        let ds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1000.0) / 1000.0).collect();
        let d = distribution_from_terms(&ws, &ds, &vec![false; n]).unwrap();
        let s: f64 = d.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    proptest! {
        #[test]
        fn matches_oracle_and_sums_to_one(
            terms in prop::collection::vec((1.0f64..20.0, 0.0f64..50.0), 1..64)
        ) {
            let (ws, ds): (Vec<f64>, Vec<f64>) = terms.into_iter().unzip();
            let d = distribution_from_terms(&ws, &ds, &vec![false; ws.len()]).unwrap();
            let expect = oracle(&ws, &ds);
            for (p, q) in d.probs().iter().zip(&expect) {
                prop_assert!((p - q).abs() < 1e-12);
                prop_assert!(*p >= 0.0);
            }
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn penalize_is_monotone(
            terms in prop::collection::vec((1.0f64..20.0, 0.01f64..50.0), 2..64),
            pick in any::<prop::sample::Index>(),
        ) {
            let (ws, ds): (Vec<f64>, Vec<f64>) = terms.into_iter().unzip();
            let j = pick.index(ws.len());
            let before = distribution_from_terms(&ws, &ds, &vec![false; ws.len()]).unwrap();
            let mut ws2 = ws.clone();
            ws2[j] += 1.0;
            let after = distribution_from_terms(&ws2, &ds, &vec![false; ws.len()]).unwrap();
            // probs()[j] can round to 1.0 on both sides; the log-odds cannot
            prop_assert!(after.probs()[j] <= before.probs()[j]);
            prop_assert!(after.log_odds(j) < before.log_odds(j));
            for k in (0..ws.len()).filter(|&k| k != j) {
                prop_assert!(after.probs()[k] >= before.probs()[k]);
            }
        }

        #[test]
        fn rescaling_invariance(
            terms in prop::collection::vec((1.0f64..20.0, 0.0f64..5.0), 1..16),
            c in 0.1f64..10.0,
        ) {
            let (ws, ds): (Vec<f64>, Vec<f64>) = terms.into_iter().unzip();
            let a = distribution_from_terms(&ws, &ds, &vec![false; ws.len()]).unwrap();
            let ws2: Vec<f64> = ws.iter().map(|w| w / c).collect();
            let ds2: Vec<f64> = ds.iter().map(|d| d * c).collect();
            let b = distribution_from_terms(&ws2, &ds2, &vec![false; ws.len()]).unwrap();
            for (p, q) in a.probs().iter().zip(b.probs()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
