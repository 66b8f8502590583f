//! Single-query retrieval evaluation: Rank-1, mAP, CMC, and the
//! false-acceptance-rate threshold for correspondence filtering.

use crate::data::Dataset;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::matcher::TransMatcher;
use crate::params::ParamStore;
use crate::variants::Scorer;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<f64>,
    /// Queries with no relevant gallery entry left after exclusion.
    pub dropped_queries: usize,
    pub seconds: f64,
}

/// Ranking of one query row. Ties break by gallery image id ascending so
/// reports are order-independent.
pub struct QueryRanking {
    /// Indices into the gallery, best first.
    pub order: Vec<usize>,
    pub ap: f64,
    /// 1-based rank of the first relevant entry.
    pub first_relevant: usize,
}

/// Rank one score row against relevance flags. Returns None when nothing is
/// relevant. `ids` are the gallery image ids used for tie-breaking.
pub fn rank_query(scores: &[f64], relevant: &[bool], ids: &[&str]) -> Option<QueryRanking> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| ids[a].cmp(ids[b]))
    });
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    let mut first = None;
    for (rank0, &gi) in order.iter().enumerate() {
        if relevant[gi] {
            hits += 1;
            ap_sum += hits as f64 / (rank0 + 1) as f64;
            first.get_or_insert(rank0 + 1);
        }
    }
    first.map(|first_relevant| QueryRanking {
        order,
        ap: ap_sum / hits as f64,
        first_relevant,
    })
}

/// Standard re-id exclusion: drop gallery entries sharing both identity and
/// camera with the query. Camera 0 marks camera-free (synthetic) data and
/// disables the rule.
fn excluded(q: &Image, g: &Image) -> bool {
    q.camera != 0 && q.identity == g.identity && q.camera == g.camera
}

/// Score every query against the gallery and aggregate Rank-1 / mAP / CMC
/// under the single-query protocol.
pub fn evaluate(
    model: &dyn Scorer,
    store: &mut ParamStore,
    query: &Dataset,
    gallery: &Dataset,
) -> Result<EvalReport> {
    if query.images.is_empty() || gallery.images.is_empty() {
        return Err(Error::Data("evaluate needs nonempty query and gallery".into()));
    }
    let start = std::time::Instant::now();
    let q_refs: Vec<&Image> = query.images.iter().collect();
    let g_refs: Vec<&Image> = gallery.images.iter().collect();
    let grid = model.score_grid(store, &q_refs, &g_refs)?;
    let g_ids: Vec<&str> = gallery.images.iter().map(|im| im.id.as_str()).collect();

    let n_g = gallery.images.len();
    let mut per_query_ap = Vec::new();
    let mut first_ranks = Vec::new();
    let mut dropped = 0usize;
    for (qi, q) in query.images.iter().enumerate() {
        let mut scores = Vec::with_capacity(n_g);
        let mut relevant = Vec::with_capacity(n_g);
        let mut ids = Vec::with_capacity(n_g);
        for (gi, g) in gallery.images.iter().enumerate() {
            if excluded(q, g) {
                continue;
            }
            scores.push(grid[qi][gi]);
            relevant.push(g.identity == q.identity);
            ids.push(g_ids[gi]);
        }
        match rank_query(&scores, &relevant, &ids) {
            Some(r) => {
                per_query_ap.push(r.ap);
                first_ranks.push(r.first_relevant);
            }
            None => dropped += 1,
        }
    }
    if first_ranks.is_empty() {
        return Err(Error::Data("no query had a relevant gallery entry".into()));
    }
    let n_q = first_ranks.len() as f64;
    let mut cmc = vec![0.0; n_g];
    for &fr in &first_ranks {
        for slot in cmc.iter_mut().skip(fr - 1) {
            *slot += 1.0 / n_q;
        }
    }
    let map = per_query_ap.iter().sum::<f64>() / n_q;
    Ok(EvalReport {
        rank1: cmc[0],
        map,
        cmc,
        per_query_ap,
        dropped_queries: dropped,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Summary metric: mean of the Rank-1 and mAP values of several reports.
pub fn mean_accuracy(reports: &[EvalReport]) -> f64 {
    let mut acc = 0.0;
    for r in reports {
        acc += r.rank1 + r.map;
    }
    acc / (2 * reports.len()) as f64
}

/// (1 - rate) quantile of the collected negative local scores; about
/// `rate` of them fall strictly above the returned threshold.
pub fn far_threshold(scores: &[f64], rate: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) || rate <= 0.0 {
        return Err(Error::Config(format!("rate must be in (0, 1), got {rate}")));
    }
    let required = (1.0 / rate).ceil() as usize;
    if scores.len() < required {
        return Err(Error::Data(format!(
            "far_threshold needs at least {required} scores at rate {rate}, got {}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let k = ((n as f64) * (1.0 - rate)).round().clamp(1.0, n as f64) as usize;
    Ok(sorted[k - 1])
}

/// All local GMP scores (both directions, every layer) of negative pairs
/// drawn from the dataset, for FAR calibration.
pub fn negative_local_scores(
    model: &TransMatcher,
    store: &mut ParamStore,
    dataset: &Dataset,
    max_pairs: usize,
) -> Result<Vec<f64>> {
    let feats: Vec<_> = dataset
        .images
        .iter()
        .map(|im| model.extract_features(store, im))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    let mut pairs = 0usize;
    'outer: for (i, a) in dataset.images.iter().enumerate() {
        for (j, b) in dataset.images.iter().enumerate() {
            if i == j || a.identity == b.identity {
                continue;
            }
            let (_, layers) = model.score_features(store, &feats[i], &feats[j], true)?;
            for layer in &layers {
                out.extend_from_slice(&layer.fwd_scores);
                out.extend_from_slice(&layer.rev_scores);
            }
            pairs += 1;
            if pairs >= max_pairs {
                break 'outer;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_positive_at_rank_one() {
        let r = rank_query(&[0.9, 0.1], &[true, false], &["a", "b"]).unwrap();
        assert_eq!(r.first_relevant, 1);
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn positives_at_ranks_one_and_three_of_five() {
        let scores = [5.0, 4.0, 3.0, 2.0, 1.0];
        let relevant = [true, false, true, false, false];
        let ids = ["a", "b", "c", "d", "e"];
        let r = rank_query(&scores, &relevant, &ids).unwrap();
        assert!((r.ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn ties_break_by_gallery_id_ascending() {
        let r = rank_query(&[1.0, 1.0, 1.0], &[false, true, false], &["c", "a", "b"]).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        assert_eq!(r.first_relevant, 1);
    }

    #[test]
    fn no_relevant_entries_is_none() {
        assert!(rank_query(&[1.0], &[false], &["a"]).is_none());
    }

    /// Independent AP: walk every cut-off depth and average precision at
    /// the depths where recall increases.
    fn oracle_ap(scores: &[f64], relevant: &[bool], ids: &[&str]) -> Option<f64> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then_with(|| ids[a].cmp(ids[b]))
        });
        let total: usize = relevant.iter().filter(|&&r| r).count();
        if total == 0 {
            return None;
        }
        let mut sum = 0.0;
        for depth in 1..=order.len() {
            if relevant[order[depth - 1]] {
                let hits = order[..depth].iter().filter(|&&i| relevant[i]).count();
                sum += hits as f64 / depth as f64;
            }
        }
        Some(sum / total as f64)
    }

    #[test]
    fn ap_matches_exhaustive_oracle_on_random_galleries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let names = ["a", "b", "c", "d", "e", "f"];
        for _ in 0..500 {
            let n = rng.gen_range(1..=6);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 2.0).collect();
            let relevant: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let ids: Vec<&str> = names[..n].to_vec();
            let got = rank_query(&scores, &relevant, &ids).map(|r| r.ap);
            let want = oracle_ap(&scores, &relevant, &ids);
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12),
                other => panic!("mismatch: {other:?}"),
            }
        }
    }

    #[test]
    fn far_threshold_median_case() {
        let t = far_threshold(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap();
        assert_eq!(t, 2.0);
        assert_eq!([1.0, 2.0, 3.0, 4.0].iter().filter(|&&s| s > t).count(), 2);
    }

    #[test]
    fn far_threshold_hits_requested_rate() {
        let scores: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let t = far_threshold(&scores, 0.001).unwrap();
        let above = scores.iter().filter(|&&s| s > t).count();
        assert_eq!(above, 10);
    }

    #[test]
    fn far_threshold_matches_sort_oracle_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..5_000).map(|_| rng.gen::<f64>()).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = f64::NEG_INFINITY;
        for rate in [0.2, 0.1, 0.01, 0.001] {
            let t = far_threshold(&scores, rate).unwrap();
            let k = ((sorted.len() as f64) * (1.0 - rate)).round() as usize;
            assert_eq!(t, sorted[k - 1]);
            assert!(t >= prev, "threshold should grow as rate shrinks");
            prev = t;
        }
    }

    #[test]
    fn far_threshold_requires_enough_samples() {
        let err = far_threshold(&[1.0, 2.0], 0.001).unwrap_err();
        assert!(err.to_string().contains("1000"));
    }

    #[test]
    fn mean_accuracy_averages_rank1_and_map() {
        let mk = |rank1: f64, map: f64| EvalReport {
            rank1,
            map,
            cmc: vec![rank1],
            per_query_ap: vec![],
            dropped_queries: 0,
            seconds: 0.0,
        };
        let m = mean_accuracy(&[mk(1.0, 0.5), mk(0.5, 0.0)]);
        assert!((m - 0.5).abs() < 1e-12);
    }
}
