//! Query/gallery retrieval metrics: CMC, mAP and mINP.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    Euclidean,
    /// `1 − cos(q, g)`.
    Cosine,
}

/// Retrieval quality over the valid queries of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingMetrics {
    /// `cmc[k − 1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub minp: f64,
    pub num_valid_queries: usize,
}

impl RankingMetrics {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }
}

/// Pairwise distances between query rows `[Q, D]` and gallery rows `[G, D]`.
pub fn distance_matrix<F: Scalar>(query: &Tensor<F>, gallery: &Tensor<F>, metric: DistanceMetric) -> Result<Tensor<f64>> {
    let (sq, sg) = (query.shape(), gallery.shape());
    if sq.len() != 2 || sg.len() != 2 || sq[1] != sg[1] {
        return Err(dim_err("distance_matrix", format!("{sq:?} vs {sg:?}")));
    }
    let (q, g, d) = (sq[0], sg[0], sq[1]);
    let norm = |row: &[F]| libm::sqrt(row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>());
    let mut out = vec![0.0f64; q * g];
    for i in 0..q {
        let a = &query.data()[i * d..(i + 1) * d];
        for j in 0..g {
            let b = &gallery.data()[j * d..(j + 1) * d];
            out[i * g + j] = match metric {
                DistanceMetric::Euclidean => libm::sqrt(
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| {
                            let t = x.to_f64() - y.to_f64();
                            t * t
                        })
                        .sum::<f64>(),
                ),
                DistanceMetric::Cosine => {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum();
                    let den = (norm(a) * norm(b)).max(1e-12);
                    1.0 - dot / den
                }
            };
        }
    }
    Tensor::new([q, g], out)
}

/// Per-query outcome before averaging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryResult {
    /// 0-based position of the first match in the filtered ranking.
    pub first_hit: usize,
    pub ap: f64,
    pub inp: f64,
}

/// Ranks the gallery for one query and scores it, or `None` when the query has
/// no match left after removing same-identity same-camera entries.
pub fn score_query(dists: &[f64], q_id: u32, q_cam: u32, g_ids: &[u32], g_cams: &[u32]) -> Option<QueryResult> {
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = None;
    let mut last_hit_rank = 0usize;
    for j in order {
        if g_ids[j] == q_id && g_cams[j] == q_cam {
            continue;
        }
        rank += 1;
        if g_ids[j] == q_id {
            hits += 1;
            precision_sum += hits as f64 / rank as f64;
            first_hit.get_or_insert(rank - 1);
            last_hit_rank = rank;
        }
    }
    let first_hit = first_hit?;
    Some(QueryResult {
        first_hit,
        ap: precision_sum / hits as f64,
        inp: hits as f64 / last_hit_rank as f64,
    })
}

/// CMC up to `max_rank`, mAP and mINP over every query with at least one
/// cross-camera match. Queries are reduced in index order.
pub fn evaluate(
    distmat: &Tensor<f64>,
    q_ids: &[u32],
    g_ids: &[u32],
    q_cams: &[u32],
    g_cams: &[u32],
    max_rank: usize,
) -> Result<RankingMetrics> {
    let s = distmat.shape();
    if s.len() != 2 || s[0] != q_ids.len() || s[0] != q_cams.len() || s[1] != g_ids.len() || s[1] != g_cams.len() {
        return Err(dim_err(
            "evaluate",
            format!(
                "distances {s:?} for {} queries / {} gallery items",
                q_ids.len(),
                g_ids.len()
            ),
        ));
    }
    if max_rank == 0 {
        return Err(Error::Evaluation("max_rank must be >= 1".into()));
    }
    let g = s[1];
    let mut hits_at = vec![0usize; max_rank];
    let (mut ap_sum, mut inp_sum, mut valid) = (0.0, 0.0, 0usize);
    for (qi, (&qid, &qcam)) in q_ids.iter().zip(q_cams).enumerate() {
        let row = &distmat.data()[qi * g..(qi + 1) * g];
        let Some(r) = score_query(row, qid, qcam, g_ids, g_cams) else {
            continue;
        };
        valid += 1;
        ap_sum += r.ap;
        inp_sum += r.inp;
        for h in hits_at.iter_mut().skip(r.first_hit) {
            *h += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Evaluation(
            "no query has a cross-camera match in the gallery".into(),
        ));
    }
    let vf = valid as f64;
    Ok(RankingMetrics {
        cmc: hits_at.iter().map(|&h| h as f64 / vf).collect(),
        map: ap_sum / vf,
        minp: inp_sum / vf,
        num_valid_queries: valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_ranking() {
        // filtered ranking of ids [1, 2, 1, 3] for query id 1
        let d = Tensor::new([1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = evaluate(&d, &[1], &[1, 2, 1, 3], &[0], &[1, 1, 1, 1], 4).unwrap();
        assert!((m.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m.minp - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.cmc[0], 1.0);
    }

    #[test]
    fn map_and_minp_are_not_ordered() {
        // positives at ranks 10 and 11 of 11
        let dists: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let mut ids = vec![9u32; 11];
        ids[9] = 1;
        ids[10] = 1;
        let d = Tensor::new([1, 11], dists).unwrap();
        let m = evaluate(&d, &[1], &ids, &[0], &[1; 11], 11).unwrap();
        let ap = (1.0 / 10.0 + 2.0 / 11.0) / 2.0;
        assert!((m.map - ap).abs() < 1e-12);
        assert!((m.minp - 2.0 / 11.0).abs() < 1e-12);
        assert!(m.map < m.minp);
        assert!((ap - 0.1409).abs() < 1e-4);
    }

    #[test]
    fn perfect_retrieval_scores_one() {
        let d = Tensor::new([1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let m = evaluate(&d, &[4], &[4, 5, 6], &[0], &[1, 1, 1], 3).unwrap();
        assert_eq!((m.map, m.minp, m.cmc[0]), (1.0, 1.0, 1.0));
    }

    #[test]
    fn same_camera_matches_are_ignored_and_empty_queries_excluded() {
        let d = Tensor::new([2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        // query 0: its only match shares the camera; query 1 has a cross-camera match
        let m = evaluate(&d, &[1, 2], &[1, 2, 3], &[0, 0], &[0, 1, 1], 3).unwrap();
        assert_eq!(m.num_valid_queries, 1);
        assert_eq!(m.cmc, vec![0.0, 1.0, 1.0]);
        let none = evaluate(&d, &[1, 1], &[1, 2, 3], &[0, 0], &[0, 1, 1], 3);
        assert!(matches!(none, Err(Error::Evaluation(_))));
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let d = Tensor::new([1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let m = evaluate(&d, &[1], &[2, 1, 1], &[0], &[1, 1, 1], 3).unwrap();
        assert!((m.map - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn distance_examples() {
        let a = Tensor::new([1, 2], vec![1.0f64, 0.0]).unwrap();
        let b = Tensor::new([1, 2], vec![0.0f64, 1.0]).unwrap();
        assert_eq!(distance_matrix(&a, &a, DistanceMetric::Euclidean).unwrap().data(), &[0.0]);
        let d = distance_matrix(&a, &b, DistanceMetric::Euclidean).unwrap();
        assert!((d.item() - libm::sqrt(2.0)).abs() < 1e-15);
        let c = distance_matrix(&a, &b, DistanceMetric::Cosine).unwrap();
        assert!((c.item() - 1.0).abs() < 1e-15);
        assert!(distance_matrix(&a, &Tensor::<f64>::zeros([1, 3]), DistanceMetric::Euclidean).is_err());
    }
}
