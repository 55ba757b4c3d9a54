//! Neighborhood statistics over kNN query results.
//!
//! Three per-point statistics are computed from a query point's k nearest
//! neighbors and the upstream model's predicted label:
//!
//! * unconditional density proxy — the mean neighbor distance. This is a
//!   dissimilarity score: larger means lower local density.
//! * conditional density proxy — the mean distance over neighbors whose
//!   ground-truth label equals the predicted label; absent when no
//!   neighbor matches.
//! * agreement count — how many neighbors carry the predicted label.
//!
//! The sums behind the density proxies are normalized to means so values
//! stay comparable across k; rank metrics are unaffected by the constant.

use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::knn::{KnnIndex, NeighborQuery};
use crate::repr_store::{correctness_labels, ReprSet};

/// Per-point neighborhood statistics at a fixed k.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighStats {
    /// Mean distance to the k neighbors.
    pub mean_distance: f64,
    /// Mean distance to neighbors labeled as predicted; `None` when no
    /// neighbor matches (exactly when `agreement_count == 0`).
    pub mean_same_class_distance: Option<f64>,
    /// Number of neighbors whose ground-truth label is the predicted one.
    pub agreement_count: usize,
    pub k: usize,
}

/// Mean distance to the k nearest neighbors (dissimilarity score).
pub fn kde_unconditional(nq: &NeighborQuery) -> f64 {
    let k = nq.k();
    assert!(k >= 1, "query must contain at least one neighbor");
    nq.distances.iter().sum::<f64>() / k as f64
}

/// Mean distance over neighbors whose ground-truth label equals
/// `pred_label`; `None` when the selection is empty.
pub fn kde_conditional(nq: &NeighborQuery, pred_label: u32) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (d, y) in nq.distances.iter().zip(&nq.neighbor_labels) {
        if *y == pred_label {
            sum += d;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Count of neighbors whose ground-truth label equals `pred_label`.
pub fn agreement(nq: &NeighborQuery, pred_label: u32) -> usize {
    nq.neighbor_labels.iter().filter(|y| **y == pred_label).count()
}

/// Bundles the three statistics for one query.
pub fn neigh_stats(nq: &NeighborQuery, pred_label: u32) -> NeighStats {
    NeighStats {
        mean_distance: kde_unconditional(nq),
        mean_same_class_distance: kde_conditional(nq, pred_label),
        agreement_count: agreement(nq, pred_label),
        k: nq.k(),
    }
}

/// One row of the sweep table: per-k, per-split means.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    /// "correct" or "incorrect" — upstream prediction outcome.
    pub split: &'static str,
    pub mean_kde: f64,
    /// Mean over points where the conditional statistic exists; `None`
    /// when it exists for no point in the split.
    pub mean_kde_cond: Option<f64>,
    /// Mean agreement fraction (count / k), in [0,1].
    pub mean_agreement: f64,
    pub n_points: usize,
}

/// Sweeps the three statistics over `k_values` for every point of
/// `set_query`, split by whether the upstream prediction was correct.
///
/// A single query at the largest k is issued per point and smaller k are
/// read off its prefix — exact search makes the prefix identical to a
/// direct smaller-k query.
pub fn stats_sweep(
    set_query: &ReprSet,
    index: &KnnIndex<'_>,
    k_values: &[usize],
    self_exclude: bool,
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::Config("k list must not be empty".into()));
    }
    let k_max = *k_values.iter().max().unwrap();
    let queries = index.query_set(set_query, k_max, self_exclude)?;
    let correct = correctness_labels(set_query);

    let per_point: Vec<Vec<NeighStats>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, nq)| {
            k_values
                .iter()
                .map(|&k| neigh_stats(&nq.prefix(k), set_query.pred_labels()[i]))
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(k_values.len() * 2);
    for (ki, &k) in k_values.iter().enumerate() {
        for (split, want) in [("correct", 1u8), ("incorrect", 0u8)] {
            let stats = per_point
                .iter()
                .zip(&correct)
                .filter(|(_, c)| **c == want)
                .map(|(s, _)| &s[ki]);
            let mut n = 0usize;
            let mut sum_kde = 0.0;
            let mut sum_agree = 0.0;
            let mut n_cond = 0usize;
            let mut sum_cond = 0.0;
            for s in stats {
                n += 1;
                sum_kde += s.mean_distance;
                sum_agree += s.agreement_count as f64 / k as f64;
                if let Some(c) = s.mean_same_class_distance {
                    n_cond += 1;
                    sum_cond += c;
                }
            }
            rows.push(SweepRow {
                k,
                split,
                mean_kde: if n > 0 { sum_kde / n as f64 } else { f64::NAN },
                mean_kde_cond: (n_cond > 0).then(|| sum_cond / n_cond as f64),
                mean_agreement: if n > 0 { sum_agree / n as f64 } else { f64::NAN },
                n_points: n,
            });
        }
    }
    Ok(rows)
}

/// Writes the sweep table as CSV with header
/// `k,split,mean_kde,mean_kde_cond,mean_agreement,n_points`. An absent
/// conditional mean is written as an empty field.
pub fn write_sweep_csv(rows: &[SweepRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "k,split,mean_kde,mean_kde_cond,mean_agreement,n_points")?;
    for r in rows {
        let cond = r.mean_kde_cond.map(|c| c.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", r.k, r.split, r.mean_kde, cond, r.mean_agreement, r.n_points)?;
    }
    Ok(())
}

/// Convenience wrapper writing the sweep CSV to a file.
pub fn write_sweep_csv_file(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_sweep_csv(rows, &mut buf).expect("write to Vec cannot fail");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::{build_index, DistanceKernel};

    fn nq(distances: Vec<f64>, labels: Vec<u32>) -> NeighborQuery {
        let ids = (0..distances.len() as u64).collect();
        NeighborQuery { neighbor_ids: ids, distances, neighbor_labels: labels }
    }

    #[test]
    fn kde_unconditional_is_mean() {
        assert_eq!(kde_unconditional(&nq(vec![1.0, 3.0], vec![0, 1])), 2.0);
        assert_eq!(kde_unconditional(&nq(vec![0.0, 0.0, 0.0], vec![0, 1, 2])), 0.0);
    }

    #[test]
    fn kde_conditional_selects_predicted_label() {
        let q = nq(vec![1.0, 2.0, 3.0], vec![0, 1, 0]);
        assert_eq!(kde_conditional(&q, 0), Some(2.0)); // mean(1, 3)
        assert_eq!(kde_conditional(&q, 7), None);
        let all = nq(vec![1.0, 2.0, 3.0], vec![4, 4, 4]);
        assert_eq!(kde_conditional(&all, 4), Some(kde_unconditional(&all)));
    }

    #[test]
    fn agreement_counts() {
        let q = nq(vec![1.0, 2.0, 3.0], vec![8, 8, 9]);
        assert_eq!(agreement(&q, 8), 2);
        assert_eq!(agreement(&q, 3), 0);
        let total = nq(vec![0.5; 10], vec![2; 10]);
        assert_eq!(agreement(&total, 2), 10);
    }

    #[test]
    fn conditional_absent_iff_agreement_zero() {
        for labels in [vec![1, 2, 3], vec![5, 5, 5], vec![5, 1, 5]] {
            let q = nq(vec![1.0, 2.0, 3.0], labels);
            let s = neigh_stats(&q, 5);
            assert_eq!(s.mean_same_class_distance.is_none(), s.agreement_count == 0);
            assert!(s.agreement_count <= s.k);
        }
    }

    #[test]
    fn stats_bounded_by_neighbor_distances() {
        let q = nq(vec![0.5, 1.5, 4.0], vec![1, 2, 1]);
        let s = neigh_stats(&q, 1);
        assert!(s.mean_distance >= 0.5 && s.mean_distance <= 4.0);
        assert!(s.mean_same_class_distance.unwrap() <= 4.0);
    }

    #[test]
    fn monotone_consistency_prefix_equals_direct_query() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 120;
        let dim = 5;
        let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let set = ReprSet::new(data, dim, ids, labels.clone(), labels, vec![0.5; n]).unwrap();
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        for i in 0..10 {
            let big = index.query(set.vector(i), 20, Some(set.ids()[i])).unwrap();
            for k in [1, 5, 12] {
                let small = index.query(set.vector(i), k, Some(set.ids()[i])).unwrap();
                assert_eq!(big.prefix(k), small);
                let pred = set.pred_labels()[i];
                assert_eq!(neigh_stats(&big.prefix(k), pred), neigh_stats(&small, pred));
            }
        }
    }

    #[test]
    fn two_point_sweep_agreement_forced() {
        // Two points, distinct labels, both predictions correct. With
        // self-exclusion and k=1, each point's only neighbor carries the
        // other label, so per-point agreement is 0 and the "correct"
        // split's mean agreement fraction is 0.
        let set = ReprSet::new(
            vec![0.0, 0.0, 1.0, 0.0],
            2,
            vec![0, 1],
            vec![0, 1],
            vec![0, 1],
            vec![0.9, 0.9],
        )
        .unwrap();
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        let rows = stats_sweep(&set, &index, &[1], true).unwrap();
        let correct = rows.iter().find(|r| r.split == "correct").unwrap();
        assert_eq!(correct.n_points, 2);
        assert_eq!(correct.mean_agreement, 0.0);
        let incorrect = rows.iter().find(|r| r.split == "incorrect").unwrap();
        assert_eq!(incorrect.n_points, 0);
    }

    #[test]
    fn sweep_csv_format() {
        let rows = vec![
            SweepRow {
                k: 1,
                split: "correct",
                mean_kde: 1.5,
                mean_kde_cond: Some(1.25),
                mean_agreement: 0.75,
                n_points: 4,
            },
            SweepRow {
                k: 1,
                split: "incorrect",
                mean_kde: 2.5,
                mean_kde_cond: None,
                mean_agreement: 0.0,
                n_points: 2,
            },
        ];
        let mut out = Vec::new();
        write_sweep_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "k,split,mean_kde,mean_kde_cond,mean_agreement,n_points\n\
             1,correct,1.5,1.25,0.75,4\n\
             1,incorrect,2.5,,0,2\n"
        );
    }
}
