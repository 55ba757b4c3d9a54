//! Exact k-nearest-neighbor search over a representation set.
//!
//! The index is a parallel batched full scan — no approximate structure —
//! so every downstream statistic stays oracle-checkable. Distances are
//! accumulated in f64 regardless of input precision. Ties are broken by
//! ascending point id, which makes every query bit-reproducible.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::repr_store::ReprSet;

/// Distance kernel used for neighbor search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKernel {
    #[default]
    Euclidean,
    /// `1 - cosine_similarity`, in `[0, 2]`. Undefined for zero vectors.
    CosineDistance,
}

impl DistanceKernel {
    pub fn name(self) -> &'static str {
        match self {
            DistanceKernel::Euclidean => "euclidean",
            DistanceKernel::CosineDistance => "cosine",
        }
    }

    /// Parses the CLI spelling of a kernel.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceKernel::Euclidean),
            "cosine" | "cosine_distance" => Ok(DistanceKernel::CosineDistance),
            other => Err(Error::Config(format!(
                "unknown kernel {other:?}; expected euclidean or cosine"
            ))),
        }
    }
}

/// Result of one kNN lookup: neighbor ids, distances (ascending), and the
/// neighbors' ground-truth labels, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborQuery {
    pub neighbor_ids: Vec<u64>,
    pub distances: Vec<f64>,
    pub neighbor_labels: Vec<u32>,
}

impl NeighborQuery {
    pub fn k(&self) -> usize {
        self.distances.len()
    }

    /// The first `k` entries as a new query. Exact search guarantees this
    /// equals a direct query with the smaller k.
    pub fn prefix(&self, k: usize) -> NeighborQuery {
        assert!(k <= self.k(), "prefix k {} exceeds query k {}", k, self.k());
        NeighborQuery {
            neighbor_ids: self.neighbor_ids[..k].to_vec(),
            distances: self.distances[..k].to_vec(),
            neighbor_labels: self.neighbor_labels[..k].to_vec(),
        }
    }
}

/// Immutable exact-search index over a [`ReprSet`].
#[derive(Debug)]
pub struct KnnIndex<'a> {
    set: &'a ReprSet,
    kernel: DistanceKernel,
    /// Precomputed f64 vector norms; only populated for the cosine kernel.
    norms: Vec<f64>,
}

/// Builds an index over `set` under `kernel`.
///
/// For the cosine kernel every indexed vector must be nonzero.
pub fn build_index(set: &ReprSet, kernel: DistanceKernel) -> Result<KnnIndex<'_>> {
    let norms = match kernel {
        DistanceKernel::Euclidean => Vec::new(),
        DistanceKernel::CosineDistance => {
            let mut norms = Vec::with_capacity(set.count());
            for i in 0..set.count() {
                let n = l2_norm(set.vector(i));
                if n == 0.0 {
                    return Err(Error::Build(format!(
                        "point id {} is a zero vector; cosine distance is undefined",
                        set.ids()[i]
                    )));
                }
                norms.push(n);
            }
            norms
        }
    };
    Ok(KnnIndex { set, kernel, norms })
}

impl<'a> KnnIndex<'a> {
    pub fn len(&self) -> usize {
        self.set.count()
    }

    pub fn is_empty(&self) -> bool {
        false // a ReprSet always has at least one point
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    pub fn kernel(&self) -> DistanceKernel {
        self.kernel
    }

    pub fn set(&self) -> &'a ReprSet {
        self.set
    }

    fn contains_id(&self, id: u64) -> bool {
        self.set.ids().contains(&id)
    }

    /// Exact k nearest neighbors of `q`, optionally excluding the point
    /// with id `exclude_id` (used when the query point itself is indexed).
    pub fn query(&self, q: &[f32], k: usize, exclude_id: Option<u64>) -> Result<NeighborQuery> {
        if q.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: q.len() });
        }
        if k == 0 {
            return Err(Error::Query("k must be >= 1".into()));
        }
        let excluded_present = exclude_id.map_or(false, |id| self.contains_id(id));
        let available = self.len() - usize::from(excluded_present);
        if k > available {
            return Err(Error::Query(format!(
                "k={k} exceeds the {available} points available{}",
                if excluded_present { " after self-exclusion" } else { "" }
            )));
        }
        let q_norm = match self.kernel {
            DistanceKernel::Euclidean => 0.0,
            DistanceKernel::CosineDistance => {
                let n = l2_norm(q);
                if n == 0.0 {
                    return Err(Error::Query(
                        "query is a zero vector; cosine distance is undefined".into(),
                    ));
                }
                n
            }
        };

        // One code path for both modes: fetch k+1 when excluding, then
        // drop the matching id and truncate.
        let fetch = if excluded_present { (k + 1).min(self.len()) } else { k };
        let mut top = TopK::new(fetch);
        for row in 0..self.len() {
            let d = self.distance_to_row(q, q_norm, row);
            top.push(d, self.set.ids()[row], row);
        }
        let mut entries = top.into_sorted();
        if let Some(ex) = exclude_id {
            entries.retain(|e| e.id != ex);
        }
        entries.truncate(k);
        debug_assert_eq!(entries.len(), k);
        Ok(NeighborQuery {
            neighbor_ids: entries.iter().map(|e| e.id).collect(),
            distances: entries.iter().map(|e| e.dist).collect(),
            neighbor_labels: entries.iter().map(|e| self.set.labels()[e.row]).collect(),
        })
    }

    /// Queries every row of `queries` in parallel. Results are in row
    /// order regardless of worker count. With `self_exclude`, each row's
    /// own id is excluded (the query set must then be the indexed set or
    /// share its ids).
    pub fn query_set(
        &self,
        queries: &ReprSet,
        k: usize,
        self_exclude: bool,
    ) -> Result<Vec<NeighborQuery>> {
        (0..queries.count())
            .into_par_iter()
            .map(|i| {
                let ex = self_exclude.then(|| queries.ids()[i]);
                self.query(queries.vector(i), k, ex)
            })
            .collect()
    }

    fn distance_to_row(&self, q: &[f32], q_norm: f64, row: usize) -> f64 {
        let v = self.set.vector(row);
        match self.kernel {
            DistanceKernel::Euclidean => euclidean(q, v),
            DistanceKernel::CosineDistance => {
                let dot = dot_f64(q, v);
                1.0 - dot / (q_norm * self.norms[row])
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    dist: f64,
    id: u64,
    row: usize,
}

impl Entry {
    /// Total order: ascending distance, ties by ascending id.
    fn key(&self) -> (f64, u64) {
        (self.dist, self.id)
    }
}

/// Bounded selection of the k smallest entries under (distance, id).
/// A plain sorted buffer with binary insertion: k stays small (<= a few
/// hundred) so this beats a heap in practice and keeps ordering obvious.
struct TopK {
    k: usize,
    buf: Vec<Entry>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK { k, buf: Vec::with_capacity(k + 1) }
    }

    fn push(&mut self, dist: f64, id: u64, row: usize) {
        let e = Entry { dist, id, row };
        if self.buf.len() == self.k {
            let worst = self.buf[self.k - 1];
            if e.key() >= worst.key() {
                return;
            }
        }
        let pos = self.buf.partition_point(|x| x.key() < e.key());
        self.buf.insert(pos, e);
        self.buf.truncate(self.k);
    }

    fn into_sorted(self) -> Vec<Entry> {
        self.buf
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc.sqrt()
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

fn l2_norm(v: &[f32]) -> f64 {
    dot_f64(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn set_from_rows(rows: &[(u64, u32, Vec<f32>)]) -> ReprSet {
        let dim = rows[0].2.len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.2.iter().copied()).collect();
        let ids: Vec<u64> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<u32> = rows.iter().map(|r| r.1).collect();
        let preds = labels.clone();
        let confs = vec![0.5; rows.len()];
        ReprSet::new(data, dim, ids, labels, preds, confs).unwrap()
    }

    fn line_set() -> ReprSet {
        set_from_rows(&[
            (0, 0, vec![0.0, 0.0]),
            (1, 1, vec![1.0, 0.0]),
            (2, 2, vec![3.0, 0.0]),
        ])
    }

    #[test]
    fn hand_geometry_no_exclusion() {
        let set = line_set();
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        let nq = index.query(&[0.0, 0.0], 2, None).unwrap();
        assert_eq!(nq.neighbor_ids, vec![0, 1]);
        assert_eq!(nq.distances, vec![0.0, 1.0]);
        assert_eq!(nq.neighbor_labels, vec![0, 1]);
    }

    #[test]
    fn hand_geometry_with_exclusion() {
        let set = line_set();
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        let nq = index.query(&[0.0, 0.0], 2, Some(0)).unwrap();
        assert_eq!(nq.neighbor_ids, vec![1, 2]);
        assert_eq!(nq.distances, vec![1.0, 3.0]);
    }

    #[test]
    fn single_point_self_exclusion_is_query_error() {
        let set = set_from_rows(&[(5, 0, vec![1.0, 2.0])]);
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        assert!(index.query(&[1.0, 2.0], 1, None).is_ok());
        let err = index.query(&[1.0, 2.0], 1, Some(5)).unwrap_err();
        assert!(matches!(err, Error::Query(_)), "{err:?}");
    }

    #[test]
    fn k_too_large_and_dim_mismatch() {
        let set = line_set();
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        assert!(matches!(index.query(&[0.0, 0.0], 4, None), Err(Error::Query(_))));
        assert!(matches!(
            index.query(&[0.0, 0.0, 0.0], 1, None),
            Err(Error::Shape { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn zero_vector_under_cosine_is_build_error() {
        let set = set_from_rows(&[(0, 0, vec![1.0, 0.0]), (1, 1, vec![0.0, 0.0])]);
        let err = build_index(&set, DistanceKernel::CosineDistance).unwrap_err();
        assert!(matches!(err, Error::Build(_)), "{err:?}");
    }

    #[test]
    fn cosine_distance_range_and_values() {
        let set = set_from_rows(&[
            (0, 0, vec![1.0, 0.0]),
            (1, 1, vec![0.0, 1.0]),
            (2, 2, vec![-2.0, 0.0]),
        ]);
        let index = build_index(&set, DistanceKernel::CosineDistance).unwrap();
        let nq = index.query(&[1.0, 0.0], 3, None).unwrap();
        assert_eq!(nq.neighbor_ids, vec![0, 1, 2]);
        assert!((nq.distances[0] - 0.0).abs() < 1e-12);
        assert!((nq.distances[1] - 1.0).abs() < 1e-12);
        assert!((nq.distances[2] - 2.0).abs() < 1e-12);
    }

    /// Independent full-scan oracle: computes every distance, sorts the
    /// whole list by (distance, id), applies exclusion, takes k.
    pub(crate) fn oracle_scan(
        set: &ReprSet,
        kernel: DistanceKernel,
        q: &[f32],
        k: usize,
        exclude_id: Option<u64>,
    ) -> (Vec<u64>, Vec<f64>) {
        let mut all: Vec<(f64, u64)> = (0..set.count())
            .map(|row| {
                let v = set.vector(row);
                let d = match kernel {
                    DistanceKernel::Euclidean => {
                        let mut s = 0.0f64;
                        for j in 0..v.len() {
                            let diff = q[j] as f64 - v[j] as f64;
                            s += diff * diff;
                        }
                        s.sqrt()
                    }
                    DistanceKernel::CosineDistance => {
                        let mut dot = 0.0f64;
                        let mut na = 0.0f64;
                        let mut nb = 0.0f64;
                        for j in 0..v.len() {
                            dot += q[j] as f64 * v[j] as f64;
                            na += (q[j] as f64).powi(2);
                            nb += (v[j] as f64).powi(2);
                        }
                        1.0 - dot / (na.sqrt() * nb.sqrt())
                    }
                };
                (d, set.ids()[row])
            })
            .filter(|(_, id)| Some(*id) != exclude_id)
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.truncate(k);
        (all.iter().map(|e| e.1).collect(), all.iter().map(|e| e.0).collect())
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> ReprSet {
        let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        // Shuffled non-contiguous ids so ties actually exercise id order.
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
        ids.shuffle(rng);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let preds = labels.clone();
        ReprSet::new(data, dim, ids, labels, preds, vec![0.5; n]).unwrap()
    }

    #[test]
    fn random_queries_match_oracle_both_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kernel in [DistanceKernel::Euclidean, DistanceKernel::CosineDistance] {
            let set = random_set(&mut rng, 500, 8);
            let index = build_index(&set, kernel).unwrap();
            for _ in 0..40 {
                let q: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0f32..3.0)).collect();
                let nq = index.query(&q, 10, None).unwrap();
                let (oids, odists) = oracle_scan(&set, kernel, &q, 10, None);
                assert_eq!(nq.neighbor_ids, oids);
                for (a, b) in nq.distances.iter().zip(&odists) {
                    let rel = (a - b).abs() / b.abs().max(1e-12);
                    assert!(rel <= 1e-6, "distance mismatch {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn duplicate_points_tie_break_by_id() {
        // Three copies of the same point plus one farther away.
        let set = set_from_rows(&[
            (9, 0, vec![1.0, 1.0]),
            (2, 1, vec![1.0, 1.0]),
            (5, 2, vec![1.0, 1.0]),
            (1, 3, vec![8.0, 8.0]),
        ]);
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        let nq = index.query(&[1.0, 1.0], 3, None).unwrap();
        assert_eq!(nq.neighbor_ids, vec![2, 5, 9]);
        // Excluding one duplicate keeps the others.
        let nq = index.query(&[1.0, 1.0], 3, Some(2)).unwrap();
        assert_eq!(nq.neighbor_ids, vec![5, 9, 1]);
        assert!(nq.distances[0] == 0.0 && nq.distances[2] > 0.0);
    }

    #[test]
    fn repeated_queries_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_set(&mut rng, 200, 6);
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        let q: Vec<f32> = (0..6).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let a = index.query(&q, 7, None).unwrap();
        let b = index.query(&q, 7, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_exclusion_first_distance_positive_for_distinct_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let set = random_set(&mut rng, 100, 4); // continuous draws: distinct w.p. 1
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        let queries = index.query_set(&set, 3, true).unwrap();
        for nq in &queries {
            assert!(nq.distances[0] > 0.0);
        }
    }

    #[test]
    fn query_set_matches_individual_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let set = random_set(&mut rng, 150, 5);
        let index = build_index(&set, DistanceKernel::Euclidean).unwrap();
        let batch = index.query_set(&set, 4, true).unwrap();
        for i in 0..set.count() {
            let single = index.query(set.vector(i), 4, Some(set.ids()[i])).unwrap();
            assert_eq!(batch[i], single);
        }
    }
}
