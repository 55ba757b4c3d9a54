//! Synthetic representation-space benchmark with planted geometry.
//!
//! Classes are unit-variance Gaussian clusters on mutually orthogonal
//! axes, scaled so every pair of class centers sits exactly `separation`
//! apart. A configurable fraction of each class's points is drawn around
//! the midpoint to another class's center; those are the points a
//! classifier must get wrong. OOD clusters sit on further orthogonal axes
//! at `ood_offset` from the origin, at least that far from every class
//! center.
//!
//! The upstream classifier is a linear-softmax head fitted on the
//! training draw (nearest-class-mean logits `x . mu_c - |mu_c|^2 / 2`,
//! the Bayes rule for unit-variance clusters with equal priors), so its
//! errors concentrate on the planted midpoint points and its confidences
//! are roughly calibrated by construction. OOD labels use the sentinel
//! class id `n_classes`, one past the last real class, so pooled
//! correctness flags mark them all as errors automatically.
//!
//! Generation is single-threaded and draws from one seeded stream; the
//! same config always produces byte-identical files.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::baselines::{argmax_class, Logits};
use crate::error::{Error, Result};
use crate::repr_store::ReprSet;

/// Generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Pairwise distance between class centers, in within-cluster sigma.
    pub separation: f64,
    /// Fraction of each class's points drawn at a midpoint to another
    /// class, in `[0, 0.5]`.
    pub overlap: f64,
    pub ood_clusters: usize,
    /// Distance of each OOD cluster center from the origin (and a lower
    /// bound on its distance to every class center).
    pub ood_offset: f64,
    pub ood_per_cluster: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 20,
            dim: 64,
            train_per_class: 500,
            test_per_class: 100,
            separation: 8.0,
            overlap: 0.2,
            ood_clusters: 2,
            ood_offset: 20.0,
            ood_per_cluster: 500,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.train_per_class == 0
            || self.test_per_class == 0
            || self.ood_clusters == 0
            || self.ood_per_cluster == 0
        {
            return Err(Error::Config("all point counts must be >= 1".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be > 0".into()));
        }
        if !(0.0..=0.5).contains(&self.overlap) {
            return Err(Error::Config("overlap must lie in [0, 0.5]".into()));
        }
        if !(self.ood_offset > 0.0) {
            return Err(Error::Config("ood_offset must be > 0".into()));
        }
        if self.n_classes + self.ood_clusters > self.dim {
            return Err(Error::Config(format!(
                "orthogonal placement needs dim >= n_classes + ood_clusters \
                 ({} + {} > {})",
                self.n_classes, self.ood_clusters, self.dim
            )));
        }
        Ok(())
    }

    /// Sets one `key=value` pair using the CLI flag names.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("cannot parse {key}={value:?} as {what}"));
        match key {
            "classes" => self.n_classes = value.parse().map_err(|_| bad("integer"))?,
            "dim" => self.dim = value.parse().map_err(|_| bad("integer"))?,
            "train-per-class" => {
                self.train_per_class = value.parse().map_err(|_| bad("integer"))?
            }
            "test-per-class" => self.test_per_class = value.parse().map_err(|_| bad("integer"))?,
            "separation" => self.separation = value.parse().map_err(|_| bad("number"))?,
            "overlap" => self.overlap = value.parse().map_err(|_| bad("number"))?,
            "ood-clusters" => self.ood_clusters = value.parse().map_err(|_| bad("integer"))?,
            "ood-offset" => self.ood_offset = value.parse().map_err(|_| bad("number"))?,
            "ood-per-cluster" => {
                self.ood_per_cluster = value.parse().map_err(|_| bad("integer"))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Reads a `key=value` config file (one pair per line, `#` comments).
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Sentinel class id assigned to OOD points.
    pub fn sentinel_class(&self) -> u32 {
        self.n_classes as u32
    }

    fn class_center(&self, c: usize) -> Vec<f64> {
        let mut center = vec![0.0; self.dim];
        center[c] = self.separation / std::f64::consts::SQRT_2;
        center
    }

    fn ood_center(&self, m: usize) -> Vec<f64> {
        let mut center = vec![0.0; self.dim];
        center[self.n_classes + m] = self.ood_offset;
        center
    }
}

/// A generated benchmark: three representation sets and their class-logit
/// sidecars, plus any generation warnings.
pub struct SynthOutput {
    pub train: ReprSet,
    pub test_in: ReprSet,
    pub test_ood: ReprSet,
    pub train_logits: Logits,
    pub test_in_logits: Logits,
    pub test_ood_logits: Logits,
    pub warnings: Vec<String>,
}

/// Generates the benchmark. See the module docs for the construction.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.n_classes).map(|c| cfg.class_center(c)).collect();

    let mut next_id = 0u64;
    let (train_data, train_labels, train_ids) =
        draw_in_distribution(cfg, &centers, cfg.train_per_class, &mut rng, &mut next_id);
    let (test_data, test_labels, test_ids) =
        draw_in_distribution(cfg, &centers, cfg.test_per_class, &mut rng, &mut next_id);

    let mut ood_data = Vec::new();
    let mut ood_ids = Vec::new();
    for m in 0..cfg.ood_clusters {
        let center = cfg.ood_center(m);
        for _ in 0..cfg.ood_per_cluster {
            sample_around(&center, &mut rng, &mut ood_data);
            ood_ids.push(next_id);
            next_id += 1;
        }
    }
    let ood_labels = vec![cfg.sentinel_class(); ood_ids.len()];

    // Upstream head fitted on the training draw: per-class means of the
    // generated points (by true label), then nearest-mean logits.
    let head = LinearSoftmaxHead::fit(&train_data, &train_labels, cfg.dim, cfg.n_classes);
    let train = head.annotate(train_data, train_labels, train_ids, cfg.dim)?;
    let test_in = head.annotate(test_data, test_labels, test_ids, cfg.dim)?;
    let test_ood = head.annotate(ood_data, ood_labels, ood_ids, cfg.dim)?;

    let mut warnings = Vec::new();
    let train_errors = train
        .set
        .labels()
        .iter()
        .zip(train.set.pred_labels())
        .filter(|(y, p)| y != p)
        .count();
    if train_errors == 0 {
        warnings.push(
            "the upstream model makes no mistakes on the training set; uncertainty \
             training needs mistakes (raise overlap or lower separation)"
                .to_string(),
        );
    }

    Ok(SynthOutput {
        train: train.set,
        test_in: test_in.set,
        test_ood: test_ood.set,
        train_logits: train.logits,
        test_in_logits: test_in.logits,
        test_ood_logits: test_ood.logits,
        warnings,
    })
}

fn sample_around(center: &[f64], rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    for c in center {
        let g: f64 = StandardNormal.sample(rng);
        out.push((c + g) as f32);
    }
}

/// Overlap points are drawn around interpolations between the two class
/// centers, uniform over the middle of the connecting line. The zone is
/// centered on the midpoint; its width controls how ambiguous the planted
/// points are.
const BRIDGE_RANGE: (f64, f64) = (0.4, 0.6);

fn draw_in_distribution(
    cfg: &SynthConfig,
    centers: &[Vec<f64>],
    per_class: usize,
    rng: &mut ChaCha8Rng,
    next_id: &mut u64,
) -> (Vec<f32>, Vec<u32>, Vec<u64>) {
    let n = cfg.n_classes * per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut bridge = vec![0.0f64; cfg.dim];
    for c in 0..cfg.n_classes {
        for _ in 0..per_class {
            let is_overlap = rng.random_range(0.0..1.0) < cfg.overlap;
            if is_overlap {
                // Uniform partner class other than c.
                let mut b = rng.random_range(0..cfg.n_classes - 1);
                if b >= c {
                    b += 1;
                }
                let t = rng.random_range(BRIDGE_RANGE.0..BRIDGE_RANGE.1);
                for (m, (x, y)) in bridge.iter_mut().zip(centers[c].iter().zip(&centers[b])) {
                    *m = x + t * (y - x);
                }
                sample_around(&bridge, rng, &mut data);
            } else {
                sample_around(&centers[c], rng, &mut data);
            }
            labels.push(c as u32);
            ids.push(*next_id);
            *next_id += 1;
        }
    }
    (data, labels, ids)
}

struct LinearSoftmaxHead {
    /// Fitted class means, n_classes x dim.
    means: Vec<Vec<f64>>,
}

struct Annotated {
    set: ReprSet,
    logits: Logits,
}

impl LinearSoftmaxHead {
    fn fit(data: &[f32], labels: &[u32], dim: usize, n_classes: usize) -> Self {
        let mut sums = vec![vec![0.0f64; dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (row, y) in labels.iter().enumerate() {
            let v = &data[row * dim..(row + 1) * dim];
            for (s, x) in sums[*y as usize].iter_mut().zip(v) {
                *s += *x as f64;
            }
            counts[*y as usize] += 1;
        }
        for (s, n) in sums.iter_mut().zip(&counts) {
            for v in s.iter_mut() {
                *v /= (*n).max(1) as f64;
            }
        }
        LinearSoftmaxHead { means: sums }
    }

    /// Logits of the Bayes rule for unit-variance clusters:
    /// `x . mu_c - |mu_c|^2 / 2`.
    fn logits_of(&self, x: &[f32]) -> Vec<f32> {
        self.means
            .iter()
            .map(|mu| {
                let mut dot = 0.0f64;
                let mut sq = 0.0f64;
                for (m, v) in mu.iter().zip(x) {
                    dot += m * *v as f64;
                    sq += m * m;
                }
                (dot - 0.5 * sq) as f32
            })
            .collect()
    }

    fn annotate(
        &self,
        data: Vec<f32>,
        labels: Vec<u32>,
        ids: Vec<u64>,
        dim: usize,
    ) -> Result<Annotated> {
        let n = labels.len();
        let n_classes = self.means.len();
        let mut logit_values = Vec::with_capacity(n * n_classes);
        let mut preds = Vec::with_capacity(n);
        let mut confs = Vec::with_capacity(n);
        for row in 0..n {
            let x = &data[row * dim..(row + 1) * dim];
            let logits = self.logits_of(x);
            preds.push(argmax_class(&logits));
            confs.push(max_softmax(&logits));
            logit_values.extend_from_slice(&logits);
        }
        let set = ReprSet::new(data, dim, ids, labels, preds, confs)?;
        let logits = Logits::new(logit_values, n_classes)?;
        Ok(Annotated { set, logits })
    }
}

fn max_softmax(logits: &[f32]) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64));
    let z: f64 = logits.iter().map(|v| (*v as f64 - m).exp()).sum();
    1.0 / z
}

/// Deterministic class-stratified partition of a set into parts with the
/// given fractions (which must sum to 1).
pub fn split(set: &ReprSet, fractions: &[f64], seed: u64) -> Result<Vec<ReprSet>> {
    if fractions.is_empty() {
        return Err(Error::Config("need at least one fraction".into()));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Config("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("fractions sum to {total}, expected 1")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (row, y) in set.labels().iter().enumerate() {
        by_class.entry(*y).or_default().push(row);
    }
    let mut part_rows: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for rows in by_class.values() {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        let n = rows.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        for (j, f) in fractions.iter().enumerate() {
            cum += f;
            let end = if j + 1 == fractions.len() {
                n
            } else {
                (cum * n as f64).round() as usize
            };
            part_rows[j].extend(&rows[start..end.min(n)]);
            start = end.min(n);
        }
    }
    part_rows
        .into_iter()
        .enumerate()
        .map(|(j, mut rows)| {
            if rows.is_empty() {
                return Err(Error::Config(format!(
                    "partition part {j} is empty; fraction too small for the set"
                )));
            }
            rows.sort_unstable(); // keep canonical file order within a part
            let mut data = Vec::with_capacity(rows.len() * set.dim());
            let mut ids = Vec::with_capacity(rows.len());
            let mut labels = Vec::with_capacity(rows.len());
            let mut preds = Vec::with_capacity(rows.len());
            let mut confs = Vec::with_capacity(rows.len());
            for &r in &rows {
                data.extend_from_slice(set.vector(r));
                ids.push(set.ids()[r]);
                labels.push(set.labels()[r]);
                preds.push(set.pred_labels()[r]);
                confs.push(set.confidences()[r]);
            }
            ReprSet::new(data, set.dim(), ids, labels, preds, confs)
        })
        .collect()
}
