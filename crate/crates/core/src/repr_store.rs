//! Representation sets: the labeled embedding matrices everything else
//! is built over.
//!
//! A set lives in two files:
//!
//! * a binary vector file — magic `NUCR`, `version: u16 = 1`, `dim: u32`,
//!   `count: u64`, then `count * dim` little-endian `f32`s, row-major;
//! * a UTF-8 CSV metadata file with header `id,label,pred_label,confidence`
//!   and one row per vector, in vector-file order.
//!
//! Row `i` of the vector file binds to row `i` of the metadata file. The
//! file order is the canonical point order everywhere downstream. A loaded
//! [`ReprSet`] is immutable and safe to share across threads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes at the start of every vector file ("NUCR").
pub const VECTOR_MAGIC: [u8; 4] = [0x4E, 0x55, 0x43, 0x52];
/// Current vector file version.
pub const VECTOR_VERSION: u16 = 1;

/// A frozen set of representation vectors with per-point upstream-model
/// metadata: ground-truth label, predicted label, and max-softmax
/// confidence.
#[derive(Debug, Clone)]
pub struct ReprSet {
    data: Vec<f32>,
    count: usize,
    dim: usize,
    ids: Vec<u64>,
    labels: Vec<u32>,
    pred_labels: Vec<u32>,
    confidences: Vec<f64>,
}

impl ReprSet {
    /// Builds a set from parts, checking every invariant: equal lengths,
    /// `count >= 1`, `dim >= 1`, finite vectors, confidences in `[0,1]`,
    /// unique ids.
    pub fn new(
        data: Vec<f32>,
        dim: usize,
        ids: Vec<u64>,
        labels: Vec<u32>,
        pred_labels: Vec<u32>,
        confidences: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("dim must be >= 1".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Consistency(format!(
                "vector buffer length {} is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        let count = data.len() / dim;
        if count == 0 {
            return Err(Error::Data("set must contain at least one point".into()));
        }
        for (name, len) in [
            ("ids", ids.len()),
            ("labels", labels.len()),
            ("pred_labels", pred_labels.len()),
            ("confidences", confidences.len()),
        ] {
            if len != count {
                return Err(Error::Consistency(format!(
                    "{name} has {len} entries but the vector file has {count} rows"
                )));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "vector row {} contains a non-finite value",
                pos / dim
            )));
        }
        if let Some((i, c)) = confidences
            .iter()
            .enumerate()
            .find(|(_, c)| !(0.0..=1.0).contains(*c) || !c.is_finite())
        {
            return Err(Error::Data(format!(
                "confidence {c} at row {i} is outside [0,1]"
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(count);
        for (i, id) in ids.iter().enumerate() {
            if !seen.insert(*id) {
                return Err(Error::Data(format!("duplicate point id {id} at row {i}")));
            }
        }
        Ok(ReprSet { data, count, dim, ids, labels, pred_labels, confidences })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Vector of row `i`.
    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pred_labels(&self) -> &[u32] {
        &self.pred_labels
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    /// Loads and validates a set from a vector file and its metadata CSV.
    pub fn load(vectors_path: &Path, meta_path: &Path) -> Result<Self> {
        let (data, dim) = read_vector_file(vectors_path)?;
        let meta = read_metadata(meta_path)?;
        let count = if dim > 0 { data.len() / dim } else { 0 };
        if meta.ids.len() != count {
            return Err(Error::Consistency(format!(
                "{} has {} rows but {} has {} metadata rows",
                vectors_path.display(),
                count,
                meta_path.display(),
                meta.ids.len()
            )));
        }
        ReprSet::new(data, dim, meta.ids, meta.labels, meta.pred_labels, meta.confidences)
    }

    /// Writes the vector file and metadata CSV for this set.
    pub fn write(&self, vectors_path: &Path, meta_path: &Path) -> Result<()> {
        write_vector_file(vectors_path, &self.data, self.dim)?;
        let file = File::create(meta_path).map_err(|e| Error::io(meta_path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "id,label,pred_label,confidence").map_err(|e| Error::io(meta_path, e))?;
        for i in 0..self.count {
            writeln!(
                w,
                "{},{},{},{}",
                self.ids[i], self.labels[i], self.pred_labels[i], self.confidences[i]
            )
            .map_err(|e| Error::io(meta_path, e))?;
        }
        w.flush().map_err(|e| Error::io(meta_path, e))
    }
}

/// Binary correctness flags: `flag[i] = 1` iff the upstream prediction
/// matches the ground-truth label. These are the training targets for the
/// uncertainty model and the misclassification-detection task labels.
pub fn correctness_labels(set: &ReprSet) -> Vec<u8> {
    set.labels()
        .iter()
        .zip(set.pred_labels())
        .map(|(y, p)| u8::from(y == p))
        .collect()
}

struct Metadata {
    ids: Vec<u64>,
    labels: Vec<u32>,
    pred_labels: Vec<u32>,
    confidences: Vec<f64>,
}

fn read_metadata(path: &Path) -> Result<Metadata> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    {
        let headers = rdr.headers().map_err(|e| Error::Format(format!(
            "{}: cannot read CSV header: {e}",
            path.display()
        )))?;
        let expected = ["id", "label", "pred_label", "confidence"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::Format(format!(
                "{}: expected header id,label,pred_label,confidence, got {:?}",
                path.display(),
                got.join(",")
            )));
        }
    }
    let mut meta = Metadata {
        ids: Vec::new(),
        labels: Vec::new(),
        pred_labels: Vec::new(),
        confidences: Vec::new(),
    };
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| {
            Error::Format(format!("{}: CSV row {}: {e}", path.display(), row + 2))
        })?;
        if record.len() != 4 {
            return Err(Error::Format(format!(
                "{}: CSV row {} has {} fields, expected 4",
                path.display(),
                row + 2,
                record.len()
            )));
        }
        let field = |idx: usize, name: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| {
                Error::Format(format!("{}: row {} missing {name}", path.display(), row + 2))
            })
        };
        let parse_err = |name: &str, v: &str| {
            Error::Format(format!(
                "{}: row {}: cannot parse {name} from {v:?}",
                path.display(),
                row + 2
            ))
        };
        let id: u64 = field(0, "id")?.parse().map_err(|_| parse_err("id", &record[0]))?;
        let label: u32 =
            field(1, "label")?.parse().map_err(|_| parse_err("label", &record[1]))?;
        let pred: u32 = field(2, "pred_label")?
            .parse()
            .map_err(|_| parse_err("pred_label", &record[2]))?;
        let conf: f64 = field(3, "confidence")?
            .parse()
            .map_err(|_| parse_err("confidence", &record[3]))?;
        meta.ids.push(id);
        meta.labels.push(label);
        meta.pred_labels.push(pred);
        meta.confidences.push(conf);
    }
    Ok(meta)
}

/// Reads a raw vector file, returning the flat row-major buffer and dim.
///
/// This does not validate finiteness; [`ReprSet::load`] layers that on
/// top. It is also used for logits sidecar files, which share the format.
pub fn read_vector_file(path: &Path) -> Result<(Vec<f32>, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != VECTOR_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:02X?}, expected \"NUCR\"",
            path.display(),
            magic
        )));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf).map_err(|e| Error::io(path, e))?;
    let version = u16::from_le_bytes(u16buf);
    if version != VECTOR_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}, expected {VECTOR_VERSION}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    if dim == 0 || count == 0 {
        return Err(Error::Format(format!(
            "{}: dim and count must be >= 1 (dim={dim}, count={count})",
            path.display()
        )));
    }
    let n_values = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Format(format!("{}: count*dim overflows", path.display())))?;
    let mut bytes = vec![0u8; n_values * 4];
    r.read_exact(&mut bytes).map_err(|e| {
        Error::Format(format!(
            "{}: truncated body, expected {} f32 values: {e}",
            path.display(),
            n_values
        ))
    })?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Format(format!(
                "{}: trailing bytes after {} values",
                path.display(),
                n_values
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((data, dim))
}

/// Writes a raw vector file. Shared by representation sets and logits
/// sidecars.
pub fn write_vector_file(path: &Path, data: &[f32], dim: usize) -> Result<()> {
    assert!(dim > 0 && data.len() % dim == 0, "malformed vector buffer");
    let count = (data.len() / dim) as u64;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    emit(&VECTOR_MAGIC)?;
    emit(&VECTOR_VERSION.to_le_bytes())?;
    emit(&(dim as u32).to_le_bytes())?;
    emit(&count.to_le_bytes())?;
    for v in data {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn sample_set() -> ReprSet {
        ReprSet::new(
            vec![0.0, 0.0, 1.0, 0.5, -2.0, 3.25],
            2,
            vec![10, 11, 12],
            vec![0, 1, 1],
            vec![0, 1, 0],
            vec![0.9, 0.8, 0.55],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_small_set() {
        let dir = tempdir().unwrap();
        let vp = dir.path().join("a.vec");
        let mp = dir.path().join("a.meta.csv");
        let set = sample_set();
        set.write(&vp, &mp).unwrap();
        let loaded = ReprSet::load(&vp, &mp).unwrap();
        assert_eq!(loaded.count(), 3);
        assert_eq!(loaded.dim(), 2);
        assert_eq!(loaded.vectors_flat(), set.vectors_flat());
        assert_eq!(loaded.ids(), set.ids());
        assert_eq!(loaded.labels(), set.labels());
        assert_eq!(loaded.pred_labels(), set.pred_labels());
        assert_eq!(loaded.confidences(), set.confidences());
    }

    #[test]
    fn length_mismatch_is_consistency_error() {
        let dir = tempdir().unwrap();
        let vp = dir.path().join("b.vec");
        let mp = dir.path().join("b.meta.csv");
        sample_set().write(&vp, &mp).unwrap();
        // Rewrite the metadata with only two rows.
        std::fs::write(&mp, "id,label,pred_label,confidence\n10,0,0,0.9\n11,1,1,0.8\n").unwrap();
        match ReprSet::load(&vp, &mp) {
            Err(Error::Consistency(_)) => {}
            other => panic!("expected consistency error, got {other:?}"),
        }
    }

    #[test]
    fn confidence_out_of_range_is_data_error() {
        let dir = tempdir().unwrap();
        let vp = dir.path().join("c.vec");
        let mp = dir.path().join("c.meta.csv");
        sample_set().write(&vp, &mp).unwrap();
        std::fs::write(
            &mp,
            "id,label,pred_label,confidence\n10,0,0,0.9\n11,1,1,1.2\n12,1,0,0.5\n",
        )
        .unwrap();
        match ReprSet::load(&vp, &mp) {
            Err(Error::Data(msg)) => assert!(msg.contains("1.2"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn nan_vector_is_data_error() {
        let err = ReprSet::new(
            vec![0.0, f32::NAN],
            2,
            vec![1],
            vec![0],
            vec![0],
            vec![0.5],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err:?}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = ReprSet::new(
            vec![0.0, 1.0, 2.0, 3.0],
            2,
            vec![7, 7],
            vec![0, 1],
            vec![0, 1],
            vec![0.5, 0.5],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err:?}");
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let vp = dir.path().join("d.vec");
        std::fs::write(&vp, b"XXXX\x01\x00\x02\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00")
            .unwrap();
        match read_vector_file(&vp) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_is_format_error() {
        let dir = tempdir().unwrap();
        let vp = dir.path().join("e.vec");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&VECTOR_MAGIC);
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&vp, bytes).unwrap();
        assert!(matches!(read_vector_file(&vp), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_body_is_format_error() {
        let dir = tempdir().unwrap();
        let vp = dir.path().join("f.vec");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&VECTOR_MAGIC);
        bytes.extend_from_slice(&VECTOR_VERSION.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // 1 of 4 values
        std::fs::write(&vp, bytes).unwrap();
        assert!(matches!(read_vector_file(&vp), Err(Error::Format(_))));
    }

    #[test]
    fn correctness_flags_match_definition() {
        let set = ReprSet::new(
            vec![0.0; 4],
            2,
            vec![0, 1],
            vec![3, 5],
            vec![3, 4],
            vec![0.5, 0.5],
        )
        .unwrap();
        assert_eq!(correctness_labels(&set), vec![1, 0]);
    }

    #[test]
    fn correctness_all_agree_and_all_disagree() {
        let agree = ReprSet::new(
            vec![0.0; 6],
            2,
            vec![0, 1, 2],
            vec![1, 2, 3],
            vec![1, 2, 3],
            vec![0.5; 3],
        )
        .unwrap();
        assert_eq!(correctness_labels(&agree), vec![1, 1, 1]);
        let disjoint = ReprSet::new(
            vec![0.0; 6],
            2,
            vec![0, 1, 2],
            vec![1, 2, 3],
            vec![4, 5, 6],
            vec![0.5; 3],
        )
        .unwrap();
        assert_eq!(correctness_labels(&disjoint), vec![0, 0, 0]);
    }

    proptest! {
        // Write-then-load reproduces vectors bit-exactly and metadata
        // field-exactly, for arbitrary finite contents.
        #[test]
        fn prop_round_trip(
            dim in 1usize..6,
            rows in prop::collection::vec(
                (any::<u64>(), 0u32..50, 0u32..50, 0.0f64..=1.0), 1..12,
            ),
            raw in prop::collection::vec(-1e30f32..1e30, 60),
        ) {
            let mut ids: Vec<u64> = rows.iter().map(|r| r.0).collect();
            ids.sort_unstable();
            ids.dedup();
            let n = ids.len();
            let data: Vec<f32> = raw.iter().copied().take(n * dim).collect();
            let labels: Vec<u32> = rows.iter().take(n).map(|r| r.1).collect();
            let preds: Vec<u32> = rows.iter().take(n).map(|r| r.2).collect();
            let confs: Vec<f64> = rows.iter().take(n).map(|r| r.3).collect();
            let set = ReprSet::new(data, dim, ids, labels, preds, confs).unwrap();

            let dir = tempdir().unwrap();
            let vp = dir.path().join("p.vec");
            let mp = dir.path().join("p.meta.csv");
            set.write(&vp, &mp).unwrap();
            let loaded = ReprSet::load(&vp, &mp).unwrap();
            prop_assert_eq!(
                loaded.vectors_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                set.vectors_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(loaded.ids(), set.ids());
            prop_assert_eq!(loaded.labels(), set.labels());
            prop_assert_eq!(loaded.pred_labels(), set.pred_labels());
            prop_assert_eq!(loaded.confidences(), set.confidences());
        }
    }
}
