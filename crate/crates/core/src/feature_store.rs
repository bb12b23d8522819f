//! Gradient feature matrices and the GF1 on-disk format.
//!
//! GF1 layout (all integers little-endian):
//!
//! | bytes  | field                                         |
//! |--------|-----------------------------------------------|
//! | 0..4   | magic `GF1\0`                                 |
//! | 4..8   | version, u32 (= 1)                            |
//! | 8..12  | n (rows), u32                                 |
//! | 12..16 | d (columns), u32                              |
//! | 16     | kind: 0 = train_momentum, 1 = validation_sgd  |
//! | 17..32 | reserved, zero                                |
//! | 32..   | n·d f32 LE, row-major                         |
//!
//! Each matrix has a JSON sidecar `<stem>.manifest.json` holding an array of
//! `{"index": i, "id": "..."}` entries, one per row in row order.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::dot_f32;

pub const MAGIC: [u8; 4] = *b"GF1\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Rows whose norm is already within this of 1 are stored untouched, which
/// makes normalization bit-idempotent and `load ∘ save` the identity.
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    TrainMomentum,
    ValidationSgd,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::TrainMomentum => 0,
            FeatureKind::ValidationSgd => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::TrainMomentum),
            1 => Some(FeatureKind::ValidationSgd),
            _ => None,
        }
    }
}

/// What to do with zero-norm rows at normalization time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    #[default]
    Reject,
    Drop,
}

/// Row position within a matrix plus the opaque id from its manifest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleId {
    pub index: usize,
    #[serde(rename = "id")]
    pub external_id: String,
}

/// An n×d matrix of L2-normalized gradient features.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientFeatureMatrix {
    kind: FeatureKind,
    d: usize,
    rows: Vec<f32>,
    norms: Vec<f32>,
}

impl GradientFeatureMatrix {
    /// Validates and normalizes a raw row-major buffer. Returns the matrix and
    /// the original indices of any rows dropped under [`DegeneratePolicy::Drop`].
    pub fn from_raw(
        kind: FeatureKind,
        d: usize,
        mut data: Vec<f32>,
        policy: DegeneratePolicy,
    ) -> Result<(Self, Vec<usize>)> {
        if d == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if data.len() % d != 0 {
            return Err(Error::Data(format!(
                "buffer of {} values is not a multiple of d={d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / d,
                col: pos % d,
            });
        }
        let n = data.len() / d;
        let mut norms = vec![0f32; n];
        crate::par::fill_indexed(&mut norms, |i| {
            let row = &data[i * d..(i + 1) * d];
            dot_f32(row, row).sqrt() as f32
        });

        let degenerate: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
        if !degenerate.is_empty() {
            match policy {
                DegeneratePolicy::Reject => return Err(Error::DegenerateRows { rows: degenerate }),
                DegeneratePolicy::Drop => {
                    let skip: HashSet<usize> = degenerate.iter().copied().collect();
                    let mut kept = Vec::with_capacity((n - skip.len()) * d);
                    let mut kept_norms = Vec::with_capacity(n - skip.len());
                    for i in (0..n).filter(|i| !skip.contains(i)) {
                        kept.extend_from_slice(&data[i * d..(i + 1) * d]);
                        kept_norms.push(norms[i]);
                    }
                    data = kept;
                    norms = kept_norms;
                }
            }
        }

        crate::par::for_each_row_mut(&mut data, d, |_, row| normalize_row(row));
        Ok((
            GradientFeatureMatrix {
                kind,
                d,
                rows: data,
                norms,
            },
            degenerate,
        ))
    }

    /// Builds a matrix from row vectors, rejecting degenerate rows.
    pub fn from_rows<R: AsRef<[f32]>>(kind: FeatureKind, d: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Data(format!("row {i} has length {} (expected {d})", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_raw(kind, d, data, DegeneratePolicy::Reject).map(|(m, _)| m)
    }

    pub fn empty(kind: FeatureKind, d: usize) -> Self {
        GradientFeatureMatrix {
            kind,
            d,
            rows: Vec::new(),
            norms: Vec::new(),
        }
    }

    /// Concatenates matrices with identical `d` (for multi-task validation sets).
    pub fn concat(parts: &[GradientFeatureMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        let mut rows = Vec::new();
        let mut norms = Vec::new();
        for p in parts {
            if p.d != first.d {
                return Err(Error::Config(format!(
                    "dimension mismatch: {} vs {}",
                    first.d, p.d
                )));
            }
            if p.kind != first.kind {
                return Err(Error::Config("cannot mix feature kinds".into()));
            }
            rows.extend_from_slice(&p.rows);
            norms.extend_from_slice(&p.norms);
        }
        Ok(GradientFeatureMatrix {
            kind: first.kind,
            d: first.d,
            rows,
            norms,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.norms.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.rows.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.rows
    }

    /// L2 norms of the rows before normalization.
    pub fn norms(&self) -> &[f32] {
        &self.norms
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i < self.n() {
            Ok(())
        } else {
            Err(Error::Index {
                index: i,
                len: self.n(),
            })
        }
    }

    /// Renormalizes every row. On a matrix that already satisfies the unit-row
    /// invariant this changes nothing.
    pub fn normalize(&mut self) {
        crate::par::for_each_row_mut(&mut self.rows, self.d, |_, row| normalize_row(row));
    }

    pub fn with_kind(mut self, kind: FeatureKind) -> Self {
        self.kind = kind;
        self
    }

    /// Replaces the rows with already-normalized data, keeping the norms.
    pub(crate) fn replace_rows(&self, d: usize, rows: Vec<f32>) -> Self {
        debug_assert_eq!(rows.len(), self.n() * d);
        GradientFeatureMatrix {
            kind: self.kind,
            d,
            rows,
            norms: self.norms.clone(),
        }
    }
}

fn normalize_row(row: &mut [f32]) {
    let norm = dot_f32(row, row).sqrt();
    if norm == 0.0 || (norm - 1.0).abs() <= UNIT_TOLERANCE {
        return;
    }
    for x in row.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
}

/// Serializes `matrix` as GF1 bytes.
pub fn encode(matrix: &GradientFeatureMatrix) -> Result<Vec<u8>> {
    let n = u32::try_from(matrix.n()).map_err(|_| Error::Config("too many rows for GF1".into()))?;
    let d = u32::try_from(matrix.d).map_err(|_| Error::Config("dimension too large for GF1".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + matrix.rows.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.push(matrix.kind.code());
    buf.resize(HEADER_LEN, 0);
    for x in &matrix.rows {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(buf)
}

/// Parses GF1 bytes. `path` is used only for error messages.
pub fn decode(bytes: &[u8], path: &Path, policy: DegeneratePolicy) -> Result<(GradientFeatureMatrix, Vec<usize>)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(bad("bad magic (expected \"GF1\\0\")".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = word(8) as usize;
    let d = word(12) as usize;
    let kind = FeatureKind::from_code(bytes[16]).ok_or_else(|| bad(format!("unknown kind byte {}", bytes[16])))?;
    if bytes[17..HEADER_LEN].iter().any(|&b| b != 0) {
        return Err(bad("reserved header bytes are not zero".into()));
    }
    if d == 0 {
        return Err(bad("d must be positive".into()));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "payload size mismatch: header says {n}x{d} ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    GradientFeatureMatrix::from_raw(kind, d, data, policy)
}

/// Loads a GF1 file, rejecting zero-norm rows.
pub fn load_features(path: impl AsRef<Path>) -> Result<GradientFeatureMatrix> {
    load_features_with(path, DegeneratePolicy::Reject).map(|(m, _)| m)
}

pub fn load_features_with(
    path: impl AsRef<Path>,
    policy: DegeneratePolicy,
) -> Result<(GradientFeatureMatrix, Vec<usize>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, policy).map_err(|e| match e {
        // Attach the offending file to data errors raised during validation.
        Error::NonFinite { row, col } => Error::Data(format!(
            "{}: non-finite value at row {row}, column {col}",
            path.display()
        )),
        other => other,
    })
}

pub fn save_features(matrix: &GradientFeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(matrix)?)
}

/// Writes via a temporary file in the destination directory and renames it
/// into place, so a final path never holds a truncated artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// `<dir>/<stem>.manifest.json` for a feature file `<dir>/<stem>.gf1`.
pub fn manifest_path(features: &Path) -> PathBuf {
    let stem = features
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    features.with_file_name(format!("{stem}.manifest.json"))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleId>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<SampleId> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    validate_manifest(&entries)?;
    Ok(entries)
}

pub fn write_manifest(entries: &[SampleId], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    validate_manifest(entries)?;
    let mut text = serde_json::to_string_pretty(entries).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn validate_manifest(entries: &[SampleId]) -> Result<()> {
    let mut ids = HashSet::with_capacity(entries.len());
    for (pos, e) in entries.iter().enumerate() {
        if e.index != pos {
            return Err(Error::Data(format!(
                "manifest entry {pos} has index {} (entries must be in row order)",
                e.index
            )));
        }
        if !ids.insert(e.external_id.as_str()) {
            return Err(Error::Data(format!("duplicate manifest id {:?}", e.external_id)));
        }
    }
    Ok(())
}

/// Ids `"0"`, `"1"`, ... for matrices without a sidecar.
pub fn default_manifest(n: usize) -> Vec<SampleId> {
    (0..n)
        .map(|i| SampleId {
            index: i,
            external_id: i.to_string(),
        })
        .collect()
}

/// A matrix together with its row manifest.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub matrix: GradientFeatureMatrix,
    pub manifest: Vec<SampleId>,
}

impl FeatureSet {
    pub fn new(matrix: GradientFeatureMatrix, manifest: Vec<SampleId>) -> Result<Self> {
        if manifest.len() != matrix.n() {
            return Err(Error::Data(format!(
                "manifest has {} entries but matrix has {} rows",
                manifest.len(),
                matrix.n()
            )));
        }
        validate_manifest(&manifest)?;
        Ok(FeatureSet { matrix, manifest })
    }

    /// Loads a GF1 file and its sidecar (synthesized when absent). Dropped
    /// degenerate rows are removed from the manifest too and the remaining
    /// entries are renumbered so entry i always describes row i.
    pub fn load(path: impl AsRef<Path>, policy: DegeneratePolicy) -> Result<Self> {
        let path = path.as_ref();
        let (matrix, dropped) = load_features_with(path, policy)?;
        let sidecar = manifest_path(path);
        let original_n = matrix.n() + dropped.len();
        let mut manifest = if sidecar.exists() {
            read_manifest(&sidecar)?
        } else {
            log::warn!("{}: no manifest sidecar, using row numbers as ids", path.display());
            default_manifest(original_n)
        };
        if manifest.len() != original_n {
            return Err(Error::Data(format!(
                "{}: manifest has {} entries but file has {original_n} rows",
                sidecar.display(),
                manifest.len()
            )));
        }
        if !dropped.is_empty() {
            log::warn!("{}: dropped {} zero-norm rows {:?}", path.display(), dropped.len(), dropped);
            let skip: HashSet<usize> = dropped.into_iter().collect();
            manifest.retain(|e| !skip.contains(&e.index));
            for (i, e) in manifest.iter_mut().enumerate() {
                e.index = i;
            }
        }
        FeatureSet::new(matrix, manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_features(&self.matrix, path)?;
        write_manifest(&self.manifest, manifest_path(path))
    }
}
