// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary storage for per-language sentence-embedding matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     8  magic "TYPOEMB\0"
//!      8     2  version (u16, currently 1)
//!     10     1  dtype (0 = f32, 1 = f64)
//!     11     1  reserved, must be 0
//!     12     2  encoder depth (u16, number of encoder layers)
//!     14     2  layer index (u16, 0 = input embeddings)
//!     16     4  dim (u32)
//!     20     8  count (u64)
//!     28     -  language, encoder name, provenance: each u16 length + UTF-8
//!      -     -  payload: count * dim values, row-major IEEE-754
//! ```
//!
//! Values are held as `f64` in memory. An `f32` matrix only ever holds values
//! that are exactly representable in `f32`, so write/read round trips are
//! byte-identical for both dtypes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{LanguageId, ProbingTaskSpec};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 8] = *b"TYPOEMB\0";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_ENCODER_DEPTH: u16 = 24;
const FIXED_HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Rounds `v` to the nearest value this dtype can store.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub language: LanguageId,
    pub encoder: String,
    pub encoder_depth: u16,
    pub layer: u16,
    pub dim: usize,
    pub count: usize,
    pub dtype: Dtype,
    /// Empty for raw encoder output; `neutralised:<lang>` after centroid
    /// subtraction, free-form for derived blocks.
    pub provenance: String,
}

impl EmbeddingHeader {
    pub fn new(language: LanguageId, encoder: &str, layer: u16, dim: usize, count: usize, dtype: Dtype) -> Self {
        EmbeddingHeader {
            language,
            encoder: encoder.to_owned(),
            encoder_depth: 12,
            layer,
            dim,
            count,
            dtype,
            provenance: String::new(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), FormatError> {
        let bad = |m: String| Err(FormatError::InvalidHeader(m));
        if self.dim == 0 || self.dim > u32::MAX as usize {
            return bad(format!("dim {} out of range", self.dim));
        }
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if self.encoder_depth > MAX_ENCODER_DEPTH {
            return bad(format!("encoder depth {} exceeds {MAX_ENCODER_DEPTH}", self.encoder_depth));
        }
        if self.layer > self.encoder_depth {
            return bad(format!(
                "layer {} beyond encoder depth {}",
                self.layer, self.encoder_depth
            ));
        }
        for (name, s) in [("encoder", &self.encoder), ("provenance", &self.provenance)] {
            if s.len() > u16::MAX as usize {
                return bad(format!("{name} string too long"));
            }
        }
        Ok(())
    }

    pub fn payload_len(&self) -> Option<usize> {
        self.count.checked_mul(self.dim)?.checked_mul(self.dtype.size())
    }

    pub fn summary(&self) -> HeaderSummary {
        HeaderSummary {
            encoder: self.encoder.clone(),
            layer: self.layer,
            dim: self.dim,
            count: self.count,
            dtype: self.dtype,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype.code());
        out.push(0);
        out.extend_from_slice(&self.encoder_depth.to_le_bytes());
        out.extend_from_slice(&self.layer.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        for s in [self.language.as_str(), &self.encoder, &self.provenance] {
            out.extend_from_slice(&(s.len() as u16).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
}

/// The part of a header recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderSummary {
    pub encoder: String,
    pub layer: u16,
    pub dim: usize,
    pub count: usize,
    pub dtype: Dtype,
}

/// `count` sentence vectors of width `dim`, one row per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    header: EmbeddingHeader,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Wraps row-major `data`. Values are rounded to the header's dtype.
    /// Finiteness is not checked here; [`EmbeddingMatrix::check_finite`] and
    /// [`write_embeddings`] do that.
    pub fn new(header: EmbeddingHeader, mut data: Vec<f64>) -> Result<Self> {
        header.validate()?;
        let expected = header.count * header.dim;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        if header.dtype == Dtype::F32 {
            for v in &mut data {
                *v = Dtype::F32.quantize(*v);
            }
        }
        Ok(EmbeddingMatrix { header, data })
    }

    pub fn from_rows(header: EmbeddingHeader, rows: &[Vec<f64>]) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.len() != header.dim) {
            return Err(Error::DimensionMismatch {
                expected: header.dim,
                actual: bad.len(),
            });
        }
        let mut header = header;
        header.count = rows.len();
        Self::new(header, rows.concat())
    }

    pub fn header(&self) -> &EmbeddingHeader {
        &self.header
    }

    pub fn language(&self) -> &LanguageId {
        &self.header.language
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn count(&self) -> usize {
        self.header.count
    }

    pub fn dtype(&self) -> Dtype {
        self.header.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.header.dim..(i + 1) * self.header.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.header.dim)
    }

    pub fn set_provenance(&mut self, provenance: &str) {
        self.header.provenance = provenance.to_owned();
    }

    pub fn check_finite(&self) -> std::result::Result<(), FormatError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(FormatError::NonFinite {
                row: i / self.header.dim,
                col: i % self.header.dim,
            }),
            None => Ok(()),
        }
    }

    /// Exact on-disk representation.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.header.validate()?;
        self.check_finite()?;
        let payload = self.header.payload_len().ok_or_else(|| {
            Error::Validation("payload size overflows".into())
        })?;
        let mut out = Vec::with_capacity(FIXED_HEADER_LEN + 64 + payload);
        self.header.encode(&mut out);
        match self.header.dtype {
            Dtype::F32 => {
                for v in &self.data {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic {
                found: magic.to_vec(),
            });
        }
        let version = cur.u16()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let dtype_code = cur.take(1)?[0];
        let dtype = Dtype::from_code(dtype_code)
            .ok_or_else(|| FormatError::InvalidHeader(format!("unknown dtype code {dtype_code}")))?;
        if cur.take(1)?[0] != 0 {
            return Err(FormatError::InvalidHeader("reserved byte is not zero".into()));
        }
        let encoder_depth = cur.u16()?;
        let layer = cur.u16()?;
        let dim = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let count = usize::try_from(count)
            .map_err(|_| FormatError::InvalidHeader(format!("count {count} too large")))?;
        let language = cur.string()?;
        let language = LanguageId::new(&language)
            .map_err(|_| FormatError::InvalidHeader(format!("bad language code {language:?}")))?;
        let encoder = cur.string()?;
        let provenance = cur.string()?;
        let header = EmbeddingHeader {
            language,
            encoder,
            encoder_depth,
            layer,
            dim,
            count,
            dtype,
            provenance,
        };
        header.validate()?;

        let expected = header
            .payload_len()
            .ok_or_else(|| FormatError::InvalidHeader("payload size overflows".into()))?;
        let rest = &bytes[cur.pos..];
        if rest.len() < expected {
            return Err(FormatError::TruncatedPayload {
                expected,
                found: rest.len(),
            });
        }
        if rest.len() > expected {
            return Err(FormatError::TrailingBytes(rest.len() - expected));
        }
        let data: Vec<f64> = match dtype {
            Dtype::F32 => rest
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => rest
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let m = EmbeddingMatrix { header, data };
        m.check_finite()?;
        Ok(m)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(FormatError::TruncatedHeader {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            }),
        }
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, FormatError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| FormatError::InvalidHeader("string field is not UTF-8".into()))
    }
}

/// Writes `matrix` to `path`. Refuses matrices containing NaN or infinity.
pub fn write_embeddings(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let bytes = matrix.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes).map_err(|source| Error::Format {
        path: path.display().to_string(),
        source,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub language: LanguageId,
    /// Relative to the directory holding the manifest.
    pub path: PathBuf,
    pub sha256: String,
    pub header: HeaderSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment_tag: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(experiment_tag: &str, base_dir: &Path) -> Self {
        Manifest {
            experiment_tag: experiment_tag.to_owned(),
            entries: Vec::new(),
            base_dir: base_dir.to_owned(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            origin: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hashes `relative` (under `base_dir`) and appends an entry for it.
    pub fn add_file(&mut self, matrix_header: &EmbeddingHeader, relative: &Path) -> Result<()> {
        let sha256 = sha256_file(&self.base_dir.join(relative))?;
        self.entries.push(ManifestEntry {
            language: matrix_header.language.clone(),
            path: relative.to_owned(),
            sha256,
            header: matrix_header.summary(),
        });
        Ok(())
    }

    pub fn entry(&self, language: &LanguageId) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| &e.language == language)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryCheck {
    pub language: LanguageId,
    pub path: PathBuf,
    pub hash_ok: bool,
    pub header_ok: bool,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub entries: Vec<EntryCheck>,
    /// Disagreements between entries on encoder, layer, dim or dtype.
    pub inconsistencies: Vec<String>,
    pub duplicate_languages: Vec<LanguageId>,
    /// Task languages with no manifest entry (only when a task was given).
    pub missing_languages: Vec<LanguageId>,
}

impl ValidationReport {
    pub fn is_consistent(&self) -> bool {
        self.entries.iter().all(|e| e.problems.is_empty())
            && self.inconsistencies.is_empty()
            && self.duplicate_languages.is_empty()
            && self.missing_languages.is_empty()
    }

    pub fn findings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.entries {
            for p in &e.problems {
                out.push(format!("{} ({}): {p}", e.language, e.path.display()));
            }
        }
        out.extend(self.inconsistencies.iter().cloned());
        out.extend(self.duplicate_languages.iter().map(|l| format!("duplicate entry for {l}")));
        out.extend(self.missing_languages.iter().map(|l| format!("no entry for task language {l}")));
        out
    }
}

/// Checks hashes, file headers, cross-entry consistency and, optionally,
/// coverage of a task's languages. Failures are reported, never raised.
pub fn validate_manifest(manifest: &Manifest, task: Option<&ProbingTaskSpec>) -> ValidationReport {
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = manifest.resolve(entry);
        let mut check = EntryCheck {
            language: entry.language.clone(),
            path: entry.path.clone(),
            hash_ok: false,
            header_ok: false,
            problems: Vec::new(),
        };
        match sha256_file(&path) {
            Ok(h) if h.eq_ignore_ascii_case(&entry.sha256) => check.hash_ok = true,
            Ok(h) => check.problems.push(format!("hash mismatch: manifest {} file {h}", entry.sha256)),
            Err(e) => check.problems.push(format!("unreadable: {e}")),
        }
        if check.hash_ok {
            match read_embeddings(&path) {
                Ok(m) if m.header().summary() == entry.header && m.language() == &entry.language => {
                    check.header_ok = true
                }
                Ok(m) => check.problems.push(format!(
                    "file header {:?} ({}) disagrees with manifest {:?} ({})",
                    m.header().summary(),
                    m.language(),
                    entry.header,
                    entry.language
                )),
                Err(e) => check.problems.push(e.to_string()),
            }
        }
        entries.push(check);
    }

    let mut inconsistencies = Vec::new();
    if let Some(first) = manifest.entries.first() {
        for e in &manifest.entries[1..] {
            let (a, b) = (&first.header, &e.header);
            let mut diffs = Vec::new();
            if a.encoder != b.encoder {
                diffs.push(format!("encoder {:?} vs {:?}", a.encoder, b.encoder));
            }
            if a.layer != b.layer {
                diffs.push(format!("layer {} vs {}", a.layer, b.layer));
            }
            if a.dim != b.dim {
                diffs.push(format!("dim {} vs {}", a.dim, b.dim));
            }
            if a.dtype != b.dtype {
                diffs.push(format!("dtype {:?} vs {:?}", a.dtype, b.dtype));
            }
            if !diffs.is_empty() {
                inconsistencies.push(format!(
                    "{} differs from {}: {}",
                    e.language,
                    first.language,
                    diffs.join(", ")
                ));
            }
        }
    }

    let mut seen = BTreeSet::new();
    let mut duplicate_languages = Vec::new();
    for e in &manifest.entries {
        if !seen.insert(&e.language) && !duplicate_languages.contains(&e.language) {
            duplicate_languages.push(e.language.clone());
        }
    }

    let missing_languages = match task {
        Some(task) => {
            let langs: BTreeMap<_, _> = task.language_labels.iter().collect();
            langs
                .keys()
                .filter(|l| !seen.contains(**l))
                .map(|l| (*l).clone())
                .collect()
        }
        None => Vec::new(),
    };

    ValidationReport {
        entries,
        inconsistencies,
        duplicate_languages,
        missing_languages,
    }
}
