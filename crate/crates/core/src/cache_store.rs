//! On-disk cache of per-sample backbone taps `b_0 .. b_L`.
//!
//! A cache directory holds two files:
//!
//! - `header.json`: schema version, backbone fingerprint, layout and totals.
//!   Rewritten atomically (temp file + rename) after every insert.
//! - `records.bin`: fixed-size records, little-endian:
//!
//! ```text
//! offset  size  field
//! 0       32    sample id, SHA-256 of the token ids as u32 LE
//! 32      4     seq_len (u32)
//! 36      4     tensor count (u32)
//! 40      8     checksum, first 8 bytes of SHA-256(payload) as u64 LE
//! 48      P     payload: tensors in order, each seq_len x hidden, row-major,
//!               f64 or f32 per the header's scalar width
//! ```
//!
//! A cache built against one backbone is never served to another: opening
//! with a different fingerprint fails before any record is read.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::Tensor;

pub const CACHE_SCHEMA_VERSION: u32 = 1;
pub const RECORD_HEADER_BYTES: u64 = 48;
pub const HEADER_FILE: &str = "header.json";
pub const RECORDS_FILE: &str = "records.bin";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache miss for sample {0}")]
    Miss(SampleId),
    #[error("cache corrupted: {0}")]
    Corrupt(String),
    #[error("cache fingerprint mismatch: cache was built for backbone {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("cache entry does not fit the layout: {0}")]
    Shape(String),
    #[error("unsupported cache: {0}")]
    Schema(String),
    #[error("cache i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse cache header: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId(pub [u8; 32]);

impl SampleId {
    pub fn of_tokens(tokens: &[u32]) -> Self {
        let mut h = Sha256::new();
        for t in tokens {
            h.update(t.to_le_bytes());
        }
        SampleId(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SampleId({})", &self.to_hex()[..12])
    }
}

/// Shape of every record in a cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLayout {
    pub fingerprint: String,
    pub tensors_per_sample: usize,
    pub seq_len: usize,
    pub hidden: usize,
    /// 8 stores `f64` bit-exactly; 4 narrows to `f32`.
    pub scalar_bytes: usize,
}

impl CacheLayout {
    pub fn payload_bytes(&self) -> u64 {
        (self.tensors_per_sample * self.seq_len * self.hidden * self.scalar_bytes) as u64
    }

    pub fn record_bytes(&self) -> u64 {
        RECORD_HEADER_BYTES + self.payload_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub schema_version: u32,
    #[serde(flatten)]
    pub layout: CacheLayout,
    pub sample_count: u64,
    pub payload_bytes: u64,
    pub record_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub sample_id: SampleId,
    pub seq_len: usize,
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub records: u64,
    pub valid: u64,
    /// Hex ids (or record indices) that failed verification.
    pub failures: Vec<String>,
}

#[derive(Debug)]
pub struct CacheStore {
    dir: PathBuf,
    header: CacheHeader,
    index: HashMap<SampleId, u64>,
}

fn checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

impl CacheStore {
    /// Opens the cache in `dir` if it exists (it must match `layout`),
    /// otherwise starts an empty one.
    pub fn create(dir: impl AsRef<Path>, layout: CacheLayout) -> Result<Self, CacheError> {
        let dir = dir.as_ref().to_path_buf();
        if !matches!(layout.scalar_bytes, 4 | 8) {
            return Err(CacheError::Schema(format!("scalar width {} (expected 4 or 8)", layout.scalar_bytes)));
        }
        if dir.join(HEADER_FILE).exists() {
            let store = Self::open(&dir, &layout.fingerprint)?;
            if store.header.layout != layout {
                return Err(CacheError::Shape(format!(
                    "existing cache layout {:?} differs from requested {:?}",
                    store.header.layout, layout
                )));
            }
            return Ok(store);
        }
        let header = CacheHeader {
            schema_version: CACHE_SCHEMA_VERSION,
            record_bytes: layout.record_bytes(),
            layout,
            sample_count: 0,
            payload_bytes: 0,
        };
        let store = CacheStore { dir, header, index: HashMap::new() };
        store.write_header()?;
        Ok(store)
    }

    /// Opens an existing cache, refusing it unless it was built for the
    /// backbone with `fingerprint`.
    pub fn open(dir: impl AsRef<Path>, fingerprint: &str) -> Result<Self, CacheError> {
        let store = Self::open_unchecked(dir)?;
        if store.header.layout.fingerprint != fingerprint {
            return Err(CacheError::FingerprintMismatch {
                expected: fingerprint.to_string(),
                found: store.header.layout.fingerprint.clone(),
            });
        }
        Ok(store)
    }

    /// Opens without a fingerprint check, for inspection only.
    pub fn open_unchecked(dir: impl AsRef<Path>) -> Result<Self, CacheError> {
        let dir = dir.as_ref().to_path_buf();
        let header: CacheHeader = serde_json::from_slice(&fs::read(dir.join(HEADER_FILE))?)?;
        if header.schema_version != CACHE_SCHEMA_VERSION {
            return Err(CacheError::Schema(format!("schema version {}", header.schema_version)));
        }
        if header.record_bytes != header.layout.record_bytes() {
            return Err(CacheError::Corrupt("record size in header does not match layout".into()));
        }
        let mut index = HashMap::new();
        let path = dir.join(RECORDS_FILE);
        let len = if path.exists() { fs::metadata(&path)?.len() } else { 0 };
        if len != header.sample_count * header.record_bytes {
            return Err(CacheError::Corrupt(format!(
                "records file is {len} bytes, header promises {} records of {}",
                header.sample_count, header.record_bytes
            )));
        }
        if header.sample_count > 0 {
            let mut f = File::open(&path)?;
            for i in 0..header.sample_count {
                let mut id = [0u8; 32];
                f.seek(SeekFrom::Start(i * header.record_bytes))?;
                f.read_exact(&mut id)?;
                index.insert(SampleId(id), i);
            }
        }
        Ok(CacheStore { dir, header, index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn layout(&self) -> &CacheLayout {
        &self.header.layout
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, id: &SampleId) -> bool {
        self.index.contains_key(id)
    }

    /// Total bytes on disk (header plus records).
    pub fn file_bytes(&self) -> Result<u64, CacheError> {
        let mut total = 0;
        for name in [HEADER_FILE, RECORDS_FILE] {
            let p = self.dir.join(name);
            if p.exists() {
                total += fs::metadata(p)?.len();
            }
        }
        Ok(total)
    }

    fn write_header(&self) -> Result<(), CacheError> {
        fs::create_dir_all(&self.dir)?;
        let text = serde_json::to_string_pretty(&self.header)?;
        write_atomic(&self.dir.join(HEADER_FILE), text.as_bytes())?;
        Ok(())
    }

    fn encode(&self, entry: &CacheEntry) -> Result<Vec<u8>, CacheError> {
        let l = &self.header.layout;
        if entry.seq_len != l.seq_len || entry.tensors.len() != l.tensors_per_sample {
            return Err(CacheError::Shape(format!(
                "entry has {} tensors at seq_len {}, cache expects {} at {}",
                entry.tensors.len(),
                entry.seq_len,
                l.tensors_per_sample,
                l.seq_len
            )));
        }
        if let Some(t) = entry.tensors.iter().find(|t| t.shape() != [l.seq_len, l.hidden]) {
            return Err(CacheError::Shape(format!(
                "tensor shape {:?}, expected [{}, {}]",
                t.shape(),
                l.seq_len,
                l.hidden
            )));
        }
        let mut payload = Vec::with_capacity(l.payload_bytes() as usize);
        for t in &entry.tensors {
            for &v in t.data() {
                if l.scalar_bytes == 8 {
                    payload.extend_from_slice(&v.to_le_bytes());
                } else {
                    payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        let mut rec = Vec::with_capacity(l.record_bytes() as usize);
        rec.extend_from_slice(&entry.sample_id.0);
        rec.extend_from_slice(&(entry.seq_len as u32).to_le_bytes());
        rec.extend_from_slice(&(entry.tensors.len() as u32).to_le_bytes());
        rec.extend_from_slice(&checksum(&payload).to_le_bytes());
        rec.extend_from_slice(&payload);
        Ok(rec)
    }

    fn decode(&self, id: &SampleId, rec: &[u8]) -> Result<CacheEntry, CacheError> {
        let l = &self.header.layout;
        let corrupt = |why: &str| CacheError::Corrupt(format!("sample {id}: {why}"));
        if rec[..32] != id.0 {
            return Err(corrupt("sample id does not match index"));
        }
        let seq_len = u32::from_le_bytes(rec[32..36].try_into().expect("4 bytes")) as usize;
        let count = u32::from_le_bytes(rec[36..40].try_into().expect("4 bytes")) as usize;
        if seq_len != l.seq_len || count != l.tensors_per_sample {
            return Err(corrupt("record dimensions differ from header"));
        }
        let sum = u64::from_le_bytes(rec[40..48].try_into().expect("8 bytes"));
        let payload = &rec[RECORD_HEADER_BYTES as usize..];
        if checksum(payload) != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let per = l.seq_len * l.hidden;
        let values: Vec<f64> = if l.scalar_bytes == 8 {
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        } else {
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
        };
        let tensors = values
            .chunks_exact(per)
            .map(|c| Tensor::new(vec![l.seq_len, l.hidden], c.to_vec()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| corrupt(&e.to_string()))?;
        Ok(CacheEntry { sample_id: *id, seq_len, tensors })
    }

    /// Appends an entry. Returns `false` if the sample was already cached.
    pub fn put(&mut self, entry: &CacheEntry) -> Result<bool, CacheError> {
        if self.contains(&entry.sample_id) {
            return Ok(false);
        }
        let rec = self.encode(entry)?;
        fs::create_dir_all(&self.dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(RECORDS_FILE))?;
        f.write_all(&rec)?;
        f.sync_data()?;
        self.index.insert(entry.sample_id, self.header.sample_count);
        self.header.sample_count += 1;
        self.header.payload_bytes += self.header.layout.payload_bytes();
        self.write_header()?;
        Ok(true)
    }

    fn read_record(&self, slot: u64) -> Result<Vec<u8>, CacheError> {
        let mut f = File::open(self.dir.join(RECORDS_FILE))?;
        f.seek(SeekFrom::Start(slot * self.header.record_bytes))?;
        let mut rec = vec![0u8; self.header.record_bytes as usize];
        f.read_exact(&mut rec)?;
        Ok(rec)
    }

    pub fn get(&self, id: &SampleId) -> Result<CacheEntry, CacheError> {
        let slot = *self.index.get(id).ok_or(CacheError::Miss(*id))?;
        let rec = self.read_record(slot)?;
        self.decode(id, &rec)
    }

    /// Re-reads every record and checks ids and checksums.
    pub fn verify(&self) -> Result<IntegrityReport, CacheError> {
        let mut ids: Vec<(&SampleId, &u64)> = self.index.iter().collect();
        ids.sort_by_key(|(_, &slot)| slot);
        let mut failures = Vec::new();
        for (id, &slot) in ids {
            let rec = self.read_record(slot)?;
            if self.decode(id, &rec).is_err() {
                failures.push(id.to_hex());
            }
        }
        let records = self.header.sample_count;
        Ok(IntegrityReport { records, valid: records - failures.len() as u64, failures })
    }

    /// Removes the backing files. Idempotent; the store stays usable and
    /// starts empty.
    pub fn clear(&mut self) -> Result<(), CacheError> {
        clear_dir(&self.dir)?;
        self.index.clear();
        self.header.sample_count = 0;
        self.header.payload_bytes = 0;
        Ok(())
    }
}

/// Deletes a cache directory's files, then the directory if it is empty.
/// Missing files are not an error.
pub fn clear_dir(dir: impl AsRef<Path>) -> Result<(), CacheError> {
    let dir = dir.as_ref();
    for name in [HEADER_FILE, RECORDS_FILE] {
        match fs::remove_file(dir.join(name)) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
    }
    if dir.exists() && fs::read_dir(dir)?.next().is_none() {
        fs::remove_dir(dir)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(width: usize) -> CacheLayout {
        CacheLayout { fingerprint: "abc".into(), tensors_per_sample: 3, seq_len: 4, hidden: 5, scalar_bytes: width }
    }

    fn entry(tokens: &[u32], salt: f64) -> CacheEntry {
        let tensors = (0..3)
            .map(|i| Tensor::from_fn(4, 5, |r, c| (salt + i as f64 * 0.1 + r as f64 * 1.7 - c as f64).sin() / 3.0))
            .collect();
        CacheEntry { sample_id: SampleId::of_tokens(tokens), seq_len: 4, tensors }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CacheStore::create(dir.path().join("c"), layout(8)).unwrap();
        let e = entry(&[1, 2, 3], 0.5);
        assert!(s.put(&e).unwrap());
        assert!(!s.put(&e).unwrap());
        assert_eq!(s.get(&e.sample_id).unwrap(), e);
        let reopened = CacheStore::open(dir.path().join("c"), "abc").unwrap();
        assert_eq!(reopened.get(&e.sample_id).unwrap(), e);
        assert_eq!(reopened.header().sample_count, 1);
    }

    #[test]
    fn narrow_width_rounds_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CacheStore::create(dir.path(), layout(4)).unwrap();
        let e = entry(&[9], 0.1);
        s.put(&e).unwrap();
        let got = s.get(&e.sample_id).unwrap();
        for (a, b) in got.tensors.iter().zip(&e.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn unknown_id_misses() {
        let dir = tempfile::tempdir().unwrap();
        let s = CacheStore::create(dir.path(), layout(8)).unwrap();
        assert!(matches!(s.get(&SampleId::of_tokens(&[4])), Err(CacheError::Miss(_))));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CacheStore::create(dir.path(), layout(8)).unwrap();
        let e = entry(&[1], 0.0);
        s.put(&e).unwrap();
        s.put(&entry(&[2], 1.0)).unwrap();
        let path = dir.path().join(RECORDS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(s.get(&e.sample_id), Err(CacheError::Corrupt(_))));
        let report = s.verify().unwrap();
        assert_eq!((report.records, report.valid), (2, 1));
        assert_eq!(report.failures, vec![e.sample_id.to_hex()]);
    }

    #[test]
    fn other_backbone_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CacheStore::create(dir.path(), layout(8)).unwrap();
        s.put(&entry(&[1], 0.0)).unwrap();
        let err = CacheStore::open(dir.path(), "xyz").unwrap_err();
        assert!(matches!(err, CacheError::FingerprintMismatch { .. }), "{err}");
        let mut other = layout(8);
        other.fingerprint = "xyz".into();
        assert!(CacheStore::create(dir.path(), other).is_err());
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CacheStore::create(dir.path(), layout(8)).unwrap();
        let mut e = entry(&[1], 0.0);
        e.tensors.pop();
        assert!(matches!(s.put(&e), Err(CacheError::Shape(_))));
        let mut e = entry(&[1], 0.0);
        e.tensors[1] = Tensor::zeros(4, 6);
        assert!(matches!(s.put(&e), Err(CacheError::Shape(_))));
    }

    #[test]
    fn clear_is_idempotent_and_repopulation_matches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache");
        let mut s = CacheStore::create(&path, layout(8)).unwrap();
        for i in 0..5 {
            s.put(&entry(&[i], i as f64)).unwrap();
        }
        let first = s.file_bytes().unwrap();
        s.clear().unwrap();
        assert!(!path.exists());
        assert!(matches!(s.get(&SampleId::of_tokens(&[0])), Err(CacheError::Miss(_))));
        s.clear().unwrap();
        clear_dir(&path).unwrap();
        for i in 0..5 {
            s.put(&entry(&[i], i as f64)).unwrap();
        }
        assert_eq!(s.file_bytes().unwrap(), first);
    }

    #[test]
    fn size_law_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = CacheStore::create(dir.path(), layout(8)).unwrap();
        for i in 0..3 {
            s.put(&entry(&[i, i], 0.0)).unwrap();
        }
        assert_eq!(s.header().payload_bytes, 3 * 3 * 4 * 5 * 8);
        let path = dir.path().join(RECORDS_FILE);
        assert_eq!(fs::metadata(&path).unwrap().len(), 3 * (48 + 480));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(CacheStore::open(dir.path(), "abc"), Err(CacheError::Corrupt(_))));
    }
}
