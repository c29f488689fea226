//! Per-slice checkpoint persistence.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "SISA"            4 bytes
//! format version u16      = 1
//! mode u8                 0 = Full, 1 = FcOnly, 2 = Adapter
//! shard u16
//! slice u16
//! bottleneck u16          0 unless Adapter
//! param_count u64
//! payload                 param_count x f32
//! trained_id_digest u64
//! payload_digest u64      FNV-1a over the payload bytes
//! ```
//!
//! Checkpoints live at `<root>/shard<S>_slice<R>.ckpt`. Writes go to a
//! temporary file in the same directory that is then renamed over the target.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::learner::{Backbone, HeadMode};
use crate::seed::fnv1a64;

pub const MAGIC: &[u8; 4] = b"SISA";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 1 + 2 + 2 + 2 + 8;
const TRAILER_BYTES: usize = 8 + 8;
/// Bytes in a checkpoint file besides the `f32` payload.
pub const CHECKPOINT_OVERHEAD_BYTES: u64 = (HEADER_BYTES + TRAILER_BYTES) as u64;

const BACKBONE_MAGIC: &[u8; 4] = b"SISB";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no checkpoint for shard {shard} slice {slice}")]
    Missing { shard: u32, slice: u32 },
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("shard/slice/bottleneck value {0} does not fit in u16")]
    KeyRange(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// 64-bit FNV-1a over the little-endian bytes of `values`.
pub fn digest_f32(values: &[f32]) -> u64 {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// 64-bit FNV-1a over the sorted ids, each as `u64` little-endian.
pub fn digest_ids(ids: impl IntoIterator<Item = u64>) -> u64 {
    let mut sorted: Vec<u64> = ids.into_iter().collect();
    sorted.sort_unstable();
    let mut bytes = Vec::with_capacity(sorted.len() * 8);
    for id in sorted {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Trainable state after slice step `slice` of shard `shard`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shard: u32,
    pub slice: u32,
    pub mode: HeadMode,
    pub payload: Vec<f32>,
    pub trained_id_digest: u64,
}

fn to_u16(v: usize) -> Result<u16, StoreError> {
    u16::try_from(v).map_err(|_| StoreError::KeyRange(v))
}

impl Checkpoint {
    pub fn payload_digest(&self) -> u64 {
        digest_f32(&self.payload)
    }

    pub fn encoded_len(&self) -> u64 {
        CHECKPOINT_OVERHEAD_BYTES + 4 * self.payload.len() as u64
    }

    pub fn encode(&self) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::with_capacity(self.encoded_len() as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.mode.code());
        out.extend_from_slice(&to_u16(self.shard as usize)?.to_le_bytes());
        out.extend_from_slice(&to_u16(self.slice as usize)?.to_le_bytes());
        out.extend_from_slice(&to_u16(self.mode.bottleneck())?.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        let start = out.len();
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let payload_digest = fnv1a64(&out[start..]);
        out.extend_from_slice(&self.trained_id_digest.to_le_bytes());
        out.extend_from_slice(&payload_digest.to_le_bytes());
        Ok(out)
    }

    /// Parse and verify; `origin` only labels errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Checkpoint, StoreError> {
        let corrupt = |reason: String| StoreError::Corrupt { path: origin.to_path_buf(), reason };
        if bytes.len() < HEADER_BYTES + TRAILER_BYTES {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u16_at(4);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let mode_code = bytes[6];
        let shard = u16_at(7) as u32;
        let slice = u16_at(9) as u32;
        let bottleneck = u16_at(11) as usize;
        let count = u64_at(13);
        let mode = HeadMode::from_code(mode_code, bottleneck)
            .ok_or_else(|| corrupt(format!("bad mode {mode_code} / bottleneck {bottleneck}")))?;
        let expected_len = (HEADER_BYTES + TRAILER_BYTES) as u64 + 4 * count;
        if bytes.len() as u64 != expected_len {
            return Err(corrupt(format!("length {} != expected {expected_len}", bytes.len())));
        }
        let end = HEADER_BYTES + 4 * count as usize;
        let payload_bytes = &bytes[HEADER_BYTES..end];
        let trained_id_digest = u64_at(end);
        let stored = u64_at(end + 8);
        let actual = fnv1a64(payload_bytes);
        if stored != actual {
            return Err(corrupt(format!("payload digest {actual:016x} != recorded {stored:016x}")));
        }
        let payload = payload_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint { shard, slice, mode, payload, trained_id_digest })
    }
}

/// Write `bytes` to `path` via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn write_checkpoint_file(path: &Path, cp: &Checkpoint) -> Result<u64, StoreError> {
    let bytes = cp.encode()?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::decode(&bytes, path)
}

/// Backbone file: magic "SISB", version u16, input_dim u32, hidden u32,
/// weights and bias as f32, FNV-1a digest u64 over the f32 bytes.
pub fn write_backbone_file(path: &Path, backbone: &Backbone) -> Result<u64, StoreError> {
    let body = backbone.to_bytes();
    let mut out = Vec::with_capacity(body.len() + 22);
    out.extend_from_slice(BACKBONE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(backbone.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(backbone.hidden as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&fnv1a64(&body).to_le_bytes());
    write_atomic(path, &out)?;
    Ok(out.len() as u64)
}

pub fn read_backbone_file(path: &Path) -> Result<Backbone, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: &str| StoreError::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 22 || &bytes[..4] != BACKBONE_MAGIC {
        return Err(corrupt("bad backbone header"));
    }
    let input_dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let n = input_dim * hidden + hidden;
    if bytes.len() != 14 + 4 * n + 8 {
        return Err(corrupt("backbone length mismatch"));
    }
    let body = &bytes[14..14 + 4 * n];
    let stored = u64::from_le_bytes(bytes[14 + 4 * n..].try_into().unwrap());
    if stored != fnv1a64(body) {
        return Err(corrupt("backbone digest mismatch"));
    }
    let mut vals = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let weights = vals.by_ref().take(input_dim * hidden).collect();
    let bias = vals.collect();
    Ok(Backbone { input_dim, hidden, weights, bias })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    mode: HeadMode,
    bytes: u64,
}

/// Checkpoint count and bytes for one mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModeUsage {
    pub checkpoints: u64,
    pub total_bytes: u64,
}

/// Directory of checkpoints keyed by `(shard, slice)`.
///
/// `put`/`get` take `&self`; distinct keys may be written concurrently.
#[derive(Debug)]
pub struct CheckpointStore {
    root: PathBuf,
    index: Mutex<BTreeMap<(u32, u32), Entry>>,
}

impl CheckpointStore {
    /// Open `root`, creating it if needed, and index any checkpoints present.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut index = BTreeMap::new();
        for entry in fs::read_dir(&root).map_err(io_err(&root))? {
            let entry = entry.map_err(io_err(&root))?;
            let name = entry.file_name();
            let Some((shard, slice)) = name.to_str().and_then(parse_file_name) else {
                continue;
            };
            let path = entry.path();
            let mode = read_header_mode(&path)?;
            let bytes = entry.metadata().map_err(io_err(&path))?.len();
            index.insert((shard, slice), Entry { mode, bytes });
        }
        Ok(CheckpointStore { root, index: Mutex::new(index) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, shard: u32, slice: u32) -> PathBuf {
        self.root.join(format!("shard{shard}_slice{slice}.ckpt"))
    }

    /// Store `cp`, replacing whatever was at its key.
    pub fn put(&self, cp: &Checkpoint) -> Result<(), StoreError> {
        let path = self.path_for(cp.shard, cp.slice);
        let bytes = write_checkpoint_file(&path, cp)?;
        self.index
            .lock()
            .unwrap()
            .insert((cp.shard, cp.slice), Entry { mode: cp.mode, bytes });
        Ok(())
    }

    /// Load and verify the checkpoint at `(shard, slice)`.
    pub fn get(&self, shard: u32, slice: u32) -> Result<Checkpoint, StoreError> {
        if !self.contains(shard, slice) {
            return Err(StoreError::Missing { shard, slice });
        }
        read_checkpoint_file(&self.path_for(shard, slice))
    }

    pub fn contains(&self, shard: u32, slice: u32) -> bool {
        self.index.lock().unwrap().contains_key(&(shard, slice))
    }

    pub fn keys(&self) -> Vec<(u32, u32)> {
        self.index.lock().unwrap().keys().copied().collect()
    }

    /// Remove every checkpoint.
    pub fn clear(&self) -> Result<(), StoreError> {
        let mut index = self.index.lock().unwrap();
        for &(shard, slice) in index.keys() {
            let p = self.path_for(shard, slice);
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
        index.clear();
        Ok(())
    }

    pub fn total_bytes(&self) -> u64 {
        self.index.lock().unwrap().values().map(|e| e.bytes).sum()
    }

    /// Checkpoint count and bytes per mode, from the index.
    pub fn storage_report(&self) -> BTreeMap<HeadMode, ModeUsage> {
        let mut out: BTreeMap<HeadMode, ModeUsage> = BTreeMap::new();
        for e in self.index.lock().unwrap().values() {
            let u = out.entry(e.mode).or_default();
            u.checkpoints += 1;
            u.total_bytes += e.bytes;
        }
        out
    }
}

fn read_header_mode(path: &Path) -> Result<HeadMode, StoreError> {
    let mut header = [0u8; HEADER_BYTES];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut header))
        .map_err(io_err(path))?;
    let corrupt = |reason: &str| StoreError::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
    if &header[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let bottleneck = u16::from_le_bytes([header[11], header[12]]) as usize;
    HeadMode::from_code(header[6], bottleneck).ok_or_else(|| corrupt("bad mode"))
}

fn parse_file_name(name: &str) -> Option<(u32, u32)> {
    let rest = name.strip_prefix("shard")?.strip_suffix(".ckpt")?;
    let (s, r) = rest.split_once("_slice")?;
    Some((s.parse().ok()?, r.parse().ok()?))
}
