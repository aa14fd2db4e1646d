//! Binary checkpoint format for trained models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"BIER"
//! version  u16
//! kind     u16 length + UTF-8 tag ("unet.f32", "encoder.f32", "probe.f32")
//! meta     u32 length + JSON blob (configs, stats, concept names, …)
//! count    u32 weight entries, then per entry:
//!            name  u16 length + UTF-8
//!            ndim  u8, dims u32 each
//!            data  f32 row-major
//! checksum u64 FNV-1a over every preceding byte
//! ```
//!
//! Weights round-trip bit-exactly: values are stored as raw f32 bits, and the
//! loaders rebuild a model skeleton and overwrite every parameter from the
//! table, rejecting missing, extra, or reshaped entries. The checksum is
//! verified before any field is trusted, so flipped bits, truncation, and
//! trailing garbage all surface as [`CheckpointError::Corrupt`].

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::ChannelStats;
use crate::encoder::{EncoderError, ImageEncoder};
use crate::eval::ProbeClassifier;
use crate::generative::{GenerativeError, UNetConfig, UNetModel};
use crate::numerics::Tensor;
use crate::rng;

pub const MAGIC: [u8; 4] = *b"BIER";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Generative(#[from] GenerativeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint contract violated: {0}")]
    Contract(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

const KIND_UNET: &str = "unet.f32";
const KIND_ENCODER: &str = "encoder.f32";
const KIND_PROBE: &str = "probe.f32";

#[derive(Serialize, Deserialize)]
struct UnetMeta {
    cfg: UNetConfig,
    stats: ChannelStats,
    concepts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    size: usize,
    d_embed: usize,
    channels: (usize, usize),
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    encoder: EncoderMeta,
    stats: ChannelStats,
    heldout_accuracy: f64,
}

/// One named weight: (shape, row-major values).
type WeightTable = Vec<(String, Vec<usize>, Vec<f32>)>;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Write `bytes` to `path` via a same-directory temp file and rename, so a
/// failure mid-write never leaves a partial artifact at the destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn encode(kind: &str, meta_json: &str, table: &WeightTable) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let kind_bytes = kind.as_bytes();
    out.extend_from_slice(&(kind_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(kind_bytes);
    let meta_bytes = meta_json.as_bytes();
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_bytes);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, shape, data) in table {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(CheckpointError::Contract(format!("weight name too long: {name:?}")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        if shape.len() > u8::MAX as usize {
            return Err(CheckpointError::Contract(format!("weight {name:?} has too many dims")));
        }
        out.extend_from_slice(&(shape.len() as u8).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Corrupt("file truncated mid-record".into())),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-UTF-8 string field".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<(String, String, WeightTable)> {
    if bytes.len() < MAGIC.len() + 2 + 8 {
        return Err(CheckpointError::Corrupt("file shorter than any valid checkpoint".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic; not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(CheckpointError::Corrupt(format!(
            "checksum mismatch (stored {stored:016x}, computed {actual:016x})"
        )));
    }
    let mut r = Reader { buf: body, pos: 6 };
    let kind_len = r.u16()? as usize;
    let kind = r.string(kind_len)?;
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()? as usize;
    let mut table = WeightTable::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        table.push((name, shape, data));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after the weight table",
            body.len() - r.pos
        )));
    }
    Ok((kind, meta, table))
}

fn read_kind(path: &Path, want: &str) -> Result<(String, WeightTable)> {
    let bytes = fs::read(path)?;
    let (kind, meta, table) = decode(&bytes)?;
    if kind != want {
        return Err(CheckpointError::Contract(format!(
            "checkpoint holds kind {kind:?}, expected {want:?}"
        )));
    }
    Ok((meta, table))
}

fn meta_of<M: serde::de::DeserializeOwned>(meta: &str) -> Result<M> {
    serde_json::from_str(meta)
        .map_err(|e| CheckpointError::Corrupt(format!("metadata does not parse: {e}")))
}

/// Overwrite every parameter the model exposes from the named table.
/// Missing, extra, or reshaped entries are contract errors: a checkpoint
/// must describe exactly the architecture it is loaded into.
fn install(
    table: WeightTable,
    visit_mut: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor<f32>)),
) -> Result<()> {
    let mut map: BTreeMap<String, (Vec<usize>, Vec<f32>)> =
        table.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
    let mut problem: Option<String> = None;
    visit_mut(&mut |name, t| {
        if problem.is_some() {
            return;
        }
        match map.remove(name) {
            None => problem = Some(format!("weight {name:?} missing from the checkpoint")),
            Some((shape, data)) => {
                if shape != t.shape() {
                    problem = Some(format!(
                        "weight {name:?} has shape {shape:?}, model expects {:?}",
                        t.shape()
                    ));
                } else {
                    match Tensor::new(&shape, data) {
                        Ok(nt) => *t = nt,
                        Err(e) => problem = Some(format!("weight {name:?}: {e}")),
                    }
                }
            }
        }
    });
    if let Some(p) = problem {
        return Err(CheckpointError::Contract(p));
    }
    if let Some(name) = map.keys().next() {
        return Err(CheckpointError::Contract(format!(
            "checkpoint has {} weights the model does not ({name:?}, …)",
            map.len()
        )));
    }
    Ok(())
}

fn collect(visit: &mut dyn FnMut(&mut dyn FnMut(&str, &Tensor<f32>))) -> WeightTable {
    let mut table = WeightTable::new();
    visit(&mut |name, t| {
        table.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    table
}

pub fn save_unet(path: &Path, model: &UNetModel<f32>) -> Result<()> {
    let meta = UnetMeta {
        cfg: model.cfg,
        stats: model.stats,
        concepts: model.vocab.names().map(str::to_string).collect(),
    };
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| CheckpointError::Contract(format!("metadata does not serialize: {e}")))?;
    let table = collect(&mut |f| model.visit(f));
    let bytes = encode(KIND_UNET, &meta_json, &table)?;
    Ok(atomic_write(path, &bytes)?)
}

pub fn load_unet(path: &Path) -> Result<UNetModel<f32>> {
    let (meta, table) = read_kind(path, KIND_UNET)?;
    let meta: UnetMeta = meta_of(&meta)?;
    let names: Vec<&str> = meta.concepts.iter().map(String::as_str).collect();
    let mut model =
        UNetModel::<f32>::new(meta.cfg, &names, &mut rng::stream(0, &["checkpoint", "skeleton"]))?;
    model.stats = meta.stats;
    install(table, &mut |f| model.visit_mut(f))?;
    Ok(model)
}

fn encoder_meta(encoder: &ImageEncoder) -> EncoderMeta {
    EncoderMeta {
        size: encoder.size(),
        d_embed: encoder.d_embed(),
        channels: encoder.channels(),
        frozen: encoder.frozen(),
    }
}

fn rebuild_encoder(meta: &EncoderMeta, table: WeightTable) -> Result<ImageEncoder> {
    let mut encoder = ImageEncoder::new(
        meta.size,
        meta.d_embed,
        meta.channels,
        &mut rng::stream(0, &["checkpoint", "skeleton"]),
    );
    install(table, &mut |f| encoder.visit_mut_unchecked(f))?;
    encoder.set_frozen(meta.frozen);
    Ok(encoder)
}

pub fn save_encoder(path: &Path, encoder: &ImageEncoder) -> Result<()> {
    let meta_json = serde_json::to_string(&encoder_meta(encoder))
        .map_err(|e| CheckpointError::Contract(format!("metadata does not serialize: {e}")))?;
    let table = collect(&mut |f| encoder.visit(f));
    let bytes = encode(KIND_ENCODER, &meta_json, &table)?;
    Ok(atomic_write(path, &bytes)?)
}

pub fn load_encoder(path: &Path) -> Result<ImageEncoder> {
    let (meta, table) = read_kind(path, KIND_ENCODER)?;
    let meta: EncoderMeta = meta_of(&meta)?;
    rebuild_encoder(&meta, table)
}

/// A probe checkpoint bundles the classifier's encoder with the corpus
/// statistics it preprocesses with and its recorded heldout accuracy, so the
/// trust gate survives the round trip.
pub fn save_probe(path: &Path, probe: &ProbeClassifier) -> Result<()> {
    let meta = ProbeMeta {
        encoder: encoder_meta(probe.encoder()),
        stats: *probe.stats(),
        heldout_accuracy: probe.heldout_accuracy(),
    };
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| CheckpointError::Contract(format!("metadata does not serialize: {e}")))?;
    let table = collect(&mut |f| probe.encoder().visit(f));
    let bytes = encode(KIND_PROBE, &meta_json, &table)?;
    Ok(atomic_write(path, &bytes)?)
}

pub fn load_probe(path: &Path) -> Result<ProbeClassifier> {
    let (meta, table) = read_kind(path, KIND_PROBE)?;
    let meta: ProbeMeta = meta_of(&meta)?;
    let encoder = rebuild_encoder(&meta.encoder, table)?;
    Ok(ProbeClassifier::from_parts(encoder, meta.stats, meta.heldout_accuracy))
}

/// Everything `inspect` needs to print about one weight entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub l2: f64,
}

/// Parsed header plus per-entry statistics, without rebuilding a model.
#[derive(Clone, Debug)]
pub struct CheckpointSummary {
    pub kind: String,
    pub version: u16,
    pub meta_json: String,
    pub n_params: usize,
    pub checksum: u64,
    pub entries: Vec<EntryInfo>,
}

pub fn inspect(path: &Path) -> Result<CheckpointSummary> {
    let bytes = fs::read(path)?;
    let (kind, meta, table) = decode(&bytes)?;
    let checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let mut n_params = 0usize;
    let entries = table
        .into_iter()
        .map(|(name, shape, data)| {
            n_params += data.len();
            let l2 = data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            EntryInfo { name, shape, l2 }
        })
        .collect();
    Ok(CheckpointSummary { kind, version: VERSION, meta_json: meta, n_params, checksum, entries })
}
