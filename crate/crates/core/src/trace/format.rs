//! On-disk trace-set layout: `manifest.json` plus one little-endian binary32
//! blob per present section, traces concatenated in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{attention_len, InferenceTrace, LogitStats, Section, Span, TraceLabel, TraceMeta, TraceSet};
use crate::error::{Error, Result};

pub const MAGIC: &str = "HPRB1";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
/// Largest integer exactly representable in binary32.
const F32_EXACT: f32 = 16_777_216.0;

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    format_version: u32,
    dataset_name: String,
    /// Hidden states are post-block outputs (after the residual add).
    hidden_state_position: String,
    #[serde(flatten)]
    meta: TraceMeta,
    traces: Vec<TraceRecord>,
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    trace_id: String,
    prompt_len: usize,
    gen_len: usize,
    label: TraceLabel,
    #[serde(default)]
    problematic_spans: Vec<Span>,
    /// Byte ranges into each present section's blob.
    blobs: BTreeMap<Section, BlobRef>,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    length: u64,
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_logits(out: &mut Vec<u8>, logits: &[LogitStats]) {
    for rec in logits {
        out.extend_from_slice(&rec.chosen_prob.to_le_bytes());
        out.extend_from_slice(&(rec.chosen_rank as f32).to_le_bytes());
        push_f32s(out, &rec.topk_probs);
        for &id in &rec.topk_ids {
            out.extend_from_slice(&(id as f32).to_le_bytes());
        }
        out.extend_from_slice(&rec.tail_mass.to_le_bytes());
    }
}

/// Writes `set` under `dir`, creating it if needed. Output bytes depend only
/// on the set contents.
pub fn write_trace_set(set: &TraceSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = &set.meta;
    let mut blobs: BTreeMap<Section, Vec<u8>> = meta
        .sections_present
        .iter()
        .map(|&s| (s, Vec::new()))
        .collect();

    let mut records = Vec::with_capacity(set.traces.len());
    for tr in &set.traces {
        let mut refs = BTreeMap::new();
        for (&section, buf) in blobs.iter_mut() {
            let start = buf.len();
            match section {
                Section::Attention => push_f32s(buf, tr.attention.as_deref().unwrap_or_default()),
                Section::Hidden => push_f32s(buf, tr.hidden.as_deref().unwrap_or_default()),
                Section::Activation => push_f32s(buf, tr.activation.as_deref().unwrap_or_default()),
                Section::Logit => encode_logits(buf, tr.logits.as_deref().unwrap_or_default()),
            }
            refs.insert(
                section,
                BlobRef {
                    offset: start as u64,
                    length: (buf.len() - start) as u64,
                },
            );
        }
        records.push(TraceRecord {
            trace_id: tr.trace_id.clone(),
            prompt_len: tr.prompt_len,
            gen_len: tr.gen_len,
            label: tr.label,
            problematic_spans: tr.problematic_spans.clone(),
            blobs: refs,
        });
    }

    let manifest = Manifest {
        magic: MAGIC.to_string(),
        format_version: FORMAT_VERSION,
        dataset_name: set.dataset_name.clone(),
        hidden_state_position: "post_block".to_string(),
        meta: meta.clone(),
        traces: records,
    };
    let mpath = dir.join(MANIFEST);
    let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    text.push(b'\n');
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    for section in Section::ALL {
        let path = dir.join(section.blob_file());
        match blobs.get(&section) {
            Some(buf) => fs::write(&path, buf).map_err(|e| Error::io(&path, e))?,
            // stale blob from an earlier write would be misleading
            None if path.exists() => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
            None => {}
        }
    }
    Ok(())
}

struct Blob {
    path: PathBuf,
    bytes: Vec<u8>,
}

impl Blob {
    fn format_err(&self, offset: u64, reason: impl Into<String>) -> Error {
        Error::Format {
            file: self.path.clone(),
            offset,
            reason: reason.into(),
        }
    }

    fn floats(&self, r: BlobRef, expected_floats: usize, trace_id: &str) -> Result<Vec<f32>> {
        let expected = expected_floats as u64 * 4;
        if r.length != expected {
            return Err(self.format_err(
                r.offset,
                format!("trace '{trace_id}' declares {} bytes, shape requires {expected}", r.length),
            ));
        }
        let end = r.offset.saturating_add(r.length);
        if end > self.bytes.len() as u64 {
            return Err(self.format_err(
                r.offset,
                format!(
                    "trace '{trace_id}' reads past end of blob ({} bytes available)",
                    self.bytes.len()
                ),
            ));
        }
        Ok(self.bytes[r.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn read_blob(dir: &Path, section: Section) -> Result<Blob> {
    let path = dir.join(section.blob_file());
    let bytes = fs::read(&path).map_err(|e| Error::Format {
        file: path.clone(),
        offset: 0,
        reason: format!("cannot read blob: {e}"),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            file: path,
            offset: bytes.len() as u64,
            reason: "blob length is not a multiple of 4 bytes".into(),
        });
    }
    Ok(Blob { path, bytes })
}

fn exact_index(v: f32, blob: &Blob, offset: u64, what: &str) -> Result<u32> {
    if !((0.0..F32_EXACT).contains(&v) && v.fract() == 0.0) {
        return Err(blob.format_err(offset, format!("{what} {v} is not a non-negative integer below 2^24")));
    }
    Ok(v as u32)
}

fn decode_logits(floats: &[f32], topk: usize, blob: &Blob, base: u64) -> Result<Vec<LogitStats>> {
    let rec = LogitStats::record_len(topk);
    floats
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, c)| {
            let off = base + (i * rec * 4) as u64;
            let ids = c[2 + topk..2 + 2 * topk]
                .iter()
                .map(|&v| exact_index(v, blob, off, "vocab id"))
                .collect::<Result<Vec<_>>>()?;
            Ok(LogitStats {
                chosen_prob: c[0],
                chosen_rank: exact_index(c[1], blob, off + 4, "chosen_rank")?,
                topk_probs: c[2..2 + topk].to_vec(),
                topk_ids: ids,
                tail_mass: c[2 + 2 * topk],
            })
        })
        .collect()
}

/// Loads and fully validates the trace set stored under `dir`.
pub fn load_trace_set(dir: impl AsRef<Path>) -> Result<TraceSet> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;

    // version gate before schema-dependent parsing
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::json(&mpath, e))?;
    let magic = raw.get("magic").and_then(|v| v.as_str());
    if magic != Some(MAGIC) {
        return Err(Error::Format {
            file: mpath,
            offset: 0,
            reason: format!("bad magic {magic:?}, expected \"{MAGIC}\""),
        });
    }
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(Error::UnsupportedVersion {
                found: other.unwrap_or(0) as u32,
                expected: FORMAT_VERSION,
            })
        }
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::json(&mpath, e))?;
    let meta = manifest.meta;
    meta.validate()?;
    let shape = meta.shape();

    let mut blobs = BTreeMap::new();
    for &s in &meta.sections_present {
        blobs.insert(s, read_blob(dir, s)?);
    }
    let mut consumed: BTreeMap<Section, u64> = BTreeMap::new();

    let mut traces = Vec::with_capacity(manifest.traces.len());
    for rec in manifest.traces {
        let mut tr = InferenceTrace {
            trace_id: rec.trace_id,
            prompt_len: rec.prompt_len,
            gen_len: rec.gen_len,
            shape,
            attention: None,
            hidden: None,
            activation: None,
            logits: None,
            label: rec.label,
            problematic_spans: rec.problematic_spans,
        };
        for (section, blob) in &blobs {
            let r = *rec.blobs.get(section).ok_or_else(|| Error::Format {
                file: mpath.clone(),
                offset: 0,
                reason: format!("trace '{}' has no '{}' blob reference", tr.trace_id, section.name()),
            })?;
            *consumed.entry(*section).or_default() += r.length;
            let (l, n) = (meta.num_layers, tr.gen_len);
            match section {
                Section::Attention => {
                    let len = attention_len(tr.prompt_len, n, l, meta.num_heads);
                    tr.attention = Some(blob.floats(r, len, &tr.trace_id)?);
                }
                Section::Hidden => {
                    tr.hidden = Some(blob.floats(r, n * l * meta.hidden_dim, &tr.trace_id)?);
                }
                Section::Activation => {
                    tr.activation = Some(blob.floats(r, n * l * meta.ffn_dim, &tr.trace_id)?);
                }
                Section::Logit => {
                    let floats = blob.floats(r, n * l * LogitStats::record_len(meta.topk), &tr.trace_id)?;
                    tr.logits = Some(decode_logits(&floats, meta.topk, blob, r.offset)?);
                }
            }
        }
        traces.push(tr);
    }
    for (section, blob) in &blobs {
        let used = consumed.get(section).copied().unwrap_or(0);
        if used != blob.bytes.len() as u64 {
            return Err(blob.format_err(
                used,
                format!("blob holds {} bytes but manifest references {used}", blob.bytes.len()),
            ));
        }
    }

    let set = TraceSet {
        meta,
        traces,
        dataset_name: manifest.dataset_name,
    };
    set.validate()?;
    Ok(set)
}
