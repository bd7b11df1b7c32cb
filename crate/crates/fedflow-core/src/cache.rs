//! Binary caches for preprocessed datasets, written between the
//! preprocessing stage and training so later stages can run standalone.
//!
//! Layout (little-endian): magic `FSSC1`, a kind byte (0 = per-client
//! unlabeled pairs, 1 = labeled subflow list), the subflow length, then the
//! counted records. Every record is the source flow id, the label (-1 for
//! none), the subflow values, and (kind 0 only) the 24 regression targets.

use crate::bytes::ByteReader;
use crate::features::{FlowFeatures, FEATURE_COUNT};
use crate::flow::Subflow;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cache format error: {0}")]
    Format(String),
}

const CACHE_MAGIC: &[u8; 5] = b"FSSC1";
const KIND_CLIENTS: u8 = 0;
const KIND_LABELED: u8 = 1;

fn push_subflow(out: &mut Vec<u8>, subflow: &Subflow, subflow_len: usize) {
    debug_assert_eq!(subflow.len(), subflow_len);
    let id = subflow.source_flow_id.as_bytes();
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    let label = subflow.label.map(|l| l as i32).unwrap_or(-1);
    out.extend_from_slice(&label.to_le_bytes());
    for v in subflow.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_subflow(r: &mut ByteReader<'_>, subflow_len: usize) -> Result<Subflow, String> {
    let id = r.str16()?.to_string();
    let label = r.i32()?;
    let label = match label {
        -1 => None,
        l if l >= 0 => Some(l as usize),
        l => return Err(format!("invalid label {l}")),
    };
    let mut values = Vec::with_capacity(subflow_len * 2);
    for _ in 0..subflow_len * 2 {
        let v = r.f32()?;
        if !v.is_finite() {
            return Err("non-finite subflow value".into());
        }
        values.push(v);
    }
    Ok(Subflow::new(values, subflow_len, id, label))
}

/// Serializes the per-client unlabeled datasets.
pub fn encode_client_datasets(
    clients: &[Vec<(Subflow, FlowFeatures)>],
    subflow_len: usize,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.push(KIND_CLIENTS);
    out.extend_from_slice(&(subflow_len as u32).to_le_bytes());
    out.extend_from_slice(&(clients.len() as u32).to_le_bytes());
    for client in clients {
        out.extend_from_slice(&(client.len() as u32).to_le_bytes());
        for (subflow, features) in client {
            push_subflow(&mut out, subflow, subflow_len);
            for v in features.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Parses a per-client cache produced by [`encode_client_datasets`].
pub fn decode_client_datasets(
    bytes: &[u8],
) -> Result<Vec<Vec<(Subflow, FlowFeatures)>>, CacheError> {
    let mut r = header(bytes, KIND_CLIENTS)?;
    let fmt = CacheError::Format;
    let subflow_len = r.u32().map_err(fmt)? as usize;
    check_len(subflow_len)?;
    let client_count = r.u32().map_err(fmt)? as usize;
    let mut clients = Vec::new();
    for _ in 0..client_count {
        let count = r.u32().map_err(fmt)? as usize;
        let min_record = 2 + 4 + subflow_len * 8 + FEATURE_COUNT * 8;
        if count.saturating_mul(min_record) > r.remaining() {
            return Err(CacheError::Format(format!(
                "client claims {count} records, more than the file holds"
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let subflow = read_subflow(&mut r, subflow_len).map_err(fmt)?;
            let mut values = [0.0f64; FEATURE_COUNT];
            for v in values.iter_mut() {
                *v = r.f64().map_err(fmt)?;
                if !v.is_finite() {
                    return Err(CacheError::Format("non-finite feature value".into()));
                }
            }
            records.push((subflow, FlowFeatures::from_values(values)));
        }
        clients.push(records);
    }
    finish(&r)?;
    Ok(clients)
}

/// Serializes a labeled subflow list (server train or test split).
pub fn encode_labeled_set(items: &[(Subflow, usize)], subflow_len: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.push(KIND_LABELED);
    out.extend_from_slice(&(subflow_len as u32).to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (subflow, label) in items {
        let mut tagged = subflow.clone();
        tagged.label = Some(*label);
        push_subflow(&mut out, &tagged, subflow_len);
    }
    out
}

/// Parses a labeled cache produced by [`encode_labeled_set`].
pub fn decode_labeled_set(bytes: &[u8]) -> Result<Vec<(Subflow, usize)>, CacheError> {
    let mut r = header(bytes, KIND_LABELED)?;
    let fmt = CacheError::Format;
    let subflow_len = r.u32().map_err(fmt)? as usize;
    check_len(subflow_len)?;
    let count = r.u32().map_err(fmt)? as usize;
    let min_record = 2 + 4 + subflow_len * 8;
    if count.saturating_mul(min_record) > r.remaining() {
        return Err(CacheError::Format(format!(
            "cache claims {count} records, more than the file holds"
        )));
    }
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let subflow = read_subflow(&mut r, subflow_len).map_err(fmt)?;
        let label = subflow
            .label
            .ok_or_else(|| CacheError::Format("labeled record without a label".into()))?;
        items.push((subflow, label));
    }
    finish(&r)?;
    Ok(items)
}

fn header<'a>(bytes: &'a [u8], kind: u8) -> Result<ByteReader<'a>, CacheError> {
    let mut r = ByteReader::new(bytes);
    if r.take(CACHE_MAGIC.len()).map_err(CacheError::Format)? != CACHE_MAGIC {
        return Err(CacheError::Format("bad magic".into()));
    }
    let got = r.u8().map_err(CacheError::Format)?;
    if got != kind {
        return Err(CacheError::Format(format!(
            "cache kind {got} where kind {kind} was expected"
        )));
    }
    Ok(r)
}

fn check_len(subflow_len: usize) -> Result<(), CacheError> {
    if subflow_len == 0 || subflow_len > 1 << 20 {
        return Err(CacheError::Format(format!(
            "implausible subflow length {subflow_len}"
        )));
    }
    Ok(())
}

fn finish(r: &ByteReader<'_>) -> Result<(), CacheError> {
    if !r.finished() {
        return Err(CacheError::Format(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    Ok(())
}
