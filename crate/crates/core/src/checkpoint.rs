//! Binary checkpoints: a magic line, the byte length of a JSON manifest, the
//! manifest, then every matrix as little-endian f64 in manifest order.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingMode, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::{Ffn, ParamName, PeMode, TransformerParams};
use crate::numeric::Matrix;

const MAGIC: &[u8] = b"IHLAB-CKPT\n";
pub const FORMAT_VERSION: &str = "ihlab-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub pe_mode: PeMode,
    pub embedding: EmbeddingMode,
    pub d: usize,
    pub vocab: usize,
    pub t_max: usize,
    /// Free-form run metadata (configuration, iteration, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: TransformerParams,
}

const EMBEDDING_TENSORS: [&str; 6] = ["emb.w_E", "emb.w_U", "emb.ape", "emb.rpe", "emb.phi1", "emb.w_V2"];

fn named_tensors(params: &TransformerParams) -> Vec<(String, &Matrix)> {
    let e = &params.emb;
    let mut out: Vec<(String, &Matrix)> = EMBEDDING_TENSORS
        .iter()
        .zip([
            e.token_matrix(),
            e.unembed_matrix(),
            e.absolute_matrix(),
            e.relative_matrix(),
            e.phi1(),
            e.w_v2(),
        ])
        .map(|(n, m)| (n.to_string(), m))
        .collect();
    for name in ParamName::ALL {
        if let Some(m) = params.get(name) {
            out.push((name.as_str().to_string(), m));
        }
    }
    out
}

/// Serializes `params` with `meta` attached. Three-layer models are rebuilt
/// from their construction and are not checkpointed.
pub fn encode_checkpoint(params: &TransformerParams, meta: serde_json::Value) -> Result<Vec<u8>> {
    if params.nope.is_some() {
        return Err(Error::invalid("three-layer models are not checkpointed; rebuild them from the construction"));
    }
    let tensors = named_tensors(params);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, m) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.as_slice().len() * 8;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION.into(),
        pe_mode: params.pe_mode,
        embedding: params.emb.mode(),
        d: params.d(),
        vocab: params.vocab(),
        t_max: params.emb.t_max(),
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &tensors {
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt("missing magic header"))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated manifest length"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("eight bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..len])
        .map_err(|e| Error::CorruptCheckpoint(format!("unreadable manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.version,
            expected: FORMAT_VERSION.into(),
        });
    }
    let payload = &rest[len..];
    let mut tensors = std::collections::BTreeMap::new();
    let mut expected_offset = 0;
    for t in &manifest.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| corrupt("tensor size overflows"))?;
        if t.offset != expected_offset {
            return Err(corrupt(&format!("tensor {} has offset {}, expected {expected_offset}", t.name, t.offset)));
        }
        let end = t.offset + n * 8;
        if end > payload.len() {
            return Err(corrupt(&format!("payload ends inside tensor {}", t.name)));
        }
        let data = payload[t.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        tensors.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data)?);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| corrupt(&format!("missing tensor {name}")));
    let emb = EmbeddingSet::from_parts(
        manifest.embedding,
        take(EMBEDDING_TENSORS[0])?,
        take(EMBEDDING_TENSORS[1])?,
        take(EMBEDDING_TENSORS[2])?,
        take(EMBEDDING_TENSORS[3])?,
        take(EMBEDDING_TENSORS[4])?,
        take(EMBEDDING_TENSORS[5])?,
    )
    .map_err(|e| Error::CorruptCheckpoint(format!("embedding tensors: {e}")))?;
    let mut params = TransformerParams::zeros(Arc::new(emb), manifest.pe_mode);
    let w1 = tensors.remove(ParamName::W1.as_str());
    let w2 = tensors.remove(ParamName::W2.as_str());
    params.ffn = match (w1, w2) {
        (Some(w1), Some(w2)) => Some(Ffn { w1, w2 }),
        (None, None) => None,
        _ => return Err(corrupt("feed-forward memory is missing one of its matrices")),
    };
    for name in ParamName::ALL {
        if let Some(m) = tensors.remove(name.as_str()) {
            *params.get_mut(name).expect("attention matrices always exist") = m;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(&format!("unknown tensor {extra}")));
    }
    params
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("inconsistent shapes: {e}")))?;
    Ok(Checkpoint { manifest, params })
}

pub fn save_checkpoint(params: &TransformerParams, meta: serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}
