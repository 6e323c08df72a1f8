//! Index files: a JSON header (ids, backend, ball curvature, model checksum)
//! followed by a checkpoint-style payload holding the embeddings and the
//! embedding model.

use std::collections::BTreeMap;
use std::path::Path;

use hyperalign_core::hyperbolic::{BallConfig, HnnParams};
use hyperalign_core::retrieval::{Backend, IndexMeta, RetrievalIndex};
use hyperalign_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{decode_array, encode_array, ArrayDoc, CURVATURE_KEY, VERSION};
use crate::error::{Error, Result};
use crate::fsio;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    ids: Vec<String>,
    backend: Backend,
    curvature: f64,
    model_checksum: String,
    created_unix: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexDoc {
    version: u32,
    header: Header,
    arrays: BTreeMap<String, ArrayDoc>,
}

/// SHA-256 over the embedding model: curvature, weight and bias as
/// little-endian `f64`, each tensor prefixed by its shape.
pub fn model_checksum(model: &HnnParams) -> String {
    let mut h = Sha256::new();
    h.update(model.config.curvature.to_le_bytes());
    for t in [&model.weight, &model.bias] {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

pub fn to_json(index: &RetrievalIndex) -> String {
    let model = index.model();
    let mut arrays = BTreeMap::new();
    arrays.insert("embeddings".to_string(), encode_array(index.embeddings()));
    arrays.insert("hnn.weight".to_string(), encode_array(&model.weight));
    arrays.insert("hnn.bias".to_string(), encode_array(&model.bias));
    arrays.insert(CURVATURE_KEY.to_string(), encode_array(&Tensor::scalar(model.config.curvature)));
    let checksum = if index.meta.model_checksum.is_empty() {
        model_checksum(model)
    } else {
        index.meta.model_checksum.clone()
    };
    let doc = IndexDoc {
        version: VERSION,
        header: Header {
            ids: index.ids().to_vec(),
            backend: index.backend(),
            curvature: model.config.curvature,
            model_checksum: checksum,
            created_unix: index.meta.created_unix,
        },
        arrays,
    };
    let mut s = serde_json::to_string(&doc).expect("index serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> std::result::Result<RetrievalIndex, String> {
    let doc: IndexDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if doc.version != VERSION {
        return Err(format!("unsupported index version {}", doc.version));
    }
    let get = |name: &str| -> std::result::Result<Tensor, String> {
        let a = doc.arrays.get(name).ok_or_else(|| format!("missing array {name:?}"))?;
        decode_array(name, a)
    };
    let curvature = get(CURVATURE_KEY)?.item().map_err(|e| e.to_string())?;
    if curvature.to_bits() != doc.header.curvature.to_bits() {
        return Err("header curvature disagrees with the payload".into());
    }
    let model = HnnParams {
        weight: get("hnn.weight")?,
        bias: get("hnn.bias")?,
        config: BallConfig::new(curvature).map_err(|e| e.to_string())?,
    };
    if model_checksum(&model) != doc.header.model_checksum {
        return Err("model checksum mismatch".into());
    }
    let meta = IndexMeta {
        model_checksum: doc.header.model_checksum,
        created_unix: doc.header.created_unix,
    };
    RetrievalIndex::from_parts(get("embeddings")?, doc.header.ids, doc.header.backend, model, meta)
        .map_err(|e| e.to_string())
}

pub fn save(path: &Path, index: &RetrievalIndex) -> Result<()> {
    fsio::write_atomic(path, to_json(index).as_bytes())
}

pub fn load(path: &Path) -> Result<RetrievalIndex> {
    from_json(&fsio::read_string(path)?).map_err(|m| Error::format(path, m))
}
