//! Versioned JSON checkpoints: named arrays stored as base64 of little-endian
//! `f64`, plus the run configuration that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use hyperalign_core::model::{Model, RunConfig};
use hyperalign_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

pub const VERSION: u32 = 1;
pub const CURVATURE_KEY: &str = "hnn.curvature";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ArrayDoc {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    version: u32,
    arrays: BTreeMap<String, ArrayDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
}

pub(crate) fn encode_array(t: &Tensor) -> ArrayDoc {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for x in t.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    ArrayDoc {
        shape: t.shape().to_vec(),
        data: BASE64.encode(bytes),
    }
}

pub(crate) fn decode_array(name: &str, doc: &ArrayDoc) -> std::result::Result<Tensor, String> {
    let bytes = BASE64
        .decode(&doc.data)
        .map_err(|e| format!("array {name:?}: bad base64 ({e})"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("array {name:?}: {} bytes is not a whole number of f64", bytes.len()));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let expected: usize = doc.shape.iter().product();
    if data.len() != expected {
        return Err(format!(
            "array {name:?}: shape {:?} needs {expected} values, found {}",
            doc.shape,
            data.len()
        ));
    }
    Tensor::new(&doc.shape, data).map_err(|e| format!("array {name:?}: {e}"))
}

/// Named arrays with an optional config echo.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, Tensor>,
    pub config: Option<RunConfig>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig) -> Self {
        let mut arrays: BTreeMap<String, Tensor> =
            model.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        arrays.insert(CURVATURE_KEY.into(), Tensor::scalar(model.hnn.config.curvature));
        Checkpoint {
            arrays,
            config: Some(config.clone()),
        }
    }

    /// Rebuilds the model, checking every array against the stored config.
    pub fn to_model(&self) -> Result<(Model, RunConfig)> {
        let config = self
            .config
            .clone()
            .ok_or_else(|| Error::Invalid("checkpoint has no \"config\" entry".into()))?;
        config.validate()?;
        let curvature = self
            .arrays
            .get(CURVATURE_KEY)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no {CURVATURE_KEY:?} array")))?
            .item()?;
        let model = Model::from_named(&config, curvature, |name| self.arrays.get(name))?;
        Ok((model, config))
    }

    pub fn to_json(&self) -> String {
        let doc = CheckpointDoc {
            version: VERSION,
            arrays: self.arrays.iter().map(|(n, t)| (n.clone(), encode_array(t))).collect(),
            config: self.config.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.version != VERSION {
            return Err(format!("unsupported checkpoint version {}", doc.version));
        }
        let mut arrays = BTreeMap::new();
        for (name, a) in &doc.arrays {
            arrays.insert(name.clone(), decode_array(name, a)?);
        }
        Ok(Checkpoint {
            arrays,
            config: doc.config,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fsio::read_string(path)?).map_err(|m| Error::format(path, m))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_json().as_bytes())
    }
}

pub fn save_model(path: &Path, model: &Model, config: &RunConfig) -> Result<()> {
    Checkpoint::from_model(model, config).save(path)
}

pub fn load_model(path: &Path) -> Result<(Model, RunConfig)> {
    Checkpoint::load(path)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use hyperalign_core::train::initial_model;

    #[test]
    fn arrays_round_trip_bit_exactly() {
        let t = Tensor::new(&[2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0]).unwrap();
        let back = decode_array("x", &encode_array(&t)).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.shape(), &[2, 3]);
    }

    #[test]
    fn model_round_trips_through_json() {
        let config = RunConfig::desk();
        let model = initial_model(&config).unwrap();
        let ck = Checkpoint::from_model(&model, &config);
        let text = ck.to_json();
        assert!(text.contains("\"version\": 1"));
        let (back, cfg) = Checkpoint::from_json(&text).unwrap().to_model().unwrap();
        assert_eq!(cfg, config);
        assert_eq!(back.named(), model.named());
        assert_eq!(back.hnn.config, model.hnn.config);
    }

    #[test]
    fn rejects_truncated_payload_and_wrong_version() {
        let doc = r#"{"version":1,"arrays":{"a":{"shape":[2],"data":"AAAAAAAA8D8="}}}"#;
        assert!(Checkpoint::from_json(doc).unwrap_err().contains("needs 2 values"));
        let doc = r#"{"version":2,"arrays":{}}"#;
        assert!(Checkpoint::from_json(doc).unwrap_err().contains("version"));
    }

    #[test]
    fn missing_array_is_reported_by_name() {
        let config = RunConfig::desk();
        let mut ck = Checkpoint::from_model(&initial_model(&config).unwrap(), &config);
        ck.arrays.remove("head.bias");
        let err = ck.to_model().unwrap_err().to_string();
        assert!(err.contains("head.bias"), "{err}");
    }
}
