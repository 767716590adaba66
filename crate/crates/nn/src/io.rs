//! Versioned JSON model files.
//!
//! The document is a single object whose only key is the format tag
//! `fcn_v1`; its value carries the architecture metadata and flat weight
//! arrays. Floats are written in shortest round-trip form, so a
//! save/load cycle is lossless.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{NnError, Result};
use crate::model::FcnModel;

pub const FORMAT_KEY: &str = "fcn_v1";

pub fn model_to_json(model: &FcnModel) -> Result<String> {
    let mut doc = serde_json::Map::new();
    doc.insert(
        FORMAT_KEY.to_string(),
        serde_json::to_value(model).map_err(|e| NnError::Corrupt(e.to_string()))?,
    );
    serde_json::to_string(&Value::Object(doc)).map_err(|e| NnError::Corrupt(e.to_string()))
}

pub fn model_from_json(text: &str) -> Result<FcnModel> {
    let doc: Value = serde_json::from_str(text).map_err(|e| NnError::Corrupt(e.to_string()))?;
    let Value::Object(mut map) = doc else {
        return Err(NnError::Corrupt("top level is not an object".into()));
    };
    let Some(payload) = map.remove(FORMAT_KEY) else {
        let found = map.keys().find(|k| k.starts_with("fcn_")).cloned().unwrap_or_else(|| "no format key".into());
        return Err(NnError::VersionMismatch { found });
    };
    let model: FcnModel = serde_json::from_value(payload).map_err(|e| NnError::Corrupt(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &FcnModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FcnModel> {
    model_from_json(&fs::read_to_string(path)?)
}
