//! Text persistence for a single network.
//!
//! A checkpoint document is one JSON text containing the architecture, the
//! flat parameter vector, optional target-network parameters, the optimizer
//! state, and a format version. Floats are serialized in shortest
//! round-trip decimal form, so reloading reproduces every `f64` bit-exactly —
//! a reloaded network must produce byte-identical outputs and training
//! continuations.

use super::{AdamState, NetworkSpec};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const NETWORK_DOCUMENT_VERSION: u32 = 1;

/// Everything needed to resume using (and training) one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub format_version: u32,
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
    /// Polyak-averaged target parameters, when the network has a target.
    pub target_params: Option<Vec<f64>>,
    pub adam: Option<AdamState>,
}

impl NetworkDocument {
    pub fn new(
        spec: NetworkSpec,
        params: Vec<f64>,
        target_params: Option<Vec<f64>>,
        adam: Option<AdamState>,
    ) -> Self {
        NetworkDocument {
            format_version: NETWORK_DOCUMENT_VERSION,
            spec,
            params,
            target_params,
            adam,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(format!("serialize network: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDocument = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("network document: {e}")))?;
        if doc.format_version != NETWORK_DOCUMENT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported network document version {} (expected {})",
                doc.format_version, NETWORK_DOCUMENT_VERSION
            )));
        }
        doc.spec.validate()?;
        if doc.params.len() != doc.spec.param_count() {
            return Err(Error::Parse(format!(
                "document carries {} parameters, spec wants {}",
                doc.params.len(),
                doc.spec.param_count()
            )));
        }
        if let Some(t) = &doc.target_params {
            if t.len() != doc.params.len() {
                return Err(Error::Parse("target parameter length mismatch".into()));
            }
        }
        if let Some(a) = &doc.adam {
            if a.m.len() != doc.params.len() || a.v.len() != doc.params.len() {
                return Err(Error::Parse("optimizer state length mismatch".into()));
            }
        }
        Ok(doc)
    }
}
