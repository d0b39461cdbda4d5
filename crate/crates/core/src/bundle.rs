//! Per-round upload from a device to the server.
//!
//! On the wire a bundle is a JSON envelope
//! `{device_id, round, entries: [{scope, n, payload_b64, compressed}]}` where
//! each payload is the canonical binary model layout, optionally deflated,
//! base64-encoded. Bundles carry parameters and sample counts only.

use serde::{Deserialize, Serialize};

use crate::codec::{model_from_b64, model_to_b64};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::permissions::Scope;

pub type DeviceId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct UploadEntry {
    pub scope: Scope,
    pub model: ModelParams,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadBundle {
    pub device_id: DeviceId,
    pub round: u64,
    pub entries: Vec<UploadEntry>,
    pub compressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEntry {
    pub scope: Scope,
    pub n: u64,
    pub payload_b64: String,
    pub compressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBundle {
    pub device_id: DeviceId,
    pub round: u64,
    pub entries: Vec<WireEntry>,
}

impl UploadBundle {
    pub fn to_wire(&self) -> WireBundle {
        WireBundle {
            device_id: self.device_id,
            round: self.round,
            entries: self
                .entries
                .iter()
                .map(|e| WireEntry {
                    scope: e.scope.clone(),
                    n: e.sample_count,
                    payload_b64: model_to_b64(&e.model, self.compressed),
                    compressed: self.compressed,
                })
                .collect(),
        }
    }

    pub fn from_wire(wire: &WireBundle) -> Result<Self> {
        let entries = wire
            .entries
            .iter()
            .map(|e| {
                if e.n == 0 {
                    return Err(Error::Contract(format!("entry for {} has zero samples", e.scope)));
                }
                Ok(UploadEntry {
                    scope: e.scope.clone(),
                    model: model_from_b64(&e.payload_b64, e.compressed)?,
                    sample_count: e.n,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UploadBundle {
            device_id: wire.device_id,
            round: wire.round,
            compressed: wire.entries.iter().any(|e| e.compressed),
            entries,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_wire()).expect("bundle serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: WireBundle =
            serde_json::from_str(text).map_err(|e| Error::Contract(format!("malformed bundle: {e}")))?;
        Self::from_wire(&wire)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_model;
    use crate::model::init_model;

    fn bundle(compressed: bool) -> UploadBundle {
        UploadBundle {
            device_id: 4,
            round: 2,
            compressed,
            entries: vec![
                UploadEntry {
                    scope: Scope::app("a").unwrap(),
                    model: init_model(16, 10, 1).unwrap(),
                    sample_count: 250,
                },
                UploadEntry {
                    scope: Scope::group("g").unwrap(),
                    model: init_model(16, 10, 2).unwrap(),
                    sample_count: 500,
                },
            ],
        }
    }

    #[test]
    fn compressed_round_trip_is_bit_exact() {
        let b = bundle(true);
        let back = UploadBundle::from_json(&b.to_json()).unwrap();
        assert_eq!(back, b);
        for (x, y) in back.entries.iter().zip(&b.entries) {
            assert_eq!(encode_model(&x.model), encode_model(&y.model));
        }
    }

    #[test]
    fn envelope_fields() {
        let v: serde_json::Value = serde_json::from_str(&bundle(false).to_json()).unwrap();
        assert_eq!(v["device_id"], 4);
        assert_eq!(v["round"], 2);
        assert_eq!(v["entries"][1]["scope"], "group:g");
        assert_eq!(v["entries"][1]["n"], 500);
        assert_eq!(v["entries"][1]["compressed"], false);
        assert!(v["entries"][0]["payload_b64"].is_string());
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        assert!(UploadBundle::from_json("{}").is_err());
        let mut wire = bundle(false).to_wire();
        wire.entries[0].payload_b64.truncate(12);
        assert!(UploadBundle::from_wire(&wire).is_err());
        let mut wire = bundle(false).to_wire();
        wire.entries[0].n = 0;
        assert!(UploadBundle::from_wire(&wire).is_err());
    }
}
