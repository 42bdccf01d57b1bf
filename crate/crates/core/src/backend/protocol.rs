//! Wire messages of the `/v1` protocol. Field order here is the byte order
//! on the wire; see `protocol.md` at the repository root.

use serde::{Deserialize, Serialize};

use crate::engine::template::{ExemplarSlot, QuerySlot};
use crate::engine::Instruction;
use crate::io::FinetuneRow;
use crate::types::ClassId;

pub use super::{BackendCapabilities as InfoResponse, FinetuneAck as FinetuneResponse, IclScore as IclResponse};

pub const INFO_PATH: &str = "/v1/info";
pub const PREDICT_PATH: &str = "/v1/predict";
pub const ICL_PATH: &str = "/v1/icl";
pub const FINETUNE_PATH: &str = "/v1/finetune";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub item_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictEntry {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictResponse {
    pub predictions: Vec<PredictEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireExemplar {
    pub item_id: String,
    pub class_name: String,
    pub answer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireQuery {
    pub item_id: String,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IclRequest {
    pub exemplars: Vec<WireExemplar>,
    pub query: WireQuery,
    pub template_variant: String,
    /// 1-based repeat index within an ensembled decision.
    pub repeat: usize,
    pub rendered_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRequest {
    pub records: Vec<FinetuneRow>,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

impl IclRequest {
    pub fn from_instruction(ins: &Instruction) -> Self {
        IclRequest {
            exemplars: ins
                .exemplars
                .iter()
                .map(|e| WireExemplar {
                    item_id: e.item_id.clone(),
                    class_name: e.class_name.clone(),
                    answer: e.answer,
                })
                .collect(),
            query: WireQuery {
                item_id: ins.query.item_id.clone(),
                class_name: ins.query.class_name.clone(),
            },
            template_variant: ins.template_variant.clone(),
            repeat: ins.repeat,
            rendered_text: ins.rendered_text.clone(),
        }
    }

    /// Resolves class names against `class_names`; returns the first
    /// unknown name on failure.
    pub fn to_instruction(&self, class_names: &[String]) -> Result<Instruction, String> {
        let resolve = |name: &str| {
            class_names
                .iter()
                .position(|n| n == name)
                .map(ClassId)
                .ok_or_else(|| name.to_owned())
        };
        let exemplars = self
            .exemplars
            .iter()
            .map(|e| {
                Ok(ExemplarSlot {
                    item_id: e.item_id.clone(),
                    class: resolve(&e.class_name)?,
                    class_name: e.class_name.clone(),
                    answer: e.answer,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Instruction {
            exemplars,
            query: QuerySlot {
                item_id: self.query.item_id.clone(),
                class: resolve(&self.query.class_name)?,
                class_name: self.query.class_name.clone(),
            },
            template_variant: self.template_variant.clone(),
            repeat: self.repeat,
            rendered_text: self.rendered_text.clone(),
        })
    }
}

impl ErrorResponse {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ErrorResponse {
            error: ErrorBody {
                code: code.to_owned(),
                message: message.into(),
            },
        }
    }
}

pub mod codes {
    pub const BAD_REQUEST: &str = "bad_request";
    pub const NOT_FOUND: &str = "not_found";
    pub const UNKNOWN_ITEM: &str = "unknown_item";
    pub const UNKNOWN_CLASS: &str = "unknown_class";
    pub const UNSUPPORTED: &str = "unsupported";
    pub const INTERNAL: &str = "internal";
}

/// Canonical encoding: compact JSON, fields in declaration order.
pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("protocol messages serialize")
}

pub fn decode<T: serde::de::DeserializeOwned>(text: &str) -> serde_json::Result<T> {
    serde_json::from_str(text)
}
