//! JSON wire format spoken by prediction servers.
//!
//! ```text
//! POST /predict
//! {"model": "...", "params": {"max_new_tokens": 8, "greedy": true},
//!  "items": [{"id": "a", "part1": "...", "part2": "..."} | {"id": "b", "prompt": "..."}]}
//!
//! 200 {"predictions": [{"id": "a", "label": "...", "raw": "..."}]}
//! 422 {"errors": [{"id": "b", "error": "..."}], "predictions": [...]}
//! ```

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestParams {
    pub max_new_tokens: u32,
    pub greedy: bool,
}

impl Default for RequestParams {
    fn default() -> Self {
        RequestParams {
            max_new_tokens: 8,
            greedy: true,
        }
    }
}

/// What the model sees for one item: the raw pair, or a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemInput {
    Pair { part1: String, part2: String },
    Prompt { prompt: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireItem {
    pub id: String,
    #[serde(flatten)]
    pub input: ItemInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub model: String,
    pub params: RequestParams,
    pub items: Vec<WireItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePrediction {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predictions: Vec<WirePrediction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireItemError {
    pub id: String,
    pub error: String,
}

/// Body of a 422 response. Servers may include the items they did answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialFailure {
    pub errors: Vec<WireItemError>,
    #[serde(default)]
    pub predictions: Vec<WirePrediction>,
}
