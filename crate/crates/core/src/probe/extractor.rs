use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::gateway::{ChatMessage, Gateway, GatewayError};
use crate::store::hash_parts;

pub const HIDDEN_STATES_PATH: &str = "/v1/hidden_states";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    Indices(Vec<u16>),
    All(AllLayers),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllLayers {
    All,
}

impl LayerSelection {
    pub fn all() -> Self {
        LayerSelection::All(AllLayers::All)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub layers: LayerSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVector {
    pub index: u16,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResponse {
    pub hidden_dim: usize,
    pub layers: Vec<LayerVector>,
}

impl ExtractionResponse {
    fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 {
            return Err("hidden_dim must be positive".into());
        }
        for l in &self.layers {
            if l.vector.len() != self.hidden_dim {
                return Err(format!(
                    "layer {} has {} values, expected {}",
                    l.index,
                    l.vector.len(),
                    self.hidden_dim
                ));
            }
            if l.vector.iter().any(|v| !v.is_finite()) {
                return Err(format!("layer {} has non-finite values", l.index));
            }
        }
        Ok(())
    }

    pub fn into_map(self) -> BTreeMap<u16, Vec<f32>> {
        self.layers.into_iter().map(|l| (l.index, l.vector)).collect()
    }
}

fn parse_response(body: &str) -> Result<ExtractionResponse, GatewayError> {
    let resp: ExtractionResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    resp.validate().map_err(GatewayError::Protocol)?;
    Ok(resp)
}

/// Client for the hidden-state service. Responses go through the gateway's
/// retry, rate-limit and cache machinery.
#[derive(Debug, Clone)]
pub struct HiddenStateClient {
    pub base_url: String,
    pub model_id: String,
}

impl HiddenStateClient {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        HiddenStateClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model_id: model_id.into(),
        }
    }

    pub fn request(&self, messages: &[ChatMessage], layers: LayerSelection) -> ExtractionRequest {
        ExtractionRequest {
            model_id: self.model_id.clone(),
            messages: messages.to_vec(),
            layers,
        }
    }

    pub fn cache_key(&self, req: &ExtractionRequest) -> String {
        let body = serde_json::to_string(req).expect("serializable request");
        hash_parts([b"hidden_states/v1".as_slice(), self.base_url.as_bytes(), body.as_bytes()])
    }

    pub fn extract(
        &self,
        gateway: &Gateway,
        messages: &[ChatMessage],
        layers: LayerSelection,
    ) -> Result<ExtractionResponse, ProbeError> {
        if messages.is_empty() {
            return Err(ProbeError::EmptyPrefix);
        }
        let req = self.request(messages, layers);
        let key = self.cache_key(&req);
        let body = serde_json::to_value(&req).expect("serializable request");
        let url = format!("{}{HIDDEN_STATES_PATH}", self.base_url);
        let (raw, _, _) = gateway.post_cached(&url, &self.base_url, &key, &body, parse_response)?;
        Ok(parse_response(&raw)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_selection_wire_shape() {
        assert_eq!(serde_json::to_string(&LayerSelection::all()).unwrap(), "\"all\"");
        assert_eq!(serde_json::to_string(&LayerSelection::Indices(vec![1, 4])).unwrap(), "[1,4]");
        let back: LayerSelection = serde_json::from_str("\"all\"").unwrap();
        assert_eq!(back, LayerSelection::all());
    }

    #[test]
    fn response_validation() {
        assert!(parse_response(r#"{"hidden_dim":2,"layers":[{"index":0,"vector":[1.0,2.0]}]}"#).is_ok());
        assert!(parse_response(r#"{"hidden_dim":3,"layers":[{"index":0,"vector":[1.0,2.0]}]}"#).is_err());
        assert!(parse_response(r#"{"hidden_dim":0,"layers":[]}"#).is_err());
    }

    #[test]
    fn cache_key_depends_on_layers() {
        let c = HiddenStateClient::new("http://x/", "m");
        let msgs = [ChatMessage::user("hi")];
        let a = c.cache_key(&c.request(&msgs, LayerSelection::all()));
        let b = c.cache_key(&c.request(&msgs, LayerSelection::Indices(vec![0])));
        assert_ne!(a, b);
        assert_eq!(a, c.cache_key(&c.request(&msgs, LayerSelection::all())));
    }
}
