//! Newline-delimited JSON protocol.

use serde::{Deserialize, Serialize};

use dnd_core::tensor::Tensor;

pub const WIRE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub v: u32,
    pub client_id: String,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl WireRequest {
    pub fn from_tensor(client_id: &str, x: &Tensor) -> Self {
        let s = x.shape();
        WireRequest {
            v: WIRE_VERSION,
            client_id: client_id.to_string(),
            h: s[s.len() - 2],
            w: s[s.len() - 1],
            pixels: x.data().to_vec(),
        }
    }

    /// Checks the request against the served input shape `[1, h, w]` and
    /// returns the image.
    pub fn validate(&self, input_shape: &[usize]) -> Option<Tensor> {
        let [c, h, w] = input_shape else { return None };
        let ok = self.v == WIRE_VERSION
            && !self.client_id.is_empty()
            && *c == 1
            && self.h == *h
            && self.w == *w
            && self.pixels.len() == h * w
            && self.pixels.iter().all(|p| (0.0..=1.0).contains(p));
        if !ok {
            return None;
        }
        Tensor::new(input_shape.to_vec(), self.pixels.clone()).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireError {
    Parse,
    InvalidInput,
    /// The request was valid but inference failed.
    Internal,
}

/// Field order here is the order on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Answer {
        v: u32,
        request_id: String,
        label: i64,
        confidence: f64,
    },
    Error {
        v: u32,
        error: WireError,
    },
}

impl WireResponse {
    pub fn error(kind: WireError) -> Self {
        WireResponse::Error {
            v: WIRE_VERSION,
            error: kind,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("response serializes");
        s.push('\n');
        s
    }

    pub fn label(&self) -> Option<i64> {
        match self {
            WireResponse::Answer { label, .. } => Some(*label),
            WireResponse::Error { .. } => None,
        }
    }
}

/// Syntactically broken JSON is a parse error; well-formed JSON that does not
/// fit the request schema is invalid input.
pub fn parse_request(line: &str) -> Result<WireRequest, WireError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|_| WireError::Parse)?;
    serde_json::from_value(value).map_err(|_| WireError::InvalidInput)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn responses_have_exact_wire_form() {
        let a = WireResponse::Answer {
            v: 1,
            request_id: "c-0".into(),
            label: 3,
            confidence: 0.5,
        };
        assert_eq!(
            a.to_line(),
            "{\"v\":1,\"request_id\":\"c-0\",\"label\":3,\"confidence\":0.5}\n"
        );
        assert_eq!(
            WireResponse::error(WireError::Parse).to_line(),
            "{\"v\":1,\"error\":\"parse\"}\n"
        );
        assert_eq!(
            WireResponse::error(WireError::InvalidInput).to_line(),
            "{\"v\":1,\"error\":\"invalid_input\"}\n"
        );
    }

    #[test]
    fn request_classification() {
        assert_eq!(parse_request("{\"v\":1,"), Err(WireError::Parse));
        assert_eq!(parse_request("[1,2]"), Err(WireError::InvalidInput));
        assert_eq!(
            parse_request("{\"v\":1,\"client_id\":\"a\",\"h\":-1,\"w\":2,\"pixels\":[]}"),
            Err(WireError::InvalidInput)
        );
        let r = parse_request("{\"v\":1,\"client_id\":\"a\",\"h\":1,\"w\":2,\"pixels\":[0.0,1.0]}")
            .unwrap();
        assert!(r.validate(&[1, 1, 2]).is_some());
        assert!(r.validate(&[1, 2, 1]).is_none());
        let bad = WireRequest {
            pixels: vec![0.0, 1.5],
            ..r.clone()
        };
        assert!(bad.validate(&[1, 1, 2]).is_none());
        let v2 = WireRequest { v: 2, ..r };
        assert!(v2.validate(&[1, 1, 2]).is_none());
    }
}
