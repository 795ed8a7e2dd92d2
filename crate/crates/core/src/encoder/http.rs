use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EncodeRequest, EncoderBackend, Pooling};
use crate::error::{Error, Result};

#[derive(Debug, Serialize)]
struct EncodeBody<'a> {
    template_id: &'a str,
    text: &'a str,
    placeholders: &'a [Vec<f64>],
    pooling: Pooling,
}

#[derive(Debug, Deserialize)]
struct EncodeResponse {
    embedding: Vec<f64>,
    dim: usize,
}

#[derive(Debug, Deserialize)]
struct InfoResponse {
    name: String,
    dim: usize,
}

/// Client for a remote encoder speaking the JSON protocol:
///
/// - `GET  /v1/info`   → `{"name": str, "dim": int}`
/// - `POST /v1/encode` ← `{"template_id", "text", "placeholders", "pooling"}`
///   → `{"embedding": [...], "dim": int}`
pub struct HttpBackend {
    base: String,
    name: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Perform the `/v1/info` handshake against `endpoint` (e.g.
    /// `http://127.0.0.1:8080`).
    pub fn connect(endpoint: &str) -> Result<Self> {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(120))
            .build();
        let base = endpoint.trim_end_matches('/').to_string();
        let info: InfoResponse = agent
            .get(&format!("{base}/v1/info"))
            .call()
            .map_err(map_err)?
            .into_json()
            .map_err(|e| Error::Encoder(format!("malformed /v1/info response: {e}")))?;
        if info.dim == 0 {
            return Err(Error::Encoder("remote encoder reports dimension 0".into()));
        }
        Ok(Self { base, name: info.name, dim: info.dim, agent })
    }
}

fn map_err(e: ureq::Error) -> Error {
    match e {
        ureq::Error::Status(code, resp) if code >= 500 || code == 429 => {
            Error::Transport(format!("HTTP {code} from {}", resp.get_url()))
        }
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            Error::Encoder(format!("HTTP {code}: {body}"))
        }
        ureq::Error::Transport(t) => Error::Transport(t.to_string()),
    }
}

impl EncoderBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, req: &EncodeRequest<'_>) -> Result<Vec<f64>> {
        let body = EncodeBody {
            template_id: req.template_id,
            text: req.text,
            placeholders: req.placeholders,
            pooling: req.pooling,
        };
        let resp: EncodeResponse = self
            .agent
            .post(&format!("{}/v1/encode", self.base))
            .send_json(&body)
            .map_err(map_err)?
            .into_json()
            .map_err(|e| Error::Encoder(format!("malformed /v1/encode response: {e}")))?;
        if resp.dim != resp.embedding.len() || resp.dim != self.dim {
            return Err(Error::Encoder(format!(
                "remote returned dim {} with {} values; handshake dim is {}",
                resp.dim,
                resp.embedding.len(),
                self.dim
            )));
        }
        Ok(resp.embedding)
    }
}
