//! Embedding backends, the persistent embedding cache, and graph
//! tokenization into node and relation tokens.

mod cache;
mod http;
mod mock;
mod table;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, EmbeddingCache};
pub use http::HttpBackend;
pub use mock::MockBackend;
pub use table::{
    pooled_node_token, relation_token, tokenize_graph, tokenize_graph_with_nodes, TokenTable,
    TokenizeConfig, TokenizeStats,
};

use crate::error::{Error, Result};
use crate::prompt::BoundPrompt;

/// Template id used for plain node-text encodings.
pub const NODE_TEXT_TEMPLATE: &str = "node_text";

/// Which hidden state a remote model should return for a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Last,
    #[default]
    Mean,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Last => "last",
            Pooling::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncodeRequest<'a> {
    pub template_id: &'a str,
    pub text: &'a str,
    pub placeholders: &'a [Vec<f64>],
    pub pooling: Pooling,
}

/// A model that maps text (optionally with injected placeholder embeddings)
/// to a fixed-size vector.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, req: &EncodeRequest<'_>) -> Result<Vec<f64>>;
}

/// A backend plus cache and call accounting. Every cache miss is one
/// backend call.
pub struct Encoder {
    backend: Arc<dyn EncoderBackend>,
    cache: Arc<EmbeddingCache>,
    pooling: Pooling,
    calls: AtomicU64,
    hits: AtomicU64,
}

impl Encoder {
    pub fn new(backend: Arc<dyn EncoderBackend>, cache: Arc<EmbeddingCache>) -> Self {
        Self::with_pooling(backend, cache, Pooling::default())
    }

    pub fn with_pooling(
        backend: Arc<dyn EncoderBackend>,
        cache: Arc<EmbeddingCache>,
        pooling: Pooling,
    ) -> Self {
        Self {
            backend,
            cache,
            pooling,
            calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.backend.dim()
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    /// Encode plain node text. Returns the vector and whether the backend
    /// was called.
    pub fn encode_text(&self, text: &str) -> Result<(Arc<[f64]>, bool)> {
        if text.is_empty() {
            return Err(Error::Encoder("cannot encode empty text".into()));
        }
        self.encode_raw(NODE_TEXT_TEMPLATE, text, &[])
    }

    pub fn encode_prompt(&self, bound: &BoundPrompt) -> Result<(Arc<[f64]>, bool)> {
        self.encode_raw(
            bound.prompt.template_id.as_str(),
            &bound.prompt.rendered_text,
            &bound.placeholder_vectors,
        )
    }

    fn encode_raw(
        &self,
        template_id: &str,
        text: &str,
        placeholders: &[Vec<f64>],
    ) -> Result<(Arc<[f64]>, bool)> {
        let key = cache_key(self.backend.name(), template_id, text, placeholders);
        if let Some(v) = self.cache.get(key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok((v, false));
        }
        let req = EncodeRequest {
            template_id,
            text,
            placeholders,
            pooling: self.pooling,
        };
        let v = self.backend.encode(&req)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        if v.len() != self.backend.dim() {
            return Err(Error::Encoder(format!(
                "backend `{}` returned {} values, expected {}",
                self.backend.name(),
                v.len(),
                self.backend.dim()
            )));
        }
        Ok((self.cache.insert(key, v), true))
    }
}
