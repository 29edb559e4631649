use std::collections::BTreeMap;

use super::{BackendKind, EmbeddingVector, GatewayError, LmBackend, TokenScore};
use crate::promptkit::{RenderedPrompt, TEST_TAG_PREFIX};

pub const MOCK_EMBEDDING_DIMS: usize = 26;

/// Deterministic offline backend with hand-checkable rules.
///
/// * generation: look up the test id from the prompt's trailing `# test:<id>`
///   line in a prediction table; otherwise return the fallback text.
/// * scoring: split the continuation on single spaces; each token scores
///   `-0.1 * chars`.
/// * embedding: 26 case-insensitive counts of the letters `a..=z`.
#[derive(Debug, Clone)]
pub struct MockBackend {
    model_name: String,
    predictions: BTreeMap<String, String>,
    fallback: String,
}

impl MockBackend {
    pub fn new(fallback: impl Into<String>) -> Self {
        Self {
            model_name: "mock".into(),
            predictions: BTreeMap::new(),
            fallback: fallback.into(),
        }
    }

    /// Fallback is the task's first label (or `[]` for extraction tasks).
    pub fn for_task(spec: &crate::corpus::TaskSpec) -> Self {
        Self::new(spec.label_set.first().cloned().unwrap_or_else(|| "[]".into()))
    }

    pub fn with_model_name(mut self, name: impl Into<String>) -> Self {
        self.model_name = name.into();
        self
    }

    pub fn with_predictions(mut self, table: BTreeMap<String, String>) -> Self {
        self.predictions = table;
        self
    }

    pub fn insert_prediction(&mut self, test_id: impl Into<String>, text: impl Into<String>) {
        self.predictions.insert(test_id.into(), text.into());
    }

    pub fn mock_logprob(token: &str) -> f64 {
        -0.1 * token.chars().count() as f64
    }

    pub fn mock_embedding(text: &str) -> Vec<f64> {
        let mut counts = vec![0.0; MOCK_EMBEDDING_DIMS];
        for c in text.chars() {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_lowercase() {
                counts[(c as u8 - b'a') as usize] += 1.0;
            }
        }
        counts
    }
}

/// Test id carried by the trailing tag line of a mock-rendered prompt.
pub fn tagged_test_id(text: &str) -> Option<&str> {
    text.rsplit('\n').next()?.strip_prefix(TEST_TAG_PREFIX)
}

impl LmBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn generate(&self, prompt: &RenderedPrompt) -> Result<String, GatewayError> {
        let text = tagged_test_id(&prompt.text)
            .and_then(|id| self.predictions.get(id))
            .unwrap_or(&self.fallback);
        Ok(text.clone())
    }

    fn score_continuation(&self, _prompt: &str, continuation: &str) -> Result<Vec<TokenScore>, GatewayError> {
        if continuation.is_empty() {
            return Err(GatewayError::Precondition("empty continuation".into()));
        }
        Ok(continuation
            .split(' ')
            .map(|t| TokenScore::new(t, Self::mock_logprob(t)))
            .collect())
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::Precondition("empty text".into()));
        }
        EmbeddingVector::from_wire(Self::mock_embedding(text))
    }
}
