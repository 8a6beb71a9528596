//! Token and dollar estimates for chat-completion runs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Characters per token assumed by [`estimate_tokens`].
pub const CHARS_PER_TOKEN: usize = 4;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("reading pricing file {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("invalid pricing JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("negative price for model {0}")]
    NegativePrice(String),
    #[error("duplicate pricing entry for model {0}")]
    DuplicateModel(String),
    #[error("no pricing entry for model {0}")]
    UnknownModel(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PricingConfig {
    pub model: String,
    pub input_price_per_1k: f64,
    pub output_price_per_1k: f64,
}

impl PricingConfig {
    pub fn new(
        model: impl Into<String>,
        input_price_per_1k: f64,
        output_price_per_1k: f64,
    ) -> Result<Self, PricingError> {
        let p = Self {
            model: model.into(),
            input_price_per_1k,
            output_price_per_1k,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), PricingError> {
        // NaN fails this comparison as well.
        if !(self.input_price_per_1k >= 0.0 && self.output_price_per_1k >= 0.0) {
            return Err(PricingError::NegativePrice(self.model.clone()));
        }
        Ok(())
    }
}

/// Parse a pricing file: a JSON array of [`PricingConfig`] objects.
pub fn parse_pricing(json: &str) -> Result<Vec<PricingConfig>, PricingError> {
    let entries: Vec<PricingConfig> = serde_json::from_str(json)?;
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        e.validate()?;
        if !seen.insert(e.model.as_str()) {
            return Err(PricingError::DuplicateModel(e.model.clone()));
        }
    }
    Ok(entries)
}

pub fn load_pricing(path: &Path) -> Result<Vec<PricingConfig>, PricingError> {
    let text = std::fs::read_to_string(path).map_err(|source| PricingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pricing(&text)
}

pub fn find_pricing<'a>(table: &'a [PricingConfig], model: &str) -> Result<&'a PricingConfig, PricingError> {
    table
        .iter()
        .find(|p| p.model == model)
        .ok_or_else(|| PricingError::UnknownModel(model.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub n_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_cost: f64,
}

/// Counts tokens in a piece of text. The default is the character heuristic;
/// a real tokenizer can be plugged in here.
pub trait TokenCounter {
    fn count(&self, text: &str) -> u64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CharHeuristic;

impl TokenCounter for CharHeuristic {
    fn count(&self, text: &str) -> u64 {
        estimate_tokens(text)
    }
}

/// Approximate token count: `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> u64 {
    text.chars().count().div_ceil(CHARS_PER_TOKEN) as u64
}

pub fn estimate_cost(n_calls: u64, avg_in: u64, avg_out: u64, pricing: &PricingConfig) -> CostEstimate {
    let input_tokens = n_calls * avg_in;
    let output_tokens = n_calls * avg_out;
    let total_cost = (input_tokens as f64 * pricing.input_price_per_1k
        + output_tokens as f64 * pricing.output_price_per_1k)
        / 1000.0;
    CostEstimate {
        n_calls,
        input_tokens,
        output_tokens,
        total_cost,
    }
}

/// Average token counts of sample prompts and replies, rounded up.
pub fn average_tokens<S: AsRef<str>>(texts: &[S], counter: &dyn TokenCounter) -> u64 {
    if texts.is_empty() {
        return 0;
    }
    let total: u64 = texts.iter().map(|t| counter.count(t.as_ref())).sum();
    total.div_ceil(texts.len() as u64)
}
