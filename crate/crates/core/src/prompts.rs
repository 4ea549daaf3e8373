//! Bundled prompt strings: the default system prompt and the user prompt
//! pools for dense captioning and temporal grounding.

use std::sync::OnceLock;

use serde::Deserialize;

/// Slot replaced by the query text in grounding prompts.
pub const QUERY_SLOT: &str = "%s";

#[derive(Debug, Deserialize)]
pub struct PromptPools {
    pub system_prompt: String,
    pub dense_captioning: Vec<String>,
    pub grounding: Vec<String>,
}

static POOLS: OnceLock<PromptPools> = OnceLock::new();

pub fn pools() -> &'static PromptPools {
    POOLS.get_or_init(|| {
        serde_json::from_str(include_str!("../resources/prompts.json"))
            .expect("bundled prompts.json is valid")
    })
}

pub fn system_prompt() -> &'static str {
    &pools().system_prompt
}

pub fn dense_captioning_prompts() -> &'static [String] {
    &pools().dense_captioning
}

pub fn grounding_prompts() -> &'static [String] {
    &pools().grounding
}

/// Fills the query slot of a grounding prompt.
pub fn format_grounding(prompt: &str, query: &str) -> String {
    prompt.replacen(QUERY_SLOT, query, 1)
}
