//! Prompt protocol for external vision-language predictors: layout
//! serialization, response parsing and a retrying chat-endpoint client.

mod client;
mod prompt;
mod response;

use thiserror::Error;

pub use client::{
    encode_png, query_many, query_predictor, write_transcripts, ChatRequest, EndpointConfig, HttpEndpoint,
    MockEndpoint, PredictorEndpoint, QueryError, QueryOutcome, RetryPolicy, TranscriptEntry, TransportError,
    ENV_API_KEY, ENV_BASE_URL, ENV_MODEL, ENV_RETRIES, ENV_TIMEOUT_SECS,
};
pub use prompt::{
    serialize_prompt, serialize_prompt_with, PromptDocument, PromptOptions, PromptRecord, RecordOrder, BLANK,
    DEFAULT_IMAGE_SIDE, PREAMBLE, PREAMBLE_VERSION,
};
pub use response::{
    canonical_bbox_json, parse_response, tally_invalid, InvalidTally, PredictorResponse, ResponseStatus,
};

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Render(#[from] crate::layout::LayoutError),
}
