use std::collections::VecDeque;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::layout::{BBox, Raster};

use super::prompt::{PromptDocument, PREAMBLE};
use super::response::{canonical_bbox_json, parse_response, PredictorResponse, ResponseStatus};

pub const ENV_BASE_URL: &str = "BOXPLACE_BASE_URL";
pub const ENV_API_KEY: &str = "BOXPLACE_API_KEY";
pub const ENV_MODEL: &str = "BOXPLACE_MODEL";
pub const ENV_TIMEOUT_SECS: &str = "BOXPLACE_TIMEOUT_SECS";
pub const ENV_RETRIES: &str = "BOXPLACE_RETRIES";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("unauthorized")]
    Unauthorized,
    #[error("fatal: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("predictor unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: usize, last: String },
    #[error("unauthorized")]
    Unauthorized,
    #[error("predictor error: {0}")]
    Fatal(String),
}

/// One chat request: preamble, image (sent first) and the record array.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub layout_id: String,
    pub preamble: String,
    pub image_png: Vec<u8>,
    pub prompt_json: String,
}

pub fn encode_png(raster: &Raster) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&raster.pixels).expect("in-memory png data");
    }
    out
}

impl ChatRequest {
    pub fn from_prompt(doc: &PromptDocument) -> Self {
        Self {
            layout_id: doc.layout_id.clone(),
            preamble: PREAMBLE.to_string(),
            image_png: encode_png(&doc.image),
            prompt_json: doc.records_json(),
        }
    }

    /// OpenAI-style chat-completions body.
    pub fn to_chat_body(&self, model: &str) -> serde_json::Value {
        let image = base64::engine::general_purpose::STANDARD.encode(&self.image_png);
        json!({
            "model": model,
            "temperature": 0,
            "messages": [
                { "role": "system", "content": self.preamble },
                { "role": "user", "content": [
                    { "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{image}") } },
                    { "type": "text", "text": self.prompt_json },
                ]},
            ],
        })
    }
}

pub trait PredictorEndpoint: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retries: usize,
}

impl EndpointConfig {
    /// Reads the endpoint variables; the base URL and model are required.
    pub fn from_env() -> Result<Self, String> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let base_url = var(ENV_BASE_URL).ok_or(format!("{ENV_BASE_URL} is not set"))?;
        let model = var(ENV_MODEL).ok_or(format!("{ENV_MODEL} is not set"))?;
        let timeout = match var(ENV_TIMEOUT_SECS) {
            Some(v) => v.parse::<f64>().map_err(|_| format!("{ENV_TIMEOUT_SECS}: bad number {v:?}"))?,
            None => 60.0,
        };
        let retries = match var(ENV_RETRIES) {
            Some(v) => v.parse().map_err(|_| format!("{ENV_RETRIES}: bad count {v:?}"))?,
            None => 3,
        };
        Ok(Self { base_url, api_key: var(ENV_API_KEY), model, timeout: Duration::from_secs_f64(timeout), retries })
    }
}

/// JSON-over-HTTP chat-completions endpoint.
pub struct HttpEndpoint {
    config: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self { config, agent }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }
}

impl PredictorEndpoint for HttpEndpoint {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let reply = match req.send_json(request.to_chat_body(&self.config.model)) {
            Ok(r) => r,
            Err(ureq::Error::Status(401 | 403, _)) => return Err(TransportError::Unauthorized),
            Err(ureq::Error::Status(code, r)) if code == 408 || code == 429 || code >= 500 => {
                return Err(TransportError::Transient(format!("HTTP {code} {}", r.status_text())))
            }
            Err(ureq::Error::Status(code, r)) => {
                return Err(TransportError::Fatal(format!("HTTP {code} {}", r.status_text())))
            }
            Err(e) => return Err(TransportError::Transient(e.to_string())),
        };
        let body: serde_json::Value = reply.into_json().map_err(|e| TransportError::Transient(e.to_string()))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Fatal("reply has no choices[0].message.content".into()))
    }
}

/// Deterministic endpoint that replays a script, then repeats a fallback.
pub struct MockEndpoint {
    name: String,
    script: Mutex<VecDeque<Result<String, TransportError>>>,
    fallback: Result<String, TransportError>,
    calls: AtomicUsize,
}

impl MockEndpoint {
    pub fn scripted(script: Vec<Result<String, TransportError>>, fallback: Result<String, TransportError>) -> Self {
        Self { name: "mock".into(), script: Mutex::new(script.into()), fallback, calls: AtomicUsize::new(0) }
    }

    pub fn reply(text: impl Into<String>) -> Self {
        Self::scripted(Vec::new(), Ok(text.into()))
    }

    /// Always answers with the canonical JSON for `bbox`.
    pub fn fixed(bbox: BBox) -> Self {
        Self::reply(canonical_bbox_json(&bbox))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl PredictorEndpoint for MockEndpoint {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, _request: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let next = self.script.lock().expect("mock script lock").pop_front();
        next.unwrap_or_else(|| self.fallback.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: usize,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(8) }
    }
}

impl RetryPolicy {
    pub fn immediate(retries: usize) -> Self {
        Self { retries, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    pub fn delay(&self, retry: usize) -> Duration {
        let factor = 1u32.checked_shl(retry.min(31) as u32).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub response: PredictorResponse,
    pub retries: usize,
    pub latency: Duration,
}

/// Sends one request, retrying transient failures with exponential backoff.
pub fn query_predictor(
    request: &ChatRequest,
    endpoint: &dyn PredictorEndpoint,
    policy: &RetryPolicy,
) -> Result<QueryOutcome, QueryError> {
    let start = Instant::now();
    let mut retries = 0;
    loop {
        match endpoint.complete(request) {
            Ok(text) => {
                return Ok(QueryOutcome { response: parse_response(&text), retries, latency: start.elapsed() })
            }
            Err(TransportError::Unauthorized) => return Err(QueryError::Unauthorized),
            Err(TransportError::Fatal(m)) => return Err(QueryError::Fatal(m)),
            Err(TransportError::Transient(m)) => {
                if retries >= policy.retries {
                    return Err(QueryError::Unavailable { attempts: retries + 1, last: m });
                }
                log::warn!("{}: transient failure ({m}), retry {}", request.layout_id, retries + 1);
                std::thread::sleep(policy.delay(retries));
                retries += 1;
            }
        }
    }
}

/// Queries every request with at most `concurrency` in flight; results keep
/// the input order.
pub fn query_many(
    requests: &[ChatRequest],
    endpoint: &dyn PredictorEndpoint,
    policy: &RetryPolicy,
    concurrency: usize,
) -> Vec<Result<QueryOutcome, QueryError>> {
    let slots: Vec<Mutex<Option<Result<QueryOutcome, QueryError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = concurrency.clamp(1, requests.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                let result = query_predictor(req, endpoint, policy);
                *slots[i].lock().expect("result slot") = Some(result);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("result slot").expect("every slot filled")).collect()
}

/// One request/response pair for the JSON Lines transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub layout_id: String,
    pub predictor: String,
    pub prompt: String,
    pub raw: Option<String>,
    pub status: Option<ResponseStatus>,
    pub parsed: Option<BBox>,
    pub retries: usize,
    pub latency_ms: f64,
    pub error: Option<String>,
}

impl TranscriptEntry {
    pub fn new(request: &ChatRequest, predictor: &str, result: &Result<QueryOutcome, QueryError>) -> Self {
        let mut e = Self {
            layout_id: request.layout_id.clone(),
            predictor: predictor.to_string(),
            prompt: request.prompt_json.clone(),
            raw: None,
            status: None,
            parsed: None,
            retries: 0,
            latency_ms: 0.0,
            error: None,
        };
        match result {
            Ok(o) => {
                e.raw = Some(o.response.raw.clone());
                e.status = Some(o.response.status);
                e.parsed = o.response.parsed;
                e.retries = o.retries;
                e.latency_ms = o.latency.as_secs_f64() * 1e3;
            }
            Err(err) => e.error = Some(err.to_string()),
        }
        e
    }
}

pub fn write_transcripts(entries: &[TranscriptEntry], out: &mut impl Write) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Element, Layout};
    use crate::vlm::serialize_prompt;

    fn request() -> ChatRequest {
        let l = Layout {
            id: "q".into(),
            canvas_width: 8,
            canvas_height: 8,
            elements: vec![Element::text("hi", BBox::new(0.1, 0.1, 0.2, 0.2), [0, 0, 0], 0)],
            target_index: 0,
        };
        ChatRequest::from_prompt(&serialize_prompt(&l).unwrap())
    }

    #[test]
    fn fixed_mock_echoes_its_box() {
        let b = BBox::new(0.1, 0.2, 0.3, 0.4);
        let out = query_predictor(&request(), &MockEndpoint::fixed(b), &RetryPolicy::immediate(0)).unwrap();
        assert_eq!(out.response.parsed, Some(b));
        assert_eq!(out.response.status, ResponseStatus::Valid);
        assert_eq!(out.retries, 0);
    }

    #[test]
    fn prose_is_invalid_format() {
        let out = query_predictor(&request(), &MockEndpoint::reply("I cannot help"), &RetryPolicy::immediate(0)).unwrap();
        assert_eq!(out.response.status, ResponseStatus::InvalidFormat);
    }

    #[test]
    fn transient_failures_are_retried() {
        let flaky = || TransportError::Transient("503".into());
        let mock = MockEndpoint::scripted(vec![Err(flaky()), Err(flaky())], Ok(canonical_bbox_json(&BBox::FULL)));
        let out = query_predictor(&request(), &mock, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(out.retries, 2);
        assert_eq!(out.response.status, ResponseStatus::Valid);
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn exhausted_retries_are_unavailable() {
        let mock = MockEndpoint::scripted(vec![], Err(TransportError::Transient("down".into())));
        let err = query_predictor(&request(), &mock, &RetryPolicy::immediate(2)).unwrap_err();
        assert!(err.to_string().starts_with("predictor unavailable"), "{err}");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn auth_failures_are_not_retried() {
        let mock = MockEndpoint::scripted(vec![], Err(TransportError::Unauthorized));
        assert_eq!(query_predictor(&request(), &mock, &RetryPolicy::immediate(5)), Err(QueryError::Unauthorized));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn backoff_doubles_up_to_the_cap() {
        let p = RetryPolicy { retries: 9, base_delay: Duration::from_millis(100), max_delay: Duration::from_millis(500) };
        let d: Vec<u128> = (0..5).map(|r| p.delay(r).as_millis()).collect();
        assert_eq!(d, vec![100, 200, 400, 500, 500]);
    }

    #[test]
    fn many_queries_keep_order() {
        let reqs: Vec<ChatRequest> = (0..7)
            .map(|i| ChatRequest { layout_id: format!("r{i}"), ..request() })
            .collect();
        let mock = MockEndpoint::fixed(BBox::new(0.2, 0.2, 0.2, 0.2));
        let out = query_many(&reqs, &mock, &RetryPolicy::immediate(0), 3);
        assert_eq!(out.len(), 7);
        assert!(out.iter().all(|r| r.as_ref().unwrap().response.status == ResponseStatus::Valid));
        assert!(query_many(&[], &mock, &RetryPolicy::immediate(0), 3).is_empty());
    }

    #[test]
    fn chat_body_puts_the_image_before_the_records() {
        let body = request().to_chat_body("m");
        let content = &body["messages"][1]["content"];
        assert_eq!(content[0]["type"], "image_url");
        assert!(content[0]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
        assert_eq!(content[1]["type"], "text");
    }

    #[test]
    fn transcripts_are_json_lines() {
        let req = request();
        let ok = query_predictor(&req, &MockEndpoint::fixed(BBox::FULL), &RetryPolicy::immediate(0));
        let err: Result<QueryOutcome, QueryError> = Err(QueryError::Unauthorized);
        let entries = vec![TranscriptEntry::new(&req, "mock", &ok), TranscriptEntry::new(&req, "mock", &err)];
        let mut buf = Vec::new();
        write_transcripts(&entries, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<TranscriptEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, entries);
    }
}
