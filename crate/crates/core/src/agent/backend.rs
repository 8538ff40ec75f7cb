//! LLM backends: the completion contract, the scripted mock, trace replay and the HTTP client.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::prompts::sha256_hex;
use super::AgentTrace;

pub const LLM_KEY_ENV: &str = "CONFLOOP_LLM_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("no scripted response for {0}")]
    NoScript(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend payload: {0}")]
    Payload(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Explain,
    Decompose,
    Reason,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Explain => "explain",
            Stage::Decompose => "decompose",
            Stage::Reason => "reason",
        }
    }
}

/// Where a call sits in the run; mocks route on it, HTTP backends ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallContext {
    pub iteration: usize,
    pub attempt: usize,
    pub stage: Stage,
    pub leaf_id: usize,
    pub sample: usize,
}

impl std::fmt::Display for CallContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "iteration {} stage {} leaf {}", self.iteration, self.stage.as_str(), self.leaf_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSchema {
    Narrative,
    SubQueries,
    Confounders,
}

impl ResponseSchema {
    pub fn name(&self) -> &'static str {
        match self {
            ResponseSchema::Narrative => "narrative",
            ResponseSchema::SubQueries => "subqueries",
            ResponseSchema::Confounders => "confounders",
        }
    }

    /// JSON Schema sent to backends that support constrained decoding.
    pub fn json_schema(&self) -> Value {
        match self {
            ResponseSchema::Narrative => json!({
                "type": "object",
                "properties": { "narrative": { "type": "string" } },
                "required": ["narrative"],
                "additionalProperties": false
            }),
            ResponseSchema::SubQueries => json!({
                "type": "object",
                "properties": {
                    "subqueries": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "properties": {
                                "text": { "type": "string" },
                                "source": { "type": "string", "enum": ["rag", "tool"] }
                            },
                            "required": ["text", "source"],
                            "additionalProperties": false
                        }
                    }
                },
                "required": ["subqueries"],
                "additionalProperties": false
            }),
            ResponseSchema::Confounders => json!({
                "type": "object",
                "properties": {
                    "confounders": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "properties": {
                                "covariate": { "type": "string" },
                                "rationale": { "type": "string" }
                            },
                            "required": ["covariate", "rationale"],
                            "additionalProperties": false
                        }
                    }
                },
                "required": ["confounders"],
                "additionalProperties": false
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub context: CallContext,
    pub prompt: String,
    pub schema: ResponseSchema,
}

/// A completion service returning the raw response text for a prompt.
///
/// Callers validate the text against the request schema and retry on failure.
pub trait AgentBackend: Send + Sync {
    fn name(&self) -> String;
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default)]
    pub iteration: Option<usize>,
    #[serde(default)]
    pub attempt: Option<usize>,
    pub stage: Stage,
    #[serde(default)]
    pub leaf_id: Option<usize>,
    /// Structured response, serialized as JSON text when served.
    #[serde(default)]
    pub response: Option<Value>,
    /// Verbatim text, for scripting malformed output.
    #[serde(default)]
    pub raw: Option<String>,
}

impl ScriptEntry {
    /// Match specificity, or `None` when the entry does not apply.
    fn specificity(&self, ctx: &CallContext) -> Option<u8> {
        if self.stage != ctx.stage {
            return None;
        }
        let mut score = 0;
        for (field, actual, weight) in [
            (self.iteration, ctx.iteration, 4),
            (self.attempt, ctx.attempt, 2),
            (self.leaf_id, ctx.leaf_id, 1),
        ] {
            match field {
                Some(v) if v == actual => score += weight,
                Some(_) => return None,
                None => {}
            }
        }
        Some(score)
    }

    fn body(&self) -> String {
        match (&self.raw, &self.response) {
            (Some(raw), _) => raw.clone(),
            (None, Some(v)) => v.to_string(),
            (None, None) => String::new(),
        }
    }
}

/// Mock fixture file: scripted responses keyed by (iteration, attempt, stage, leaf_id).
///
/// Absent keys are wildcards; the most specific matching entry wins
/// (iteration over attempt over leaf), earlier entries win ties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub name: String,
    pub responses: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))
    }

    /// One reason-stage list per iteration (1-based), then an empty list; canned explain/decompose.
    pub fn confounder_schedule(name: &str, schedule: &[&[&str]]) -> Self {
        let mut responses = vec![
            ScriptEntry {
                iteration: None,
                attempt: None,
                stage: Stage::Explain,
                leaf_id: None,
                response: Some(json!({ "narrative": "Scripted explanation of the subgroup." })),
                raw: None,
            },
            ScriptEntry {
                iteration: None,
                attempt: None,
                stage: Stage::Decompose,
                leaf_id: None,
                response: Some(json!({ "subqueries": [
                    { "text": "Which comorbidities influence both treatment choice and outcome in this subgroup?", "source": "rag" }
                ] })),
                raw: None,
            },
        ];
        for (i, names) in schedule.iter().enumerate() {
            let confounders: Vec<Value> = names
                .iter()
                .map(|n| json!({ "covariate": n, "rationale": format!("{n} plausibly affects both treatment and outcome.") }))
                .collect();
            responses.push(ScriptEntry {
                iteration: Some(i + 1),
                attempt: None,
                stage: Stage::Reason,
                leaf_id: None,
                response: Some(json!({ "confounders": confounders })),
                raw: None,
            });
        }
        responses.push(ScriptEntry {
            iteration: None,
            attempt: None,
            stage: Stage::Reason,
            leaf_id: None,
            response: Some(json!({ "confounders": [] })),
            raw: None,
        });
        Self { name: name.to_string(), responses }
    }

    pub fn lookup(&self, ctx: &CallContext) -> Option<&ScriptEntry> {
        let mut best: Option<(u8, &ScriptEntry)> = None;
        for entry in &self.responses {
            if let Some(s) = entry.specificity(ctx) {
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, entry));
                }
            }
        }
        best.map(|(_, e)| e)
    }
}

/// Deterministic offline backend serving a [`MockScript`]. Records every call.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    log: Mutex<Vec<CallContext>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script, log: Mutex::new(Vec::new()) }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(MockScript::load(path)?))
    }

    pub fn calls(&self) -> Vec<CallContext> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl AgentBackend for MockBackend {
    fn name(&self) -> String {
        format!("mock:{}", self.script.name)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.log.lock().expect("mock log poisoned").push(request.context);
        self.script
            .lookup(&request.context)
            .map(ScriptEntry::body)
            .ok_or_else(|| BackendError::NoScript(request.context.to_string()))
    }
}

/// Serves the responses recorded in agent traces, keyed by prompt hash, in recorded order.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    responses: Mutex<HashMap<String, VecDeque<Result<String, BackendError>>>>,
}

impl ReplayBackend {
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a AgentTrace>) -> Self {
        let mut map: HashMap<String, VecDeque<Result<String, BackendError>>> = HashMap::new();
        for trace in traces {
            for call in &trace.calls {
                let outcome = match (&call.response, &call.error) {
                    (Some(r), _) => Ok(r.clone()),
                    (None, Some(e)) => Err(BackendError::Transport(e.clone())),
                    (None, None) => Err(BackendError::Transport("empty recording".into())),
                };
                map.entry(call.prompt_hash.clone()).or_default().push_back(outcome);
            }
        }
        Self { responses: Mutex::new(map) }
    }
}

impl AgentBackend for ReplayBackend {
    fn name(&self) -> String {
        "replay".into()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let hash = sha256_hex(&request.prompt);
        let mut map = self.responses.lock().expect("replay map poisoned");
        map.get_mut(&hash)
            .and_then(VecDeque::pop_front)
            .unwrap_or_else(|| Err(BackendError::NoScript(format!("prompt {hash}"))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "llama3-med42-70b".into(),
            temperature: 0.0,
            timeout_secs: 120,
        }
    }
}

/// Chat-completion client: POSTs `{model, temperature, messages, response_format}`
/// with a bearer token from `CONFLOOP_LLM_KEY` and returns the first choice's content.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    config: HttpBackendConfig,
    key: Option<String>,
    agent: ureq::Agent,
}

const SYSTEM_PROMPT: &str = "You are a careful clinical epidemiology assistant. Answer with JSON that matches the requested schema and nothing else.";

impl HttpBackend {
    pub fn new(config: HttpBackendConfig, key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(true)
            .build()
            .into();
        Self { config, key, agent }
    }

    pub fn from_env(config: HttpBackendConfig) -> Self {
        let key = std::env::var(LLM_KEY_ENV).ok();
        Self::new(config, key)
    }

    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                { "role": "system", "content": SYSTEM_PROMPT },
                { "role": "user", "content": request.prompt }
            ],
            "response_format": {
                "type": "json_schema",
                "json_schema": { "name": request.schema.name(), "schema": request.schema.json_schema(), "strict": true }
            }
        })
    }
}

impl AgentBackend for HttpBackend {
    fn name(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(self.request_body(request))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let body: Value = response.body_mut().read_json().map_err(|e| BackendError::Payload(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Payload("missing choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn ctx(iteration: usize, stage: Stage, leaf_id: usize) -> CallContext {
        CallContext { iteration, attempt: 0, stage, leaf_id, sample: 0 }
    }

    #[test]
    fn lookup_prefers_specific_entries() {
        let mut script = MockScript::confounder_schedule("t", &[&["HTN"], &["DM"]]);
        script.responses.push(ScriptEntry {
            iteration: Some(2),
            attempt: None,
            stage: Stage::Reason,
            leaf_id: Some(3),
            response: None,
            raw: Some("not json".into()),
        });
        let body = |c| script.lookup(&c).map(ScriptEntry::body).unwrap();
        assert!(body(ctx(1, Stage::Reason, 0)).contains("HTN"));
        assert!(body(ctx(2, Stage::Reason, 0)).contains("DM"));
        assert_eq!(body(ctx(2, Stage::Reason, 3)), "not json");
        assert_eq!(body(ctx(9, Stage::Reason, 0)), r#"{"confounders":[]}"#);
        assert!(body(ctx(5, Stage::Explain, 1)).contains("narrative"));
    }

    #[test]
    fn mock_reports_missing_script() {
        let backend = MockBackend::new(MockScript::default());
        let req = CompletionRequest { context: ctx(1, Stage::Explain, 0), prompt: "p".into(), schema: ResponseSchema::Narrative };
        assert!(matches!(backend.complete(&req), Err(BackendError::NoScript(_))));
        assert_eq!(backend.calls().len(), 1);
    }

    #[test]
    fn script_file_round_trips() {
        let script = MockScript::confounder_schedule("med42", &[&["HTN", "CHF"]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mock.json");
        std::fs::write(&path, serde_json::to_string_pretty(&script).unwrap()).unwrap();
        assert_eq!(MockScript::load(&path).unwrap(), script);
    }

    #[test]
    fn http_backend_posts_chat_completion() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let reply = json!({ "choices": [{ "message": { "role": "assistant", "content": "{\"narrative\":\"ok\"}" } }] }).to_string();
            write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}", reply.len(), reply).unwrap();
            (headers, String::from_utf8(body).unwrap())
        });
        let backend = HttpBackend::new(
            HttpBackendConfig { endpoint: format!("http://{addr}/v1/chat/completions"), ..Default::default() },
            Some("secret".into()),
        );
        let req = CompletionRequest { context: ctx(1, Stage::Explain, 0), prompt: "hello".into(), schema: ResponseSchema::Narrative };
        assert_eq!(backend.complete(&req).unwrap(), r#"{"narrative":"ok"}"#);
        let (headers, body) = server.join().unwrap();
        assert!(headers.iter().any(|h| h.to_ascii_lowercase().starts_with("authorization: bearer secret")));
        let body: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(body["messages"][1]["content"], "hello");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["response_format"]["json_schema"]["name"], "narrative");
    }
}
