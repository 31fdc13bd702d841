//! Clients for the generative QA model and the embedding model.
//!
//! Requests are rendered through a named [`PromptTemplate`] and sent to a
//! [`Backend`]. Two backends exist: a JSON-over-HTTP client and a deterministic
//! stub used for hermetic runs. Embeddings follow the same split.

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scene::{Dimension, SceneElaboration, SceneError};

pub const ENV_GEN_URL: &str = "GATEWAY_GEN_URL";
pub const ENV_EMB_URL: &str = "GATEWAY_EMB_URL";
pub const ENV_TIMEOUT_MS: &str = "GATEWAY_TIMEOUT_MS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint {url} unreachable: {detail} (prompt: {prompt:?})")]
    EndpointUnreachable {
        url: String,
        detail: String,
        prompt: String,
    },
    #[error("request to {url} timed out (prompt: {prompt:?})")]
    Timeout { url: String, prompt: String },
    #[error("malformed response: {detail} (prompt: {prompt:?})")]
    MalformedResponse { detail: String, prompt: String },
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model output is not a valid elaboration component: {0}")]
    Component(#[from] SceneError),
    #[error("gateway config: {0}")]
    Config(String),
}

impl GatewayError {
    /// Whether a retry may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            GatewayError::EndpointUnreachable { .. } | GatewayError::Timeout { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub question: String,
    pub context: Option<String>,
    pub options: Option<Vec<String>>,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl GenerationRequest {
    pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 64;

    pub fn new(question: impl Into<String>) -> Result<Self, GatewayError> {
        let question = question.into();
        if question.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("question is empty".into()));
        }
        Ok(GenerationRequest {
            question,
            context: None,
            options: None,
            max_output_tokens: Self::DEFAULT_MAX_OUTPUT_TOKENS,
            temperature: 0.0,
        })
    }

    /// Empty context is treated as no context.
    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        let context = context.into();
        self.context = (!context.is_empty()).then_some(context);
        self
    }

    pub fn with_options(mut self, options: Vec<String>) -> Result<Self, GatewayError> {
        if options.len() < 2 {
            return Err(GatewayError::InvalidRequest(format!(
                "{} options given, need at least 2",
                options.len()
            )));
        }
        self.options = Some(options);
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub answer: String,
    pub raw: String,
    pub latency_ms: u64,
}

/// Letter labels for rendered options: (A), (B), ...
pub fn option_letter(i: usize) -> char {
    (b'A' + (i % 26) as u8) as char
}

pub fn render_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {}", option_letter(i), o))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A prompt layout with `{question}`, `{context}` and `{options}` slots.
///
/// `{?context}...{/context}` and `{?options}...{/options}` enclose text that
/// is emitted only when the request carries that field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    body: String,
}

const MACAW_ANGLES: &str =
    "$answer${?options} ; $mcoptions$ = {options}{/options}{?context} ; $context$ = {context}{/context} ; $question$ = {question}";
const PLAIN_QA: &str =
    "{?context}Context: {context}\n{/context}Question: {question}{?options}\nOptions: {options}{/options}\nAnswer:";

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self, GatewayError> {
        let t = PromptTemplate {
            name: name.into(),
            body: body.into(),
        };
        if !t.body.contains("{question}") {
            return Err(GatewayError::Config(format!(
                "template `{}` has no {{question}} slot",
                t.name
            )));
        }
        for field in ["context", "options"] {
            let open = format!("{{?{field}}}");
            let close = format!("{{/{field}}}");
            if t.body.matches(&open).count() != t.body.matches(&close).count() {
                return Err(GatewayError::Config(format!(
                    "template `{}` has unbalanced {open} block",
                    t.name
                )));
            }
        }
        Ok(t)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let body = match name {
            "macaw-angles" => MACAW_ANGLES,
            "plain-qa" => PLAIN_QA,
            _ => return None,
        };
        Some(PromptTemplate {
            name: name.to_string(),
            body: body.to_string(),
        })
    }

    /// Loads a template file; the name is the file stem.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let body =
            std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::new(name, body.trim_end_matches('\n'))
    }

    /// A builtin name or a path to a template file.
    pub fn resolve(name_or_path: &str) -> Result<Self, GatewayError> {
        match Self::builtin(name_or_path) {
            Some(t) => Ok(t),
            None if Path::new(name_or_path).is_file() => Self::from_file(Path::new(name_or_path)),
            None => Err(GatewayError::Config(format!(
                "unknown prompt template `{name_or_path}`"
            ))),
        }
    }

    pub fn render(&self, req: &GenerationRequest) -> String {
        let mut body = self.body.clone();
        let options = req.options.as_deref().map(render_options);
        for (field, value) in [("context", req.context.as_deref()), ("options", options.as_deref())] {
            body = apply_block(&body, field, value.is_some());
        }
        // Slots are filled in one left-to-right pass so that slot-like text
        // inside a value is never re-expanded.
        let mut out = String::with_capacity(body.len() + req.question.len());
        let mut rest = body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open..];
            let slot = [
                ("{question}", Some(req.question.as_str())),
                ("{context}", req.context.as_deref()),
                ("{options}", options.as_deref()),
            ]
            .into_iter()
            .find(|(s, _)| after.starts_with(s));
            match slot {
                Some((s, value)) => {
                    out.push_str(value.unwrap_or(""));
                    rest = &after[s.len()..];
                }
                None => {
                    out.push('{');
                    rest = &after[1..];
                }
            }
        }
        out.push_str(rest);
        out
    }
}

fn apply_block(body: &str, field: &str, keep: bool) -> String {
    let open = format!("{{?{field}}}");
    let close = format!("{{/{field}}}");
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(start) = rest.find(&open) {
        out.push_str(&rest[..start]);
        let inner_start = start + open.len();
        let Some(len) = rest[inner_start..].find(&close) else {
            out.push_str(&rest[start..]);
            return out;
        };
        if keep {
            out.push_str(&rest[inner_start..inner_start + len]);
        }
        rest = &rest[inner_start + len + close.len()..];
    }
    out.push_str(rest);
    out
}

/// Strips a `$answer$ =` prefix and surrounding whitespace from model output.
pub fn decode_answer(raw: &str) -> String {
    let t = raw.trim();
    let t = t
        .strip_prefix("$answer$")
        .map(|r| r.trim_start().trim_start_matches('=').trim_start())
        .unwrap_or(t);
    t.trim().to_string()
}

/// Anything that turns a rendered prompt into text.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &GenerationRequest, prompt: &str) -> Result<String, GatewayError>;
    fn id(&self) -> String;
}

/// A backend plus the template used to talk to it.
#[derive(Clone)]
pub struct Gateway {
    template: PromptTemplate,
    backend: Arc<dyn Backend>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("template", &self.template.name)
            .field("backend", &self.backend.id())
            .finish()
    }
}

impl Gateway {
    pub fn new(template: PromptTemplate, backend: Arc<dyn Backend>) -> Self {
        Gateway { template, backend }
    }

    pub fn stub() -> Self {
        Gateway::new(
            PromptTemplate::builtin("macaw-angles").expect("builtin"),
            Arc::new(StubBackend),
        )
    }

    /// Identifies backend and template, for cache keys.
    pub fn id(&self) -> String {
        format!("{}+{}", self.backend.id(), self.template.name)
    }

    pub fn render(&self, req: &GenerationRequest) -> String {
        self.template.render(req)
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        let prompt = self.template.render(req);
        let started = Instant::now();
        let raw = self.backend.complete(req, &prompt)?;
        Ok(GenerationResponse {
            answer: decode_answer(&raw),
            raw,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// The `[SITUATION] ... [QUERY] <keyword>` question for one dimension.
pub fn elaboration_question(situation: &str, dimension: Dimension) -> String {
    format!("[SITUATION] {} [QUERY] {}", situation.trim(), dimension.keyword())
}

/// Parses a question produced by [`elaboration_question`].
pub fn parse_elaboration_question(question: &str) -> Option<(&str, Dimension)> {
    let rest = question.strip_prefix("[SITUATION] ")?;
    let idx = rest.rfind(" [QUERY] ")?;
    let dimension = Dimension::from_keyword(&rest[idx + " [QUERY] ".len()..])?;
    Some((&rest[..idx], dimension))
}

/// Asks the model for one component of a situation's elaboration.
pub fn generate_elaboration(gateway: &Gateway, situation: &str, dimension: Dimension) -> Result<String, GatewayError> {
    if situation.trim().is_empty() {
        return Err(GatewayError::InvalidRequest("situation is empty".into()));
    }
    let req = GenerationRequest::new(elaboration_question(situation, dimension))?;
    Ok(gateway.generate(&req)?.answer)
}

/// Generates each dimension separately and collects the non-empty answers.
pub fn elaborate_situation(gateway: &Gateway, situation: &str) -> Result<SceneElaboration, GatewayError> {
    let mut se = SceneElaboration::new();
    for d in Dimension::ALL {
        let text = generate_elaboration(gateway, situation, d)?;
        if !text.is_empty() {
            se.set(d, text)?;
        }
    }
    Ok(se)
}

pub(crate) fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Deterministic offline backend.
///
/// * elaboration questions get a fixed text per dimension;
/// * multiple-choice questions get the option sharing the most distinct
///   words with the question (ties to the lowest index);
/// * probing questions get a fixed short answer;
/// * anything else gets `"unknown"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubBackend;

impl StubBackend {
    pub fn canned_elaboration(dimension: Dimension) -> &'static str {
        match dimension {
            Dimension::RuleOfThumb => "It's good to be considerate of others.",
            Dimension::Emotion => "Someone's emotion is calm.",
            Dimension::Motivation => "Someone's motivation is to do the right thing.",
            Dimension::Consequence => "Things work out in the end.",
        }
    }

    fn answer(req: &GenerationRequest) -> String {
        if let Some((_, d)) = parse_elaboration_question(&req.question) {
            return Self::canned_elaboration(d).to_string();
        }
        if let Some(options) = req.options.as_ref().filter(|o| !o.is_empty()) {
            let question: HashSet<String> = word_tokens(&req.question).collect();
            let mut best = (0, 0usize);
            for (i, o) in options.iter().enumerate() {
                let overlap = word_tokens(o).collect::<HashSet<_>>().intersection(&question).count();
                if overlap > best.1 {
                    best = (i, overlap);
                }
            }
            return options[best.0].clone();
        }
        let q = req.question.as_str();
        if q.ends_with("'s emotion?") {
            "calm".into()
        } else if q.ends_with("'s motivation?") {
            "to help".into()
        } else if q == crate::probe::ROT_QUESTION {
            Self::canned_elaboration(Dimension::RuleOfThumb).into()
        } else if q == crate::probe::CONSEQUENCE_QUESTION {
            Self::canned_elaboration(Dimension::Consequence).into()
        } else {
            "unknown".into()
        }
    }
}

impl Backend for StubBackend {
    fn complete(&self, req: &GenerationRequest, _prompt: &str) -> Result<String, GatewayError> {
        Ok(Self::answer(req))
    }

    fn id(&self) -> String {
        "stub".into()
    }
}

/// Counting semaphore bounding in-flight HTTP requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpOptions {
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for HttpOptions {
    fn default() -> Self {
        HttpOptions {
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            max_retries: 3,
            backoff: Duration::from_millis(200),
        }
    }
}

/// POSTs JSON to `url`, retrying transient failures with exponential backoff.
#[derive(Debug)]
struct JsonPoster {
    url: String,
    agent: ureq::Agent,
    limiter: Limiter,
    opts: HttpOptions,
}

impl JsonPoster {
    fn new(url: &str, opts: HttpOptions) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(opts.timeout))
            .http_status_as_error(true)
            .build();
        JsonPoster {
            url: url.to_string(),
            agent: ureq::Agent::new_with_config(config),
            limiter: Limiter::new(opts.max_in_flight),
            opts,
        }
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, body: &B, prompt: &str) -> Result<R, GatewayError> {
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.post_once(body, prompt)
            };
            match result {
                Err(e) if e.is_transient() && attempt < self.opts.max_retries => {
                    thread::sleep(self.opts.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once<B: Serialize, R: for<'de> Deserialize<'de>>(&self, body: &B, prompt: &str) -> Result<R, GatewayError> {
        let unreachable = |detail: String| GatewayError::EndpointUnreachable {
            url: self.url.clone(),
            detail,
            prompt: prompt.to_string(),
        };
        let malformed = |detail: String| GatewayError::MalformedResponse {
            detail,
            prompt: prompt.to_string(),
        };
        match self.agent.post(&self.url).send_json(body) {
            Ok(mut resp) => resp.body_mut().read_json::<R>().map_err(|e| malformed(e.to_string())),
            Err(ureq::Error::Timeout(_)) => Err(GatewayError::Timeout {
                url: self.url.clone(),
                prompt: prompt.to_string(),
            }),
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                Err(unreachable(format!("HTTP {code}")))
            }
            Err(ureq::Error::StatusCode(code)) => Err(malformed(format!("HTTP {code}"))),
            Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound)) => {
                Err(unreachable(e.to_string()))
            }
            Err(e) => Err(malformed(e.to_string())),
        }
    }
}

#[derive(Serialize)]
struct GenBody<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct GenReply {
    text: String,
}

/// Generative endpoint: `{"prompt","max_tokens","temperature"}` → `{"text"}`.
#[derive(Debug)]
pub struct HttpBackend {
    poster: JsonPoster,
}

impl HttpBackend {
    pub fn new(url: &str, opts: HttpOptions) -> Self {
        HttpBackend {
            poster: JsonPoster::new(url, opts),
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &GenerationRequest, prompt: &str) -> Result<String, GatewayError> {
        let body = GenBody {
            prompt,
            max_tokens: req.max_output_tokens,
            temperature: req.temperature,
        };
        let reply: GenReply = self.poster.post(&body, prompt)?;
        Ok(reply.text)
    }

    fn id(&self) -> String {
        format!("http:{}", self.poster.url)
    }
}

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::InvalidRequest("embedding has dimension 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::InvalidRequest("embedding has non-finite values".into()));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = GatewayError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
    /// Declared dimension, if known before the first call.
    fn dim(&self) -> Option<usize>;
    fn id(&self) -> String;
}

/// Signed feature hashing of lower-cased word tokens.
///
/// Each token adds ±1 to one coordinate, both chosen from
/// `SHA-256(seed_le_bytes || token)`: the first 8 bytes (little-endian) modulo
/// `dim` give the coordinate and the low bit of byte 8 gives the sign. Texts
/// with shared words land near each other, which keeps stub KNN runs meaningful.
#[derive(Debug, Clone, Copy)]
pub struct StubEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        StubEmbedder { dim: dim.max(1), seed }
    }

    pub fn bucket(&self, token: &str) -> (usize, f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let idx = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % self.dim as u64;
        let sign = if digest[8] & 1 == 1 { -1.0 } else { 1.0 };
        (idx as usize, sign)
    }
}

impl Embedder for StubEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("text to embed is empty".into()));
        }
        let mut values = vec![0.0; self.dim];
        for token in word_tokens(text) {
            let (i, s) = self.bucket(&token);
            values[i] += s;
        }
        EmbeddingVector::new(values)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn id(&self) -> String {
        format!("stub-emb:{}:{}", self.dim, self.seed)
    }
}

#[derive(Serialize)]
struct EmbBody<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbReply {
    vector: Vec<f64>,
}

/// Embedding endpoint: `{"text"}` → `{"vector": [...]}`.
#[derive(Debug)]
pub struct HttpEmbedder {
    poster: JsonPoster,
    dim: Option<usize>,
}

impl HttpEmbedder {
    pub fn new(url: &str, dim: Option<usize>, opts: HttpOptions) -> Self {
        HttpEmbedder {
            poster: JsonPoster::new(url, opts),
            dim,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("text to embed is empty".into()));
        }
        let reply: EmbReply = self.poster.post(&EmbBody { text }, text)?;
        if let Some(expected) = self.dim {
            if reply.vector.len() != expected {
                return Err(GatewayError::DimensionMismatch {
                    expected,
                    got: reply.vector.len(),
                });
            }
        }
        EmbeddingVector::new(reply.vector).map_err(|e| GatewayError::MalformedResponse {
            detail: e.to_string(),
            prompt: text.to_string(),
        })
    }

    fn dim(&self) -> Option<usize> {
        self.dim
    }

    fn id(&self) -> String {
        format!("http-emb:{}", self.poster.url)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Stub,
    Http,
}

/// Gateway settings, usually the `[gateway]` table of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Defaults to `http` when `gen_url` is set, `stub` otherwise.
    pub backend: Option<BackendKind>,
    pub gen_url: Option<String>,
    pub emb_url: Option<String>,
    pub timeout_ms: u64,
    pub template: String,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub emb_dim: Option<usize>,
    pub stub_emb_dim: usize,
    pub stub_seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: None,
            gen_url: None,
            emb_url: None,
            timeout_ms: 60_000,
            template: "macaw-angles".into(),
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 200,
            emb_dim: None,
            stub_emb_dim: 64,
            stub_seed: 0,
        }
    }
}

impl GatewayConfig {
    /// Overrides fields from `GATEWAY_*` variables supplied by `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), GatewayError> {
        if let Some(v) = lookup(ENV_GEN_URL).filter(|v| !v.is_empty()) {
            self.gen_url = Some(v);
        }
        if let Some(v) = lookup(ENV_EMB_URL).filter(|v| !v.is_empty()) {
            self.emb_url = Some(v);
        }
        if let Some(v) = lookup(ENV_TIMEOUT_MS).filter(|v| !v.is_empty()) {
            self.timeout_ms = v
                .parse()
                .map_err(|_| GatewayError::Config(format!("{ENV_TIMEOUT_MS}={v} is not an integer")))?;
        }
        Ok(())
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.unwrap_or(if self.gen_url.is_some() {
            BackendKind::Http
        } else {
            BackendKind::Stub
        })
    }

    fn http_options(&self) -> HttpOptions {
        HttpOptions {
            timeout: Duration::from_millis(self.timeout_ms),
            max_in_flight: self.max_in_flight,
            max_retries: self.max_retries,
            backoff: Duration::from_millis(self.backoff_ms),
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway, GatewayError> {
        let template = PromptTemplate::resolve(&self.template)?;
        let backend: Arc<dyn Backend> = match self.backend_kind() {
            BackendKind::Stub => Arc::new(StubBackend),
            BackendKind::Http => {
                let url = self
                    .gen_url
                    .as_deref()
                    .ok_or_else(|| GatewayError::Config(format!("http backend needs gen_url or {ENV_GEN_URL}")))?;
                Arc::new(HttpBackend::new(url, self.http_options()))
            }
        };
        Ok(Gateway::new(template, backend))
    }

    /// HTTP embedder when `emb_url` is set, otherwise the stub.
    pub fn build_embedder(&self) -> Arc<dyn Embedder> {
        match &self.emb_url {
            Some(url) => Arc::new(HttpEmbedder::new(url, self.emb_dim, self.http_options())),
            None => Arc::new(StubEmbedder::new(self.stub_emb_dim, self.stub_seed)),
        }
    }
}
