//! Chat-completion and fine-tuning backends.
//!
//! [`RemoteBackend`] speaks the OpenAI-compatible HTTP API. [`EchoStub`] and
//! [`InterpStub`] run offline: the echo stub answers every test prompt with
//! its exact ground-truth completion, the interpolation stub fills the
//! missing window by straight-line interpolation between its boundary
//! values. Both stubs look days up in a [`StubRegistry`] by `DayRef` and
//! render their answer through the same prompt variant as the request.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::codec::{self, Reading, MAX_LEVEL};
use crate::costing::{approximate_tokens, DEFAULT_CHARS_PER_TOKEN, DEFAULT_EPOCHS};
use crate::error::{Error, Result};
use crate::preprocess::{DayRef, MaskedDay, PreparedDataset};
use crate::promptset::{
    read_dataset, render_completion, render_load, to_upload_jsonl, validate_training,
    ChatSample, Role,
};
use crate::records::Schema;

pub const JOBS_SCHEMA: Schema = Schema::new("loadpatch.jobs", 1);
pub const DEFAULT_BASE_MODEL: &str = "gpt-3.5-turbo";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    EchoStub,
    InterpStub,
}

impl BackendKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "echo" | "echo_stub" => Ok(BackendKind::EchoStub),
            "interp" | "interp_stub" => Ok(BackendKind::InterpStub),
            other => Err(Error::Config(format!(
                "unknown backend {other:?} (expected echo, interp or remote)"
            ))),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            BackendKind::Remote => "remote",
            BackendKind::EchoStub => "echo",
            BackendKind::InterpStub => "interp",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendHandle {
    pub kind: BackendKind,
    pub base_model_id: String,
    /// Name of the environment variable holding the API key (remote only).
    pub credentials_ref: Option<String>,
    pub api_base: Option<String>,
}

impl BackendHandle {
    pub fn stub(kind: BackendKind) -> Self {
        BackendHandle {
            kind,
            base_model_id: DEFAULT_BASE_MODEL.to_string(),
            credentials_ref: None,
            api_base: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Direct,
}

impl Stage {
    pub fn model_label(&self) -> &'static str {
        match self {
            Stage::Stage1 => "GPT-FT-1",
            Stage::Stage2 => "GPT-FT-2",
            Stage::Direct => "GPT-FT-3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub job_id: String,
    pub stage: Stage,
    pub base_model_id: String,
    pub dataset_path: String,
    pub status: JobStatus,
    pub result_model_id: Option<String>,
    pub trained_tokens: Option<u64>,
    pub n_samples: usize,
    #[serde(default)]
    pub error: Option<String>,
}

impl FineTuneJob {
    pub fn check(&self) -> Result<()> {
        if self.result_model_id.is_some() != (self.status == JobStatus::Succeeded) {
            return Err(Error::Validation(format!(
                "job {}: result model must be present exactly when succeeded",
                self.job_id
            )));
        }
        Ok(())
    }

    pub fn model_id(&self) -> Result<&str> {
        match (&self.status, &self.result_model_id) {
            (JobStatus::Succeeded, Some(m)) => Ok(m),
            _ => Err(Error::Dependency(format!(
                "job {} ({}) has status {:?}",
                self.job_id,
                self.stage.model_label(),
                self.status
            ))),
        }
    }
}

/// Passed through to the provider; `None` means provider default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_epochs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate_multiplier: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct FineTuneRequest<'a> {
    pub stage: Stage,
    pub base_model_id: &'a str,
    pub dataset_path: &'a Path,
    pub hyperparams: &'a Hyperparams,
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn base_model_id(&self) -> &str;

    /// Runs a fine-tune to a terminal status.
    fn submit_finetune(&self, req: &FineTuneRequest<'_>) -> Result<FineTuneJob>;

    fn chat_complete(&self, model_id: &str, prompt: &ChatSample) -> Result<String>;
}

fn ensure_test_prompt(prompt: &ChatSample) -> Result<()> {
    match prompt.messages.last() {
        Some(m) if m.role == Role::User => Ok(()),
        Some(_) => Err(Error::Precondition(format!(
            "prompt for {} ends with an assistant message",
            prompt.day_ref
        ))),
        None => Err(Error::Precondition("empty prompt".into())),
    }
}

/// Reads and validates a fine-tuning file; nothing is sent when this fails.
pub fn load_training_file(path: &Path) -> Result<Vec<ChatSample>> {
    let samples = read_dataset(path)?;
    validate_training(&samples)?;
    Ok(samples)
}

/// Appends job states to a record file; the last state per job id wins.
#[derive(Debug, Clone)]
pub struct JobStore {
    path: PathBuf,
}

impl JobStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        JobStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&self, job: &FineTuneJob) -> Result<()> {
        JOBS_SCHEMA.append(&self.path, job)
    }

    pub fn list(&self) -> Result<Vec<FineTuneJob>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let ((), records): ((), Vec<FineTuneJob>) = JOBS_SCHEMA.read(&self.path)?;
        let mut order: Vec<String> = Vec::new();
        let mut latest: HashMap<String, FineTuneJob> = HashMap::new();
        for job in records {
            if !latest.contains_key(&job.job_id) {
                order.push(job.job_id.clone());
            }
            latest.insert(job.job_id.clone(), job);
        }
        Ok(order
            .into_iter()
            .map(|id| latest.remove(&id).expect("present"))
            .collect())
    }

    pub fn find(&self, job_id: &str) -> Result<Option<FineTuneJob>> {
        Ok(self.list()?.into_iter().find(|j| j.job_id == job_id))
    }
}

/// Submits through `backend` and records the resulting job.
pub fn submit_finetune(
    backend: &dyn Backend,
    store: &JobStore,
    req: &FineTuneRequest<'_>,
) -> Result<FineTuneJob> {
    let job = backend.submit_finetune(req)?;
    job.check()?;
    store.record(&job)?;
    Ok(job)
}

pub fn list_jobs(store: &JobStore) -> Result<Vec<FineTuneJob>> {
    store.list()
}

/// Completes every prompt with at most `max_in_flight` concurrent calls.
/// Results keep the order of `prompts`.
pub fn complete_all(
    backend: &dyn Backend,
    model_id: &str,
    prompts: &[ChatSample],
    max_in_flight: usize,
) -> Result<Vec<Result<String>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        prompts
            .par_iter()
            .map(|p| backend.chat_complete(model_id, p))
            .collect()
    }))
}

#[derive(Debug, Default)]
pub struct StubRegistry {
    days: HashMap<DayRef, MaskedDay>,
}

impl StubRegistry {
    pub fn new(days: impl IntoIterator<Item = MaskedDay>) -> Self {
        StubRegistry {
            days: days.into_iter().map(|d| (d.day_ref(), d)).collect(),
        }
    }

    pub fn from_prepared(p: &PreparedDataset) -> Self {
        Self::new(p.days.iter().cloned())
    }

    pub fn get(&self, r: &DayRef) -> Result<&MaskedDay> {
        self.days.get(r).ok_or_else(|| Error::Lookup(r.to_string()))
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
}

fn stub_finetune(kind: BackendKind, req: &FineTuneRequest<'_>) -> Result<FineTuneJob> {
    let samples = load_training_file(req.dataset_path)?;
    let bytes = std::fs::read(req.dataset_path)?;
    let mut h = Sha256::new();
    h.update(kind.short_name().as_bytes());
    h.update([0]);
    h.update(req.base_model_id.as_bytes());
    h.update([0]);
    h.update(&bytes);
    let digest = hex::encode(h.finalize());
    let epochs = req.hyperparams.n_epochs.unwrap_or(DEFAULT_EPOCHS) as u64;
    Ok(FineTuneJob {
        job_id: format!("ftjob-{}", &digest[..24]),
        stage: req.stage,
        base_model_id: req.base_model_id.to_string(),
        dataset_path: req.dataset_path.display().to_string(),
        status: JobStatus::Succeeded,
        result_model_id: Some(format!("ft:{}:{}", kind.short_name(), &digest[..16])),
        trained_tokens: Some(approximate_tokens(&samples, DEFAULT_CHARS_PER_TOKEN) * epochs),
        n_samples: samples.len(),
        error: None,
    })
}

/// Answers with the registered ground truth.
pub struct EchoStub {
    base_model: String,
    registry: Arc<StubRegistry>,
}

impl EchoStub {
    pub fn new(base_model: impl Into<String>, registry: Arc<StubRegistry>) -> Self {
        EchoStub {
            base_model: base_model.into(),
            registry,
        }
    }
}

impl Backend for EchoStub {
    fn kind(&self) -> BackendKind {
        BackendKind::EchoStub
    }

    fn base_model_id(&self) -> &str {
        &self.base_model
    }

    fn submit_finetune(&self, req: &FineTuneRequest<'_>) -> Result<FineTuneJob> {
        stub_finetune(self.kind(), req)
    }

    fn chat_complete(&self, _model_id: &str, prompt: &ChatSample) -> Result<String> {
        ensure_test_prompt(prompt)?;
        let day = self.registry.get(&prompt.day_ref)?;
        render_completion(day, prompt.variant)
    }
}

/// Fills `len` points strictly between `before` and `after` on a straight
/// line, rounding half away from zero. A missing side holds the other flat.
pub fn interpolate_gap(before: Option<u8>, after: Option<u8>, len: usize) -> Vec<u8> {
    match (before, after) {
        (Some(a), Some(b)) => (1..=len)
            .map(|i| {
                let x = a as f64 + (b as f64 - a as f64) * i as f64 / (len + 1) as f64;
                x.round().clamp(0.0, MAX_LEVEL as f64) as u8
            })
            .collect(),
        (Some(a), None) => vec![a; len],
        (None, Some(b)) => vec![b; len],
        (None, None) => vec![0; len],
    }
}

/// Reads the load sequence back out of a test prompt.
pub fn prompt_load(prompt: &ChatSample) -> Result<Vec<Reading>> {
    let content = prompt
        .messages
        .get(2)
        .map(|m| m.content.as_str())
        .ok_or_else(|| Error::Precondition(format!("prompt {} has no data turn", prompt.day_ref)))?;
    let v = prompt.variant;
    let bad = |tok: &str, i: usize| {
        Error::Precondition(format!("prompt {}: unreadable token {i} {tok:?}", prompt.day_ref))
    };
    match (v.separate_load_temp, v.discard_encoding) {
        (true, false) => Ok(codec::decode_series(content)?),
        (false, false) => Ok(codec::decode_combined_series(content)?
            .into_iter()
            .map(|(l, _)| l)
            .collect()),
        (sep, true) => content
            .split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                let load = if sep { tok } else { tok.split(':').next().unwrap_or("") };
                load.parse::<u8>().map(Reading::Value).map_err(|_| bad(tok, i))
            })
            .collect(),
    }
}

/// Answers with the prompt's own load profile, window filled by
/// interpolation between the points just outside it.
pub struct InterpStub {
    base_model: String,
    registry: Arc<StubRegistry>,
}

impl InterpStub {
    pub fn new(base_model: impl Into<String>, registry: Arc<StubRegistry>) -> Self {
        InterpStub {
            base_model: base_model.into(),
            registry,
        }
    }
}

impl Backend for InterpStub {
    fn kind(&self) -> BackendKind {
        BackendKind::InterpStub
    }

    fn base_model_id(&self) -> &str {
        &self.base_model
    }

    fn submit_finetune(&self, req: &FineTuneRequest<'_>) -> Result<FineTuneJob> {
        stub_finetune(self.kind(), req)
    }

    fn chat_complete(&self, _model_id: &str, prompt: &ChatSample) -> Result<String> {
        ensure_test_prompt(prompt)?;
        let mask = self.registry.get(&prompt.day_ref)?.mask;
        let mut load = prompt_load(prompt)?;
        if load.len() < mask.end() {
            return Err(Error::Precondition(format!(
                "prompt {} carries {} load points",
                prompt.day_ref,
                load.len()
            )));
        }
        let before = mask.start.checked_sub(1).and_then(|i| load[i].value());
        let after = load.get(mask.end()).and_then(|r| r.value());
        let fill = interpolate_gap(before, after, mask.len);
        for (slot, v) in load[mask.range()].iter_mut().zip(fill) {
            *slot = Reading::Value(v);
        }
        render_load(&load, prompt.variant)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Exponential delay before retry number `attempt` (1-based), with up to
    /// 25% added jitter.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1 << (attempt - 1).min(16));
        let capped = exp.min(self.max_delay);
        let jitter = rand::rng().random_range(0.0..0.25);
        capped.mul_f64(1.0 + jitter)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PollPolicy {
    pub initial: Duration,
    pub max_interval: Duration,
    pub timeout: Duration,
}

impl Default for PollPolicy {
    fn default() -> Self {
        PollPolicy {
            initial: Duration::from_secs(5),
            max_interval: Duration::from_secs(60),
            timeout: Duration::from_secs(6 * 3600),
        }
    }
}

/// OpenAI-compatible HTTP client.
pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    api_base: String,
    api_key: String,
    base_model: String,
    pub retry: RetryPolicy,
    pub poll: PollPolicy,
}

fn provider_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v["error"]["message"].as_str().map(str::to_string))
        .unwrap_or_else(|| body.chars().take(500).collect())
}

fn map_status(s: &str) -> JobStatus {
    match s {
        "succeeded" => JobStatus::Succeeded,
        "failed" | "cancelled" => JobStatus::Failed,
        "running" => JobStatus::Running,
        _ => JobStatus::Pending,
    }
}

impl RemoteBackend {
    pub fn new(api_base: &str, api_key: &str, base_model: &str) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(RemoteBackend {
            client,
            api_base: api_base.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
            base_model: base_model.to_string(),
            retry: RetryPolicy::default(),
            poll: PollPolicy::default(),
        })
    }

    pub fn from_handle(h: &BackendHandle) -> Result<Self> {
        let var = h.credentials_ref.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
        let key = std::env::var(var)
            .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        Self::new(
            h.api_base.as_deref().unwrap_or(DEFAULT_API_BASE),
            &key,
            &h.base_model_id,
        )
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.api_base, path)
    }

    fn send(&self, build: impl Fn() -> reqwest::blocking::RequestBuilder) -> Result<Value> {
        let mut attempt = 1;
        loop {
            let last = attempt >= self.retry.max_attempts;
            let outcome = build().bearer_auth(&self.api_key).send();
            let wait = match outcome {
                Err(e) => {
                    if last {
                        return Err(Error::Transport(e.to_string()));
                    }
                    log::warn!("request failed (attempt {attempt}): {e}");
                    self.retry.delay(attempt)
                }
                Ok(resp) => {
                    let status = resp.status();
                    let retry_after = resp
                        .headers()
                        .get(reqwest::header::RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<f64>().ok())
                        .map(Duration::from_secs_f64);
                    let body = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
                    if status.is_success() {
                        return serde_json::from_str(&body).map_err(|e| Error::Provider {
                            status: Some(status.as_u16()),
                            message: format!("invalid JSON response: {e}"),
                        });
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable || last {
                        return Err(Error::Provider {
                            status: Some(status.as_u16()),
                            message: provider_message(&body),
                        });
                    }
                    log::warn!("provider returned {status} (attempt {attempt})");
                    retry_after
                        .map(|d| d.min(self.retry.max_delay))
                        .unwrap_or_else(|| self.retry.delay(attempt))
                }
            };
            thread::sleep(wait);
            attempt += 1;
        }
    }

    fn upload(&self, jsonl: String) -> Result<String> {
        let v = self.send(|| {
            let part = reqwest::blocking::multipart::Part::bytes(jsonl.clone().into_bytes())
                .file_name("train.jsonl");
            let form = reqwest::blocking::multipart::Form::new()
                .text("purpose", "fine-tune")
                .part("file", part);
            self.client.post(self.url("/files")).multipart(form)
        })?;
        v["id"].as_str().map(str::to_string).ok_or_else(|| Error::Provider {
            status: None,
            message: "file upload response has no id".into(),
        })
    }

    fn job_from(&self, v: &Value, req: &FineTuneRequest<'_>, n_samples: usize) -> Result<FineTuneJob> {
        let job_id = v["id"].as_str().ok_or_else(|| Error::Provider {
            status: None,
            message: "fine-tuning job response has no id".into(),
        })?;
        let status = map_status(v["status"].as_str().unwrap_or(""));
        Ok(FineTuneJob {
            job_id: job_id.to_string(),
            stage: req.stage,
            base_model_id: req.base_model_id.to_string(),
            dataset_path: req.dataset_path.display().to_string(),
            status,
            result_model_id: match status {
                JobStatus::Succeeded => v["fine_tuned_model"].as_str().map(str::to_string),
                _ => None,
            },
            trained_tokens: v["trained_tokens"].as_u64(),
            n_samples,
            error: v["error"]["message"].as_str().map(str::to_string),
        })
    }
}

impl Backend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn base_model_id(&self) -> &str {
        &self.base_model
    }

    fn submit_finetune(&self, req: &FineTuneRequest<'_>) -> Result<FineTuneJob> {
        let samples = load_training_file(req.dataset_path)?;
        let file_id = self.upload(to_upload_jsonl(&samples))?;
        let body = json!({
            "training_file": file_id,
            "model": req.base_model_id,
            "hyperparameters": req.hyperparams,
        });
        let created = self.send(|| self.client.post(self.url("/fine_tuning/jobs")).json(&body))?;
        let mut job = self.job_from(&created, req, samples.len())?;
        let mut interval = self.poll.initial;
        let mut waited = Duration::ZERO;
        while !job.status.is_terminal() {
            if waited >= self.poll.timeout {
                return Err(Error::Provider {
                    status: None,
                    message: format!("job {} still {:?} after {:?}", job.job_id, job.status, waited),
                });
            }
            thread::sleep(interval);
            waited += interval;
            interval = (interval * 2).min(self.poll.max_interval);
            let url = self.url(&format!("/fine_tuning/jobs/{}", job.job_id));
            let v = self.send(|| self.client.get(&url))?;
            job = self.job_from(&v, req, samples.len())?;
        }
        if job.status == JobStatus::Succeeded && job.result_model_id.is_none() {
            return Err(Error::Provider {
                status: None,
                message: format!("job {} succeeded without a model id", job.job_id),
            });
        }
        Ok(job)
    }

    fn chat_complete(&self, model_id: &str, prompt: &ChatSample) -> Result<String> {
        ensure_test_prompt(prompt)?;
        let body = json!({
            "model": model_id,
            "messages": prompt.messages,
            "temperature": 0,
        });
        let v = self.send(|| self.client.post(self.url("/chat/completions")).json(&body))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Provider {
                status: None,
                message: "completion response has no message content".into(),
            })
    }
}

pub fn open_backend(h: &BackendHandle, registry: Arc<StubRegistry>) -> Result<Box<dyn Backend>> {
    Ok(match h.kind {
        BackendKind::EchoStub => Box::new(EchoStub::new(&h.base_model_id, registry)),
        BackendKind::InterpStub => Box::new(InterpStub::new(&h.base_model_id, registry)),
        BackendKind::Remote => Box::new(RemoteBackend::from_handle(h)?),
    })
}
