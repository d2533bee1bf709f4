//! Multi-turn chat samples for fine-tuning and testing, and their
//! line-delimited file form.
//!
//! Two layouts exist. The combined layout sends one token per timestamp
//! holding both load and temperature (4 messages). The separate layout sends
//! load and temperature in two user turns (6 messages). Either layout can
//! use ternary words or plain integers, and a detailed or terse instruction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reading};
use crate::error::{Error, Result};
use crate::preprocess::{DayRef, MaskedDay, PreparedDataset};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PromptVariant {
    pub advanced: bool,
    pub separate_load_temp: bool,
    pub discard_encoding: bool,
}

impl PromptVariant {
    /// Number of messages in a training sample of this layout.
    pub fn training_len(&self) -> usize {
        if self.separate_load_temp {
            6
        } else {
            4
        }
    }

    /// Parses a comma-separated flag list such as `advanced,separate,discard`.
    /// `none` or an empty string gives the all-off variant.
    pub fn parse_flags(s: &str) -> Result<Self> {
        let mut v = PromptVariant::default();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "advanced" => v.advanced = true,
                "separate" => v.separate_load_temp = true,
                "discard" | "integers" => v.discard_encoding = true,
                "none" => {}
                other => {
                    return Err(Error::Config(format!(
                        "unknown variant flag {other:?} (expected advanced, separate, discard)"
                    )))
                }
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSample {
    pub messages: Vec<ChatMessage>,
    pub variant: PromptVariant,
    pub day_ref: DayRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleShape {
    Training,
    Test,
}

pub const ASK_COMBINED: &str = "What's the encoded data?";
pub const ASK_LOAD: &str = "What's the encoded load profile?";
pub const ASK_TEMPERATURE: &str = "What's the encoded temperature?";

const TASK_INTRO: &str = "Given a load profile with missing segments and a complete daily \
temperature profile, estimate the missing portions of the load profile.";

const TERSE_INSTRUCTION: &str =
    "Estimate the missing values in this load profile and output the complete profile.";

pub fn instruction(v: PromptVariant) -> String {
    if !v.advanced {
        return TERSE_INSTRUCTION.to_string();
    }
    match (v.separate_load_temp, v.discard_encoding) {
        (false, false) => format!(
            "{TASK_INTRO} The load and temperature data are provided jointly. Each value for \
load and temperature is encoded as a ten-digit word in ternary format. The first and last five \
digits represent load and temperature, respectively. Missing load values are represented by \
{}. Please provide the estimated load profile in the same format and length.",
            codec::MISSING_WORD
        ),
        (false, true) => format!(
            "{TASK_INTRO} The load and temperature data are provided jointly. Each value for \
load and temperature is given as a pair of integers between 0 and 200 joined by a colon. The \
first and second integers represent load and temperature, respectively. Missing load values are \
represented by 0. Please provide the estimated load profile in the same format and length."
        ),
        (true, false) => format!(
            "{TASK_INTRO} The load and temperature data are provided separately and exhibit a \
correlation. Each value for load or temperature is encoded as a five-digit word in ternary format."
        ),
        (true, true) => format!(
            "{TASK_INTRO} The load and temperature data are provided separately and exhibit a \
correlation. Each value for load or temperature is given as integers between 0 and 200."
        ),
    }
}

fn render_integers(values: impl Iterator<Item = u8>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Load sequence as it appears in a prompt or completion of variant `v`.
pub fn render_load(load: &[Reading], v: PromptVariant) -> Result<String> {
    if v.discard_encoding {
        Ok(render_integers(load.iter().map(|r| r.value().unwrap_or(0))))
    } else {
        Ok(codec::encode_series(load)?)
    }
}

pub fn render_temperature(temp: &[u8], v: PromptVariant) -> Result<String> {
    if v.discard_encoding {
        Ok(render_integers(temp.iter().copied()))
    } else {
        let readings: Vec<Reading> = temp.iter().map(|&t| Reading::Value(t)).collect();
        Ok(codec::encode_series(&readings)?)
    }
}

pub fn render_combined(load: &[Reading], temp: &[u8], v: PromptVariant) -> Result<String> {
    if v.discard_encoding {
        Ok(load
            .iter()
            .zip(temp)
            .map(|(l, t)| format!("{}:{}", l.value().unwrap_or(0), t))
            .collect::<Vec<_>>()
            .join(" "))
    } else {
        Ok(codec::encode_combined_series(load, temp)?)
    }
}

/// Completion text: the complete 96-point load profile with the window filled.
pub fn render_completion(day: &MaskedDay, v: PromptVariant) -> Result<String> {
    let full: Vec<Reading> = day.full_truth_q().into_iter().map(Reading::Value).collect();
    render_load(&full, v)
}

pub fn build_test_prompt(day: &MaskedDay, v: PromptVariant) -> Result<ChatSample> {
    let mut messages = vec![ChatMessage::user(instruction(v))];
    if v.separate_load_temp {
        messages.push(ChatMessage::assistant(ASK_LOAD));
        messages.push(ChatMessage::user(render_load(&day.load, v)?));
        messages.push(ChatMessage::assistant(ASK_TEMPERATURE));
        messages.push(ChatMessage::user(render_temperature(&day.temp_q, v)?));
    } else {
        messages.push(ChatMessage::assistant(ASK_COMBINED));
        messages.push(ChatMessage::user(render_combined(&day.load, &day.temp_q, v)?));
    }
    Ok(ChatSample {
        messages,
        variant: v,
        day_ref: day.day_ref(),
    })
}

pub fn build_training_sample(day: &MaskedDay, v: PromptVariant) -> Result<ChatSample> {
    let mut sample = build_test_prompt(day, v)?;
    sample
        .messages
        .push(ChatMessage::assistant(render_completion(day, v)?));
    Ok(sample)
}

impl ChatSample {
    /// Checks role alternation and message count, returning the shape.
    pub fn validate(&self) -> Result<SampleShape> {
        let bad = |m: String| Err(Error::Validation(format!("sample {}: {m}", self.day_ref)));
        if let Some(i) = self.messages.iter().position(|m| m.content.is_empty()) {
            return bad(format!("message {i} has empty content"));
        }
        for (i, m) in self.messages.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return bad(format!("message {i} should have role {expected:?}"));
            }
        }
        let full = self.variant.training_len();
        match self.messages.len() {
            n if n == full => Ok(SampleShape::Training),
            n if n == full - 1 => Ok(SampleShape::Test),
            n => bad(format!("expected {} or {} messages, found {n}", full, full - 1)),
        }
    }

    pub fn completion(&self) -> Option<&str> {
        match self.messages.last() {
            Some(m) if m.role == Role::Assistant => Some(&m.content),
            _ => None,
        }
    }

    /// The prompt this training sample was built from (last message dropped).
    pub fn to_test_prompt(&self) -> ChatSample {
        let mut s = self.clone();
        if s.completion().is_some() {
            s.messages.pop();
        }
        s
    }

    pub fn content_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

/// Every sample must be valid and all must share one shape.
pub fn validate_dataset(samples: &[ChatSample]) -> Result<SampleShape> {
    let mut shape = None;
    for (i, s) in samples.iter().enumerate() {
        let this = s.validate()?;
        match shape {
            None => shape = Some(this),
            Some(prev) if prev != this => {
                return Err(Error::Validation(format!(
                    "sample {i} is {this:?}-shaped but earlier samples are {prev:?}-shaped"
                )))
            }
            _ => {}
        }
    }
    shape.ok_or_else(|| Error::Validation("dataset has no samples".into()))
}

pub fn validate_training(samples: &[ChatSample]) -> Result<()> {
    match validate_dataset(samples)? {
        SampleShape::Training => Ok(()),
        SampleShape::Test => Err(Error::Validation(
            "fine-tuning dataset contains test-shaped samples (no completion)".into(),
        )),
    }
}

pub fn write_dataset(samples: &[ChatSample], path: &Path) -> Result<()> {
    validate_dataset(samples)?;
    let file = File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::storage(path, e))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ChatSample>> {
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: ChatSample = serde_json::from_str(&line)
            .map_err(|e| Error::storage(path, format!("line {}: {e}", i + 1)))?;
        out.push(sample);
    }
    Ok(out)
}

/// Provider upload form: one `{"messages":[...]}` object per line.
pub fn to_upload_jsonl(samples: &[ChatSample]) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        messages: &'a [ChatMessage],
    }
    let mut out = String::new();
    for s in samples {
        out.push_str(
            &serde_json::to_string(&Line {
                messages: &s.messages,
            })
            .expect("messages serialize"),
        );
        out.push('\n');
    }
    out
}

/// Per-user seeded split: the first `floor(train_frac * n)` of a shuffled
/// copy of each user's days train, the rest test. Both halves come back in
/// (user, date) order.
pub fn split_days<'a>(
    days: &[&'a MaskedDay],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<&'a MaskedDay>, Vec<&'a MaskedDay>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Range(format!("split fraction {train_frac} outside (0, 1)")));
    }
    let mut per_user: BTreeMap<&str, Vec<&'a MaskedDay>> = BTreeMap::new();
    for d in days {
        per_user.entry(d.user_id.as_str()).or_default().push(d);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (user, mut group) in per_user {
        group.sort_by_key(|d| d.date);
        group.shuffle(&mut seed::rng(seed, &format!("{}:{user}", seed::SPLIT)));
        let n_train = (train_frac * group.len() as f64).floor() as usize;
        let rest = group.split_off(n_train);
        train.extend(group);
        test.extend(rest);
    }
    let key = |d: &&MaskedDay| (d.user_id.clone(), d.date);
    train.sort_by_key(key);
    test.sort_by_key(key);
    Ok((train, test))
}

/// Seeded choice of `n` items, returned in (user, date) order.
pub fn choose_samples<'a>(
    pool: &[&'a MaskedDay],
    n: usize,
    seed: u64,
    stream: &str,
    what: &str,
) -> Result<Vec<&'a MaskedDay>> {
    if n > pool.len() {
        return Err(Error::Capacity {
            what: what.to_string(),
            needed: n,
            available: pool.len(),
        });
    }
    let mut chosen = pool.to_vec();
    chosen.shuffle(&mut seed::rng(seed, stream));
    chosen.truncate(n);
    chosen.sort_by_key(|d| (d.user_id.clone(), d.date));
    Ok(chosen)
}

#[derive(Debug, Clone)]
pub struct DatasetRequest<'a> {
    pub variant: PromptVariant,
    pub users: Option<&'a [String]>,
    pub n_train: Option<usize>,
    pub train_frac: f64,
    pub remove_abnormal: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub train: Vec<ChatSample>,
    pub test: Vec<ChatSample>,
}

/// Split, filter and render a prepared dataset into training samples and
/// test prompts. Abnormal days are removed from the training side only.
pub fn build_dataset(prepared: &PreparedDataset, req: &DatasetRequest<'_>) -> Result<BuiltDataset> {
    let days: Vec<&MaskedDay> = prepared
        .days
        .iter()
        .filter(|d| req.users.is_none_or(|u| u.contains(&d.user_id)))
        .collect();
    if days.is_empty() {
        return Err(Error::EmptyDataset("no days for the requested users".into()));
    }
    let (train_pool, test) = split_days(&days, req.train_frac, req.seed)?;
    let train_pool: Vec<&MaskedDay> = train_pool
        .into_iter()
        .filter(|d| !(req.remove_abnormal && d.abnormal))
        .collect();
    let chosen = match req.n_train {
        Some(n) => choose_samples(&train_pool, n, req.seed, "sample:build", "training samples")?,
        None => train_pool,
    };
    Ok(BuiltDataset {
        train: chosen
            .iter()
            .map(|d| build_training_sample(d, req.variant))
            .collect::<Result<_>>()?,
        test: test
            .iter()
            .map(|d| build_test_prompt(d, req.variant))
            .collect::<Result<_>>()?,
    })
}
