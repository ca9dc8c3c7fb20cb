//! The two LLM-backed agents: a thinking agent that analyses the question
//! document and a decision agent that extracts the final machine choice.
//!
//! Chat traffic goes through an OpenAI-compatible endpoint at temperature 0
//! and can be recorded to / replayed from a cassette file for offline,
//! deterministic runs. Runtime LLM failures (transport, unparseable or
//! out-of-candidate answers) never abort a simulation: they fall back to a
//! heuristic rule applied to the same bids. Only configuration mistakes
//! (missing key env var, missing cassette) surface as errors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::negotiation::{DecisionSource, QuestionDocument};
use crate::policy::{select_machine_smpt, select_machine_winq, MachineRule, WinqVariant};
use crate::MachineId;

pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";

const TA_TEMPLATE_FILE: &str = "thinking_agent.md";
const DA_TEMPLATE_FILE: &str = "decision_agent.md";

static DEFAULT_TA_TEMPLATE: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../prompts/thinking_agent.md"));
static DEFAULT_DA_TEMPLATE: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../prompts/decision_agent.md"));

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("machine rule is llm but no llm configuration was given")]
    MissingLlmConfig,
    #[error("llm timeout must be positive")]
    ZeroTimeout,
    #[error("api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("prompt template {path}: {msg}")]
    Template { path: String, msg: String },
    #[error("cassette {path}: {msg}")]
    Cassette { path: String, msg: String },
    #[error(
        "replay cassette has no entry for key {key}; either the cassette is stale or \
         prompt construction is not deterministic"
    )]
    CassetteMiss { key: String },
    #[error("chat transport failed after {attempts} attempt(s): {msg}")]
    Transport { attempts: u32, msg: String },
}

/// Rule applied to the bids when the LLM path cannot produce a usable
/// decision. Restricted to the deterministic rules so that replayed runs
/// stay reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FallbackRule {
    Winq,
    Smpt,
}

impl FallbackRule {
    pub fn machine_rule(self) -> MachineRule {
        match self {
            FallbackRule::Winq => MachineRule::Winq,
            FallbackRule::Smpt => MachineRule::Smpt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LlmMode {
    Live,
    Record(PathBuf),
    Replay(PathBuf),
}

#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Retries after the first attempt; requests are re-issued identically.
    pub max_retries: u32,
    pub mode: LlmMode,
    /// None disables the fallback: transport failures then abort the run.
    pub fallback: Option<FallbackRule>,
    /// Directory holding the two template files; embedded defaults if unset.
    pub prompts_dir: Option<PathBuf>,
    /// Interpret extracted machine ids as 1-based. Default: as written.
    pub one_based_answers: bool,
}

impl LlmConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>, mode: LlmMode) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 60,
            max_retries: 1,
            mode,
            fallback: Some(FallbackRule::Winq),
            prompts_dir: None,
            one_based_answers: false,
        }
    }
}

/// Five-section system prompt: character, objective, knowledge, answer,
/// constraints, rendered as Markdown with one level-2 heading per section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub character: String,
    pub objective: String,
    pub knowledge: String,
    pub answer: String,
    pub constraints: String,
}

const SECTION_HEADINGS: [&str; 5] =
    ["Character", "Objective", "Knowledge", "Answer", "Constraints"];

impl PromptTemplate {
    /// Parses a Markdown template. Exactly the five known level-2 headings
    /// must appear, each with a non-empty body.
    pub fn parse(markdown: &str) -> Result<Self, String> {
        let mut sections: HashMap<String, String> = HashMap::new();
        let mut current: Option<(String, String)> = None;
        for line in markdown.lines() {
            if let Some(heading) = line.strip_prefix("## ") {
                if let Some((name, body)) = current.take() {
                    sections.insert(name, body);
                }
                let heading = heading.trim().to_string();
                if !SECTION_HEADINGS.contains(&heading.as_str()) {
                    return Err(format!("unknown section heading {heading:?}"));
                }
                if sections.contains_key(&heading) {
                    return Err(format!("duplicate section heading {heading:?}"));
                }
                current = Some((heading, String::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push_str(line);
                body.push('\n');
            } else if !line.trim().is_empty() {
                return Err(format!("content before the first section heading: {line:?}"));
            }
        }
        if let Some((name, body)) = current.take() {
            sections.insert(name, body);
        }

        let mut take = |name: &str| -> Result<String, String> {
            let body = sections
                .remove(name)
                .ok_or_else(|| format!("missing section heading {name:?}"))?;
            let body = body.trim().to_string();
            if body.is_empty() {
                return Err(format!("section {name:?} is empty"));
            }
            Ok(body)
        };
        Ok(Self {
            character: take("Character")?,
            objective: take("Objective")?,
            knowledge: take("Knowledge")?,
            answer: take("Answer")?,
            constraints: take("Constraints")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Template {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text).map_err(|msg| LlmError::Template {
            path: path.display().to_string(),
            msg,
        })
    }

    /// Canonical rendering used as the chat system prompt.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (heading, body) in SECTION_HEADINGS.iter().zip([
            &self.character,
            &self.objective,
            &self.knowledge,
            &self.answer,
            &self.constraints,
        ]) {
            let _ = write!(out, "## {heading}\n{body}\n\n");
        }
        out.trim_end().to_string()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteRecord {
    key: String,
    request_text: String,
    response_text: String,
}

/// Append-only request/response store, one JSON record per line. Lookup is
/// by key only: a hash of (system prompt, user message, model name).
pub struct Cassette {
    path: PathBuf,
    entries: HashMap<String, String>,
}

impl Cassette {
    pub fn cassette_key(system: &str, user: &str, model: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(model.as_bytes());
        hasher.update([0x1f]);
        hasher.update(system.as_bytes());
        hasher.update([0x1f]);
        hasher.update(user.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn open(path: &Path, must_exist: bool) -> Result<Self, LlmError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| LlmError::Cassette {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: CassetteRecord =
                    serde_json::from_str(line).map_err(|e| LlmError::Cassette {
                        path: path.display().to_string(),
                        msg: format!("line {}: {e}", lineno + 1),
                    })?;
                if entries.insert(record.key.clone(), record.response_text).is_some() {
                    return Err(LlmError::Cassette {
                        path: path.display().to_string(),
                        msg: format!("line {}: duplicate key {}", lineno + 1, record.key),
                    });
                }
            }
        } else if must_exist {
            return Err(LlmError::Cassette {
                path: path.display().to_string(),
                msg: "cassette file does not exist".to_string(),
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn lookup(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn append(
        &mut self,
        key: String,
        request_text: String,
        response_text: String,
    ) -> Result<(), LlmError> {
        let record = CassetteRecord {
            key: key.clone(),
            request_text,
            response_text: response_text.clone(),
        };
        let line = serde_json::to_string(&record).expect("cassette record serializes");
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| LlmError::Cassette {
                path: self.path.display().to_string(),
                msg: e.to_string(),
            })?;
        writeln!(file, "{line}").map_err(|e| LlmError::Cassette {
            path: self.path.display().to_string(),
            msg: e.to_string(),
        })?;
        self.entries.insert(key, response_text);
        Ok(())
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum ParseFailure {
    NoInteger,
    NotACandidate { found: MachineId },
}

/// Extracts the machine choice from a decision-agent answer: the last
/// "Machine <n>" designation wins; failing that, the last bare integer.
pub fn parse_decision(
    answer_text: &str,
    candidates: &[MachineId],
    one_based: bool,
) -> Result<MachineId, ParseFailure> {
    static MACHINE_RE: OnceLock<Regex> = OnceLock::new();
    static INT_RE: OnceLock<Regex> = OnceLock::new();
    let machine_re =
        MACHINE_RE.get_or_init(|| Regex::new(r"(?i)machine\s*[#:]?\s*(\d+)").unwrap());
    let int_re = INT_RE.get_or_init(|| Regex::new(r"\d+").unwrap());

    let raw = machine_re
        .captures_iter(answer_text)
        .last()
        .map(|c| c[1].to_string())
        .or_else(|| int_re.find_iter(answer_text).last().map(|m| m.as_str().to_string()))
        .ok_or(ParseFailure::NoInteger)?;

    let value: u64 = raw.parse().map_err(|_| ParseFailure::NoInteger)?;
    let machine = if one_based {
        if value == 0 {
            return Err(ParseFailure::NotACandidate { found: 0 });
        }
        (value - 1) as MachineId
    } else {
        value as MachineId
    };
    if candidates.contains(&machine) {
        Ok(machine)
    } else {
        Err(ParseFailure::NotACandidate { found: machine })
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

struct HttpChat {
    endpoint: String,
    model: String,
    api_key: String,
    max_retries: u32,
    client: reqwest::blocking::Client,
}

impl HttpChat {
    fn new(cfg: &LlmConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .map_err(|_| LlmError::MissingApiKey(cfg.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport {
                attempts: 0,
                msg: e.to_string(),
            })?;
        Ok(Self {
            endpoint: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            model: cfg.model_name.clone(),
            api_key,
            max_retries: cfg.max_retries,
            client,
        })
    }

    fn call(&self, system: &str, user: &str) -> Result<String, LlmError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: system,
                },
                ChatMessage {
                    role: "user",
                    content: user,
                },
            ],
            temperature: 0.0,
        };
        let attempts = self.max_retries + 1;
        let mut last_err = String::new();
        for _ in 0..attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(msg) => last_err = msg,
            }
        }
        Err(LlmError::Transport {
            attempts,
            msg: last_err,
        })
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<String, String> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            return Err(format!("http status {status}"));
        }
        let parsed: ChatResponse = response.json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| "response carried no choices".to_string())
    }
}

pub struct SelectionOutcome {
    pub machine_id: MachineId,
    pub suggestion_text: String,
    pub source: DecisionSource,
}

/// One run's LLM decision pipeline: thinking agent then decision agent,
/// with cassette handling and heuristic fallback.
pub struct LlmSession {
    cfg: LlmConfig,
    ta_system: String,
    da_system: String,
    cassette: Option<Cassette>,
    http: Option<HttpChat>,
}

impl LlmSession {
    pub fn new(cfg: LlmConfig) -> Result<Self, LlmError> {
        if cfg.timeout_secs == 0 {
            return Err(LlmError::ZeroTimeout);
        }
        let (ta, da) = match &cfg.prompts_dir {
            Some(dir) => (
                PromptTemplate::load(&dir.join(TA_TEMPLATE_FILE))?,
                PromptTemplate::load(&dir.join(DA_TEMPLATE_FILE))?,
            ),
            None => (
                PromptTemplate::parse(DEFAULT_TA_TEMPLATE).map_err(|msg| LlmError::Template {
                    path: TA_TEMPLATE_FILE.to_string(),
                    msg,
                })?,
                PromptTemplate::parse(DEFAULT_DA_TEMPLATE).map_err(|msg| LlmError::Template {
                    path: DA_TEMPLATE_FILE.to_string(),
                    msg,
                })?,
            ),
        };
        let cassette = match &cfg.mode {
            LlmMode::Live => None,
            LlmMode::Record(path) => Some(Cassette::open(path, false)?),
            LlmMode::Replay(path) => Some(Cassette::open(path, true)?),
        };
        let http = match &cfg.mode {
            LlmMode::Live | LlmMode::Record(_) => Some(HttpChat::new(&cfg)?),
            LlmMode::Replay(_) => None,
        };
        Ok(Self {
            ta_system: ta.render(),
            da_system: da.render(),
            cfg,
            cassette,
            http,
        })
    }

    /// One chat exchange under the configured mode. Identical requests in
    /// Record mode are served from the cassette without a network call.
    pub fn chat(&mut self, system: &str, user: &str) -> Result<String, LlmError> {
        let key = Cassette::cassette_key(system, user, &self.cfg.model_name);
        match &self.cfg.mode {
            LlmMode::Replay(_) => {
                let cassette = self.cassette.as_ref().expect("replay mode has a cassette");
                cassette
                    .lookup(&key)
                    .map(str::to_string)
                    .ok_or(LlmError::CassetteMiss { key })
            }
            LlmMode::Record(_) => {
                let cassette = self.cassette.as_mut().expect("record mode has a cassette");
                if let Some(hit) = cassette.lookup(&key) {
                    return Ok(hit.to_string());
                }
                let response = self.http.as_ref().expect("record mode has a client").call(system, user)?;
                let request_text = format!("[system]\n{system}\n[user]\n{user}");
                cassette.append(key, request_text, response.clone())?;
                Ok(response)
            }
            LlmMode::Live => self.http.as_ref().expect("live mode has a client").call(system, user),
        }
    }

    /// The full two-agent path for one question document. Any runtime
    /// failure (transport, empty answer, unparseable or out-of-candidate
    /// id) resolves via the fallback rule on the same bids; only replay
    /// cache misses and fallback-disabled transport errors propagate.
    pub fn select_machine(
        &mut self,
        question: &QuestionDocument,
        winq_variant: WinqVariant,
    ) -> Result<SelectionOutcome, LlmError> {
        let ta_system = self.ta_system.clone();
        let suggestion = match self.chat(&ta_system, &question.text) {
            Ok(text) if !text.trim().is_empty() => text,
            Ok(_) => return self.fallback(question, winq_variant, String::new(), "empty suggestion"),
            Err(e @ LlmError::CassetteMiss { .. }) => return Err(e),
            Err(e) => return self.fallback(question, winq_variant, String::new(), &e.to_string()),
        };

        let da_system = self.da_system.clone();
        let answer = match self.chat(&da_system, &suggestion) {
            Ok(text) => text,
            Err(e @ LlmError::CassetteMiss { .. }) => return Err(e),
            Err(e) => {
                let msg = e.to_string();
                return self.fallback(question, winq_variant, suggestion, &msg);
            }
        };

        match parse_decision(&answer, &question.invitation.candidates, self.cfg.one_based_answers)
        {
            Ok(machine_id) => Ok(SelectionOutcome {
                machine_id,
                suggestion_text: suggestion,
                source: DecisionSource::Llm,
            }),
            Err(_) => self.fallback(question, winq_variant, suggestion, "unusable answer"),
        }
    }

    fn fallback(
        &self,
        question: &QuestionDocument,
        winq_variant: WinqVariant,
        suggestion_text: String,
        cause: &str,
    ) -> Result<SelectionOutcome, LlmError> {
        let rule = self.cfg.fallback.ok_or_else(|| LlmError::Transport {
            attempts: self.cfg.max_retries + 1,
            msg: format!("no fallback configured; last failure: {cause}"),
        })?;
        let machine_id = match rule {
            FallbackRule::Winq => {
                select_machine_winq(&question.invitation, &question.bids, winq_variant)
            }
            FallbackRule::Smpt => select_machine_smpt(&question.invitation, &question.bids),
        };
        Ok(SelectionOutcome {
            machine_id,
            suggestion_text,
            source: DecisionSource::Fallback {
                rule: rule.machine_rule(),
            },
        })
    }
}
