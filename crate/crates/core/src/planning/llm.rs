//! OpenAI-compatible chat-completions planner client.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompts::prompt_for;
use super::{PlanAction, PlanDecision, PlanQuery, Planner, PlannerError};

pub const API_KEY_ENV: &str = "UNCAP_API_KEY";
pub const BASE_URL_ENV: &str = "UNCAP_BASE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            timeout_s: 30.0,
            max_retries: 2,
            backoff_ms: 250,
        }
    }
}

/// One request/response pair, kept for the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: Value,
    pub response: Option<String>,
    pub error: Option<String>,
}

pub struct LlmPlanner {
    config: LlmConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    transcript: Mutex<Vec<Exchange>>,
}

impl LlmPlanner {
    /// Reads the key from `UNCAP_API_KEY`; `UNCAP_BASE_URL` overrides the endpoint.
    pub fn from_env(mut config: LlmConfig) -> Result<Self, PlannerError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| PlannerError::MissingCredential(API_KEY_ENV.into()))?;
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            config.base_url = url;
        }
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: LlmConfig, api_key: impl Into<String>) -> Result<Self, PlannerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| PlannerError::Network(e.to_string()))?;
        Ok(LlmPlanner {
            config,
            api_key: api_key.into(),
            client,
            transcript: Mutex::new(Vec::new()),
        })
    }

    pub fn take_transcript(&self) -> Vec<Exchange> {
        std::mem::take(&mut *self.transcript.lock().expect("transcript lock"))
    }

    pub fn request_body(&self, query: &PlanQuery) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt_for(query.intention, &query.description())}],
            "temperature": 0,
            "logprobs": true,
        })
    }

    fn send_once(&self, body: &Value) -> Result<String, (PlannerError, bool)> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let resp = self
            .client
            .post(url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| (PlannerError::Network(e.to_string()), true))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| (PlannerError::Network(e.to_string()), true))?;
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err((PlannerError::Auth(status), false)),
            429 | 500..=599 => Err((PlannerError::Http { status, body: text }, true)),
            _ => Err((PlannerError::Http { status, body: text }, false)),
        }
    }

    fn send(&self, body: &Value) -> Result<String, PlannerError> {
        let mut attempt = 0;
        loop {
            let result = self.send_once(body);
            let mut log = self.transcript.lock().expect("transcript lock");
            match result {
                Ok(text) => {
                    log.push(Exchange {
                        request: body.clone(),
                        response: Some(text.clone()),
                        error: None,
                    });
                    return Ok(text);
                }
                Err((err, retryable)) => {
                    log.push(Exchange {
                        request: body.clone(),
                        response: None,
                        error: Some(err.to_string()),
                    });
                    drop(log);
                    if !retryable || attempt >= self.config.max_retries {
                        return Err(err);
                    }
                    std::thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt));
                    attempt += 1;
                }
            }
        }
    }
}

impl Planner for LlmPlanner {
    fn name(&self) -> &str {
        "llm"
    }

    fn plan(&self, query: &PlanQuery) -> Result<PlanDecision, PlannerError> {
        query.validate()?;
        let raw = self.send(&self.request_body(query))?;
        parse_completion(&raw)
    }

    fn take_exchanges(&self) -> Vec<Value> {
        self.take_transcript()
            .into_iter()
            .map(|e| serde_json::to_value(e).expect("exchange serializes"))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Parses a raw chat-completions response body.
pub fn parse_completion(raw: &str) -> Result<PlanDecision, PlannerError> {
    let format_err = |reason: &str| PlannerError::Format {
        reason: reason.into(),
        raw: raw.into(),
    };
    let c: Completion = serde_json::from_str(raw).map_err(|e| format_err(&format!("not a completion: {e}")))?;
    let choice = c.choices.into_iter().next().ok_or_else(|| format_err("no choices"))?;
    let content = choice.message.content.ok_or_else(|| format_err("empty message content"))?;
    let tokens = choice.logprobs.and_then(|l| l.content);
    parse_plan_response(&content, tokens.as_deref())
}

fn find_field<'a>(content: &'a str, key: &str) -> Option<(usize, &'a str)> {
    let mut offset = 0;
    for line in content.split_inclusive('\n') {
        let trimmed = line.trim_start();
        let lead = line.len() - trimmed.len();
        if trimmed.len() >= key.len() && trimmed[..key.len()].eq_ignore_ascii_case(key) {
            let after = &trimmed[key.len()..];
            let value = after.trim();
            let start = offset + lead + key.len() + (after.len() - after.trim_start().len());
            return Some((start, value));
        }
        offset += line.len();
    }
    None
}

/// Parses `action:` / `reason:` lines. With token log-probabilities, the
/// probability is `exp` of the summed log-probs of tokens overlapping the
/// action value.
pub fn parse_plan_response(content: &str, tokens: Option<&[TokenLogprob]>) -> Result<PlanDecision, PlannerError> {
    let format_err = |reason: String| PlannerError::Format {
        reason,
        raw: content.into(),
    };
    let (start, value) = find_field(content, "action:").ok_or_else(|| format_err("missing `action:` line".into()))?;
    let action = PlanAction::parse(value).ok_or_else(|| format_err(format!("unknown action `{value}`")))?;
    let (_, reason) = find_field(content, "reason:").ok_or_else(|| format_err("missing `reason:` line".into()))?;

    let probability = match tokens {
        None => None,
        Some(toks) => {
            let joined: String = toks.iter().map(|t| t.token.as_str()).collect();
            if joined != content {
                return Err(format_err("log-probability tokens do not reconstruct the content".into()));
            }
            let end = start + value.len();
            let mut pos = 0;
            let mut sum = 0.0;
            let mut hit = false;
            for t in toks {
                let (a, b) = (pos, pos + t.token.len());
                if a < end && b > start {
                    sum += t.logprob;
                    hit = true;
                }
                pos = b;
            }
            if !hit {
                return Err(format_err("no tokens cover the action value".into()));
            }
            Some(sum.exp())
        }
    };
    PlanDecision::new(action, reason, probability)
}
