//! Chat-completion client, parsing of generated pairs and caption
//! summarisation with an offline fallback.

use std::collections::HashMap;
use std::thread::sleep;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::datagen::{GenerationBackend, GenerationQuery};
use crate::error::{Error, Result};
use crate::series::{CaptionedPair, Source, TimeSeries};
use crate::textrep::{parse_tagged, phase_tag};

pub const ENDPOINT_VAR: &str = "TSLM_LLM_ENDPOINT";
pub const MODEL_VAR: &str = "TSLM_LLM_MODEL";
pub const TOKEN_VAR: &str = "TSLM_LLM_TOKEN";

pub const GENERATION_TEMPERATURE: f64 = 0.7;
pub const SUMMARY_TEMPERATURE: f64 = 0.3;

pub const SUMMARY_OPENING: &str = "You are given these captions that describe multiple characteristics of a time series";
pub const SUMMARY_CLOSING: &str = "Please summarize these captions by highlighting the important aspects in a single sentence";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

/// Where and how to reach a chat-completion endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmEndpoint {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl LlmEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self { url: url.into(), model: model.into(), token: None, timeout: Duration::from_secs(60), retries: 3, backoff: Duration::from_millis(500) }
    }

    /// Reads endpoint, model and optional bearer token from the environment.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENDPOINT_VAR).ok().filter(|s| !s.is_empty())?;
        let model = std::env::var(MODEL_VAR).unwrap_or_else(|_| "default".into());
        let mut e = Self::new(url, model);
        e.token = std::env::var(TOKEN_VAR).ok().filter(|s| !s.is_empty());
        Some(e)
    }

    pub fn request(&self, messages: Vec<Message>, temperature: f64) -> ChatRequest {
        ChatRequest { endpoint: self.clone(), messages, temperature }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub endpoint: LlmEndpoint,
    pub messages: Vec<Message>,
    pub temperature: f64,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
}

/// Extracts `choices[0].message.content`.
fn reply_content(body: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| Error::Protocol(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Protocol("response lacks choices[0].message.content".into()))
}

/// POSTs the request and returns the first choice's content. Transport
/// failures and 5xx/429 replies are retried with exponential backoff.
pub fn chat_complete(req: &ChatRequest) -> Result<String> {
    if !req.temperature.is_finite() || req.temperature < 0.0 {
        return Err(Error::param(format!("temperature must be >= 0, got {}", req.temperature)));
    }
    let ep = &req.endpoint;
    let client = reqwest::blocking::Client::builder()
        .timeout(ep.timeout)
        .build()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let body = WireRequest { model: &ep.model, messages: &req.messages, temperature: req.temperature };
    let mut last = String::new();
    for attempt in 0..=ep.retries {
        if attempt > 0 {
            sleep(ep.backoff * 2u32.saturating_pow(attempt - 1));
        }
        let mut call = client.post(&ep.url).json(&body);
        if let Some(t) = &ep.token {
            call = call.bearer_auth(t);
        }
        match call.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
                    return reply_content(&text);
                }
                last = format!("HTTP {status}");
                if status.is_client_error() && status.as_u16() != 429 {
                    break;
                }
            }
            Err(e) => last = e.to_string(),
        }
        log::warn!("chat request attempt {} failed: {last}", attempt + 1);
    }
    Err(Error::Transport(format!("{} after {} attempt(s): {last}", ep.url, ep.retries + 1)))
}

fn strip_caption_label(line: &str) -> &str {
    let t = line.trim();
    let lower = t.to_ascii_lowercase();
    if lower.starts_with("caption:") {
        t["caption:".len()..].trim()
    } else {
        t
    }
}

fn parse_block(block: &str, caption: &str) -> Result<CaptionedPair> {
    let runs = parse_tagged(block)?;
    let values: Vec<f64> = runs.concat();
    let series = TimeSeries::new(values)?;
    let caption = strip_caption_label(caption);
    CaptionedPair::new(series, caption, Source::Generated)
}

/// Pairs written as a `<start> … </end>` tagged block followed by a caption
/// line. Malformed blocks are logged and skipped.
pub fn parse_generated_pairs(text: &str) -> Result<Vec<CaptionedPair>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let Some(open) = lines[i].find("<start>") else {
            i += 1;
            continue;
        };
        let mut block = String::new();
        let mut rest = None;
        let mut j = i;
        let mut first = &lines[i][open..];
        while j < lines.len() {
            if let Some(end) = first.find("</end>") {
                block.push_str(&first[..end + "</end>".len()]);
                rest = Some(first[end + "</end>".len()..].trim());
                break;
            }
            block.push_str(first);
            block.push(' ');
            j += 1;
            first = lines.get(j).copied().unwrap_or("");
        }
        let Some(rest) = rest else {
            log::warn!("generated block at line {} has no closing </end>", i + 1);
            break;
        };
        let mut next = j + 1;
        let caption = if !rest.is_empty() {
            rest.to_string()
        } else {
            while next < lines.len() && lines[next].trim().is_empty() {
                next += 1;
            }
            match lines.get(next) {
                Some(l) if !l.contains("<start>") => {
                    next += 1;
                    l.to_string()
                }
                _ => String::new(),
            }
        };
        match parse_block(&block, &caption) {
            Ok(p) => out.push(p),
            Err(e) => log::warn!("skipping generated block at line {}: {e}", i + 1),
        }
        i = next;
    }
    if out.is_empty() {
        return Err(Error::Parse("no valid time series-caption pair in the reply".into()));
    }
    Ok(out)
}

/// The summarisation prompt: opening sentence, one caption per line,
/// closing instruction.
pub fn summary_prompt(captions: &[String]) -> String {
    let mut p = format!("{SUMMARY_OPENING}:\n");
    for c in captions {
        p.push_str(c.trim());
        p.push('\n');
    }
    p.push_str(SUMMARY_CLOSING);
    p.push('.');
    p
}

/// Distinct captions ordered by how often they occur (first occurrence
/// breaks ties), joined with "and".
pub fn fallback_summary(captions: &[String]) -> Result<String> {
    if captions.is_empty() {
        return Err(Error::param("nothing to summarise"));
    }
    if captions.len() == 1 {
        return Ok(captions[0].clone());
    }
    let mut order: Vec<(String, usize, usize)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut period = false;
    for (i, c) in captions.iter().enumerate() {
        let trimmed = c.trim();
        let clause = trimmed.trim_end_matches('.').trim().to_string();
        if clause.is_empty() {
            continue;
        }
        if i == 0 {
            period = trimmed.ends_with('.');
        }
        match seen.get(&clause) {
            Some(&k) => order[k].1 += 1,
            None => {
                seen.insert(clause.clone(), order.len());
                order.push((clause, 1, i));
            }
        }
    }
    if order.is_empty() {
        return Err(Error::param("all captions are empty"));
    }
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut s = order.into_iter().map(|(c, _, _)| c).collect::<Vec<_>>().join(" and ");
    if period {
        s.push('.');
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub enum SummaryBackend {
    Remote(LlmEndpoint),
    Fallback,
}

/// One descriptive caption from several. Remote failures fall back to the
/// rule-based summary.
pub fn summarize_captions(captions: &[String], backend: &SummaryBackend) -> Result<String> {
    if captions.is_empty() {
        return Err(Error::param("nothing to summarise"));
    }
    match backend {
        SummaryBackend::Fallback => fallback_summary(captions),
        SummaryBackend::Remote(ep) => {
            let req = ep.request(vec![Message::user(summary_prompt(captions))], SUMMARY_TEMPERATURE);
            match chat_complete(&req) {
                Ok(reply) if !reply.trim().is_empty() => Ok(reply.trim().to_string()),
                Ok(_) => {
                    log::warn!("empty summary reply, using the fallback summary");
                    fallback_summary(captions)
                }
                Err(e) => {
                    log::warn!("remote summary failed ({e}), using the fallback summary");
                    fallback_summary(captions)
                }
            }
        }
    }
}

/// Generation prompt: the demonstrations in tagged form, then a request for
/// `samples` new pairs in the same layout.
pub fn generation_prompt(query: &GenerationQuery) -> Result<String> {
    let mut p = String::from(
        "Each example below is a time series written as tagged text, followed on the next line by a caption describing its pattern.\n\n",
    );
    for d in &query.demonstrations {
        p.push_str(&phase_tag(&d.series)?.text);
        p.push('\n');
        p.push_str(d.caption.trim());
        p.push_str("\n\n");
    }
    p.push_str(&format!(
        "Generate {} new and different examples in exactly the same format: one tagged time series line with values strictly between 0 and 100 and between 12 and 50 values in total, followed by one caption line.",
        query.samples
    ));
    Ok(p)
}

/// Generation through a remote chat model.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    pub endpoint: LlmEndpoint,
    pub temperature: f64,
}

impl RemoteBackend {
    pub fn new(endpoint: LlmEndpoint) -> Self {
        Self { endpoint, temperature: GENERATION_TEMPERATURE }
    }
}

impl GenerationBackend for RemoteBackend {
    fn generate(&mut self, query: &GenerationQuery, _seed: u64) -> Result<Vec<CaptionedPair>> {
        let req = self.endpoint.request(vec![Message::user(generation_prompt(query)?)], self.temperature);
        parse_generated_pairs(&chat_complete(&req)?)
    }
}
