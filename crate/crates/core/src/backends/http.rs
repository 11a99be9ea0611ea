use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{build_meta, EpisodeRequest, Fetched, LogprobBackend};
use crate::domain::{assemble_prompt, normalize_over_labels, Episode, LabelDistribution, LabelSpace};
use crate::error::{Error, Result};

/// How delimiter distributions are obtained from a completions endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HttpStrategy {
    /// One request per delimiter, each prompt truncated right after it.
    #[default]
    Incremental,
    /// One request with `echo`, reading prompt-token logprobs at each cut point.
    Echo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
    #[serde(default)]
    pub strategy: HttpStrategy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// Fail instead of flooring when a label token is missing from the top list.
    #[serde(default)]
    pub strict: bool,
}

fn default_top_logprobs() -> usize {
    20
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    500
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            top_logprobs: default_top_logprobs(),
            strategy: HttpStrategy::default(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            strict: false,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.top_logprobs == 0 {
            return Err(Error::Config("top_logprobs must be positive".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpBackend { config, client, api_key })
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// Sends one completion request, retrying server errors and transport failures.
    fn complete(&self, prompt: &str, echo: bool) -> Result<Value> {
        let mut body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": 1,
            "logprobs": self.config.top_logprobs,
            "temperature": 0,
        });
        if echo {
            body["echo"] = Value::Bool(true);
        }
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(self.endpoint()).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let failure = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return serde_json::from_str(&text)
                            .map_err(|e| Error::Backend { status: status.as_u16(), body: format!("invalid JSON: {e}") });
                    }
                    let err = Error::Backend { status: status.as_u16(), body: excerpt(&text) };
                    if !status.is_server_error() {
                        return Err(err);
                    }
                    err
                }
                Err(e) => Error::Backend { status: 0, body: e.to_string() },
            };
            if attempt >= self.config.max_retries {
                return Err(failure);
            }
            std::thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt));
            attempt += 1;
        }
    }

    fn label_dist(&self, top: Option<&Map<String, Value>>, labels: &LabelSpace, floored: &mut bool) -> Result<LabelDistribution> {
        let empty = Map::new();
        let top = top.unwrap_or(&empty);
        let (masses, missing) = label_masses(top, labels);
        if let Some(&c) = missing.first() {
            if self.config.strict || top.is_empty() {
                return Err(Error::MissingLabelToken(labels.verbalizer_tokens()[c].clone()));
            }
            *floored = true;
        }
        let smallest = top.values().filter_map(Value::as_f64).map(f64::exp).fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = masses.into_iter().map(|m| m.unwrap_or(0.5 * smallest)).collect();
        Ok(normalize_over_labels(&raw)?)
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(300).collect()
}

/// Probability mass of each verbalizer token in a top-logprob map. Tokens match
/// after trimming leading whitespace, and all matching variants are summed.
pub(crate) fn label_masses(top: &Map<String, Value>, labels: &LabelSpace) -> (Vec<Option<f64>>, Vec<usize>) {
    let mut masses = Vec::with_capacity(labels.num_classes());
    let mut missing = Vec::new();
    for (c, token) in labels.verbalizer_tokens().iter().enumerate() {
        let want = token.trim_start();
        let mut found = None;
        for (tok, lp) in top {
            if tok.trim_start() == want {
                if let Some(lp) = lp.as_f64() {
                    *found.get_or_insert(0.0) += lp.exp();
                }
            }
        }
        if found.is_none() {
            missing.push(c);
        }
        masses.push(found);
    }
    (masses, missing)
}

fn logprobs_of(resp: &Value) -> Result<&Map<String, Value>> {
    resp.pointer("/choices/0/logprobs")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Backend { status: 200, body: "response has no choices[0].logprobs".into() })
}

fn top_entries(logprobs: &Map<String, Value>) -> Result<&Vec<Value>> {
    logprobs
        .get("top_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Backend { status: 200, body: "response has no top_logprobs".into() })
}

impl LogprobBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn fetch(&self, request: &EpisodeRequest<'_>) -> Result<Fetched> {
        let prompt = assemble_prompt(request.template, request.demos, &request.query.text, request.labels)?;
        let mut floored = false;
        let mut dists = Vec::with_capacity(prompt.cut_points.len());
        let requests = match self.config.strategy {
            HttpStrategy::Incremental => {
                for j in 0..prompt.cut_points.len() {
                    let resp = self.complete(prompt.prefix(j), false)?;
                    let tops = top_entries(logprobs_of(&resp)?)?;
                    let top = tops.first().and_then(Value::as_object);
                    dists.push(self.label_dist(top, request.labels, &mut floored)?);
                }
                prompt.cut_points.len() as u64
            }
            HttpStrategy::Echo => {
                let resp = self.complete(&prompt.text, true)?;
                let logprobs = logprobs_of(&resp)?;
                let tops = top_entries(logprobs)?;
                let offsets: Vec<u64> = logprobs
                    .get("text_offset")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_u64).collect())
                    .ok_or_else(|| Error::Backend { status: 200, body: "echo response has no text_offset".into() })?;
                for &cut in &prompt.cut_points {
                    // offsets count characters, cut points count bytes
                    let cut_chars = prompt.text[..cut].chars().count() as u64;
                    let i = offsets.iter().position(|&o| o >= cut_chars).ok_or_else(|| Error::Backend {
                        status: 200,
                        body: format!("no token starts at or after character {cut_chars}"),
                    })?;
                    let top = tops.get(i).and_then(Value::as_object);
                    dists.push(self.label_dist(top, request.labels, &mut floored)?);
                }
                1
            }
        };
        let query_dist = dists.pop().expect("at least the query cut point");
        let mut meta = build_meta(request, self.name());
        meta.insert("model".into(), self.config.model.clone().into());
        if floored {
            meta.insert("floored".into(), true.into());
        }
        let episode = Episode {
            id: request.id.clone(),
            labels: request.labels.clone(),
            demos: request.demos.to_vec(),
            query: request.query.clone(),
            demo_dists: dists,
            query_dist,
            meta,
        };
        Ok(Fetched { episode, requests })
    }
}
