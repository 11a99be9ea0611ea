//! Logprob providers. Every backend turns a prompt layout (demonstrations,
//! query, template, label space) into an [`Episode`] holding the label
//! distribution at each delimiter.

mod http;
mod oracle;
mod replay;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use http::{HttpBackend, HttpConfig, HttpStrategy};
pub use oracle::OracleBackend;
pub use replay::ReplayBackend;

use crate::bayessim::{ConceptModel, SyntheticTaskConfig};
use crate::domain::{read_episodes_jsonl, write_episodes_jsonl, Demonstration, Episode, LabelSpace, PromptTemplate};
use crate::error::Result;

/// Everything a backend needs to produce one episode.
#[derive(Debug, Clone)]
pub struct EpisodeRequest<'a> {
    pub id: String,
    pub template: &'a PromptTemplate,
    pub labels: &'a LabelSpace,
    pub demos: &'a [Demonstration],
    pub query: &'a Demonstration,
    /// Provenance copied into the episode (selection, ordering, seed, ...).
    pub meta: Map<String, Value>,
}

impl EpisodeRequest<'_> {
    /// Identifies the prompt content independently of the template.
    pub(crate) fn content_key(&self) -> String {
        episode_key(self.labels, self.demos.iter().map(|d| (d.text.as_str(), d.label)), &self.query.text)
    }
}

pub(crate) fn episode_key<'a>(
    labels: &LabelSpace,
    demos: impl Iterator<Item = (&'a str, Option<usize>)>,
    query: &str,
) -> String {
    let demos: Vec<(&str, Option<usize>)> = demos.collect();
    serde_json::to_string(&(labels.labels(), labels.verbalizer_tokens(), demos, query)).expect("serializable key")
}

/// An episode and the number of backend requests spent producing it.
#[derive(Debug, Clone)]
pub struct Fetched {
    pub episode: Episode,
    pub requests: u64,
}

pub trait LogprobBackend: Send + Sync {
    fn name(&self) -> &str;

    fn fetch(&self, request: &EpisodeRequest<'_>) -> Result<Fetched>;
}

/// Fetches one episode, discarding the request count.
pub fn fetch_episode(backend: &dyn LogprobBackend, request: &EpisodeRequest<'_>) -> Result<Episode> {
    Ok(backend.fetch(request)?.episode)
}

pub(crate) fn build_meta(request: &EpisodeRequest<'_>, backend: &str) -> Map<String, Value> {
    let mut meta = request.meta.clone();
    meta.insert("backend".into(), backend.into());
    meta
}

/// Logical inference counts (one per fetched episode) and raw request counts.
#[derive(Debug, Default)]
pub struct CallCounter {
    logical: AtomicU64,
    requests: AtomicU64,
    per_method: Mutex<BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub logical: u64,
    pub requests: u64,
    pub per_method: BTreeMap<String, u64>,
}

impl CallCounter {
    pub fn record(&self, method: &str, requests: u64) {
        self.logical.fetch_add(1, Ordering::SeqCst);
        self.requests.fetch_add(requests, Ordering::SeqCst);
        *self.per_method.lock().expect("counter lock").entry(method.to_string()).or_default() += 1;
    }

    pub fn logical(&self) -> u64 {
        self.logical.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn method(&self, method: &str) -> u64 {
        self.per_method.lock().expect("counter lock").get(method).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            logical: self.logical(),
            requests: self.requests(),
            per_method: self.per_method.lock().expect("counter lock").clone(),
        }
    }
}

/// Wraps a backend and counts every successful fetch.
#[derive(Clone)]
pub struct Counted {
    inner: Arc<dyn LogprobBackend>,
    counter: Arc<CallCounter>,
}

impl Counted {
    pub fn new(inner: Arc<dyn LogprobBackend>) -> Self {
        Counted { inner, counter: Arc::new(CallCounter::default()) }
    }

    pub fn counter(&self) -> &CallCounter {
        &self.counter
    }

    /// Fetches and attributes the logical inference to `method`.
    pub fn fetch_as(&self, method: &str, request: &EpisodeRequest<'_>) -> Result<Episode> {
        let fetched = self.inner.fetch(request)?;
        self.counter.record(method, fetched.requests);
        Ok(fetched.episode)
    }
}

pub fn counted(backend: Arc<dyn LogprobBackend>) -> Counted {
    Counted::new(backend)
}

impl LogprobBackend for Counted {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn fetch(&self, request: &EpisodeRequest<'_>) -> Result<Fetched> {
        let fetched = self.inner.fetch(request)?;
        self.counter.record("unattributed", fetched.requests);
        Ok(fetched)
    }
}

/// In-memory cache keyed by template and prompt content, so repeated logical
/// inferences do not repeat backend requests.
pub struct Memo {
    inner: Arc<dyn LogprobBackend>,
    /// One slot per prompt; a slot is held while its first request is in flight
    /// so concurrent duplicates wait instead of hitting the backend again.
    cache: Mutex<HashMap<String, Arc<Mutex<Option<Episode>>>>>,
}

impl Memo {
    pub fn new(inner: Arc<dyn LogprobBackend>) -> Self {
        Memo { inner, cache: Mutex::new(HashMap::new()) }
    }
}

impl LogprobBackend for Memo {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn fetch(&self, request: &EpisodeRequest<'_>) -> Result<Fetched> {
        let key = format!("{}\u{0}{}", serde_json::to_string(request.template)?, request.content_key());
        let slot = self.cache.lock().expect("memo lock").entry(key).or_default().clone();
        let mut slot = slot.lock().expect("memo slot");
        if let Some(hit) = slot.as_ref() {
            let mut episode = hit.clone();
            episode.id = request.id.clone();
            episode.query = request.query.clone();
            episode.meta = build_meta(request, self.inner.name());
            if let Some(floored) = hit.meta.get("floored") {
                episode.meta.insert("floored".into(), floored.clone());
            }
            return Ok(Fetched { episode, requests: 0 });
        }
        let fetched = self.inner.fetch(request)?;
        *slot = Some(fetched.episode.clone());
        Ok(fetched)
    }
}

/// Keeps every episode the inner backend produces, for later replay.
pub struct Recording {
    inner: Arc<dyn LogprobBackend>,
    seen: Mutex<BTreeMap<String, Episode>>,
}

impl Recording {
    pub fn new(inner: Arc<dyn LogprobBackend>) -> Self {
        Recording { inner, seen: Mutex::new(BTreeMap::new()) }
    }

    /// Recorded episodes, one per distinct prompt, in key order. Request-side
    /// fields (id, query label, request metadata) are dropped, so the output
    /// does not depend on which of several identical requests arrived first.
    pub fn episodes(&self) -> Vec<Episode> {
        let seen = self.seen.lock().expect("recording lock");
        seen.values()
            .enumerate()
            .map(|(i, ep)| Episode { id: format!("rec-{i}"), ..ep.clone() })
            .collect()
    }
}

impl LogprobBackend for Recording {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn fetch(&self, request: &EpisodeRequest<'_>) -> Result<Fetched> {
        let fetched = self.inner.fetch(request)?;
        let mut episode = fetched.episode.clone();
        episode.query.label = None;
        episode.meta.retain(|k, _| !request.meta.contains_key(k));
        self.seen.lock().expect("recording lock").entry(request.content_key()).or_insert(episode);
        Ok(fetched)
    }
}

/// Writes episodes as JSONL.
pub fn cache_write(path: &Path, episodes: &[Episode]) -> Result<()> {
    write_episodes_jsonl(path, episodes)
}

/// Reads episodes from JSONL; an empty file yields no episodes.
pub fn cache_read(path: &Path) -> Result<Vec<Episode>> {
    read_episodes_jsonl(path)
}

/// Where the oracle backend gets its concept model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    /// Path to a concept-model JSON document.
    Path(PathBuf),
    /// Regenerate from a synthetic task configuration.
    Synthetic(SyntheticTaskConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendSpec {
    Oracle {
        model: ModelSource,
        /// Text to input-index mapping; defaults to `x<e>` for every input.
        #[serde(default)]
        input_map: Option<BTreeMap<String, usize>>,
        /// Input index used for texts missing from the map (content-free probes).
        #[serde(default)]
        content_free_input: Option<usize>,
    },
    Replay {
        cache: PathBuf,
    },
    Http(HttpConfig),
}

impl BackendSpec {
    /// Instantiates the backend; relative paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Arc<dyn LogprobBackend>> {
        match self {
            BackendSpec::Oracle { input_map, content_free_input, .. } => {
                let model = self.oracle_model(base_dir)?.expect("oracle spec");
                let mut backend = OracleBackend::new(Arc::new(model));
                if let Some(map) = input_map {
                    backend = backend.with_input_map(map.clone().into_iter().collect())?;
                }
                if let Some(e) = content_free_input {
                    backend = backend.with_content_free_input(*e)?;
                }
                Ok(Arc::new(backend))
            }
            BackendSpec::Replay { cache } => Ok(Arc::new(ReplayBackend::from_path(&base_dir.join(cache))?)),
            BackendSpec::Http(cfg) => Ok(Arc::new(HttpBackend::new(cfg.clone())?)),
        }
    }

    /// The concept model behind an oracle backend; `None` for other kinds.
    pub fn oracle_model(&self, base_dir: &Path) -> Result<Option<ConceptModel>> {
        let BackendSpec::Oracle { model, .. } = self else { return Ok(None) };
        Ok(Some(match model {
            ModelSource::Path(path) => serde_json::from_str(&std::fs::read_to_string(base_dir.join(path))?)?,
            ModelSource::Synthetic(cfg) => crate::bayessim::generate_task(cfg)?,
        }))
    }

    /// Oracle and replay backends are deterministic and offline.
    pub fn is_offline(&self) -> bool {
        !matches!(self, BackendSpec::Http(_))
    }
}

#[cfg(test)]
mod tests;
