use std::collections::HashMap;
use std::path::Path;

use super::{build_meta, episode_key, EpisodeRequest, Fetched, LogprobBackend};
use crate::domain::{read_episodes_jsonl, Episode};
use crate::error::{Error, Result};

/// Serves previously recorded episodes; makes no requests.
pub struct ReplayBackend {
    episodes: HashMap<String, Episode>,
}

impl ReplayBackend {
    pub fn from_episodes(episodes: impl IntoIterator<Item = Episode>) -> Self {
        let episodes = episodes
            .into_iter()
            .map(|ep| {
                let key = episode_key(&ep.labels, ep.demos.iter().map(|d| (d.text.as_str(), d.label)), &ep.query.text);
                (key, ep)
            })
            .collect();
        ReplayBackend { episodes }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(Self::from_episodes(read_episodes_jsonl(path)?))
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

impl LogprobBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn fetch(&self, request: &EpisodeRequest<'_>) -> Result<Fetched> {
        let hit = self.episodes.get(&request.content_key()).ok_or_else(|| {
            Error::CacheMiss(format!("query {:?} with {} demonstrations", request.query.text, request.demos.len()))
        })?;
        let mut episode = hit.clone();
        episode.id = request.id.clone();
        episode.query = request.query.clone();
        let mut meta = build_meta(request, self.name());
        for (k, v) in &hit.meta {
            meta.entry(k.clone()).or_insert_with(|| v.clone());
        }
        meta.insert("backend".into(), "replay".into());
        episode.meta = meta;
        Ok(Fetched { episode, requests: 0 })
    }
}
