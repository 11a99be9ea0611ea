use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Demonstration, DomainError, LabelDistribution, LabelSpace};
use crate::error::{Error, Result};

/// K ordered demonstrations, a query, and the label distribution observed at
/// every delimiter.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub labels: LabelSpace,
    pub demos: Vec<Demonstration>,
    pub query: Demonstration,
    /// `demo_dists[j]` is the distribution at demo j's delimiter, conditioned on demos `0..j`.
    pub demo_dists: Vec<LabelDistribution>,
    pub query_dist: LabelDistribution,
    pub meta: Map<String, Value>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.demos.len()
    }

    pub fn validate(&self) -> std::result::Result<(), DomainError> {
        let c = self.labels.num_classes();
        if self.demo_dists.len() != self.demos.len() {
            return Err(DomainError::WrongLength { got: self.demo_dists.len(), expected: self.demos.len() });
        }
        for demo in &self.demos {
            match demo.label {
                Some(label) => self.labels.check_label(label)?,
                None => return Err(DomainError::Template(format!("demonstration {:?} has no label", demo.text))),
            }
        }
        if let Some(label) = self.query.label {
            self.labels.check_label(label)?;
        }
        for dist in self.demo_dists.iter().chain(std::iter::once(&self.query_dist)) {
            if dist.num_classes() != c {
                return Err(DomainError::WrongLength { got: dist.num_classes(), expected: c });
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> EpisodeRecord {
        EpisodeRecord {
            id: self.id.clone(),
            labels: self.labels.labels().to_vec(),
            verbalizer: self.labels.verbalizer_tokens().to_vec(),
            demos: self
                .demos
                .iter()
                .map(|d| DemoRecord { text: d.text.clone(), label: d.label.unwrap_or_default() })
                .collect(),
            query: QueryRecord { text: self.query.text.clone(), label: self.query.label },
            demo_dists: self.demo_dists.iter().map(|d| d.probs().to_vec()).collect(),
            query_dist: self.query_dist.probs().to_vec(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_record(record: EpisodeRecord) -> std::result::Result<Self, DomainError> {
        let labels = LabelSpace::new(record.labels, record.verbalizer)?;
        let episode = Episode {
            id: record.id,
            labels,
            demos: record.demos.into_iter().map(|d| Demonstration::labeled(d.text, d.label)).collect(),
            query: Demonstration { text: record.query.text, label: record.query.label },
            demo_dists: record
                .demo_dists
                .into_iter()
                .map(LabelDistribution::from_probs)
                .collect::<std::result::Result<_, _>>()?,
            query_dist: LabelDistribution::from_probs(record.query_dist)?,
            meta: record.meta,
        };
        episode.validate()?;
        Ok(episode)
    }
}

/// One line of the episode JSONL format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: String,
    pub labels: Vec<String>,
    pub verbalizer: Vec<String>,
    pub demos: Vec<DemoRecord>,
    pub query: QueryRecord,
    pub demo_dists: Vec<Vec<f64>>,
    pub query_dist: Vec<f64>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub text: String,
    pub label: Option<usize>,
}

pub fn write_episodes_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for episode in episodes {
        serde_json::to_writer(&mut out, &episode.to_record()).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_episodes_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let reader = BufReader::new(File::open(path)?);
    let mut episodes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.display().to_string(), line: i + 1, message };
        let record: EpisodeRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        episodes.push(Episode::from_record(record).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(episodes)
}
