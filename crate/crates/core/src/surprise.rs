//! Per-demonstration surprise vectors and the sequences fed to the calibrator.
//!
//! For a demonstration with label `y` and delimiter distribution `p`, entry
//! `c` of the surprise vector is `(1 - 2[c == y]) * ln p(c)`. The true-label
//! entry is therefore `-ln p(y) >= 0` and every other entry is `ln p(c) <= 0`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Episode, LabelDistribution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurpriseVector(pub Vec<f64>);

impl SurpriseVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurpriseSequence {
    pub vectors: Vec<SurpriseVector>,
    pub true_query_label: Option<usize>,
}

impl SurpriseSequence {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Number of classes, or `None` for an empty sequence.
    pub fn num_classes(&self) -> Option<usize> {
        self.vectors.first().map(SurpriseVector::len)
    }

    pub fn as_rows(&self) -> Vec<Vec<f64>> {
        self.vectors.iter().map(|v| v.0.clone()).collect()
    }
}

pub fn surprise_vector(dist: &LabelDistribution, y: usize) -> SurpriseVector {
    SurpriseVector(
        dist.probs()
            .iter()
            .enumerate()
            .map(|(c, p)| if c == y { -p.ln() } else { p.ln() })
            .collect(),
    )
}

pub fn build_sequence(episode: &Episode) -> Result<SurpriseSequence> {
    if episode.demos.is_empty() {
        return Err(Error::EmptyContext);
    }
    let vectors = episode
        .demos
        .iter()
        .zip(&episode.demo_dists)
        .map(|(demo, dist)| {
            let label = demo.label.ok_or_else(|| Error::MissingQueryLabel(demo.text.clone()))?;
            Ok(surprise_vector(dist, label))
        })
        .collect::<Result<_>>()?;
    Ok(SurpriseSequence { vectors, true_query_label: episode.query.label })
}

/// Keeps only the sign of every entry; zero counts as positive.
pub fn binarize_magnitude(seq: &SurpriseSequence) -> SurpriseSequence {
    SurpriseSequence {
        vectors: seq
            .vectors
            .iter()
            .map(|v| SurpriseVector(v.0.iter().map(|&x| if x < 0.0 { -1.0 } else { 1.0 }).collect()))
            .collect(),
        true_query_label: seq.true_query_label,
    }
}

/// One line of the training-set JSONL format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub seq: Vec<Vec<f64>>,
    pub query_dist: Vec<f64>,
    pub query_label: usize,
}

impl TrainingRecord {
    pub fn from_episode(episode: &Episode) -> Result<Self> {
        let seq = build_sequence(episode)?;
        let query_label = seq.true_query_label.ok_or_else(|| Error::MissingQueryLabel(episode.query.text.clone()))?;
        Ok(TrainingRecord {
            id: episode.id.clone(),
            seq: seq.as_rows(),
            query_dist: episode.query_dist.probs().to_vec(),
            query_label,
        })
    }

    pub fn sequence(&self) -> SurpriseSequence {
        SurpriseSequence {
            vectors: self.seq.iter().cloned().map(SurpriseVector).collect(),
            true_query_label: Some(self.query_label),
        }
    }
}

pub fn write_training_jsonl(path: &Path, records: &[TrainingRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_training_jsonl(path: &Path) -> Result<Vec<TrainingRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
