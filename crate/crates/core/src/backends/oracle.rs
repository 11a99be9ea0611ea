use std::collections::HashMap;
use std::sync::Arc;

use super::{build_meta, EpisodeRequest, Fetched, LogprobBackend};
use crate::bayessim::{input_text, oracle_dists, ConceptModel, Observation};
use crate::domain::Episode;
use crate::error::{Error, Result};

/// Serves exact predictive distributions from a concept model.
pub struct OracleBackend {
    model: Arc<ConceptModel>,
    inputs: HashMap<String, usize>,
    content_free_input: Option<usize>,
}

impl OracleBackend {
    pub fn new(model: Arc<ConceptModel>) -> Self {
        let inputs = (0..model.num_inputs()).map(|e| (input_text(e), e)).collect();
        OracleBackend { model, inputs, content_free_input: None }
    }

    pub fn with_input_map(mut self, inputs: HashMap<String, usize>) -> Result<Self> {
        for &e in inputs.values() {
            self.check_input(e)?;
        }
        self.inputs = inputs;
        Ok(self)
    }

    /// Unknown texts (such as "N/A") map to this input instead of failing.
    pub fn with_content_free_input(mut self, e: usize) -> Result<Self> {
        self.check_input(e)?;
        self.content_free_input = Some(e);
        Ok(self)
    }

    pub fn model(&self) -> &ConceptModel {
        &self.model
    }

    fn check_input(&self, e: usize) -> Result<()> {
        if e >= self.model.num_inputs() {
            return Err(Error::IndexOutOfRange { what: "input", index: e, size: self.model.num_inputs() });
        }
        Ok(())
    }

    fn resolve(&self, text: &str) -> Result<usize> {
        self.inputs
            .get(text)
            .copied()
            .or(self.content_free_input)
            .ok_or_else(|| Error::UnknownInput(text.to_string()))
    }
}

impl LogprobBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn fetch(&self, request: &EpisodeRequest<'_>) -> Result<Fetched> {
        let classes = self.model.num_classes();
        if request.labels.num_classes() != classes {
            return Err(Error::LabelSpaceMismatch { expected: classes, got: request.labels.num_classes() });
        }
        let observations = request
            .demos
            .iter()
            .map(|d| {
                let label = d.label.ok_or_else(|| Error::MissingQueryLabel(d.text.clone()))?;
                request.labels.check_label(label)?;
                Ok(Observation::new(self.resolve(&d.text)?, label))
            })
            .collect::<Result<Vec<_>>>()?;
        let query = self.resolve(&request.query.text)?;
        let (demo_dists, query_dist) = oracle_dists(&self.model, &observations, query)?;
        let mut meta = build_meta(request, self.name());
        if let Some(seed) = self.model.seed() {
            meta.entry("seed").or_insert(seed.into());
        }
        let episode = Episode {
            id: request.id.clone(),
            labels: request.labels.clone(),
            demos: request.demos.to_vec(),
            query: request.query.clone(),
            demo_dists,
            query_dist,
            meta,
        };
        Ok(Fetched { episode, requests: 1 })
    }
}
