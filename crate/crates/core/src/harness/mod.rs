//! Experiment orchestration: configuration, dataset loading, context
//! construction, evaluation across calibration methods, the surprise/prior
//! correlation study and the SC/BC ratio comparison.

mod correlate;
mod evaluate;
mod scenario;
pub mod stats;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use correlate::{
    correlate_surprise_prior, correlation_setup, ratio_compare, ratio_points, run_correlation, CorrelationReport, CorrelationSetup, GroupStats,
    InsertionPoint, PriorSource, RatioComparison, RatioPoint,
};
pub use evaluate::{run_evaluation, write_results_csv, ExampleRecord, MethodResult, RunResult};
pub use scenario::{
    build_oracle_scenario, exact_prior_calibrate, input_index, oracle_correlation_setup, OracleScenario, Scenario,
};
pub use stats::{linear_fit, spearman, Correlation, LinearFit};

use crate::backends::BackendSpec;
use crate::calibrators::{BcSpace, Method};
use crate::domain::{Demonstration, LabelSpace, PromptTemplate};
use crate::error::{Error, Result};
use crate::selection::{bm25_select, order, select_random, topk_select, Ordering, Pool, SelectionStrategy};
use crate::seqnet::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default)]
    pub strategy: SelectionStrategy,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Seed for random selection; defaults to the global seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_k() -> usize {
    4
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { strategy: SelectionStrategy::Random, k: default_k(), seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibratorConfig {
    /// Training settings shared by SC, LinC and LinC+.
    pub train: TrainConfig,
    /// Feed SC only the signs of the surprise vectors.
    pub ablation: bool,
    pub bc_space: BcSpace,
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        CalibratorConfig { train: TrainConfig::default(), ablation: false, bc_space: BcSpace::Log }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Labeled queries used to train SC and LinC (JSONL of `{text, label}`).
    pub train_data: Option<PathBuf>,
    /// Labeled test queries.
    pub test_data: Option<PathBuf>,
    /// Demonstration pool; defaults to the training data.
    pub pool_data: Option<PathBuf>,
    /// JSON object mapping text to embedding vector, for top-k selection.
    pub embeddings: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsConfig {
    pub labels: Vec<String>,
    /// First-token strings; defaults to each label with a leading space.
    #[serde(default)]
    pub verbalizer: Option<Vec<String>>,
}

impl LabelsConfig {
    pub fn label_space(&self) -> Result<LabelSpace> {
        let verbalizer = match &self.verbalizer {
            Some(v) => v.clone(),
            None => self.labels.iter().map(|l| format!(" {l}")).collect(),
        };
        Ok(LabelSpace::new(self.labels.clone(), verbalizer)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateConfig {
    /// Fixed context the candidates are appended to.
    pub context: Vec<Demonstration>,
    /// Candidates to insert; when empty they are sampled from the pool.
    #[serde(default)]
    pub candidates: Vec<Demonstration>,
    #[serde(default = "default_candidate_count")]
    pub num_candidates: usize,
    /// Probe batch size for BC-based prior estimation on non-oracle backends.
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_candidate_count() -> usize {
    200
}

fn default_probe_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backend: BackendSpec,
    #[serde(default)]
    pub template: PromptTemplate,
    /// Required unless a synthetic scenario supplies the label space.
    #[serde(default)]
    pub labels: Option<LabelsConfig>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub ordering: Option<Ordering>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub calibrator: CalibratorConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub seed: u64,
    /// Concurrent backend fetches.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Synthetic oracle data used when no data paths are given.
    #[serde(default)]
    pub scenario: Option<OracleScenario>,
    #[serde(default)]
    pub correlate: Option<CorrelateConfig>,
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_workers() -> usize {
    4
}

impl ExperimentConfig {
    /// A config evaluating `methods` on a synthetic oracle scenario.
    pub fn oracle(scenario: OracleScenario, methods: Vec<Method>) -> Self {
        ExperimentConfig {
            backend: BackendSpec::Oracle {
                model: crate::backends::ModelSource::Synthetic(scenario.task.clone()),
                input_map: None,
                content_free_input: None,
            },
            template: PromptTemplate::default(),
            labels: None,
            selection: SelectionConfig { strategy: SelectionStrategy::Random, k: scenario.k, seed: None },
            ordering: None,
            methods,
            calibrator: CalibratorConfig::default(),
            paths: PathsConfig::default(),
            seed: scenario.seed,
            workers: default_workers(),
            scenario: Some(scenario),
            correlate: None,
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.template.validate()?;
        self.calibrator.train.validate()?;
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        match (&self.labels, &self.scenario) {
            (Some(labels), _) => labels.label_space(),
            (None, Some(s)) => Ok(crate::bayessim::oracle_label_space(s.task.num_classes)),
            (None, None) => Err(Error::Config("labels are required without a synthetic scenario".into())),
        }
    }

    pub fn selection_seed(&self) -> u64 {
        self.selection.seed.unwrap_or(self.seed)
    }

    /// Loads the datasets named in `paths`, or generates the scenario's.
    /// Relative paths resolve against `base_dir`.
    pub fn load_datasets(&self, base_dir: &Path) -> Result<Datasets> {
        let p = &self.paths;
        if p.test_data.is_none() {
            return match &self.scenario {
                Some(s) => Ok(build_oracle_scenario(s)?.data),
                None => Err(Error::Config("paths.test_data is required without a synthetic scenario".into())),
            };
        }
        let read = |path: &Option<PathBuf>| -> Result<Vec<Demonstration>> {
            match path {
                Some(path) => read_examples(&base_dir.join(path)),
                None => Ok(Vec::new()),
            }
        };
        let train = read(&p.train_data)?;
        let test = read(&p.test_data)?;
        let pool = if p.pool_data.is_some() { read(&p.pool_data)? } else { train.clone() };
        let embeddings = match &p.embeddings {
            Some(path) => Some(serde_json::from_str(&std::fs::read_to_string(base_dir.join(path))?)?),
            None => None,
        };
        Ok(Datasets { pool, train, test, embeddings, pool_is_train: p.pool_data.is_none() })
    }
}

/// Demonstration pool, training queries and test queries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Datasets {
    pub pool: Vec<Demonstration>,
    pub train: Vec<Demonstration>,
    pub test: Vec<Demonstration>,
    pub embeddings: Option<HashMap<String, Vec<f64>>>,
    /// The pool is the training data, so a training query must not see itself.
    pub pool_is_train: bool,
}

/// Reads labeled examples, one `{"text": .., "label": ..}` object per line.
pub fn read_examples(path: &Path) -> Result<Vec<Demonstration>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[Demonstration]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// SplitMix64 mixing of a base seed with a stream and an index.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Picks and orders the K demonstrations for one query.
#[allow(clippy::too_many_arguments)]
pub fn build_context(
    query: &Demonstration,
    data: &Datasets,
    selection: &SelectionConfig,
    ordering: Option<Ordering>,
    seed: u64,
    stream: u64,
    index: usize,
    exclude: Option<usize>,
) -> Result<Vec<Demonstration>> {
    let keep: Vec<usize> = (0..data.pool.len()).filter(|&i| Some(i) != exclude).collect();
    let items: Vec<Demonstration> = keep.iter().map(|&i| data.pool[i].clone()).collect();
    let k = selection.k;
    let picks = match selection.strategy {
        SelectionStrategy::Random => select_random(&Pool::new(items), k, derive_seed(seed, stream, index as u64))?,
        SelectionStrategy::Bm25 => bm25_select(&query.text, &Pool::new(items), k)?,
        SelectionStrategy::Topk => {
            let table = data.embeddings.as_ref().ok_or(Error::MissingEmbeddings)?;
            let lookup = |text: &str| table.get(text).cloned().ok_or(Error::MissingEmbeddings);
            let embeddings = items.iter().map(|d| lookup(&d.text)).collect::<Result<Vec<_>>>()?;
            let pool = Pool::with_embeddings(items, embeddings)?;
            let picks = topk_select(&lookup(&query.text)?, &pool, k)?;
            return Ok(ordered(&picks, ordering).iter().map(|p| pool.items[p.index].clone()).collect());
        }
    };
    Ok(ordered(&picks, ordering).iter().map(|p| data.pool[keep[p.index]].clone()).collect())
}

fn ordered(picks: &[crate::selection::ScoredPick], ordering: Option<Ordering>) -> Vec<crate::selection::ScoredPick> {
    match ordering {
        Some(o) => order(picks, o),
        None => picks.to_vec(),
    }
}
