use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{build_context, Datasets, ExperimentConfig};
use crate::backends::{Counted, EpisodeRequest, LogprobBackend, Memo};
use crate::calibrators::{
    apply_prior, bc_estimate, cc_plus_estimate, count_inferences, linc_train, per_query_prior, sc_apply, sc_train,
    Method, SCModel, SUPPORT_PER_CLASS,
};
use crate::domain::{Demonstration, Episode, LabelDistribution, LabelSpace};
use crate::error::{Error, Result};

const TEST: &str = "test";
const TRAIN: &str = "train";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub accuracy: f64,
    /// Logical inferences measured by the counting backend.
    pub inference_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub label: usize,
    pub predictions: BTreeMap<Method, usize>,
    pub calibrated: BTreeMap<Method, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub methods: Vec<MethodResult>,
    /// Training episodes (M), test episodes (T) and support samples per query (n).
    pub m: u64,
    pub t: u64,
    pub n: u64,
    pub seed: u64,
    pub k: usize,
    pub selection: String,
    pub ordering: String,
    /// Backend requests actually sent, after memoization.
    pub backend_requests: u64,
    pub records: Vec<ExampleRecord>,
    #[serde(skip)]
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub test_episodes: Vec<Episode>,
    #[serde(skip)]
    pub sc_model: Option<SCModel>,
}

impl RunResult {
    pub fn accuracy(&self, method: Method) -> Option<f64> {
        self.methods.iter().find(|r| r.method == method).map(|r| r.accuracy)
    }

    /// `(id, calibrated distribution)` for every test example under `method`.
    pub fn calibrated(&self, method: Method) -> Result<Vec<(String, LabelDistribution)>> {
        self.records
            .iter()
            .map(|r| {
                let probs = r
                    .calibrated
                    .get(&method)
                    .ok_or_else(|| Error::Config(format!("method {method} was not evaluated")))?;
                Ok((r.id.clone(), LabelDistribution::from_probs(probs.clone())?))
            })
            .collect()
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    labels: &'a LabelSpace,
    backend: &'a Counted,
}

impl Ctx<'_> {
    fn request<'r>(&'r self, id: String, demos: &'r [Demonstration], query: &'r Demonstration, role: &str) -> EpisodeRequest<'r> {
        let mut meta = Map::new();
        meta.insert("role".into(), role.into());
        meta.insert("selection".into(), self.cfg.selection.strategy.to_string().into());
        meta.insert("ordering".into(), ordering_name(self.cfg).into());
        meta.insert("seed".into(), Value::from(self.cfg.seed));
        EpisodeRequest { id, template: &self.cfg.template, labels: self.labels, demos, query, meta }
    }

    /// Builds contexts and fetches one episode per query, preserving order.
    fn episodes(&self, data: &Datasets, queries: &[Demonstration], role: &str, stream: u64) -> Result<Vec<Episode>> {
        let exclude_self = role == TRAIN && data.pool_is_train;
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let label = q.label.ok_or_else(|| Error::MissingQueryLabel(q.text.clone()))?;
                self.labels.check_label(label)?;
                let exclude = exclude_self.then_some(i);
                let demos = build_context(
                    q,
                    data,
                    &self.cfg.selection,
                    self.cfg.ordering,
                    self.cfg.selection_seed(),
                    stream,
                    i,
                    exclude,
                )?;
                self.backend.fetch_as(role, &self.request(format!("{role}-{i}"), &demos, q, role))
            })
            .collect()
    }
}

fn ordering_name(cfg: &ExperimentConfig) -> String {
    cfg.ordering.map_or_else(|| "none".to_string(), |o| o.to_string())
}

/// Runs every configured method on the test queries and verifies inference counts.
pub fn run_evaluation(cfg: &ExperimentConfig, data: &Datasets, backend: Arc<dyn LogprobBackend>) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let labels = cfg.label_space()?;
    let classes = labels.num_classes();
    let mut methods = cfg.methods.clone();
    methods.dedup();
    if data.test.is_empty() {
        return Err(Error::Config("no test queries".into()));
    }
    let needs_training = methods.iter().any(|m| m.needs_training());
    if needs_training && data.train.is_empty() {
        return Err(Error::Config("sc and linc need training data".into()));
    }

    let counted = Counted::new(Arc::new(Memo::new(backend)));
    let ctx = Ctx { cfg, labels: &labels, backend: &counted };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    pool.install(|| -> Result<RunResult> {
        let test = ctx.episodes(data, &data.test, TEST, 0)?;
        let train = if needs_training { ctx.episodes(data, &data.train, TRAIN, 1)? } else { Vec::new() };
        let train_pairs: Vec<(LabelDistribution, usize)> =
            train.iter().map(|e| (e.query_dist.clone(), e.query.label.expect("checked above"))).collect();
        let test_dists: Vec<LabelDistribution> = test.iter().map(|e| e.query_dist.clone()).collect();

        let mut sc_model = None;
        let mut calibrated: Vec<(Method, Vec<LabelDistribution>)> = Vec::new();
        for &method in &methods {
            let dists = match method {
                Method::Icl => test_dists.clone(),
                Method::Bc => {
                    let prior = bc_estimate(&test_dists)?.in_space(cfg.calibrator.bc_space);
                    test_dists.iter().map(|d| apply_prior(d, &prior)).collect::<Result<_>>()?
                }
                Method::Linc => {
                    let model = linc_train(&train_pairs, &cfg.calibrator.train)?;
                    test_dists.iter().map(|d| model.apply(d)).collect::<Result<_>>()?
                }
                Method::Sc => {
                    let model = sc_train(&train, &cfg.calibrator.train, cfg.calibrator.ablation)?;
                    let out = test.iter().map(|e| sc_apply(&model, e)).collect::<Result<_>>()?;
                    sc_model = Some(model);
                    out
                }
                Method::CcPlus => test
                    .par_iter()
                    .map(|e| {
                        let prior = cc_plus_estimate(&counted, &cfg.template, &labels, &e.demos, &e.id)?;
                        apply_prior(&e.query_dist, &prior)
                    })
                    .collect::<Result<_>>()?,
                Method::BcPlus | Method::LincPlus => test
                    .par_iter()
                    .map(|e| {
                        let est = per_query_prior(
                            method,
                            &data.pool,
                            &e.demos,
                            &counted,
                            &cfg.template,
                            &labels,
                            &cfg.calibrator.train,
                            &e.id,
                        )?;
                        est.apply(&e.query_dist)
                    })
                    .collect::<Result<_>>()?,
            };
            calibrated.push((method, dists));
        }

        let (m, t, n) = (train.len() as u64, test.len() as u64, (SUPPORT_PER_CLASS * classes) as u64);
        let counter = counted.counter();
        let mut results = Vec::with_capacity(methods.len());
        for (method, dists) in &calibrated {
            let measured = match method {
                Method::Icl | Method::Bc => counter.method(TEST),
                Method::Linc | Method::Sc => counter.method(TRAIN) + counter.method(TEST),
                other => counter.method(other.name()),
            };
            let expected = count_inferences(*method, m, t, n);
            if measured != expected {
                return Err(Error::CountMismatch { method: method.to_string(), measured, expected });
            }
            let correct = dists.iter().zip(&test).filter(|(d, e)| Some(d.argmax()) == e.query.label).count();
            results.push(MethodResult { method: *method, accuracy: correct as f64 / t as f64, inference_count: measured });
        }

        let records = test
            .iter()
            .enumerate()
            .map(|(i, e)| ExampleRecord {
                id: e.id.clone(),
                label: e.query.label.expect("checked above"),
                predictions: calibrated.iter().map(|(m, d)| (*m, d[i].argmax())).collect(),
                calibrated: calibrated.iter().map(|(m, d)| (*m, d[i].probs().to_vec())).collect(),
            })
            .collect();

        Ok(RunResult {
            methods: results,
            m,
            t,
            n,
            seed: cfg.seed,
            k: cfg.selection.k,
            selection: cfg.selection.strategy.to_string(),
            ordering: ordering_name(cfg),
            backend_requests: counter.requests(),
            records,
            wall_time_secs: start.elapsed().as_secs_f64(),
            test_episodes: test,
            sc_model,
        })
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    accuracy: f64,
    inference_count: u64,
    seed: u64,
    #[serde(rename = "K")]
    k: usize,
    selection: &'a str,
    ordering: &'a str,
}

/// One row per method: method, accuracy, inference_count, seed, K, selection, ordering.
pub fn write_results_csv(path: &Path, result: &RunResult) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in &result.methods {
        writer
            .serialize(CsvRow {
                method: r.method.name(),
                accuracy: r.accuracy,
                inference_count: r.inference_count,
                seed: result.seed,
                k: result.k,
                selection: &result.selection,
                ordering: &result.ordering,
            })
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}
