use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Map;

use super::scenario::{observations, oracle_correlation_setup};
use super::stats::{linear_fit, spearman, LinearFit};
use super::{derive_seed, Datasets, ExperimentConfig};
use crate::backends::{Counted, EpisodeRequest, LogprobBackend, Memo};
use crate::bayessim::{generate_world, insertion_experiment, ConceptModel};
use crate::calibrators::bc_estimate;
use crate::domain::{Demonstration, LabelDistribution, LabelSpace, PromptTemplate, FLOOR};
use crate::error::{Error, Result};
use crate::selection::{select_random, Pool};

const SCENARIO_CANDIDATES: usize = 200;

/// Fixed context plus the candidates inserted after it, one at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSetup {
    pub context: Vec<Demonstration>,
    pub candidates: Vec<Demonstration>,
}

/// Where class priors come from.
pub enum PriorSource<'a> {
    /// Exact priors of a concept model; texts follow the `x<e>` naming.
    Exact(&'a ConceptModel),
    /// Batch-calibration estimates over a probe batch queried through a backend.
    Probe {
        backend: &'a Counted,
        template: &'a PromptTemplate,
        labels: &'a LabelSpace,
        probe: &'a [Demonstration],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionPoint {
    pub text: String,
    pub label: usize,
    /// Surprise, negated for label-0 candidates.
    pub signed_surprise: f64,
    /// Positive-class prior before and after the insertion.
    pub prior_before: f64,
    pub prior_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    /// Inserted label, or `None` for the pooled group.
    pub label: Option<usize>,
    pub n: usize,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    /// Why the correlation is undefined, when it is.
    pub error: Option<String>,
    pub mean_prior_before: f64,
    pub mean_prior_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub groups: Vec<GroupStats>,
    pub pooled: GroupStats,
    pub points: Vec<InsertionPoint>,
}

impl CorrelationReport {
    pub fn group(&self, label: usize) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.label == Some(label))
    }
}

fn group_stats(label: Option<usize>, points: &[&InsertionPoint]) -> GroupStats {
    let n = points.len();
    let mean = |f: fn(&InsertionPoint) -> f64| if n == 0 { f64::NAN } else { points.iter().map(|p| f(p)).sum::<f64>() / n as f64 };
    let x: Vec<f64> = points.iter().map(|p| p.signed_surprise).collect();
    let y: Vec<f64> = points.iter().map(|p| p.prior_after).collect();
    let (rho, p_value, error) = match spearman(&x, &y) {
        Ok(c) => (Some(c.rho), Some(c.p_value), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    GroupStats {
        label,
        n,
        rho,
        p_value,
        error,
        mean_prior_before: mean(|p| p.prior_before),
        mean_prior_after: mean(|p| p.prior_after),
    }
}

/// Correlates each candidate's signed surprise with the positive-class prior
/// after inserting it, per inserted label and pooled.
pub fn correlate_surprise_prior(setup: &CorrelationSetup, source: &PriorSource<'_>) -> Result<CorrelationReport> {
    if setup.candidates.is_empty() {
        return Err(Error::DegenerateInput("no candidates".into()));
    }
    let points = match source {
        PriorSource::Exact(model) => exact_points(model, setup)?,
        PriorSource::Probe { backend, template, labels, probe } => probe_points(backend, template, labels, probe, setup)?,
    };
    let mut labels: Vec<usize> = points.iter().map(|p| p.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let groups = labels
        .iter()
        .map(|&l| group_stats(Some(l), &points.iter().filter(|p| p.label == l).collect::<Vec<_>>()))
        .collect();
    let pooled = group_stats(None, &points.iter().collect::<Vec<_>>());
    Ok(CorrelationReport { groups, pooled, points })
}

/// Context and candidates from the `correlate` section, or sampled from the
/// synthetic scenario when the section is absent.
pub fn correlation_setup(cfg: &ExperimentConfig, data: &Datasets) -> Result<CorrelationSetup> {
    match (&cfg.correlate, &cfg.scenario) {
        (Some(cc), _) => {
            let candidates = if cc.candidates.is_empty() {
                let seed = derive_seed(cc.seed.unwrap_or(cfg.seed), 3, 0);
                let picks = select_random(&Pool::new(data.pool.clone()), cc.num_candidates, seed)?;
                picks.iter().map(|p| data.pool[p.index].clone()).collect()
            } else {
                cc.candidates.clone()
            };
            Ok(CorrelationSetup { context: cc.context.clone(), candidates })
        }
        (None, Some(scenario)) => {
            let world = generate_world(&scenario.task)?;
            Ok(oracle_correlation_setup(&world, scenario.k, SCENARIO_CANDIDATES, cfg.seed))
        }
        (None, None) => Err(Error::Config("correlate needs a `correlate` section or a synthetic scenario".into())),
    }
}

/// Exact priors when `model` is given, otherwise BC estimates over the first
/// `probe_size` test queries.
pub fn run_correlation(
    cfg: &ExperimentConfig,
    data: &Datasets,
    backend: Arc<dyn LogprobBackend>,
    model: Option<&ConceptModel>,
) -> Result<CorrelationReport> {
    let setup = correlation_setup(cfg, data)?;
    if let Some(model) = model {
        return correlate_surprise_prior(&setup, &PriorSource::Exact(model));
    }
    let probe_size = cfg.correlate.as_ref().map_or(32, |c| c.probe_size);
    let probe = &data.test[..probe_size.min(data.test.len())];
    let labels = cfg.label_space()?;
    let counted = Counted::new(Arc::new(Memo::new(backend)));
    correlate_surprise_prior(&setup, &PriorSource::Probe { backend: &counted, template: &cfg.template, labels: &labels, probe })
}

fn exact_points(model: &ConceptModel, setup: &CorrelationSetup) -> Result<Vec<InsertionPoint>> {
    let context = observations(model, &setup.context)?;
    let candidates = observations(model, &setup.candidates)?;
    let records = insertion_experiment(model, &context, &candidates)?;
    Ok(records
        .into_iter()
        .zip(&setup.candidates)
        .map(|(r, d)| InsertionPoint {
            text: d.text.clone(),
            label: r.candidate.label,
            signed_surprise: r.signed_surprise,
            prior_before: r.prior_before,
            prior_after: r.prior_after,
        })
        .collect())
}

fn probe_points(
    backend: &Counted,
    template: &PromptTemplate,
    labels: &LabelSpace,
    probe: &[Demonstration],
    setup: &CorrelationSetup,
) -> Result<Vec<InsertionPoint>> {
    if labels.num_classes() != 2 {
        return Err(Error::Config(format!("the correlation study needs two classes, got {}", labels.num_classes())));
    }
    if probe.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let query_dist = |demos: &[Demonstration], text: &str, id: String| -> Result<LabelDistribution> {
        let query = Demonstration::unlabeled(text);
        let request = EpisodeRequest { id, template, labels, demos, query: &query, meta: Map::new() };
        Ok(backend.fetch_as("correlate", &request)?.query_dist)
    };
    let positive_prior = |demos: &[Demonstration], tag: &str| -> Result<f64> {
        let dists = probe
            .iter()
            .enumerate()
            .map(|(i, p)| query_dist(demos, &p.text, format!("{tag}/probe{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(bc_estimate(&dists)?.probs()[1])
    };
    let prior_before = positive_prior(&setup.context, "before")?;
    setup
        .candidates
        .iter()
        .enumerate()
        .map(|(i, cand)| {
            let label = cand.label.ok_or_else(|| Error::MissingQueryLabel(cand.text.clone()))?;
            labels.check_label(label)?;
            let p = query_dist(&setup.context, &cand.text, format!("cand{i}"))?.prob(label);
            let surprise = if 1.0 - p <= FLOOR { 0.0 } else { -p.ln() };
            let mut extended = setup.context.clone();
            extended.push(cand.clone());
            Ok(InsertionPoint {
                text: cand.text.clone(),
                label,
                signed_surprise: if label == 0 { -surprise } else { surprise },
                prior_before,
                prior_after: positive_prior(&extended, &format!("after{i}"))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub id: String,
    /// `p(1) / p(0)` under the reference method.
    pub x: f64,
    /// `p(1) / p(0)` under the compared method.
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioComparison {
    pub fit: LinearFit,
    pub points: Vec<RatioPoint>,
}

/// Per-example `p(1)/p(0)` pairs, computed in log space.
pub fn ratio_points(
    compared: &[(String, LabelDistribution)],
    reference: &[(String, LabelDistribution)],
) -> Result<Vec<RatioPoint>> {
    if compared.len() != reference.len() {
        return Err(Error::MismatchedIds(format!("{} vs {} examples", compared.len(), reference.len())));
    }
    let ratio = |d: &LabelDistribution| -> Result<f64> {
        if d.num_classes() != 2 {
            return Err(Error::Config(format!("ratios need two classes, got {}", d.num_classes())));
        }
        let lp = d.log_probs();
        Ok((lp[1] - lp[0]).exp())
    };
    compared
        .iter()
        .zip(reference)
        .map(|((ida, a), (idb, b))| {
            if ida != idb {
                return Err(Error::MismatchedIds(format!("{ida} vs {idb}")));
            }
            Ok(RatioPoint { id: ida.clone(), x: ratio(b)?, y: ratio(a)? })
        })
        .collect()
}

/// Least-squares fit of the compared method's ratios on the reference method's.
pub fn ratio_compare(
    compared: &[(String, LabelDistribution)],
    reference: &[(String, LabelDistribution)],
) -> Result<RatioComparison> {
    let points = ratio_points(compared, reference)?;
    let x: Vec<f64> = points.iter().map(|p| p.x).collect();
    let y: Vec<f64> = points.iter().map(|p| p.y).collect();
    Ok(RatioComparison { fit: linear_fit(&x, &y)?, points })
}
