//! Calibration methods: surprise calibration (SC) and the BC, LinC, CC+, BC+
//! and LinC+ baselines, plus their inference-count accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::backends::{Counted, EpisodeRequest};
use crate::domain::{softmax, Demonstration, Episode, LabelDistribution, LabelSpace, PromptTemplate};
use crate::error::{Error, Result};
use crate::seqnet::{self, adam_step, AdamState, Checkpoint, SeqNet, TrainConfig, TrainSample};
use crate::surprise::{binarize_magnitude, build_sequence, SurpriseSequence};

/// Query texts used by CC+ to probe the context-only prior.
pub const CONTENT_FREE_INPUTS: [&str; 3] = ["N/A", "", "[MASK]"];

/// Labeled support samples per class re-evaluated by BC+ and LinC+.
pub const SUPPORT_PER_CLASS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "icl")]
    Icl,
    #[serde(rename = "bc")]
    Bc,
    #[serde(rename = "linc")]
    Linc,
    #[serde(rename = "cc+")]
    CcPlus,
    #[serde(rename = "bc+")]
    BcPlus,
    #[serde(rename = "linc+")]
    LincPlus,
    #[serde(rename = "sc")]
    Sc,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Icl, Method::Bc, Method::Linc, Method::CcPlus, Method::BcPlus, Method::LincPlus, Method::Sc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Icl => "icl",
            Method::Bc => "bc",
            Method::Linc => "linc",
            Method::CcPlus => "cc+",
            Method::BcPlus => "bc+",
            Method::LincPlus => "linc+",
            Method::Sc => "sc",
        }
    }

    /// Whether the method trains on the M labeled training episodes.
    pub fn needs_training(self) -> bool {
        matches!(self, Method::Linc | Method::Sc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Logical LLM inferences a method needs for M training and T test queries,
/// with n support samples per query for the per-query estimators.
pub fn count_inferences(method: Method, m: u64, t: u64, n: u64) -> u64 {
    match method {
        Method::Icl | Method::Bc => t,
        Method::Linc | Method::Sc => m + t,
        Method::CcPlus => 3 * t,
        Method::BcPlus | Method::LincPlus => n * t,
    }
}

/// Same as [`count_inferences`] but takes a method name.
pub fn count_inferences_by_name(method: &str, m: u64, t: u64, n: u64) -> Result<u64> {
    Ok(count_inferences(method.parse()?, m, t, n))
}

// ---------------------------------------------------------------------------
// SC

#[derive(Debug, Clone, PartialEq)]
pub struct SCModel {
    pub net: SeqNet,
    pub config: TrainConfig,
    /// Feed only the signs of the surprise vectors.
    pub ablation: bool,
}

#[derive(Serialize, Deserialize)]
struct ScFile {
    ablation: bool,
    #[serde(flatten)]
    checkpoint: Checkpoint,
}

impl SCModel {
    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScFile {
            ablation: self.ablation,
            checkpoint: Checkpoint::from_net(&self.net, &self.config),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScFile = serde_json::from_str(text)?;
        Ok(SCModel { net: file.checkpoint.to_net()?, config: file.checkpoint.config, ablation: file.ablation })
    }

    fn input_rows(&self, seq: &SurpriseSequence) -> Vec<Vec<f64>> {
        if self.ablation {
            binarize_magnitude(seq).as_rows()
        } else {
            seq.as_rows()
        }
    }
}

pub fn sc_adjust(model: &SCModel, seq: &SurpriseSequence) -> Result<Vec<f64>> {
    match seq.num_classes() {
        None => Err(Error::EmptyContext),
        Some(c) if c != model.num_classes() => Err(Error::LabelSpaceMismatch { expected: model.num_classes(), got: c }),
        Some(_) => seqnet::adjustment(&model.net, &model.input_rows(seq)),
    }
}

/// `softmax(ln orig + a)`.
pub fn sc_calibrate(orig: &LabelDistribution, a: &[f64]) -> Result<LabelDistribution> {
    if a.len() != orig.num_classes() {
        return Err(Error::ShapeMismatch(format!("{} adjustments for {} classes", a.len(), orig.num_classes())));
    }
    let logits: Vec<f64> = orig.log_probs().iter().zip(a).map(|(l, a)| l + a).collect();
    Ok(LabelDistribution::from_logits(&logits))
}

/// Calibrates an episode's query distribution with a trained model.
pub fn sc_apply(model: &SCModel, episode: &Episode) -> Result<LabelDistribution> {
    let a = sc_adjust(model, &build_sequence(episode)?)?;
    sc_calibrate(&episode.query_dist, &a)
}

fn common_classes(mut counts: impl Iterator<Item = usize>) -> Result<usize> {
    let first = counts.next().ok_or(Error::EmptyTrainingSet)?;
    for c in counts {
        if c != first {
            return Err(Error::LabelSpaceMismatch { expected: first, got: c });
        }
    }
    Ok(first)
}

/// Trains the GRU and decoder end to end on labeled training episodes.
pub fn sc_train(episodes: &[Episode], cfg: &TrainConfig, ablation: bool) -> Result<SCModel> {
    cfg.validate()?;
    let classes = common_classes(episodes.iter().map(|e| e.labels.num_classes()))?;
    let batch = episodes
        .iter()
        .map(|ep| {
            let seq = build_sequence(ep)?;
            let target = seq.true_query_label.ok_or_else(|| Error::MissingQueryLabel(ep.query.text.clone()))?;
            let seq = if ablation { binarize_magnitude(&seq) } else { seq };
            Ok(TrainSample { seq: seq.as_rows(), base_logits: ep.query_dist.log_probs(), target })
        })
        .collect::<Result<Vec<_>>>()?;
    let (net, _) = seqnet::train(classes, &batch, cfg)?;
    Ok(SCModel { net, config: cfg.clone(), ablation })
}

// ---------------------------------------------------------------------------
// Prior-based baselines

/// How an estimated prior is removed from a distribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcSpace {
    /// `softmax(ln p - log_prior)`.
    #[default]
    Log,
    /// `softmax(p - prior)` with the prior as a probability vector.
    Prob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    /// Mean-centered log prior.
    pub log_prior: Vec<f64>,
    pub source: String,
    pub sample_count: usize,
    #[serde(default)]
    pub space: BcSpace,
}

impl PriorEstimate {
    /// Centers `log_prior` and wraps it.
    pub fn centered(mut log_prior: Vec<f64>, source: impl Into<String>, sample_count: usize) -> Self {
        let mean = log_prior.iter().sum::<f64>() / log_prior.len() as f64;
        log_prior.iter_mut().for_each(|l| *l -= mean);
        PriorEstimate { log_prior, source: source.into(), sample_count, space: BcSpace::Log }
    }

    pub fn in_space(mut self, space: BcSpace) -> Self {
        self.space = space;
        self
    }

    /// The prior as a probability vector.
    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.log_prior)
    }
}

fn check_batch_classes(dists: &[LabelDistribution]) -> Result<usize> {
    if dists.is_empty() {
        return Err(Error::EmptyBatch);
    }
    common_classes(dists.iter().map(LabelDistribution::num_classes))
}

/// Centered log of the batch-mean probability vector.
pub fn bc_estimate(query_dists: &[LabelDistribution]) -> Result<PriorEstimate> {
    let c = check_batch_classes(query_dists)?;
    let mut mean = vec![0.0; c];
    for d in query_dists {
        for (m, p) in mean.iter_mut().zip(d.probs()) {
            *m += p;
        }
    }
    let t = query_dists.len() as f64;
    Ok(PriorEstimate::centered(mean.iter().map(|m| (m / t).ln()).collect(), "bc", query_dists.len()))
}

pub fn apply_prior(dist: &LabelDistribution, prior: &PriorEstimate) -> Result<LabelDistribution> {
    if prior.log_prior.len() != dist.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "prior over {} classes for a {}-class distribution",
            prior.log_prior.len(),
            dist.num_classes()
        )));
    }
    let scores: Vec<f64> = match prior.space {
        BcSpace::Log => dist.log_probs().iter().zip(&prior.log_prior).map(|(l, p)| l - p).collect(),
        BcSpace::Prob => dist.probs().iter().zip(prior.probs()).map(|(p, q)| p - q).collect(),
    };
    Ok(LabelDistribution::from_logits(&scores))
}

/// Query-position distributions for the content-free inputs under `demos`,
/// averaged in log space. Issues exactly three logical inferences.
pub fn cc_plus_estimate(
    backend: &Counted,
    template: &PromptTemplate,
    labels: &LabelSpace,
    demos: &[Demonstration],
    id: &str,
) -> Result<PriorEstimate> {
    let c = labels.num_classes();
    let mut sum = vec![0.0; c];
    for (i, text) in CONTENT_FREE_INPUTS.iter().enumerate() {
        let query = Demonstration::unlabeled(*text);
        let request = EpisodeRequest {
            id: format!("{id}/cf{i}"),
            template,
            labels,
            demos,
            query: &query,
            meta: Map::new(),
        };
        let episode = backend.fetch_as(Method::CcPlus.name(), &request)?;
        for (s, l) in sum.iter_mut().zip(episode.query_dist.log_probs()) {
            *s += l;
        }
    }
    let n = CONTENT_FREE_INPUTS.len();
    Ok(PriorEstimate::centered(sum.iter().map(|s| s / n as f64).collect(), "cc+", n))
}

// ---------------------------------------------------------------------------
// LinC

/// Affine probe `softmax(W ln p + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinCModel {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LinCModel {
    pub fn identity(classes: usize) -> Self {
        let w = (0..classes).map(|i| (0..classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        LinCModel { w, b: vec![0.0; classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.b.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.b).map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).collect()
    }

    pub fn apply(&self, dist: &LabelDistribution) -> Result<LabelDistribution> {
        if dist.num_classes() != self.num_classes() {
            return Err(Error::LabelSpaceMismatch { expected: self.num_classes(), got: dist.num_classes() });
        }
        Ok(LabelDistribution::from_logits(&self.logits(&dist.log_probs())))
    }

    fn to_flat(&self) -> Vec<f64> {
        self.w.iter().flatten().chain(&self.b).copied().collect()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let c = self.num_classes();
        for (i, row) in self.w.iter_mut().enumerate() {
            row.copy_from_slice(&flat[i * c..(i + 1) * c]);
        }
        self.b.copy_from_slice(&flat[c * c..]);
    }
}

/// Mean cross-entropy of the probe and its gradient, flattened like `to_flat`.
fn linc_loss_grad(model: &LinCModel, data: &[(Vec<f64>, usize)]) -> (f64, Vec<f64>) {
    let c = model.num_classes();
    let mut grad = vec![0.0; c * c + c];
    let mut total = 0.0;
    for (x, y) in data {
        let (l, dz) = seqnet::softmax_cross_entropy(&model.logits(x), *y);
        total += l;
        for i in 0..c {
            for j in 0..c {
                grad[i * c + j] += dz[i] * x[j];
            }
            grad[c * c + i] += dz[i];
        }
    }
    let n = data.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

/// Fits the probe with full-batch Adam, starting from the identity.
pub fn linc_train(pairs: &[(LabelDistribution, usize)], cfg: &TrainConfig) -> Result<LinCModel> {
    cfg.validate()?;
    let classes = common_classes(pairs.iter().map(|(d, _)| d.num_classes()))?;
    let data: Vec<(Vec<f64>, usize)> = pairs
        .iter()
        .map(|(d, y)| {
            if *y >= classes {
                return Err(Error::IndexOutOfRange { what: "label", index: *y, size: classes });
            }
            Ok((d.log_probs(), *y))
        })
        .collect::<Result<_>>()?;
    let mut model = LinCModel::identity(classes);
    let mut flat = model.to_flat();
    let mut state = AdamState::new(flat.len());
    for _ in 0..cfg.epochs {
        let (_, grad) = linc_loss_grad(&model, &data);
        adam_step(&mut flat, &grad, &mut state, cfg.learning_rate)?;
        model.set_flat(&flat);
    }
    Ok(model)
}

/// Mean cross-entropy of the probe on labeled pairs.
pub fn linc_loss(model: &LinCModel, pairs: &[(LabelDistribution, usize)]) -> f64 {
    let data: Vec<(Vec<f64>, usize)> = pairs.iter().map(|(d, y)| (d.log_probs(), *y)).collect();
    linc_loss_grad(model, &data).0
}

// ---------------------------------------------------------------------------
// Per-query estimators

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PerQueryEstimate {
    Prior(PriorEstimate),
    Linc(LinCModel),
}

impl PerQueryEstimate {
    pub fn apply(&self, dist: &LabelDistribution) -> Result<LabelDistribution> {
        match self {
            PerQueryEstimate::Prior(p) => apply_prior(dist, p),
            PerQueryEstimate::Linc(m) => m.apply(dist),
        }
    }
}

/// The first [`SUPPORT_PER_CLASS`] samples of each class, in class order.
pub fn support_subset(support: &[Demonstration], classes: usize) -> Result<Vec<Demonstration>> {
    let mut picked = Vec::with_capacity(SUPPORT_PER_CLASS * classes);
    for class in 0..classes {
        let of_class: Vec<&Demonstration> = support.iter().filter(|d| d.label == Some(class)).collect();
        if of_class.len() < SUPPORT_PER_CLASS {
            return Err(Error::InsufficientSupport { class, have: of_class.len(), need: SUPPORT_PER_CLASS });
        }
        picked.extend(of_class.into_iter().take(SUPPORT_PER_CLASS).cloned());
    }
    Ok(picked)
}

/// Re-evaluates the support set as queries under this query's context, then
/// fits BC (BC+) or LinC (LinC+) on the results. Issues `5 * C` inferences.
#[allow(clippy::too_many_arguments)]
pub fn per_query_prior(
    method: Method,
    support: &[Demonstration],
    demos: &[Demonstration],
    backend: &Counted,
    template: &PromptTemplate,
    labels: &LabelSpace,
    cfg: &TrainConfig,
    id: &str,
) -> Result<PerQueryEstimate> {
    if !matches!(method, Method::BcPlus | Method::LincPlus) {
        return Err(Error::UnknownMethod(format!("{method} is not a per-query estimator")));
    }
    let subset = support_subset(support, labels.num_classes())?;
    let mut pairs = Vec::with_capacity(subset.len());
    for (i, sample) in subset.iter().enumerate() {
        let query = Demonstration::unlabeled(sample.text.clone());
        let request = EpisodeRequest {
            id: format!("{id}/s{i}"),
            template,
            labels,
            demos,
            query: &query,
            meta: Map::new(),
        };
        let episode = backend.fetch_as(method.name(), &request)?;
        pairs.push((episode.query_dist, sample.label.expect("support samples are labeled")));
    }
    Ok(match method {
        Method::BcPlus => {
            let dists: Vec<LabelDistribution> = pairs.into_iter().map(|(d, _)| d).collect();
            let mut prior = bc_estimate(&dists)?;
            prior.source = "bc+".into();
            PerQueryEstimate::Prior(prior)
        }
        _ => PerQueryEstimate::Linc(linc_train(&pairs, cfg)?),
    })
}
