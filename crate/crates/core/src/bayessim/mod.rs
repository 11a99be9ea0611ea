//! Exact finite-concept Bayesian model of in-context learning.
//!
//! A [`ConceptModel`] is a finite mixture over latent concepts. Each concept
//! owns an input distribution `p(e|z)` and a label table `p(y|e,z)`. Beliefs
//! over concepts are updated exactly by enumeration, which makes the model a
//! ground-truth oracle for prior shifts, surprises and predictive
//! distributions.

mod generate;

pub use generate::{generate_task, generate_world, input_text, oracle_label_space, SyntheticTaskConfig, SyntheticWorld};

use serde::{Deserialize, Serialize};

use crate::domain::{normalize_over_labels, FLOOR, Demonstration, Episode, LabelDistribution};
use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-9;

/// An observed demonstration: input index and label index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub input: usize,
    pub label: usize,
}

impl Observation {
    pub fn new(input: usize, label: usize) -> Self {
        Observation { input, label }
    }
}

/// Finite latent-concept model with exact tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConceptModelRaw")]
pub struct ConceptModel {
    num_concepts: usize,
    num_inputs: usize,
    num_classes: usize,
    concept_prior: Vec<f64>,
    /// `[z][e]`, each row sums to one.
    input_given_concept: Vec<Vec<f64>>,
    /// `[z][e][y]`, each `(z, e)` row sums to one.
    label_given: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ConceptModelRaw {
    concept_prior: Vec<f64>,
    input_given_concept: Vec<Vec<f64>>,
    label_given: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    seed: Option<u64>,
}

impl TryFrom<ConceptModelRaw> for ConceptModel {
    type Error = Error;

    fn try_from(raw: ConceptModelRaw) -> Result<Self> {
        let mut model = ConceptModel::new(raw.concept_prior, raw.input_given_concept, raw.label_given)?;
        model.seed = raw.seed;
        Ok(model)
    }
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::InvalidModel(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::InvalidModel(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl ConceptModel {
    pub fn new(
        concept_prior: Vec<f64>,
        input_given_concept: Vec<Vec<f64>>,
        label_given: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let num_concepts = concept_prior.len();
        if num_concepts == 0 {
            return Err(Error::InvalidModel("no concepts".into()));
        }
        check_row(&concept_prior, "concept prior")?;
        if input_given_concept.len() != num_concepts || label_given.len() != num_concepts {
            return Err(Error::InvalidModel("tables disagree on the number of concepts".into()));
        }
        let num_inputs = input_given_concept[0].len();
        if num_inputs == 0 {
            return Err(Error::InvalidModel("no inputs".into()));
        }
        let num_classes = label_given[0].first().map_or(0, Vec::len);
        if num_classes < 2 {
            return Err(Error::InvalidModel("label tables need at least two classes".into()));
        }
        for z in 0..num_concepts {
            if input_given_concept[z].len() != num_inputs || label_given[z].len() != num_inputs {
                return Err(Error::InvalidModel(format!("concept {z} has the wrong number of inputs")));
            }
            check_row(&input_given_concept[z], &format!("p(e|z={z})"))?;
            for (e, row) in label_given[z].iter().enumerate() {
                if row.len() != num_classes {
                    return Err(Error::InvalidModel(format!("p(y|e={e},z={z}) has the wrong length")));
                }
                check_row(row, &format!("p(y|e={e},z={z})"))?;
            }
        }
        Ok(ConceptModel {
            num_concepts,
            num_inputs,
            num_classes,
            concept_prior,
            input_given_concept,
            label_given,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn concept_prior(&self) -> &[f64] {
        &self.concept_prior
    }

    pub fn input_given_concept(&self, z: usize, e: usize) -> f64 {
        self.input_given_concept[z][e]
    }

    pub fn label_row(&self, z: usize, e: usize) -> &[f64] {
        &self.label_given[z][e]
    }

    /// Joint likelihood `p(e, y | z)`.
    pub fn joint(&self, z: usize, obs: Observation) -> f64 {
        self.input_given_concept[z][obs.input] * self.label_given[z][obs.input][obs.label]
    }

    /// Label marginal of one concept under its own input distribution, `p(y'|z)`.
    pub fn concept_label_marginal(&self, z: usize) -> Vec<f64> {
        let mut marginal = vec![0.0; self.num_classes];
        for (p_e, row) in self.input_given_concept[z].iter().zip(&self.label_given[z]) {
            for (m, p_y) in marginal.iter_mut().zip(row) {
                *m += p_e * p_y;
            }
        }
        marginal
    }

    fn check_input(&self, e: usize) -> Result<()> {
        if e < self.num_inputs {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { what: "input", index: e, size: self.num_inputs })
        }
    }

    pub fn check_observation(&self, obs: Observation) -> Result<()> {
        self.check_input(obs.input)?;
        if obs.label < self.num_classes {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange { what: "label", index: obs.label, size: self.num_classes })
        }
    }
}

/// Exact posterior over concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    posterior: Vec<f64>,
}

impl BeliefState {
    /// Belief before any demonstration: the concept prior.
    pub fn prior(model: &ConceptModel) -> Self {
        BeliefState { posterior: model.concept_prior.clone() }
    }

    pub fn from_posterior(posterior: Vec<f64>) -> Result<Self> {
        check_row(&posterior, "posterior")?;
        Ok(BeliefState { posterior })
    }

    /// Belief after observing `demos` in order.
    pub fn after(model: &ConceptModel, demos: &[Observation]) -> Result<Self> {
        demos
            .iter()
            .try_fold(BeliefState::prior(model), |belief, &obs| posterior_update(&belief, obs, model))
    }

    pub fn posterior(&self) -> &[f64] {
        &self.posterior
    }

    fn check(&self, model: &ConceptModel) -> Result<()> {
        if self.posterior.len() == model.num_concepts {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "belief over {} concepts, model has {}",
                self.posterior.len(),
                model.num_concepts
            )))
        }
    }
}

/// Bayes rule over concepts for one observed demonstration.
pub fn posterior_update(belief: &BeliefState, obs: Observation, model: &ConceptModel) -> Result<BeliefState> {
    belief.check(model)?;
    model.check_observation(obs)?;
    let weighted: Vec<f64> =
        belief.posterior.iter().enumerate().map(|(z, &p)| p * model.joint(z, obs)).collect();
    let evidence: f64 = weighted.iter().sum();
    if evidence <= 0.0 || !evidence.is_finite() {
        return Err(Error::ZeroEvidence);
    }
    Ok(BeliefState { posterior: weighted.into_iter().map(|w| w / evidence).collect() })
}

fn class_prior_raw(belief: &BeliefState, model: &ConceptModel) -> Vec<f64> {
    let mut prior = vec![0.0; model.num_classes];
    for (z, &p) in belief.posterior.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (acc, m) in prior.iter_mut().zip(model.concept_label_marginal(z)) {
            *acc += p * m;
        }
    }
    prior
}

/// Class prior induced by the context alone: `E_z[p(y'|z)]`.
pub fn class_prior(belief: &BeliefState, model: &ConceptModel) -> Result<LabelDistribution> {
    belief.check(model)?;
    Ok(normalize_over_labels(&class_prior_raw(belief, model))?)
}

/// Posterior-predictive label distribution for input `e`.
pub fn predictive_prob(belief: &BeliefState, e: usize, model: &ConceptModel) -> Result<LabelDistribution> {
    belief.check(model)?;
    model.check_input(e)?;
    let mut mixture = vec![0.0; model.num_classes];
    for (z, &p) in belief.posterior.iter().enumerate() {
        for (acc, &q) in mixture.iter_mut().zip(&model.label_given[z][e]) {
            *acc += p * q;
        }
    }
    Ok(normalize_over_labels(&mixture)?)
}

/// The two terms of the class-prior update for one target label, and the
/// prior recomputed directly from the updated posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorDecomposition {
    /// `E_z[p(y'|z)]` under the current belief.
    pub expectation_term: f64,
    /// `Cov_z(p(y'|z), p(e,y|z)) / E_z[p(e,y|z)]`.
    pub covariance_term: f64,
    /// `p(y'|D ∪ {(e,y)})` from the exact posterior.
    pub direct_updated_prior: f64,
}

pub fn decompose_prior_update(
    belief: &BeliefState,
    obs: Observation,
    target: usize,
    model: &ConceptModel,
) -> Result<PriorDecomposition> {
    if target >= model.num_classes {
        return Err(Error::IndexOutOfRange { what: "label", index: target, size: model.num_classes });
    }
    let updated = posterior_update(belief, obs, model)?;
    let label_marginal: Vec<f64> =
        (0..model.num_concepts).map(|z| model.concept_label_marginal(z)[target]).collect();
    let likelihood: Vec<f64> = (0..model.num_concepts).map(|z| model.joint(z, obs)).collect();
    let terms = decompose_terms(&belief.posterior, &label_marginal, &likelihood);
    Ok(PriorDecomposition { direct_updated_prior: class_prior_raw(&updated, model)[target], ..terms })
}

/// Prior-update terms from per-concept weights, label marginals `p(y'|z)` and
/// observation likelihoods `p(e,y|z)`. The direct prior reweights the
/// marginals by the normalized posterior.
pub fn decompose_terms(weights: &[f64], label_marginal: &[f64], likelihood: &[f64]) -> PriorDecomposition {
    let mean_marginal: f64 = weights.iter().zip(label_marginal).map(|(w, m)| w * m).sum();
    let mean_likelihood: f64 = weights.iter().zip(likelihood).map(|(w, l)| w * l).sum();
    let covariance: f64 = weights
        .iter()
        .zip(label_marginal.iter().zip(likelihood))
        .map(|(w, (m, l))| w * (m - mean_marginal) * (l - mean_likelihood))
        .sum();
    let direct: f64 = weights
        .iter()
        .zip(label_marginal.iter().zip(likelihood))
        .map(|(w, (m, l))| (w * l / mean_likelihood) * m)
        .sum();
    PriorDecomposition {
        expectation_term: mean_marginal,
        covariance_term: covariance / mean_likelihood,
        direct_updated_prior: direct,
    }
}

/// `-ln p(y | e, D)` for an observation under the current belief. Zero when
/// the prediction is certain up to the probability floor.
pub fn surprise_of(belief: &BeliefState, obs: Observation, model: &ConceptModel) -> Result<f64> {
    model.check_observation(obs)?;
    let p = predictive_prob(belief, obs.input, model)?.prob(obs.label);
    // a certain prediction keeps only floor mass on the other labels
    let floored_mass = FLOOR * (model.num_classes - 1) as f64;
    Ok(if 1.0 - p <= floored_mass { 0.0 } else { -p.ln() })
}

/// Label distributions at every delimiter of an episode, computed exactly.
pub fn oracle_dists(
    model: &ConceptModel,
    demos: &[Observation],
    query_input: usize,
) -> Result<(Vec<LabelDistribution>, LabelDistribution)> {
    let mut belief = BeliefState::prior(model);
    let mut demo_dists = Vec::with_capacity(demos.len());
    for &obs in demos {
        demo_dists.push(predictive_prob(&belief, obs.input, model)?);
        belief = posterior_update(&belief, obs, model)?;
    }
    let query_dist = predictive_prob(&belief, query_input, model)?;
    Ok((demo_dists, query_dist))
}

/// Builds an [`Episode`] from exact oracle distributions, naming inputs with
/// [`input_text`] and labels with [`oracle_label_space`].
pub fn simulate_episode(model: &ConceptModel, demos: &[Observation], query_input: usize) -> Result<Episode> {
    let (demo_dists, query_dist) = oracle_dists(model, demos, query_input)?;
    let mut meta = serde_json::Map::new();
    meta.insert("backend".into(), "oracle".into());
    if let Some(seed) = model.seed {
        meta.insert("seed".into(), seed.into());
    }
    Ok(Episode {
        id: format!("sim-{}", demos.iter().map(|o| format!("{}:{}", o.input, o.label)).collect::<Vec<_>>().join(",")),
        labels: oracle_label_space(model.num_classes),
        demos: demos.iter().map(|o| Demonstration::labeled(input_text(o.input), o.label)).collect(),
        query: Demonstration::unlabeled(input_text(query_input)),
        demo_dists,
        query_dist,
        meta,
    })
}

/// One inserted candidate in the surprise/prior-shift study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub candidate: Observation,
    /// Surprise, negated for negative-class (label 0) candidates.
    pub signed_surprise: f64,
    /// Positive-class prior under the fixed context.
    pub prior_before: f64,
    /// Positive-class prior after appending the candidate.
    pub prior_after: f64,
}

/// Inserts each candidate after a fixed context and records surprise and prior shift.
pub fn insertion_experiment(
    model: &ConceptModel,
    fixed_context: &[Observation],
    candidates: &[Observation],
) -> Result<Vec<InsertionRecord>> {
    if model.num_classes != 2 {
        return Err(Error::InvalidModel(format!(
            "signed-surprise insertion needs two classes, model has {}",
            model.num_classes
        )));
    }
    let belief = BeliefState::after(model, fixed_context)?;
    let prior_before = class_prior_raw(&belief, model)[1];
    candidates
        .iter()
        .map(|&candidate| {
            let surprise = surprise_of(&belief, candidate, model)?;
            let after = posterior_update(&belief, candidate, model)?;
            Ok(InsertionRecord {
                candidate,
                signed_surprise: if candidate.label == 0 { -surprise } else { surprise },
                prior_before,
                prior_after: class_prior_raw(&after, model)[1],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
