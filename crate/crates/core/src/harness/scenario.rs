use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, CorrelationSetup, Datasets};
use crate::bayessim::{
    class_prior, generate_world, input_text, BeliefState, ConceptModel, Observation, SyntheticTaskConfig, SyntheticWorld,
};
use crate::calibrators::{apply_prior, PriorEstimate};
use crate::domain::{Demonstration, Episode, LabelDistribution};
use crate::error::{Error, Result};

/// Synthetic oracle data: a generated concept model plus sampled pool,
/// training and test examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleScenario {
    pub task: SyntheticTaskConfig,
    pub k: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for OracleScenario {
    fn default() -> Self {
        OracleScenario {
            task: SyntheticTaskConfig { bias_strength: 0.8, seed: 7, ..Default::default() },
            k: 3,
            train_size: 200,
            test_size: 500,
            pool_size: 256,
            seed: 7,
        }
    }
}

pub struct Scenario {
    pub world: SyntheticWorld,
    pub data: Datasets,
}

fn to_demos(obs: &[Observation]) -> Vec<Demonstration> {
    obs.iter().map(|o| Demonstration::labeled(input_text(o.input), o.label)).collect()
}

pub fn build_oracle_scenario(cfg: &OracleScenario) -> Result<Scenario> {
    let world = generate_world(&cfg.task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, 0));
    let pool = to_demos(&world.sample_observations(cfg.pool_size, &mut rng));
    let train = to_demos(&world.sample_observations(cfg.train_size, &mut rng));
    let test = to_demos(&world.sample_observations(cfg.test_size, &mut rng));
    Ok(Scenario { world, data: Datasets { pool, train, test, embeddings: None, pool_is_train: false } })
}

/// Inverse of the `x<e>` naming of oracle inputs.
pub fn input_index(text: &str) -> Option<usize> {
    text.strip_prefix('x')?.parse().ok()
}

pub(crate) fn observations(model: &ConceptModel, demos: &[Demonstration]) -> Result<Vec<Observation>> {
    demos
        .iter()
        .map(|d| {
            let input = input_index(&d.text).ok_or_else(|| Error::UnknownInput(d.text.clone()))?;
            let label = d.label.ok_or_else(|| Error::MissingQueryLabel(d.text.clone()))?;
            let obs = Observation::new(input, label);
            model.check_observation(obs)?;
            Ok(obs)
        })
        .collect()
}

/// Removes the exact context-induced class prior from the query distribution.
pub fn exact_prior_calibrate(model: &ConceptModel, episode: &Episode) -> Result<LabelDistribution> {
    let belief = BeliefState::after(model, &observations(model, &episode.demos)?)?;
    let prior = class_prior(&belief, model)?;
    apply_prior(&episode.query_dist, &PriorEstimate::centered(prior.log_probs(), "exact", 1))
}

/// A fixed `k`-demonstration context and `n` candidates, all drawn from the task distribution.
pub fn oracle_correlation_setup(world: &SyntheticWorld, k: usize, n: usize, seed: u64) -> CorrelationSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));
    let context = to_demos(&world.sample_observations(k, &mut rng));
    let candidates = to_demos(&world.sample_observations(n, &mut rng));
    CorrelationSetup { context, candidates }
}
