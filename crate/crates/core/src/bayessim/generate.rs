use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{ConceptModel, Observation};
use crate::domain::LabelSpace;
use crate::error::{Error, Result};

/// Knobs for a synthetic concept model with controllable class-prior skew.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub num_concepts: usize,
    pub num_inputs: usize,
    pub num_classes: usize,
    /// Symmetric Dirichlet parameter for every drawn table.
    pub concentration: f64,
    /// Overrides `concentration` for the per-concept input distributions.
    pub input_concentration: Option<f64>,
    /// Weight of each concept's favored label mixed into its label rows.
    pub bias_strength: f64,
    /// Draw each concept's skew uniformly from `[0, bias_strength]` instead of
    /// using `bias_strength` for all of them.
    pub bias_mixture: bool,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            num_concepts: 8,
            num_inputs: 16,
            num_classes: 2,
            concentration: 1.0,
            input_concentration: None,
            bias_strength: 0.8,
            bias_mixture: false,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_concepts < 2 || self.num_inputs < 2 || self.num_classes < 2 {
            return Err(Error::Config("num_concepts, num_inputs and num_classes must all be at least 2".into()));
        }
        for c in std::iter::once(self.concentration).chain(self.input_concentration) {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("concentration must be positive, got {c}")));
            }
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::Config(format!("bias_strength must lie in [0, 1], got {}", self.bias_strength)));
        }
        Ok(())
    }
}

/// A generated concept model plus the unbiased task it was built around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub model: ConceptModel,
    /// Ground-truth `p(y|e)` shared by all concepts before skew is mixed in.
    pub task_table: Vec<Vec<f64>>,
    /// Favored label of each concept.
    pub favored: Vec<usize>,
    /// Skew weight actually applied to each concept.
    pub concept_bias: Vec<f64>,
}

impl SyntheticWorld {
    /// Draws `n` labeled observations: inputs uniform, labels from the task table.
    pub fn sample_observations(&self, n: usize, rng: &mut impl Rng) -> Vec<Observation> {
        (0..n)
            .map(|_| {
                let input = rng.random_range(0..self.model.num_inputs());
                let label = sample_index(&self.task_table[input], rng);
                Observation { input, label }
            })
            .collect()
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn dirichlet(len: usize, gamma: &Gamma<f64>, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|d| d / sum).collect();
        }
    }
}

/// Generates the concept model and its task table from `cfg.seed`.
pub fn generate_world(cfg: &SyntheticTaskConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = Gamma::new(cfg.concentration, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let (zs, es, cs) = (cfg.num_concepts, cfg.num_inputs, cfg.num_classes);

    let task_table: Vec<Vec<f64>> = (0..es).map(|_| dirichlet(cs, &gamma, &mut rng)).collect();
    let input_gamma = match cfg.input_concentration {
        Some(c) => Gamma::new(c, 1.0).map_err(|e| Error::Config(e.to_string()))?,
        None => gamma,
    };
    let input_given_concept: Vec<Vec<f64>> = (0..zs).map(|_| dirichlet(es, &input_gamma, &mut rng)).collect();
    let favored: Vec<usize> = (0..zs).map(|z| z % cs).collect();
    let concept_bias: Vec<f64> = (0..zs)
        .map(|_| if cfg.bias_mixture { cfg.bias_strength * rng.random::<f64>() } else { cfg.bias_strength })
        .collect();

    let label_given = (0..zs)
        .map(|z| {
            task_table
                .iter()
                .map(|row| {
                    let mut mixed: Vec<f64> = row.iter().map(|p| (1.0 - concept_bias[z]) * p).collect();
                    mixed[favored[z]] += concept_bias[z];
                    let sum: f64 = mixed.iter().sum();
                    mixed.into_iter().map(|p| p / sum).collect()
                })
                .collect()
        })
        .collect();

    let model = ConceptModel::new(vec![1.0 / zs as f64; zs], input_given_concept, label_given)?.with_seed(cfg.seed);
    Ok(SyntheticWorld { model, task_table, favored, concept_bias })
}

/// Generates only the concept model.
pub fn generate_task(cfg: &SyntheticTaskConfig) -> Result<ConceptModel> {
    Ok(generate_world(cfg)?.model)
}

/// Text used for input index `e` in oracle-backed data.
pub fn input_text(e: usize) -> String {
    format!("x{e}")
}

/// Label space `"0" .. "C-1"` used by oracle-backed data.
pub fn oracle_label_space(classes: usize) -> LabelSpace {
    LabelSpace::from_labels((0..classes).map(|c| c.to_string())).expect("at least two distinct labels")
}
