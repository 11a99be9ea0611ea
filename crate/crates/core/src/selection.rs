//! Demonstration selection (random, BM25, embedding top-k) and ordering.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Demonstration;
use crate::error::{Error, Result};

pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;

/// Candidate demonstrations, optionally with one embedding per item.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pool {
    pub items: Vec<Demonstration>,
    pub embeddings: Option<Vec<Vec<f64>>>,
}

impl Pool {
    pub fn new(items: Vec<Demonstration>) -> Self {
        Pool { items, embeddings: None }
    }

    pub fn with_embeddings(items: Vec<Demonstration>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if embeddings.len() != items.len() {
            return Err(Error::LengthMismatch(items.len(), embeddings.len()));
        }
        if let Some(first) = embeddings.first() {
            if let Some(bad) = embeddings.iter().find(|e| e.len() != first.len()) {
                return Err(Error::DimMismatch { expected: first.len(), got: bad.len() });
            }
        }
        Ok(Pool { items, embeddings: Some(embeddings) })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k > self.items.len() {
            Err(Error::PoolTooSmall { pool: self.items.len(), k })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPick {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    #[default]
    Random,
    Bm25,
    Topk,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SelectionStrategy::Random),
            "bm25" => Ok(SelectionStrategy::Bm25),
            "topk" => Ok(SelectionStrategy::Topk),
            other => Err(Error::Config(format!("unknown selection strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::Bm25 => "bm25",
            SelectionStrategy::Topk => "topk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// Highest score last.
    #[default]
    Increase,
    /// Highest score first.
    Decrease,
    /// Highest score last, second highest first, alternating inward.
    Ucurve,
    /// Mirror of `Ucurve`: highest first, second highest last.
    UcurveMirrored,
}

impl std::str::FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "increase" => Ok(Ordering::Increase),
            "decrease" => Ok(Ordering::Decrease),
            "ucurve" => Ok(Ordering::Ucurve),
            "ucurvemirrored" | "ucurve-mirrored" => Ok(Ordering::UcurveMirrored),
            other => Err(Error::Config(format!("unknown ordering {other:?}"))),
        }
    }
}

impl std::fmt::Display for Ordering {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ordering::Increase => "increase",
            Ordering::Decrease => "decrease",
            Ordering::Ucurve => "ucurve",
            Ordering::UcurveMirrored => "ucurvemirrored",
        })
    }
}

/// Uniform sampling without replacement, in sampled order.
pub fn select_random(pool: &Pool, k: usize, seed: u64) -> Result<Vec<ScoredPick>> {
    pool.check_k(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|index| ScoredPick { index, score: 0.0 })
        .collect())
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 index over a fixed document collection.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_terms: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new<'a>(docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut doc_terms = Vec::new();
        let mut doc_lens = Vec::new();
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let tokens = tokenize(doc);
            doc_lens.push(tokens.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for term in tf.keys() {
                *doc_freq.entry(term.clone()).or_default() += 1;
            }
            doc_terms.push(tf);
        }
        let total: usize = doc_lens.iter().sum();
        let avg_len = if doc_lens.is_empty() { 0.0 } else { total as f64 / doc_lens.len() as f64 };
        Bm25Index { doc_terms, doc_lens, doc_freq, avg_len }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_terms.len() as f64;
        let df = *self.doc_freq.get(term).unwrap_or(&0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of every document for `query`; each query token occurrence contributes.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let query_terms = tokenize(query);
        (0..self.doc_terms.len())
            .map(|d| {
                let norm = if self.avg_len > 0.0 {
                    BM25_K1 * (1.0 - BM25_B + BM25_B * self.doc_lens[d] as f64 / self.avg_len)
                } else {
                    BM25_K1
                };
                query_terms
                    .iter()
                    .map(|t| match self.doc_terms[d].get(t) {
                        Some(&tf) => {
                            let tf = tf as f64;
                            self.idf(t) * tf * (BM25_K1 + 1.0) / (tf + norm)
                        }
                        None => 0.0,
                    })
                    .sum()
            })
            .collect()
    }
}

fn top_k(scores: Vec<f64>, k: usize) -> Vec<ScoredPick> {
    let mut picks: Vec<ScoredPick> = scores.into_iter().enumerate().map(|(index, score)| ScoredPick { index, score }).collect();
    picks.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    picks.truncate(k);
    picks
}

/// Top `k` pool items by BM25 score against the query, best first.
pub fn bm25_select(query: &str, pool: &Pool, k: usize) -> Result<Vec<ScoredPick>> {
    pool.check_k(k)?;
    let index = Bm25Index::new(pool.items.iter().map(|d| d.text.as_str()));
    Ok(top_k(index.scores(query), k))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Top `k` pool items by cosine similarity to the query embedding, best first.
pub fn topk_select(query_embedding: &[f64], pool: &Pool, k: usize) -> Result<Vec<ScoredPick>> {
    let embeddings = pool.embeddings.as_ref().ok_or(Error::MissingEmbeddings)?;
    pool.check_k(k)?;
    if let Some(first) = embeddings.first() {
        if first.len() != query_embedding.len() {
            return Err(Error::DimMismatch { expected: first.len(), got: query_embedding.len() });
        }
    }
    Ok(top_k(embeddings.iter().map(|e| cosine(query_embedding, e)).collect(), k))
}

/// Arranges picks by score. Ties fall back to pool index.
pub fn order(picks: &[ScoredPick], strategy: Ordering) -> Vec<ScoredPick> {
    let mut desc = picks.to_vec();
    desc.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    match strategy {
        Ordering::Decrease => desc,
        Ordering::Increase => {
            desc.reverse();
            desc
        }
        Ordering::Ucurve | Ordering::UcurveMirrored => {
            let k = desc.len();
            let mut slots: Vec<Option<ScoredPick>> = vec![None; k];
            let (mut front, mut back) = (0, k);
            for (rank, pick) in desc.into_iter().enumerate() {
                let to_back = (rank % 2 == 0) == (strategy == Ordering::Ucurve);
                if to_back {
                    back -= 1;
                    slots[back] = Some(pick);
                } else {
                    slots[front] = Some(pick);
                    front += 1;
                }
            }
            slots.into_iter().map(|s| s.expect("every slot filled")).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool(texts: &[&str]) -> Pool {
        Pool::new(texts.iter().map(|t| Demonstration::labeled(*t, 0)).collect())
    }

    #[test]
    fn random_selection() {
        let p = pool(&["a", "b", "c", "d", "e"]);
        let all = select_random(&p, 5, 3).unwrap();
        let mut idx: Vec<usize> = all.iter().map(|s| s.index).collect();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_eq!(select_random(&p, 3, 9).unwrap(), select_random(&p, 3, 9).unwrap());
        assert!(select_random(&p, 0, 1).unwrap().is_empty());
        assert!(matches!(select_random(&p, 6, 1), Err(Error::PoolTooSmall { pool: 5, k: 6 })));
    }

    #[test]
    fn bm25_no_overlap_falls_back_to_index_order() {
        let p = pool(&["red fox", "blue bird", "green frog"]);
        let picks = bm25_select("zebra", &p, 2).unwrap();
        assert_eq!(picks.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1]);
        assert!(picks.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn bm25_single_doc() {
        let p = pool(&["the quick fox"]);
        let picks = bm25_select("the quick fox", &p, 1).unwrap();
        assert_eq!(picks[0].index, 0);
        assert!(picks[0].score > 0.0);
    }

    #[test]
    fn bm25_hand_value() {
        // N=2, df=1: idf = ln((2 - 1 + 0.5)/(1 + 0.5) + 1) = ln 2.
        // tf=1, |d| = avgdl = 2: tf (k1+1) / (tf + k1) = 2.5 / 2.5 = 1.
        let p = pool(&["dog ran", "cat sat"]);
        let picks = bm25_select("cat", &p, 2).unwrap();
        assert_eq!(picks[0].index, 1);
        assert!((picks[0].score - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(picks[1].score, 0.0);
    }

    #[test]
    fn bm25_tokenization() {
        assert_eq!(tokenize("Hello, World! it's 42"), vec!["hello", "world", "it", "s", "42"]);
    }

    #[test]
    fn topk_cases() {
        let items = vec![Demonstration::labeled("a", 0), Demonstration::labeled("b", 1), Demonstration::labeled("c", 0)];
        let p = Pool::with_embeddings(items.clone(), vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let picks = topk_select(&[1.0, 0.0], &p, 3).unwrap();
        assert_eq!(picks.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!((picks[0].score - 1.0).abs() < 1e-15);
        assert_eq!(picks[1].score, 0.0);
        assert!((picks[2].score + 1.0).abs() < 1e-15);

        assert!(matches!(topk_select(&[1.0], &p, 1), Err(Error::DimMismatch { .. })));
        assert!(matches!(topk_select(&[1.0, 0.0], &Pool::new(items.clone()), 1), Err(Error::MissingEmbeddings)));
        assert!(Pool::with_embeddings(items, vec![vec![1.0]]).is_err());
    }

    fn scored(scores: &[f64]) -> Vec<ScoredPick> {
        scores.iter().enumerate().map(|(index, &score)| ScoredPick { index, score }).collect()
    }

    fn ids(picks: &[ScoredPick]) -> String {
        picks.iter().map(|p| (b'a' + p.index as u8) as char).collect()
    }

    #[test]
    fn orderings() {
        let picks = scored(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(ids(&order(&picks, Ordering::Ucurve)), "bdeca");
        assert_eq!(ids(&order(&picks, Ordering::UcurveMirrored)), "acedb");
        assert_eq!(ids(&order(&picks, Ordering::Increase)), "edcba");
        assert_eq!(ids(&order(&picks, Ordering::Decrease)), "abcde");
        let one = scored(&[1.0]);
        for s in [Ordering::Increase, Ordering::Decrease, Ordering::Ucurve] {
            assert_eq!(order(&one, s), one);
        }
        assert!(order(&[], Ordering::Ucurve).is_empty());
    }

    proptest! {
        #[test]
        fn orderings_are_permutations(scores in prop::collection::vec(-5.0f64..5.0, 0..12)) {
            let picks = scored(&scores);
            for s in [Ordering::Increase, Ordering::Decrease, Ordering::Ucurve, Ordering::UcurveMirrored] {
                let mut idx: Vec<usize> = order(&picks, s).iter().map(|p| p.index).collect();
                idx.sort();
                prop_assert_eq!(idx, (0..scores.len()).collect::<Vec<_>>());
            }
        }

        #[test]
        fn ucurve_decreases_toward_middle(scores in prop::collection::vec(-5.0f64..5.0, 1..12)) {
            let out: Vec<f64> = order(&scored(&scores), Ordering::Ucurve).iter().map(|p| p.score).collect();
            let peak = out.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            // non-increasing from the front to the minimum, non-decreasing after it
            for w in out[..=peak].windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            for w in out[peak..].windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
