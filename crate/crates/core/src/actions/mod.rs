//! Counterfactual persuader actions: action pools, similarity retrieval and
//! graph-guided selection.

mod tfidf;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use tfidf::{sparse_dot, tokenize, SparseVec, TfidfIndex};

use crate::corpus::{DialogueCorpus, Role};
use crate::discovery::CauseEffectMap;
use crate::error::{Error, Result};
use crate::numerics::{cosine, Rng};
use crate::strategy::{effective_label, StrategyPredictor, StrategyVocab};

/// Which early persuader turns are withheld from the action pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolVariant {
    /// Every persuader utterance.
    S1,
    /// Without each dialogue's first persuader utterance.
    S2,
    /// Without each dialogue's first three persuader utterances.
    S3,
}

impl PoolVariant {
    pub const ALL: [PoolVariant; 3] = [PoolVariant::S1, PoolVariant::S2, PoolVariant::S3];

    pub fn skipped(self) -> usize {
        match self {
            PoolVariant::S1 => 0,
            PoolVariant::S2 => 1,
            PoolVariant::S3 => 3,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            PoolVariant::S1 => 1,
            PoolVariant::S2 => 2,
            PoolVariant::S3 => 3,
        }
    }
}

impl fmt::Display for PoolVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for PoolVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_start_matches(['S', 's']) {
            "1" => Ok(PoolVariant::S1),
            "2" => Ok(PoolVariant::S2),
            "3" => Ok(PoolVariant::S3),
            _ => Err(Error::Config(format!("pool strategy must be 1, 2 or 3 (got {s:?})"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionCandidate {
    /// Position among all persuader utterances of the corpus; stable across
    /// pool variants.
    pub uid: usize,
    pub dialogue_id: String,
    pub turn: usize,
    pub text: String,
    pub embedding: Vec<f64>,
    pub strategy: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionPool {
    pub variant: PoolVariant,
    pub entries: Vec<ActionCandidate>,
    by_strategy: BTreeMap<String, Vec<usize>>,
}

impl ActionPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pool indices of entries tagged with `strategy`.
    pub fn with_strategy(&self, strategy: &str) -> &[usize] {
        self.by_strategy.get(strategy).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Collects persuader utterances, dropping each dialogue's first
/// `variant.skipped()` of them. Strategy tags are gold labels, or the
/// argmax of the attached distribution under `vocab_er`.
pub fn build_action_pool(corpus: &DialogueCorpus, variant: PoolVariant, vocab_er: Option<&StrategyVocab>) -> ActionPool {
    let mut entries = Vec::new();
    let mut uid = 0;
    for d in &corpus.dialogues {
        for (k, u) in d.utterances_of(Role::ER).enumerate() {
            if k >= variant.skipped() {
                entries.push(ActionCandidate {
                    uid,
                    dialogue_id: d.id.clone(),
                    turn: u.turn,
                    text: u.text.clone(),
                    embedding: u.embedding_f64(),
                    strategy: effective_label(u, vocab_er),
                });
            }
            uid += 1;
        }
    }
    let mut by_strategy: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if let Some(s) = &e.strategy {
            by_strategy.entry(s.clone()).or_default().push(i);
        }
    }
    ActionPool {
        variant,
        entries,
        by_strategy,
    }
}

/// What the retriever compares candidates against.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub text: &'a str,
    pub embedding: &'a [f64],
}

/// Similarity backend over a fixed pool.
#[derive(Debug, Clone)]
pub enum Retriever {
    Tfidf(TfidfIndex),
    /// Cosine over embeddings, for corpora without text.
    Embedding,
}

impl Retriever {
    /// TF-IDF when any pool entry has text, embedding cosine otherwise.
    pub fn for_pool(pool: &ActionPool) -> Result<Self> {
        if pool.entries.iter().any(|e| !tokenize(&e.text).is_empty()) {
            Self::tfidf(pool)
        } else {
            Ok(Retriever::Embedding)
        }
    }

    pub fn tfidf(pool: &ActionPool) -> Result<Self> {
        let texts: Vec<&str> = pool.entries.iter().map(|e| e.text.as_str()).collect();
        Ok(Retriever::Tfidf(TfidfIndex::build(&texts)?))
    }

    pub fn is_tfidf(&self) -> bool {
        matches!(self, Retriever::Tfidf(_))
    }

    /// Pool entries (optionally restricted to one strategy) sorted by
    /// similarity to `query`, descending; ties by uid ascending.
    pub fn rank(&self, pool: &ActionPool, query: &Query<'_>, strategy: Option<&str>) -> Vec<(usize, f64)> {
        let candidates: Vec<usize> = match strategy {
            Some(s) => pool.with_strategy(s).to_vec(),
            None => (0..pool.len()).collect(),
        };
        let mut scored: Vec<(usize, f64)> = match self {
            Retriever::Tfidf(index) => {
                let q = index.vectorize(query.text);
                candidates.into_iter().map(|i| (i, sparse_dot(&q, &index.vectors[i]))).collect()
            }
            Retriever::Embedding => candidates
                .into_iter()
                .map(|i| (i, cosine(query.embedding, &pool.entries[i].embedding)))
                .collect(),
        };
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| pool.entries[a.0].uid.cmp(&pool.entries[b.0].uid))
        });
        scored
    }
}

/// Selects counterfactual persuader actions from a pool.
pub struct ActionSelector<'a> {
    pub pool: &'a ActionPool,
    pub retriever: &'a Retriever,
    /// `None` selects uniformly from the pool every time.
    pub map: Option<&'a CauseEffectMap>,
    pub classifier: &'a dyn StrategyPredictor,
    pub topk: usize,
}

impl ActionSelector<'_> {
    /// Predicts the state's persuadee strategy, draws one of its effects,
    /// and returns one of the `topk` most similar pool entries carrying that
    /// effect. Falls back to a uniform pool draw when the strategy has no
    /// effects or no entry carries the drawn effect. Returns a pool index.
    pub fn select(&self, state: &Query<'_>, rng: &mut Rng) -> Result<usize> {
        if self.pool.is_empty() {
            return Err(Error::Empty("action pool"));
        }
        if let Some(map) = self.map {
            let dist = self.classifier.predict(state.embedding)?;
            let label = &self.classifier.vocab().labels[dist.argmax()];
            if let Some(effect) = map.effects_of(label).choose(rng) {
                let ranked = self.retriever.rank(self.pool, state, Some(effect));
                if !ranked.is_empty() {
                    let k = self.topk.max(1).min(ranked.len());
                    return Ok(ranked[rng.random_range(0..k)].0);
                }
            }
        }
        Ok(rng.random_range(0..self.pool.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::dialogue;
    use crate::numerics::rng_from_seed;
    use crate::strategy::ClassifierParams;

    fn pool_of(texts: &[&str], strategies: &[&str]) -> ActionPool {
        let mut d = dialogue("d", texts.len() * 2, Role::ER, 0);
        let mut k = 0;
        for u in d.utterances.iter_mut().filter(|u| u.role == Role::ER) {
            u.text = texts[k].into();
            u.strategy = Some(strategies[k].into());
            k += 1;
        }
        let corpus = DialogueCorpus::new(2, vec![d]).unwrap();
        build_action_pool(&corpus, PoolVariant::S1, None)
    }

    #[test]
    fn pool_variants_count() {
        let corpus = DialogueCorpus::new(2, vec![dialogue("a", 24, Role::ER, 0), dialogue("b", 4, Role::ER, 0)]).unwrap();
        let n = |v| build_action_pool(&corpus, v, None).len();
        // a has 12 persuader turns, b has 2.
        assert_eq!(n(PoolVariant::S1), 14);
        assert_eq!(n(PoolVariant::S2), 12);
        assert_eq!(n(PoolVariant::S3), 9);
        let s3 = build_action_pool(&corpus, PoolVariant::S3, None);
        assert!(s3.entries.iter().all(|e| e.dialogue_id == "a"));
    }

    #[test]
    fn identical_text_ranks_first() {
        let pool = pool_of(&["we help children", "thanks for your time", "save the children now"], &["x", "x", "x"]);
        let r = Retriever::tfidf(&pool).unwrap();
        let q = Query {
            text: "thanks for your time",
            embedding: &[],
        };
        let ranked = r.rank(&pool, &q, None);
        assert_eq!(ranked[0].0, 1);
        assert!((ranked[0].1 - 1.0).abs() < 1e-12);
        let none = r.rank(&pool, &Query { text: "zebra", embedding: &[] }, None);
        assert_eq!(none.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(r.rank(&pool, &q, Some("missing")).is_empty());
    }

    #[test]
    fn no_effect_falls_back_to_uniform() {
        let pool = pool_of(&["aa", "bb", "cc", "dd"], &["x", "x", "y", "y"]);
        let retriever = Retriever::Embedding;
        let clf = ClassifierParams::zeros(2, StrategyVocab::new(Role::EE, vec!["e".into()]));
        let map = CauseEffectMap::default();
        let sel = ActionSelector {
            pool: &pool,
            retriever: &retriever,
            map: Some(&map),
            classifier: &clf,
            topk: 3,
        };
        let mut rng = rng_from_seed(1);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            counts[sel.select(&Query { text: "", embedding: &[1.0, 0.0] }, &mut rng).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 4000.0 - 0.25).abs() < 0.05));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("2".parse::<PoolVariant>().unwrap(), PoolVariant::S2);
        assert_eq!("S3".parse::<PoolVariant>().unwrap(), PoolVariant::S3);
        assert!("4".parse::<PoolVariant>().is_err());
    }
}
