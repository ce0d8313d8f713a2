//! Dialogue corpora: persuadee (EE) utterances are states, persuader (ER)
//! utterances are actions, and every utterance carries a precomputed
//! embedding of the corpus dimension.

mod embeddings;
mod io;

pub use embeddings::{read_embedding_block, write_embedding_block, EmbeddingBlock, EMBEDDING_MAGIC};
pub use io::{attach_embeddings, companion_paths, load_corpus, read_corpus_jsonl, write_corpus};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::to_f64;

/// Utterance cap per dialogue in the reference data.
pub const MAX_DIALOGUE_LEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    /// Persuadee.
    EE,
    /// Persuader.
    ER,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::EE => "EE",
            Role::ER => "ER",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EE" | "ee" => Ok(Role::EE),
            "ER" | "er" => Ok(Role::ER),
            other => Err(Error::Config(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub dialogue_id: String,
    pub turn: usize,
    pub role: Role,
    pub text: String,
    pub embedding: Vec<f32>,
    /// Gold strategy label, when annotated.
    pub strategy: Option<String>,
    /// Predicted strategy probabilities over the role's vocabulary.
    pub strategy_dist: Option<Vec<f64>>,
}

impl Utterance {
    pub fn embedding_f64(&self) -> Vec<f64> {
        to_f64(&self.embedding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub donation_cents: u64,
    /// Min-max normalized donation; set by [`normalize_donations`].
    pub donation_norm: Option<f64>,
}

impl Dialogue {
    pub fn donation(&self) -> f64 {
        self.donation_cents as f64 / 100.0
    }

    pub fn utterances_of(&self, role: Role) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.role == role)
    }

    /// Number of leading persuader utterances that precede the first
    /// persuadee turn (typically a greeting).
    pub fn preamble_len(&self) -> usize {
        self.utterances
            .iter()
            .take_while(|u| u.role == Role::ER)
            .count()
    }

    /// Checks turn uniqueness, ordering and role alternation.
    pub fn validate(&self, dim: usize) -> Result<()> {
        for (k, u) in self.utterances.iter().enumerate() {
            if u.embedding.len() != dim {
                return Err(Error::Format(format!(
                    "dialogue {} turn {}: embedding has {} values, corpus dimension is {dim}",
                    self.id,
                    u.turn,
                    u.embedding.len()
                )));
            }
            if k > 0 {
                let prev = &self.utterances[k - 1];
                if prev.turn >= u.turn {
                    return Err(Error::Format(format!(
                        "dialogue {}: turn indices not strictly increasing at {}",
                        self.id, u.turn
                    )));
                }
                if prev.role == u.role {
                    return Err(Error::Format(format!(
                        "dialogue {}: roles do not alternate at turn {}",
                        self.id, u.turn
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueCorpus {
    pub dim: usize,
    pub dialogues: Vec<Dialogue>,
}

impl DialogueCorpus {
    pub fn new(dim: usize, mut dialogues: Vec<Dialogue>) -> Result<Self> {
        for d in &mut dialogues {
            d.utterances.sort_by_key(|u| u.turn);
        }
        dialogues.sort_by(|a, b| a.id.cmp(&b.id));
        for d in &dialogues {
            d.validate(dim)?;
        }
        Ok(Self { dim, dialogues })
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn utterance_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.utterances.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min_cents: u64,
    pub max_cents: u64,
}

impl NormStats {
    pub fn normalize(&self, cents: u64) -> f64 {
        if self.max_cents == self.min_cents {
            0.0
        } else {
            (cents as f64 - self.min_cents as f64) / (self.max_cents - self.min_cents) as f64
        }
    }

    pub fn denormalize(&self, norm: f64) -> f64 {
        self.min_cents as f64 + norm * (self.max_cents - self.min_cents) as f64
    }
}

/// Keeps dialogues whose donation does not exceed `max_amount` (currency
/// units); order is preserved.
pub fn filter_by_donation(corpus: &DialogueCorpus, max_amount: f64) -> DialogueCorpus {
    let dialogues = corpus
        .dialogues
        .iter()
        .filter(|d| max_amount.is_infinite() || d.donation_cents as f64 <= (max_amount * 100.0).round())
        .cloned()
        .collect();
    DialogueCorpus {
        dim: corpus.dim,
        dialogues,
    }
}

pub fn normalize_donations(corpus: &DialogueCorpus) -> Result<(DialogueCorpus, NormStats)> {
    let min_cents = corpus
        .dialogues
        .iter()
        .map(|d| d.donation_cents)
        .min()
        .ok_or(Error::Empty("normalize_donations needs at least one dialogue"))?;
    let max_cents = corpus.dialogues.iter().map(|d| d.donation_cents).max().unwrap();
    let stats = NormStats {
        min_cents,
        max_cents,
    };
    let mut out = corpus.clone();
    for d in &mut out.dialogues {
        d.donation_norm = Some(stats.normalize(d.donation_cents));
    }
    Ok((out, stats))
}

/// One state transition `(s_t, a_t, s_{t+1})` over utterance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub t: usize,
    pub dialogue_id: String,
    pub is_terminal: bool,
    /// Positions of the three utterances inside the dialogue.
    pub state_pos: usize,
    pub action_pos: usize,
    pub next_pos: usize,
}

/// Pairs each persuadee utterance with the following persuader utterance
/// and the next persuadee utterance. Leading persuader turns are preamble
/// and a trailing persuader turn has no successor state; neither becomes
/// part of a transition.
pub fn to_transitions(dialogue: &Dialogue) -> Vec<Transition> {
    let u = &dialogue.utterances;
    let start = dialogue.preamble_len();
    let mut out = Vec::new();
    let mut k = start;
    while k + 2 < u.len() {
        if u[k].role != Role::EE || u[k + 1].role != Role::ER || u[k + 2].role != Role::EE {
            break;
        }
        out.push(Transition {
            s: u[k].embedding_f64(),
            a: u[k + 1].embedding_f64(),
            s_next: u[k + 2].embedding_f64(),
            t: out.len(),
            dialogue_id: dialogue.id.clone(),
            is_terminal: false,
            state_pos: k,
            action_pos: k + 1,
            next_pos: k + 2,
        });
        k += 2;
    }
    if let Some(last) = out.last_mut() {
        last.is_terminal = true;
    }
    out
}

pub fn corpus_transitions(corpus: &DialogueCorpus) -> Vec<Transition> {
    corpus.dialogues.iter().flat_map(to_transitions).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn utt(id: &str, turn: usize, role: Role, v: f32) -> Utterance {
        Utterance {
            dialogue_id: id.into(),
            turn,
            role,
            text: String::new(),
            embedding: vec![v, -v],
            strategy: None,
            strategy_dist: None,
        }
    }

    pub(crate) fn dialogue(id: &str, n: usize, first: Role, cents: u64) -> Dialogue {
        let other = |r: Role| if r == Role::EE { Role::ER } else { Role::EE };
        let mut role = first;
        let utterances = (0..n)
            .map(|t| {
                let u = utt(id, t, role, t as f32);
                role = other(role);
                u
            })
            .collect();
        Dialogue {
            id: id.into(),
            utterances,
            donation_cents: cents,
            donation_norm: None,
        }
    }

    #[test]
    fn filter_keeps_donations_up_to_the_cap() {
        let ds = [0, 500, 2000, 2001, 10000]
            .iter()
            .enumerate()
            .map(|(i, &c)| dialogue(&format!("d{i}"), 3, Role::EE, c))
            .collect();
        let c = DialogueCorpus::new(2, ds).unwrap();
        let f = filter_by_donation(&c, 20.0);
        let ids: Vec<_> = f.dialogues.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["d0", "d1", "d2"]);
        assert_eq!(filter_by_donation(&c, f64::INFINITY), c);
    }

    #[test]
    fn normalization_examples() {
        let c = DialogueCorpus::new(
            2,
            vec![
                dialogue("a", 3, Role::EE, 0),
                dialogue("b", 3, Role::EE, 5),
                dialogue("c", 3, Role::EE, 2000),
            ],
        )
        .unwrap();
        let (n, stats) = normalize_donations(&c).unwrap();
        assert_eq!(stats, NormStats { min_cents: 0, max_cents: 2000 });
        assert_eq!(n.dialogues[0].donation_norm, Some(0.0));
        assert!((n.dialogues[1].donation_norm.unwrap() - 0.0025).abs() < 1e-15);
        assert_eq!(n.dialogues[2].donation_norm, Some(1.0));
        assert!((stats.denormalize(0.0025) - 5.0).abs() < 1e-12);

        let flat = DialogueCorpus::new(
            2,
            vec![dialogue("a", 3, Role::EE, 700), dialogue("b", 3, Role::EE, 700)],
        )
        .unwrap();
        let (n, _) = normalize_donations(&flat).unwrap();
        assert!(n.dialogues.iter().all(|d| d.donation_norm == Some(0.0)));
        assert!(normalize_donations(&DialogueCorpus::new(2, vec![]).unwrap()).is_err());
    }

    #[test]
    fn transition_counts() {
        assert_eq!(to_transitions(&dialogue("g", 25, Role::ER, 0)).len(), 11);
        let three = to_transitions(&dialogue("t", 3, Role::EE, 0));
        assert_eq!(three.len(), 1);
        assert!(three[0].is_terminal);
        assert!(to_transitions(&dialogue("two", 2, Role::EE, 0)).is_empty());
        // Ending on a persuader turn drops the dangling action.
        assert_eq!(to_transitions(&dialogue("e", 6, Role::EE, 0)).len(), 2);
    }

    #[test]
    fn transitions_chain() {
        let tr = to_transitions(&dialogue("g", 25, Role::ER, 0));
        for w in tr.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
            assert!(!w[0].is_terminal);
        }
        assert!(tr.last().unwrap().is_terminal);
        assert_eq!(tr[0].state_pos, 1);
    }

    #[test]
    fn validation_rejects_non_alternating_roles() {
        let mut d = dialogue("x", 4, Role::EE, 0);
        d.utterances[1].role = Role::EE;
        assert!(DialogueCorpus::new(2, vec![d]).is_err());
        let mut d = dialogue("y", 4, Role::EE, 0);
        d.utterances[2].embedding.push(1.0);
        assert!(DialogueCorpus::new(2, vec![d]).is_err());
    }
}
