//! Strategy-level causal discovery: dataset construction, BIC scoring,
//! permutation search and cause-effect extraction.

mod bic;
mod dag;
mod grasp;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bic::{bic_score, BicScore, CachedScore};
pub use dag::{cpdag_shd, shd, Dag, Pattern};
pub use grasp::{dag_from_order, dag_from_permutation, grasp_from_order, grasp_search, tuck, GraspConfig, GraspResult};

use crate::corpus::{Dialogue, DialogueCorpus, Role, Utterance};
use crate::error::{ensure_dim, Error, Result};
use crate::strategy::StrategyVocab;

pub const DONATION_COLUMN: &str = "donation";

/// One row per dialogue: `n_ee` persuadee strategy columns, `n_er`
/// persuader strategy columns, then the normalized donation.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalDataset {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub n_ee: usize,
    pub n_er: usize,
    /// Dialogue id of each row (empty for datasets built from raw rows).
    pub row_ids: Vec<String>,
}

impl CausalDataset {
    /// Generic dataset with no role layout (every column is "other").
    pub fn from_rows(columns: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        for r in &rows {
            ensure_dim("dataset row", columns.len(), r.len())?;
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("dataset contains non-finite values".into()));
            }
        }
        Ok(Self {
            columns,
            rows,
            n_ee: 0,
            n_er: 0,
            row_ids: Vec::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn is_ee(&self, col: usize) -> bool {
        col < self.n_ee
    }

    pub fn is_er(&self, col: usize) -> bool {
        col >= self.n_ee && col < self.n_ee + self.n_er
    }
}

pub fn ee_column(label: &str) -> String {
    format!("EE:{label}")
}

pub fn er_column(label: &str) -> String {
    format!("ER:{label}")
}

/// Strategy distribution of an utterance: the predicted distribution if
/// present, otherwise a one-hot of the gold label.
fn utterance_dist(u: &Utterance, vocab: &StrategyVocab) -> Result<Option<Vec<f64>>> {
    if let Some(p) = &u.strategy_dist {
        ensure_dim("strategy distribution", vocab.len(), p.len())?;
        return Ok(Some(p.clone()));
    }
    match &u.strategy {
        Some(l) => {
            let mut v = vec![0.0; vocab.len()];
            v[vocab.index_of(l)?] = 1.0;
            Ok(Some(v))
        }
        None => Ok(None),
    }
}

fn mean_dist(d: &Dialogue, role: Role, vocab: &StrategyVocab) -> Result<Option<Vec<f64>>> {
    let mut acc = vec![0.0; vocab.len()];
    let mut count = 0usize;
    for u in d.utterances_of(role) {
        if let Some(p) = utterance_dist(u, vocab)? {
            for (a, v) in acc.iter_mut().zip(&p) {
                *a += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Ok(Some(acc))
}

/// Per-dialogue means of the persuadee and persuader strategy
/// distributions plus the normalized donation. Dialogues lacking either
/// role are skipped.
pub fn build_dataset(corpus: &DialogueCorpus, vocab_ee: &StrategyVocab, vocab_er: &StrategyVocab) -> Result<CausalDataset> {
    let mut columns: Vec<String> = vocab_ee.labels.iter().map(|l| ee_column(l)).collect();
    columns.extend(vocab_er.labels.iter().map(|l| er_column(l)));
    columns.push(DONATION_COLUMN.to_string());
    let mut rows = Vec::new();
    let mut row_ids = Vec::new();
    for d in &corpus.dialogues {
        let y = d
            .donation_norm
            .ok_or_else(|| Error::Contract(format!("dialogue {} has no normalized donation", d.id)))?;
        let (Some(ee), Some(er)) = (mean_dist(d, Role::EE, vocab_ee)?, mean_dist(d, Role::ER, vocab_er)?) else {
            log::warn!("dialogue {} lacks annotated turns for one role; skipped", d.id);
            continue;
        };
        let mut row = ee;
        row.extend(er);
        row.push(y);
        rows.push(row);
        row_ids.push(d.id.clone());
    }
    Ok(CausalDataset {
        columns,
        rows,
        n_ee: vocab_ee.len(),
        n_er: vocab_er.len(),
        row_ids,
    })
}

/// Persuadee strategy label to the persuader strategies it causes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseEffectMap {
    pub effects: BTreeMap<String, Vec<String>>,
}

impl CauseEffectMap {
    pub fn effects_of(&self, ee_label: &str) -> &[String] {
        self.effects.get(ee_label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn pair_count(&self) -> usize {
        self.effects.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.effects.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Keeps exactly the edges from a persuadee strategy column into a
/// persuader strategy column. Effects are listed in column order.
pub fn extract_effect_pairs(dag: &Dag, vocab_ee: &StrategyVocab, vocab_er: &StrategyVocab) -> CauseEffectMap {
    let mut effects: BTreeMap<String, Vec<String>> = BTreeMap::new();
    fn label<'a>(name: &'a str, prefix: &str, vocab: &StrategyVocab) -> Option<&'a str> {
        name.strip_prefix(prefix).filter(|l| vocab.labels.iter().any(|x| x == l))
    }
    let mut edges = dag.edges();
    edges.sort_by_key(|&(a, b)| (a, b));
    for (a, b) in edges {
        if let (Some(cause), Some(effect)) = (label(&dag.nodes[a], "EE:", vocab_ee), label(&dag.nodes[b], "ER:", vocab_er)) {
            effects.entry(cause.to_string()).or_default().push(effect.to_string());
        }
    }
    CauseEffectMap { effects }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::dialogue;

    fn vocab(role: Role, n: usize) -> StrategyVocab {
        StrategyVocab::new(role, (0..n).map(|i| format!("s{i}")).collect())
    }

    #[test]
    fn uniform_distributions_give_uniform_row() {
        let (ve, vr) = (vocab(Role::EE, 3), vocab(Role::ER, 4));
        let mut d = dialogue("d", 5, Role::ER, 100);
        d.donation_norm = Some(0.25);
        for u in &mut d.utterances {
            let k = if u.role == Role::EE { 3 } else { 4 };
            u.strategy_dist = Some(vec![1.0 / k as f64; k]);
        }
        let corpus = DialogueCorpus::new(2, vec![d]).unwrap();
        let ds = build_dataset(&corpus, &ve, &vr).unwrap();
        assert_eq!(ds.n_cols(), 8);
        let row = &ds.rows[0];
        assert!(row[..3].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(row[3..7].iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert_eq!(row[7], 0.25);
    }

    #[test]
    fn means_and_gold_fallback() {
        let (ve, vr) = (vocab(Role::EE, 2), vocab(Role::ER, 2));
        let mut d = dialogue("d", 4, Role::EE, 0);
        d.donation_norm = Some(1.0);
        d.utterances[0].strategy_dist = Some(vec![0.2, 0.8]);
        d.utterances[2].strategy = Some("s0".into());
        d.utterances[1].strategy_dist = Some(vec![0.6, 0.4]);
        let mut bare = dialogue("e", 2, Role::EE, 0);
        bare.donation_norm = Some(0.0);
        let corpus = DialogueCorpus::new(2, vec![d, bare]).unwrap();
        let ds = build_dataset(&corpus, &ve, &vr).unwrap();
        assert_eq!(ds.n_rows(), 1);
        let expect = [0.6, 0.4, 0.6, 0.4, 1.0];
        for (a, b) in ds.rows[0].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn only_persuadee_to_persuader_edges_are_extracted() {
        let (ve, vr) = (vocab(Role::EE, 2), vocab(Role::ER, 2));
        let nodes = vec![ee_column("s0"), ee_column("s1"), er_column("s0"), er_column("s1"), DONATION_COLUMN.into()];
        // ee0 -> er0, ee1 -> er1, er0 -> ee1, er1 -> y
        let dag = Dag::from_edges(nodes.clone(), &[(0, 2), (1, 3), (2, 1), (3, 4)]).unwrap();
        let map = extract_effect_pairs(&dag, &ve, &vr);
        assert_eq!(map.pair_count(), 2);
        assert_eq!(map.effects_of("s0"), ["s0".to_string()]);
        assert_eq!(map.effects_of("s1"), ["s1".to_string()]);
        assert!(extract_effect_pairs(&Dag::empty(nodes), &ve, &vr).is_empty());
    }
}
