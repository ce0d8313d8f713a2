use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{encode, generate_next, l2, standard_normal, BicoganParams};
use crate::actions::{ActionSelector, Query};
use crate::corpus::{read_embedding_block, to_transitions, write_embedding_block, DialogueCorpus, EmbeddingBlock, Role};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfGenConfig {
    pub n_databases: usize,
    /// Utterance slots per counterfactual dialogue, preamble included.
    pub max_len: usize,
    /// Sample prior noise at every step instead of abducting it.
    pub fresh_noise: bool,
}

impl Default for CfGenConfig {
    fn default() -> Self {
        Self {
            n_databases: 10,
            max_len: crate::corpus::MAX_DIALOGUE_LEN,
            fresh_noise: false,
        }
    }
}

/// One alternative trajectory. `states[0]` is the factual opening state;
/// `actions[t]` leads from `states[t]` to `states[t + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CfDialogue {
    pub dialogue_id: String,
    /// Factual persuader utterances preceding the first state.
    pub preamble: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Pool uid of each selected action.
    pub action_uids: Vec<usize>,
    pub truncated: bool,
}

impl CfDialogue {
    /// Full utterance sequence: preamble, then `s0, a0, s1, ...`.
    pub fn sequence(&self) -> Vec<Vec<f64>> {
        let mut out = self.preamble.clone();
        for (t, s) in self.states.iter().enumerate() {
            out.push(s.clone());
            if let Some(a) = self.actions.get(t) {
                out.push(a.clone());
            }
        }
        out
    }

    pub fn slot_count(&self) -> usize {
        self.preamble.len() + self.states.len() + self.actions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CfDatabase {
    pub dialogues: Vec<CfDialogue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfDatabaseSet {
    pub dim: usize,
    pub databases: Vec<CfDatabase>,
}

impl CfDatabaseSet {
    pub fn len(&self) -> usize {
        self.databases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.databases.is_empty()
    }
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Rolls every dialogue forward under substituted actions, once per
/// database. The noise of step `t` is abducted from the factual next state
/// at the same index while one exists, and drawn from the prior after that
/// (or always, with `fresh_noise`). Generated vectors are rounded to single
/// precision so that a written set reads back identically.
pub fn build_cf_databases(
    params: &BicoganParams,
    corpus: &DialogueCorpus,
    selector: &ActionSelector<'_>,
    config: &CfGenConfig,
    seed: u64,
) -> Result<CfDatabaseSet> {
    if config.n_databases == 0 {
        return Err(Error::Config("at least one counterfactual database is required".into()));
    }
    let databases: Vec<Result<CfDatabase>> = (0..config.n_databases)
        .into_par_iter()
        .map(|n| {
            let db_seed = derive_seed(seed, n as u64);
            let mut dialogues = Vec::with_capacity(corpus.len());
            for (i, d) in corpus.dialogues.iter().enumerate() {
                let pre = d.preamble_len();
                let Some(first) = d.utterances.get(pre).filter(|u| u.role == Role::EE) else {
                    log::warn!("dialogue {} has no persuadee turn; left out of the counterfactual set", d.id);
                    continue;
                };
                let mut rng = rng_from_seed(derive_seed(db_seed, i as u64));
                let factual = to_transitions(d);
                let state_texts: Vec<&str> = d.utterances[pre..]
                    .iter()
                    .filter(|u| u.role == Role::EE)
                    .map(|u| u.text.as_str())
                    .collect();
                let steps = config.max_len.saturating_sub(pre + 1) / 2;
                let mut cf = CfDialogue {
                    dialogue_id: d.id.clone(),
                    preamble: d.utterances[..pre].iter().map(|u| u.embedding_f64()).collect(),
                    states: vec![first.embedding_f64()],
                    actions: Vec::new(),
                    action_uids: Vec::new(),
                    truncated: false,
                };
                for t in 0..steps {
                    let s = cf.states[t].clone();
                    let query = Query {
                        text: state_texts.get(t).copied().unwrap_or(""),
                        embedding: &s,
                    };
                    let k = match selector.select(&query, &mut rng) {
                        Ok(k) => k,
                        Err(Error::Empty(_)) => {
                            log::warn!("action pool exhausted in dialogue {}; truncated", d.id);
                            cf.truncated = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    };
                    let entry = &selector.pool.entries[k];
                    let eps = match factual.get(t) {
                        Some(tr) if !config.fresh_noise => encode(params, &tr.s_next)?.2,
                        _ => standard_normal(&mut rng, params.dim),
                    };
                    let next = round_f32(generate_next(params, &s, &entry.embedding, &eps)?);
                    cf.actions.push(entry.embedding.clone());
                    cf.action_uids.push(entry.uid);
                    cf.states.push(next);
                }
                dialogues.push(cf);
            }
            Ok(CfDatabase { dialogues })
        })
        .collect();
    Ok(CfDatabaseSet {
        dim: corpus.dim,
        databases: databases.into_iter().collect::<Result<_>>()?,
    })
}

/// Mean distance between counterfactual next states and the factual next
/// states at the same step, over every database and dialogue.
pub fn next_state_distance(set: &CfDatabaseSet, corpus: &DialogueCorpus) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for db in &set.databases {
        for cf in &db.dialogues {
            let Some(d) = corpus.dialogues.iter().find(|d| d.id == cf.dialogue_id) else {
                continue;
            };
            for (t, tr) in to_transitions(d).iter().enumerate() {
                if let Some(s) = cf.states.get(t + 1) {
                    total += l2(s, &tr.s_next);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CfIndexRecord {
    db: usize,
    dialogue: usize,
    dialogue_id: String,
    slot: usize,
    role: Role,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    uid: Option<usize>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    truncated: bool,
}

/// Writes the vectors as an embedding block at `path` and the row index as
/// JSON lines next to it (`<stem>.idx.jsonl`).
pub fn write_cf_databases(set: &CfDatabaseSet, path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let mut index = String::new();
    for (n, db) in set.databases.iter().enumerate() {
        for (i, cf) in db.dialogues.iter().enumerate() {
            for (slot, v) in cf.sequence().into_iter().enumerate() {
                let pre = cf.preamble.len();
                let (role, uid) = if slot < pre {
                    (Role::ER, None)
                } else if (slot - pre) % 2 == 0 {
                    (Role::EE, None)
                } else {
                    (Role::ER, Some(cf.action_uids[(slot - pre) / 2]))
                };
                let rec = CfIndexRecord {
                    db: n,
                    dialogue: i,
                    dialogue_id: cf.dialogue_id.clone(),
                    slot,
                    role,
                    uid,
                    truncated: cf.truncated,
                };
                index.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
                index.push('\n');
                rows.push(v.iter().map(|&x| x as f32).collect());
            }
        }
    }
    write_embedding_block(path, &EmbeddingBlock { dim: set.dim, rows })?;
    let idx_path = path.with_extension("idx.jsonl");
    let mut f = fs::File::create(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    f.write_all(index.as_bytes()).map_err(|e| Error::io(&idx_path, e))
}

pub fn read_cf_databases(path: &Path) -> Result<CfDatabaseSet> {
    let block = read_embedding_block(path)?;
    let idx_path = path.with_extension("idx.jsonl");
    let text = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let records: Vec<CfIndexRecord> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: idx_path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    if records.len() != block.rows.len() {
        return Err(Error::Format(format!(
            "{}: {} index rows for {} vectors",
            idx_path.display(),
            records.len(),
            block.rows.len()
        )));
    }
    let mut databases: Vec<CfDatabase> = Vec::new();
    for (rec, row) in records.iter().zip(&block.rows) {
        let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        while databases.len() <= rec.db {
            databases.push(CfDatabase::default());
        }
        let db = &mut databases[rec.db];
        if db.dialogues.len() == rec.dialogue {
            db.dialogues.push(CfDialogue {
                dialogue_id: rec.dialogue_id.clone(),
                preamble: Vec::new(),
                states: Vec::new(),
                actions: Vec::new(),
                action_uids: Vec::new(),
                truncated: rec.truncated,
            });
        }
        let cf = db
            .dialogues
            .get_mut(rec.dialogue)
            .ok_or_else(|| Error::Format(format!("{}: dialogues out of order", idx_path.display())))?;
        match (rec.role, rec.uid) {
            (Role::ER, None) if cf.states.is_empty() => cf.preamble.push(v),
            (Role::EE, _) => cf.states.push(v),
            (Role::ER, Some(uid)) => {
                cf.actions.push(v);
                cf.action_uids.push(uid);
            }
            (Role::ER, None) => {
                return Err(Error::Format(format!("{}: action row without uid", idx_path.display())));
            }
        }
    }
    Ok(CfDatabaseSet {
        dim: block.dim,
        databases,
    })
}
