use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_embedding_block, write_embedding_block, Dialogue, DialogueCorpus, EmbeddingBlock, Role, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    donation_cents: u64,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    turn: usize,
    role: Role,
    #[serde(default)]
    text: String,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strategy_dist: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    dialogue_id: String,
    turn: usize,
}

/// Embedding block and row index that accompany `corpus.jsonl`:
/// `corpus.emb` and `corpus.idx.jsonl`.
pub fn companion_paths(corpus_path: &Path) -> (PathBuf, PathBuf) {
    (
        corpus_path.with_extension("emb"),
        corpus_path.with_extension("idx.jsonl"),
    )
}

/// Parses the dialogue JSONL without embeddings.
pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<Dialogue>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let id = rec.id;
        out.push(Dialogue {
            utterances: rec
                .utterances
                .into_iter()
                .map(|u| Utterance {
                    dialogue_id: id.clone(),
                    turn: u.turn,
                    role: u.role,
                    text: u.text,
                    embedding: Vec::new(),
                    strategy: u.strategy,
                    strategy_dist: u.strategy_dist,
                })
                .collect(),
            id,
            donation_cents: rec.donation_cents,
            donation_norm: None,
        });
    }
    Ok(out)
}

/// Fills utterance embeddings from a binary block whose rows are keyed by
/// the `(dialogue_id, turn)` index file.
pub fn attach_embeddings(dialogues: Vec<Dialogue>, emb_path: &Path, index_path: &Path) -> Result<DialogueCorpus> {
    let block = read_embedding_block(emb_path)?;
    let f = fs::File::open(index_path).map_err(|e| Error::io(index_path, e))?;
    let mut rows: HashMap<(String, usize), usize> = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: index_path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let row = rows.len();
        if rows.insert((rec.dialogue_id, rec.turn), row).is_some() {
            return Err(Error::Format(format!(
                "{}:{}: duplicate index entry",
                index_path.display(),
                i + 1
            )));
        }
    }
    if rows.len() != block.rows.len() {
        return Err(Error::Format(format!(
            "index lists {} rows, embedding file holds {}",
            rows.len(),
            block.rows.len()
        )));
    }
    let mut dialogues = dialogues;
    for d in &mut dialogues {
        for u in &mut d.utterances {
            let row = rows.get(&(d.id.clone(), u.turn)).ok_or_else(|| {
                Error::Format(format!("no embedding row for dialogue {} turn {}", d.id, u.turn))
            })?;
            u.embedding = block.rows[*row].clone();
        }
    }
    DialogueCorpus::new(block.dim, dialogues)
}

/// Loads `path` (dialogue JSONL) together with its companion embedding
/// files.
pub fn load_corpus(path: &Path) -> Result<DialogueCorpus> {
    let dialogues = read_corpus_jsonl(path)?;
    let (emb, idx) = companion_paths(path);
    attach_embeddings(dialogues, &emb, &idx)
}

pub fn write_corpus(corpus: &DialogueCorpus, path: &Path) -> Result<()> {
    let (emb_path, idx_path) = companion_paths(path);
    let mut jsonl = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut idx = BufWriter::new(fs::File::create(&idx_path).map_err(|e| Error::io(&idx_path, e))?);
    let mut rows = Vec::with_capacity(corpus.utterance_count());
    let json_err = |e: serde_json::Error| Error::Format(e.to_string());
    for d in &corpus.dialogues {
        let rec = DialogueRecord {
            id: d.id.clone(),
            donation_cents: d.donation_cents,
            utterances: d
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    turn: u.turn,
                    role: u.role,
                    text: u.text.clone(),
                    strategy: u.strategy.clone(),
                    strategy_dist: u.strategy_dist.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut jsonl, &rec).map_err(json_err)?;
        jsonl.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for u in &d.utterances {
            serde_json::to_writer(
                &mut idx,
                &IndexRecord {
                    dialogue_id: d.id.clone(),
                    turn: u.turn,
                },
            )
            .map_err(json_err)?;
            idx.write_all(b"\n").map_err(|e| Error::io(&idx_path, e))?;
            rows.push(u.embedding.clone());
        }
    }
    jsonl.flush().map_err(|e| Error::io(path, e))?;
    idx.flush().map_err(|e| Error::io(&idx_path, e))?;
    write_embedding_block(&emb_path, &EmbeddingBlock { dim: corpus.dim, rows })
}
