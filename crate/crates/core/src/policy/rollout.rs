use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax_first, group_by_dialogue, slot_candidates, QNet};
use crate::cfengine::{CfDatabaseSet, CfDialogue};
use crate::corpus::{Dialogue, DialogueCorpus};
use crate::error::{Error, Result};
use crate::reward::{cumulative_rewards, DdpParams};

/// A dialogue assembled from a ground-truth prefix and Q-greedy picks among
/// the counterfactual databases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub dialogue_id: String,
    pub utterances: Vec<Vec<f64>>,
    /// Ground-truth utterances at the start of `utterances`.
    pub prefix_len: usize,
    /// Per action slot, the index (in database order, among the databases
    /// holding this dialogue) of the version whose action was taken.
    pub chosen: Vec<usize>,
    pub truncated: bool,
}

/// Prefix length rounded up so that the prefix ends on a persuadee state.
fn state_aligned_prefix(gt: &Dialogue, prefix_len: usize) -> usize {
    let pre = gt.preamble_len();
    let last = prefix_len - 1;
    if last < pre {
        pre + 1
    } else if (last - pre) % 2 == 1 {
        prefix_len + 1
    } else {
        prefix_len
    }
}

fn rollout_versions(
    qnet: &QNet,
    versions: &[&CfDialogue],
    gt: &Dialogue,
    prefix_len: usize,
    max_len: usize,
) -> Result<Rollout> {
    if prefix_len == 0 {
        return Err(Error::Contract("rollout prefix must hold at least one utterance".into()));
    }
    let embeddings: Vec<Vec<f64>> = gt.utterances.iter().map(|u| u.embedding_f64()).collect();
    let mut out = Rollout {
        dialogue_id: gt.id.clone(),
        utterances: Vec::new(),
        prefix_len: 0,
        chosen: Vec::new(),
        truncated: false,
    };
    let aligned = state_aligned_prefix(gt, prefix_len);
    if max_len <= prefix_len || aligned > max_len || aligned > embeddings.len() {
        let n = prefix_len.min(max_len).min(embeddings.len());
        out.utterances = embeddings[..n].to_vec();
        out.prefix_len = n;
        out.truncated = aligned > embeddings.len() && max_len > n;
        return Ok(out);
    }
    out.utterances = embeddings[..aligned].to_vec();
    out.prefix_len = aligned;
    let mut state = embeddings[aligned - 1].clone();
    let mut t = (aligned - 1 - gt.preamble_len()) / 2;
    while out.utterances.len() + 2 <= max_len {
        let holders: Vec<usize> = (0..versions.len()).filter(|&k| versions[k].actions.len() > t).collect();
        if holders.is_empty() {
            log::warn!("counterfactual databases exhausted for dialogue {} at step {t}", gt.id);
            out.truncated = true;
            break;
        }
        let candidates = slot_candidates(versions, t);
        let scores = qnet.main.q_all(&state, &candidates)?;
        let k = holders[argmax_first(&scores)];
        let pick = versions[k];
        out.utterances.push(pick.actions[t].clone());
        state = pick.states[t + 1].clone();
        out.utterances.push(state.clone());
        out.chosen.push(k);
        t += 1;
    }
    Ok(out)
}

/// Starts from the first `prefix_len` ground-truth utterances (extended to
/// the next persuadee state when the prefix stops on a persuader turn) and
/// then, at every action slot, takes the database action with the highest
/// main-network Q-value together with that database's successor state,
/// until `max_len` utterances.
pub fn rollout(
    qnet: &QNet,
    set: &CfDatabaseSet,
    gt: &Dialogue,
    prefix_len: usize,
    max_len: usize,
) -> Result<Rollout> {
    let versions: Vec<&CfDialogue> = set
        .databases
        .iter()
        .filter_map(|db| db.dialogues.iter().find(|cf| cf.dialogue_id == gt.id))
        .collect();
    rollout_versions(qnet, &versions, gt, prefix_len, max_len)
}

/// Q statistics over the candidate opening actions of one dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueQ {
    pub dialogue_id: String,
    pub max_q: f64,
    pub mean_q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReport {
    pub q: Vec<DialogueQ>,
    pub rollouts: Vec<Rollout>,
    /// Cumulative predicted donation over the ground-truth dialogues.
    pub ground_truth: Vec<f64>,
    /// Cumulative predicted donation over the rollouts.
    pub optimized: Vec<f64>,
}

impl PolicyReport {
    pub fn final_ground_truth(&self) -> f64 {
        self.ground_truth.last().copied().unwrap_or(0.0)
    }

    pub fn final_optimized(&self) -> f64 {
        self.optimized.last().copied().unwrap_or(0.0)
    }
}

/// Per-dialogue max and mean Q over the opening candidates, rollouts of
/// every dialogue, and cumulative predicted donations of rollouts versus
/// ground truth. Dialogues without counterfactual versions get `NaN` Q
/// statistics and a prefix-only rollout.
pub fn evaluate_policy(
    qnet: &QNet,
    set: &CfDatabaseSet,
    corpus: &DialogueCorpus,
    ddp: &DdpParams,
    prefix_len: usize,
    max_len: usize,
) -> Result<PolicyReport> {
    let groups = group_by_dialogue(set);
    let rows: Vec<Result<(DialogueQ, Rollout)>> = corpus
        .dialogues
        .par_iter()
        .map(|gt| {
            let versions = groups.get(gt.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let candidates = slot_candidates(versions, 0);
            let (max_q, mean_q) = if candidates.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let qs = qnet.main.q_all(&versions[0].states[0], &candidates)?;
                (
                    qs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    qs.iter().sum::<f64>() / qs.len() as f64,
                )
            };
            let r = rollout_versions(qnet, versions, gt, prefix_len, max_len)?;
            Ok((
                DialogueQ {
                    dialogue_id: gt.id.clone(),
                    max_q,
                    mean_q,
                },
                r,
            ))
        })
        .collect();
    let (mut q, mut rollouts) = (Vec::new(), Vec::new());
    for row in rows {
        let (a, b) = row?;
        q.push(a);
        rollouts.push(b);
    }
    let gt_sequences: Vec<Vec<Vec<f64>>> = corpus
        .dialogues
        .iter()
        .map(|d| d.utterances.iter().map(|u| u.embedding_f64()).collect())
        .collect();
    let rollout_sequences: Vec<Vec<Vec<f64>>> = rollouts.iter().map(|r| r.utterances.clone()).collect();
    Ok(PolicyReport {
        q,
        ground_truth: cumulative_rewards(ddp, &gt_sequences)?,
        optimized: cumulative_rewards(ddp, &rollout_sequences)?,
        rollouts,
    })
}
