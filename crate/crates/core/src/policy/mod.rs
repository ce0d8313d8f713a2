//! Dueling double deep Q-network over counterfactual databases.

mod rollout;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use rollout::{evaluate_policy, rollout, DialogueQ, PolicyReport, Rollout};

use crate::cfengine::{CfDatabaseSet, CfDialogue};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{
    read_checkpoint, rng_from_seed, write_checkpoint, Activation, AdamConfig, AdamState, LayerSpec, Mlp, Objective,
    Rng,
};
use crate::reward::{reward, DdpParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D3qnConfig {
    pub hidden: usize,
    pub gamma: f64,
    /// Gradient updates between target-network syncs.
    pub sync_interval: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Passes over the replay buffer.
    pub epochs: usize,
}

impl Default for D3qnConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gamma: 0.99,
            sync_interval: 100,
            batch_size: 32,
            lr: 1e-3,
            epochs: 10,
        }
    }
}

/// One copy of the three parameter blocks: a trunk over `s ++ a`, the
/// advantage head on top of it, and a value network over `s` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct QHeads {
    pub trunk: Mlp,
    pub advantage: Mlp,
    pub value: Mlp,
}

impl QHeads {
    fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            trunk: Mlp::new(
                &[state_dim + action_dim, hidden, hidden],
                &[Activation::Relu, Activation::Relu],
                rng,
            ),
            advantage: Mlp::new(&[hidden, 1], &[Activation::Identity], rng),
            value: Mlp::new(&[state_dim, hidden, 1], &[Activation::Relu, Activation::Identity], rng),
        }
    }

    fn state_dim(&self) -> usize {
        self.value.input_dim()
    }

    fn param_count(&self) -> usize {
        self.trunk.param_count() + self.advantage.param_count() + self.value.param_count()
    }

    fn flat(&self) -> Vec<f64> {
        [self.trunk.params(), self.advantage.params(), self.value.params()].concat()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let (nt, na) = (self.trunk.param_count(), self.advantage.param_count());
        self.trunk.params_mut().copy_from_slice(&flat[..nt]);
        self.advantage.params_mut().copy_from_slice(&flat[nt..nt + na]);
        self.value.params_mut().copy_from_slice(&flat[nt + na..]);
    }

    pub fn state_value(&self, s: &[f64]) -> f64 {
        self.value.forward_with(self.value.params(), s)[0]
    }

    pub fn advantage(&self, s: &[f64], a: &[f64]) -> f64 {
        let h = self.trunk.forward_with(self.trunk.params(), &[s, a].concat());
        self.advantage.forward_with(self.advantage.params(), &h)[0]
    }

    /// `V(s) + A(s, a) - mean_c A(s, c)` over `candidates`.
    pub fn q(&self, s: &[f64], a: &[f64], candidates: &[Vec<f64>]) -> Result<f64> {
        if candidates.is_empty() {
            return Err(Error::Contract("dueling aggregation over an empty candidate set".into()));
        }
        let mean = candidates.iter().map(|c| self.advantage(s, c)).sum::<f64>() / candidates.len() as f64;
        Ok(self.state_value(s) + self.advantage(s, a) - mean)
    }

    /// Q of every candidate, sharing the value and mean terms.
    pub fn q_all(&self, s: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Contract("dueling aggregation over an empty candidate set".into()));
        }
        let adv: Vec<f64> = candidates.iter().map(|c| self.advantage(s, c)).collect();
        let base = self.state_value(s) - adv.iter().sum::<f64>() / adv.len() as f64;
        Ok(adv.into_iter().map(|x| base + x).collect())
    }

    /// Adds `dq * dQ(s, a)/dparams` into `grad` (flat layout).
    fn backward_q(&self, s: &[f64], a: &[f64], candidates: &[Vec<f64>], dq: f64, grad: &mut [f64]) {
        let (nt, na) = (self.trunk.param_count(), self.advantage.param_count());
        let (gt, rest) = grad.split_at_mut(nt);
        let (ga, gv) = rest.split_at_mut(na);
        let vt = self.value.trace_with(self.value.params(), s);
        self.value.backward_with(self.value.params(), &vt, &[dq], gv).expect("fixed shapes");
        let mut adv_back = |x: &[f64], w: f64| {
            let tt = self.trunk.trace_with(self.trunk.params(), &[s, x].concat());
            let at = self.advantage.trace_with(self.advantage.params(), tt.output());
            let dh = self
                .advantage
                .backward_with(self.advantage.params(), &at, &[w], ga)
                .expect("fixed shapes");
            self.trunk.backward_with(self.trunk.params(), &tt, &dh, gt).expect("fixed shapes");
        };
        adv_back(a, dq);
        let share = -dq / candidates.len() as f64;
        for c in candidates {
            adv_back(c, share);
        }
    }
}

/// Main and target networks with the discount and sync schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub main: QHeads,
    pub target: QHeads,
    pub gamma: f64,
    pub sync_interval: usize,
}

impl QNet {
    pub fn new(state_dim: usize, action_dim: usize, config: &D3qnConfig, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&config.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", config.gamma)));
        }
        if config.sync_interval == 0 {
            return Err(Error::Config("sync_interval must be positive".into()));
        }
        let main = QHeads::new(state_dim, action_dim, config.hidden, rng);
        Ok(Self {
            target: main.clone(),
            main,
            gamma: config.gamma,
            sync_interval: config.sync_interval,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.main.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.main.trunk.input_dim() - self.state_dim()
    }

    pub fn sync_target(&mut self) {
        self.target = self.main.clone();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "d3qn",
            "gamma": self.gamma,
            "sync_interval": self.sync_interval,
            "trunk": self.main.trunk.layers(),
            "advantage": self.main.advantage.layers(),
            "value": self.main.value.layers(),
        });
        write_checkpoint(path, &header, &[self.main.flat(), self.target.flat()].concat())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
        if ck.header["kind"] != "d3qn" {
            return Err(bad("not a Q-network checkpoint".into()));
        }
        let layers = |k: &str| -> Result<Mlp> {
            let l: Vec<LayerSpec> = serde_json::from_value(ck.header[k].clone()).map_err(|e| bad(e.to_string()))?;
            Ok(Mlp::from_layers(l))
        };
        let mut main = QHeads {
            trunk: layers("trunk")?,
            advantage: layers("advantage")?,
            value: layers("value")?,
        };
        let n = main.param_count();
        ensure_dim("Q-network checkpoint parameters", 2 * n, ck.params.len())?;
        let mut target = main.clone();
        main.set_flat(&ck.params[..n]);
        target.set_flat(&ck.params[n..]);
        Ok(Self {
            main,
            target,
            gamma: ck.header["gamma"].as_f64().ok_or_else(|| bad("missing gamma".into()))?,
            sync_interval: ck.header["sync_interval"].as_u64().ok_or_else(|| bad("missing sync_interval".into()))?
                as usize,
        })
    }
}

fn check_pair(qnet: &QNet, s: &[f64], a: &[f64]) -> Result<()> {
    ensure_dim("Q-network state", qnet.state_dim(), s.len())?;
    ensure_dim("Q-network action", qnet.action_dim(), a.len())
}

/// Dueling Q-value of `(s, a)` with the advantage centered over
/// `candidates`, on the main or the target network.
pub fn q_value(qnet: &QNet, s: &[f64], a: &[f64], candidates: &[Vec<f64>], use_target: bool) -> Result<f64> {
    check_pair(qnet, s, a)?;
    for c in candidates {
        ensure_dim("Q-network candidate action", qnet.action_dim(), c.len())?;
    }
    let heads = if use_target { &qnet.target } else { &qnet.main };
    heads.q(s, a, candidates)
}

/// One transition of the replay buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// Actions available at this slot; the dueling mean runs over them.
    pub candidates: Vec<Vec<f64>>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Actions available at the next slot.
    pub next_candidates: Vec<Vec<f64>>,
    pub terminal: bool,
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Double-DQN target: the main network picks the next action, the target
/// network scores it. Terminal items return the reward unchanged.
pub fn d3qn_target(qnet: &QNet, item: &ReplayItem) -> Result<f64> {
    if item.terminal {
        return Ok(item.r);
    }
    if item.next_candidates.is_empty() {
        return Err(Error::Contract("non-terminal replay item without next candidates".into()));
    }
    ensure_dim("Q-network next state", qnet.state_dim(), item.s_next.len())?;
    let best = argmax_first(&qnet.main.q_all(&item.s_next, &item.next_candidates)?);
    let q = qnet
        .target
        .q(&item.s_next, &item.next_candidates[best], &item.next_candidates)?;
    Ok(item.r + qnet.gamma * q)
}

/// Mean squared error of the main network against fixed targets, with its
/// gradient in the flat main-network parameters.
fn td_loss_grad(heads: &QHeads, batch: &[(&ReplayItem, f64)]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; heads.param_count()];
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut loss = 0.0;
    for (item, y) in batch {
        let q = heads.q(&item.s, &item.a, &item.candidates).expect("validated replay item");
        let err = q - y;
        loss += err * err * scale;
        heads.backward_q(&item.s, &item.a, &item.candidates, 2.0 * err * scale, &mut grad);
    }
    (loss, grad)
}

/// The temporal-difference loss on a batch with frozen targets, as a
/// function of the main-network parameters.
pub struct TdObjective<'a> {
    heads: QHeads,
    flat: Vec<f64>,
    batch: Vec<(&'a ReplayItem, f64)>,
}

impl<'a> TdObjective<'a> {
    pub fn new(qnet: &QNet, items: &'a [ReplayItem]) -> Result<Self> {
        let batch = items
            .iter()
            .map(|it| Ok((it, d3qn_target(qnet, it)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            heads: qnet.main.clone(),
            flat: qnet.main.flat(),
            batch,
        })
    }
}

impl Objective for TdObjective<'_> {
    fn params(&self) -> &[f64] {
        &self.flat
    }

    fn loss_at(&self, p: &[f64]) -> f64 {
        let mut h = self.heads.clone();
        h.set_flat(p);
        td_loss_grad(&h, &self.batch).0
    }

    fn gradient_at(&self, p: &[f64]) -> Vec<f64> {
        let mut h = self.heads.clone();
        h.set_flat(p);
        td_loss_grad(&h, &self.batch).1
    }
}

fn validate_items(qnet: &QNet, items: &[ReplayItem]) -> Result<()> {
    for it in items {
        check_pair(qnet, &it.s, &it.a)?;
        if it.candidates.is_empty() {
            return Err(Error::Contract("replay item without candidates".into()));
        }
        for c in it.candidates.iter().chain(&it.next_candidates) {
            ensure_dim("Q-network candidate action", qnet.action_dim(), c.len())?;
        }
        if !it.terminal {
            ensure_dim("Q-network next state", qnet.state_dim(), it.s_next.len())?;
            if it.next_candidates.is_empty() {
                return Err(Error::Contract("non-terminal replay item without next candidates".into()));
            }
        }
    }
    Ok(())
}

/// Stepwise trainer: one Adam update per call, target synced every
/// `sync_interval` updates.
pub struct D3qnTrainer {
    pub qnet: QNet,
    adam: AdamState,
    flat: Vec<f64>,
    updates: usize,
}

impl D3qnTrainer {
    pub fn new(qnet: QNet, lr: f64) -> Self {
        let flat = qnet.main.flat();
        Self {
            adam: AdamState::new(AdamConfig::with_lr(lr), flat.len()),
            qnet,
            flat,
            updates: 0,
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// One update on `batch`; returns the batch loss before the step.
    pub fn update(&mut self, batch: &[&ReplayItem]) -> Result<f64> {
        let targeted: Vec<(&ReplayItem, f64)> = batch
            .iter()
            .map(|it| Ok((*it, d3qn_target(&self.qnet, it)?)))
            .collect::<Result<_>>()?;
        let (loss, grad) = td_loss_grad(&self.qnet.main, &targeted);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "temporal-difference loss",
                epoch: self.updates,
            });
        }
        self.adam.step(&mut self.flat, &grad)?;
        self.qnet.main.set_flat(&self.flat);
        self.updates += 1;
        if self.updates % self.qnet.sync_interval == 0 {
            self.qnet.sync_target();
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedQNet {
    pub qnet: QNet,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains on a fixed replay buffer, shuffled every epoch.
pub fn train_on_replay(
    items: &[ReplayItem],
    state_dim: usize,
    action_dim: usize,
    config: &D3qnConfig,
    seed: u64,
) -> Result<TrainedQNet> {
    if items.is_empty() {
        return Err(Error::Empty("replay buffer"));
    }
    let mut rng = rng_from_seed(seed);
    let qnet = QNet::new(state_dim, action_dim, config, &mut rng)?;
    validate_items(&qnet, items)?;
    let mut trainer = D3qnTrainer::new(qnet, config.lr);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&ReplayItem> = chunk.iter().map(|&i| &items[i]).collect();
            total += trainer.update(&batch).map_err(|e| match e {
                Error::NonFinite { context, .. } => Error::NonFinite { context, epoch },
                other => other,
            })?;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("d3qn epoch {epoch}: loss {mean:.6}");
        loss_trace.push(mean);
    }
    Ok(TrainedQNet {
        qnet: trainer.qnet,
        loss_trace,
    })
}

/// Counterfactual dialogues grouped by source dialogue, one entry per
/// database holding it, in database order.
pub(crate) fn group_by_dialogue(set: &CfDatabaseSet) -> BTreeMap<&str, Vec<&CfDialogue>> {
    let mut out: BTreeMap<&str, Vec<&CfDialogue>> = BTreeMap::new();
    for db in &set.databases {
        for cf in &db.dialogues {
            out.entry(cf.dialogue_id.as_str()).or_default().push(cf);
        }
    }
    out
}

/// Actions available at step `t` across the databases' versions of one
/// dialogue.
pub(crate) fn slot_candidates(versions: &[&CfDialogue], t: usize) -> Vec<Vec<f64>> {
    versions.iter().filter_map(|cf| cf.actions.get(t).cloned()).collect()
}

/// Replay items from every step of every counterfactual dialogue. Rewards
/// are zero except at each dialogue's last step, which receives the
/// predicted donation of the whole counterfactual sequence.
pub fn build_replay(set: &CfDatabaseSet, ddp: &DdpParams) -> Result<Vec<ReplayItem>> {
    let groups = group_by_dialogue(set);
    let per_db: Vec<Result<Vec<ReplayItem>>> = set
        .databases
        .par_iter()
        .map(|db| {
            let mut items = Vec::new();
            for cf in &db.dialogues {
                let horizon = cf.actions.len();
                if horizon == 0 {
                    continue;
                }
                if cf.truncated {
                    log::warn!("scoring truncated counterfactual dialogue {} as-is", cf.dialogue_id);
                }
                let versions = &groups[cf.dialogue_id.as_str()];
                let sequence = cf.sequence();
                for t in 0..horizon {
                    let terminal = t + 1 == horizon;
                    items.push(ReplayItem {
                        s: cf.states[t].clone(),
                        a: cf.actions[t].clone(),
                        candidates: slot_candidates(versions, t),
                        r: reward(ddp, &sequence, t, horizon)?,
                        s_next: cf.states[t + 1].clone(),
                        next_candidates: if terminal { Vec::new() } else { slot_candidates(versions, t + 1) },
                        terminal,
                    });
                }
            }
            Ok(items)
        })
        .collect();
    let mut out = Vec::new();
    for items in per_db {
        out.extend(items?);
    }
    Ok(out)
}

/// Builds the replay buffer from the databases and trains on it.
pub fn train_d3qn(set: &CfDatabaseSet, ddp: &DdpParams, config: &D3qnConfig, seed: u64) -> Result<TrainedQNet> {
    let items = build_replay(set, ddp)?;
    train_on_replay(&items, set.dim, set.dim, config, seed)
}
