//! Per-utterance strategy prediction and similarity diagnostics.
//!
//! The predictor is a linear-softmax classifier over utterance embeddings.
//! Anything implementing [`StrategyPredictor`] can stand in for it.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{DialogueCorpus, Role, Utterance};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{
    cosine, read_checkpoint, rng_from_seed, write_checkpoint, Activation, AdamConfig, AdamState, LayerSpec, Mlp,
    Objective,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyVocab {
    pub role: Role,
    pub labels: Vec<String>,
}

impl StrategyVocab {
    pub fn new(role: Role, labels: Vec<String>) -> Self {
        Self { role, labels }
    }

    /// Sorted distinct gold labels of `role` utterances.
    pub fn from_corpus(corpus: &DialogueCorpus, role: Role) -> Self {
        let labels: BTreeSet<&str> = corpus
            .dialogues
            .iter()
            .flat_map(|d| d.utterances_of(role))
            .filter_map(|u| u.strategy.as_deref())
            .collect();
        Self {
            role,
            labels: labels.into_iter().map(String::from).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                role: self.role.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyDistribution {
    pub probs: Vec<f64>,
}

impl StrategyDistribution {
    /// Index of the most probable label; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<StrategyDistribution> {
    if logits.is_empty() {
        return Err(Error::Contract("softmax of an empty logit vector".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(StrategyDistribution {
        probs: exps.into_iter().map(|e| e / z).collect(),
    })
}

pub trait StrategyPredictor: Send + Sync {
    fn vocab(&self) -> &StrategyVocab;
    fn predict(&self, embedding: &[f64]) -> Result<StrategyDistribution>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub net: Mlp,
    pub vocab: StrategyVocab,
}

impl StrategyPredictor for ClassifierParams {
    fn vocab(&self) -> &StrategyVocab {
        &self.vocab
    }

    fn predict(&self, embedding: &[f64]) -> Result<StrategyDistribution> {
        predict_strategy(self, embedding)
    }
}

impl ClassifierParams {
    pub fn zeros(dim: usize, vocab: StrategyVocab) -> Self {
        Self {
            net: Mlp::zeros(&[dim, vocab.len()], &[Activation::Identity]),
            vocab,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "strategy-classifier",
            "role": self.vocab.role,
            "labels": self.vocab.labels,
            "layers": self.net.layers(),
        });
        write_checkpoint(path, &header, self.net.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if ck.header["kind"] != "strategy-classifier" {
            return Err(bad("not a strategy classifier checkpoint"));
        }
        let role: Role = serde_json::from_value(ck.header["role"].clone()).map_err(|e| bad(&e.to_string()))?;
        let labels: Vec<String> =
            serde_json::from_value(ck.header["labels"].clone()).map_err(|e| bad(&e.to_string()))?;
        let layers: Vec<LayerSpec> =
            serde_json::from_value(ck.header["layers"].clone()).map_err(|e| bad(&e.to_string()))?;
        Ok(Self {
            net: Mlp::with_params(layers, ck.params)?,
            vocab: StrategyVocab::new(role, labels),
        })
    }
}

pub fn predict_strategy(params: &ClassifierParams, embedding: &[f64]) -> Result<StrategyDistribution> {
    ensure_dim("classifier input", params.net.input_dim(), embedding.len())?;
    softmax(&params.net.forward(embedding)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub params: ClassifierParams,
    /// Mean cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
}

/// Mean cross-entropy of `net` on `(embedding, label)` pairs together with
/// its parameter gradient.
pub(crate) fn cross_entropy_grad(net: &Mlp, params: &[f64], batch: &[(Vec<f64>, usize)]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (x, y) in batch {
        let trace = net.trace_with(params, x);
        let p = softmax(trace.output()).expect("non-empty logits").probs;
        loss -= p[*y].max(1e-300).ln() * scale;
        let mut up: Vec<f64> = p.iter().map(|v| v * scale).collect();
        up[*y] -= scale;
        net.backward_with(params, &trace, &up, &mut grad)
            .expect("shapes fixed by construction");
    }
    (loss, grad)
}

/// Mean cross-entropy on a fixed batch as a function of the classifier
/// parameters.
pub struct ClassifierObjective<'a> {
    pub net: &'a Mlp,
    pub batch: &'a [(Vec<f64>, usize)],
}

impl Objective for ClassifierObjective<'_> {
    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn loss_at(&self, params: &[f64]) -> f64 {
        cross_entropy_grad(self.net, params, self.batch).0
    }

    fn gradient_at(&self, params: &[f64]) -> Vec<f64> {
        cross_entropy_grad(self.net, params, self.batch).1
    }
}

/// Trains a linear-softmax classifier with mini-batch Adam on
/// cross-entropy. Every utterance must carry a gold label from `vocab`.
pub fn train_classifier(
    utterances: &[&Utterance],
    vocab: &StrategyVocab,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    if utterances.is_empty() {
        return Err(Error::Empty("classifier training set"));
    }
    if vocab.is_empty() {
        return Err(Error::Empty("strategy vocabulary"));
    }
    let dim = utterances[0].embedding.len();
    let mut data = Vec::with_capacity(utterances.len());
    for u in utterances {
        ensure_dim("classifier training embedding", dim, u.embedding.len())?;
        let label = u.strategy.as_deref().ok_or_else(|| {
            Error::Contract(format!("utterance {}/{} has no strategy label", u.dialogue_id, u.turn))
        })?;
        data.push((u.embedding_f64(), vocab.index_of(label)?));
    }
    let mut rng = rng_from_seed(seed);
    let mut net = Mlp::new(&[dim, vocab.len()], &[Activation::Identity], &mut rng);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), net.param_count());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<(Vec<f64>, usize)> = chunk.iter().map(|&i| data[i].clone()).collect();
            let params = net.params().to_vec();
            let (loss, grad) = cross_entropy_grad(&net, &params, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "classifier loss",
                    epoch,
                });
            }
            total += loss * batch.len() as f64;
            adam.step(net.params_mut(), &grad)?;
        }
        loss_trace.push(total / data.len() as f64);
    }
    Ok(TrainedClassifier {
        params: ClassifierParams {
            net,
            vocab: vocab.clone(),
        },
        loss_trace,
    })
}

/// k-fold cross-validated accuracy (folds assigned after a seeded shuffle).
pub fn cross_validate(
    utterances: &[&Utterance],
    vocab: &StrategyVocab,
    config: &ClassifierConfig,
    folds: usize,
    seed: u64,
) -> Result<f64> {
    if utterances.len() < folds || folds < 2 {
        return Err(Error::Contract(format!(
            "{} utterances cannot be split into {folds} folds",
            utterances.len()
        )));
    }
    let mut idx: Vec<usize> = (0..utterances.len()).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut correct = 0usize;
    for f in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| i % folds == f);
        let train_set: Vec<&Utterance> = train.iter().map(|&i| utterances[i]).collect();
        let model = train_classifier(&train_set, vocab, config, seed.wrapping_add(f as u64 + 1))?;
        for &i in &test {
            let u = utterances[i];
            let p = predict_strategy(&model.params, &u.embedding_f64())?;
            if Some(vocab.labels[p.argmax()].as_str()) == u.strategy.as_deref() {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / utterances.len() as f64)
}

/// Attaches a predicted distribution to every utterance using the
/// role-matching classifier. Gold labels are kept as they are.
pub fn annotate_corpus(
    corpus: &DialogueCorpus,
    ee: &dyn StrategyPredictor,
    er: &dyn StrategyPredictor,
) -> Result<DialogueCorpus> {
    let mut out = corpus.clone();
    for d in &mut out.dialogues {
        for u in &mut d.utterances {
            if u.embedding.is_empty() {
                return Err(Error::Contract(format!(
                    "utterance {}/{} has no embedding",
                    u.dialogue_id, u.turn
                )));
            }
            let model = match u.role {
                Role::EE => ee,
                Role::ER => er,
            };
            u.strategy_dist = Some(model.predict(&u.embedding_f64())?.probs);
        }
    }
    Ok(out)
}

/// Label used for grouping: the gold label if present, otherwise the
/// argmax of the attached distribution (rendered as its index).
pub(crate) fn effective_label(u: &Utterance, vocab: Option<&StrategyVocab>) -> Option<String> {
    if let Some(l) = &u.strategy {
        return Some(l.clone());
    }
    let dist = u.strategy_dist.as_ref()?;
    let k = argmax(dist);
    Some(match vocab {
        Some(v) => v.labels.get(k).cloned().unwrap_or_else(|| k.to_string()),
        None => format!("#{k}"),
    })
}

pub const SIMILARITY_PAIR_CAP: usize = 100_000;

/// Mean pairwise cosine similarity of `role` embeddings within the same
/// strategy (`intra`) and across different strategies (`inter`). When the
/// number of pairs exceeds `pair_cap`, `pair_cap` pairs are sampled.
pub fn intra_inter_similarity(
    corpus: &DialogueCorpus,
    role: Role,
    vocab: Option<&StrategyVocab>,
    pair_cap: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let items: Vec<(Vec<f64>, String)> = corpus
        .dialogues
        .iter()
        .flat_map(|d| d.utterances_of(role))
        .filter_map(|u| effective_label(u, vocab).map(|l| (u.embedding_f64(), l)))
        .collect();
    if items.len() < 2 {
        return Err(Error::Empty("labelled utterances for the requested role"));
    }
    let n = items.len();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    let mut visit = |i: usize, j: usize| {
        let c = cosine(&items[i].0, &items[j].0);
        if items[i].1 == items[j].1 {
            intra += c;
            n_intra += 1;
        } else {
            inter += c;
            n_inter += 1;
        }
    };
    if n * (n - 1) / 2 <= pair_cap {
        for i in 0..n {
            for j in i + 1..n {
                visit(i, j);
            }
        }
    } else {
        let mut rng = rng_from_seed(seed);
        for _ in 0..pair_cap {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            visit(i, j);
        }
    }
    let mean = |s: f64, k: usize| if k == 0 { f64::NAN } else { s / k as f64 };
    Ok((mean(intra, n_intra), mean(inter, n_inter)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, DialogueCorpus};

    fn labelled(emb: Vec<f32>, label: &str, role: Role, turn: usize) -> Utterance {
        Utterance {
            dialogue_id: "d".into(),
            turn,
            role,
            text: String::new(),
            embedding: emb,
            strategy: Some(label.into()),
            strategy_dist: None,
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().probs, vec![0.5, 0.5]);
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap().probs;
        for (a, b) in p.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
        let shifted = softmax(&[101.0, 102.0, 103.0]).unwrap().probs;
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1000.0, -1000.0]).unwrap().probs[0] > 0.999);
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let d = StrategyDistribution {
            probs: vec![0.2, 0.4, 0.4],
        };
        assert_eq!(d.argmax(), 1);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let c = ClassifierParams::zeros(4, StrategyVocab::new(Role::EE, vec!["a".into(), "b".into(), "c".into(), "d".into()]));
        let p = predict_strategy(&c, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(p.probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(predict_strategy(&c, &[1.0]).is_err());
    }

    #[test]
    fn single_class_training_is_confident() {
        let us: Vec<Utterance> = (0..20)
            .map(|i| labelled(vec![i as f32 * 0.1, 1.0 - i as f32 * 0.05], "only", Role::ER, i))
            .collect();
        let refs: Vec<&Utterance> = us.iter().collect();
        let vocab = StrategyVocab::new(Role::ER, vec!["only".into()]);
        let m = train_classifier(&refs, &vocab, &ClassifierConfig::default(), 1).unwrap();
        for u in &us {
            assert!(predict_strategy(&m.params, &u.embedding_f64()).unwrap().probs[0] >= 0.99);
        }
    }

    #[test]
    fn unknown_label_and_empty_set_are_errors() {
        let vocab = StrategyVocab::new(Role::EE, vec!["a".into()]);
        assert!(train_classifier(&[], &vocab, &ClassifierConfig::default(), 0).is_err());
        let u = labelled(vec![1.0], "zzz", Role::EE, 0);
        assert!(matches!(
            train_classifier(&[&u], &vocab, &ClassifierConfig::default(), 0),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn similarity_of_identical_and_orthogonal_clusters() {
        let mk = |embs: Vec<(Vec<f32>, &str)>| {
            let utterances = embs
                .into_iter()
                .enumerate()
                .map(|(t, (e, l))| labelled(e, l, if t % 2 == 0 { Role::EE } else { Role::ER }, t))
                .collect();
            DialogueCorpus::new(
                2,
                vec![Dialogue {
                    id: "d".into(),
                    utterances,
                    donation_cents: 0,
                    donation_norm: None,
                }],
            )
            .unwrap()
        };
        let same = mk(vec![
            (vec![1.0, 1.0], "a"),
            (vec![0.0, 0.0], "x"),
            (vec![1.0, 1.0], "a"),
            (vec![0.0, 0.0], "x"),
            (vec![1.0, 1.0], "b"),
        ]);
        let (intra, inter) = intra_inter_similarity(&same, Role::EE, None, SIMILARITY_PAIR_CAP, 0).unwrap();
        assert!((intra - 1.0).abs() < 1e-12 && (inter - 1.0).abs() < 1e-12);

        let ortho = mk(vec![
            (vec![1.0, 0.0], "a"),
            (vec![0.0, 0.0], "x"),
            (vec![2.0, 0.0], "a"),
            (vec![0.0, 0.0], "x"),
            (vec![0.0, 1.0], "b"),
            (vec![0.0, 0.0], "x"),
            (vec![0.0, 3.0], "b"),
        ]);
        let (intra, inter) = intra_inter_similarity(&ortho, Role::EE, None, SIMILARITY_PAIR_CAP, 0).unwrap();
        assert!((intra - 1.0).abs() < 1e-12);
        assert!(inter.abs() < 1e-12);
        assert!(intra_inter_similarity(&ortho, Role::ER, None, 2, 0).is_ok());
    }
}
