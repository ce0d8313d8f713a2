//! End-to-end orchestration: the in-memory experiment used by the stages
//! and the file-backed, resumable stage runner behind the CLI.

mod config;
mod stages;

pub use config::{PipelineConfig, SelectorKind, KEYS};
pub use stages::{
    file_digest, manifest_path, read_metric_csvs, run_pipeline, run_stage, stage_inputs, stage_outputs, Manifest,
    PipelineReport, Stage, StageOutcome, StageRecord, STAGES,
};

use crate::actions::{build_action_pool, ActionSelector, Retriever};
use crate::cfengine::{build_cf_databases, next_state_distance, train_bicogan, CfDatabaseSet, TrainedBicogan};
use crate::corpus::{corpus_transitions, filter_by_donation, normalize_donations, DialogueCorpus, NormStats, Role, Utterance};
use crate::discovery::{build_dataset, extract_effect_pairs, grasp_search, CausalDataset, CauseEffectMap, GraspConfig, GraspResult};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::policy::{evaluate_policy, train_d3qn, PolicyReport, TrainedQNet};
use crate::reward::{train_ddp, DdpParams, TrainedDdp};
use crate::strategy::{annotate_corpus, train_classifier, ClassifierParams, StrategyVocab};

/// Seed streams of the stages, derived from the run seed.
pub(crate) mod streams {
    pub const ANNOTATE: u64 = 1;
    pub const DISCOVER: u64 = 2;
    pub const TRAIN_CF: u64 = 3;
    pub const GEN_CF: u64 = 4;
    pub const TRAIN_DDP: u64 = 5;
    pub const TRAIN_POLICY: u64 = 6;
}

/// Drops dialogues above `max_donation` and attaches min-max normalized
/// donations.
pub fn prepare_corpus(corpus: &DialogueCorpus, max_donation: f64) -> Result<(DialogueCorpus, NormStats)> {
    normalize_donations(&filter_by_donation(corpus, max_donation))
}

#[derive(Debug, Clone)]
pub struct Annotators {
    pub ee: ClassifierParams,
    pub er: ClassifierParams,
    /// Per-epoch training loss of each classifier; empty when loaded.
    pub ee_loss: Vec<f64>,
    pub er_loss: Vec<f64>,
}

fn labeled(corpus: &DialogueCorpus, role: Role) -> Vec<&Utterance> {
    corpus
        .dialogues
        .iter()
        .flat_map(|d| d.utterances_of(role))
        .filter(|u| u.strategy.is_some())
        .collect()
}

/// One classifier per role, trained on the gold-labeled utterances.
pub fn train_annotators(corpus: &DialogueCorpus, config: &PipelineConfig) -> Result<Annotators> {
    let seed = derive_seed(config.seed, streams::ANNOTATE);
    let train = |role: Role, stream: u64| -> Result<_> {
        let vocab = StrategyVocab::from_corpus(corpus, role);
        if vocab.is_empty() {
            return Err(Error::Empty("gold strategy labels for classifier training"));
        }
        train_classifier(&labeled(corpus, role), &vocab, &config.classifier, derive_seed(seed, stream))
    };
    let (ee, er) = (train(Role::EE, 0)?, train(Role::ER, 1)?);
    Ok(Annotators {
        ee: ee.params,
        er: er.params,
        ee_loss: ee.loss_trace,
        er_loss: er.loss_trace,
    })
}

/// Corpus with predicted strategy labels and distributions on every
/// utterance.
pub fn annotate(corpus: &DialogueCorpus, annotators: &Annotators) -> Result<DialogueCorpus> {
    annotate_corpus(corpus, &annotators.ee, &annotators.er)
}

#[derive(Debug, Clone)]
pub struct DiscoveryOutcome {
    pub dataset: CausalDataset,
    pub result: GraspResult,
    pub effects: CauseEffectMap,
}

pub fn discover(corpus: &DialogueCorpus, annotators: &Annotators, config: &PipelineConfig) -> Result<DiscoveryOutcome> {
    let dataset = build_dataset(corpus, &annotators.ee.vocab, &annotators.er.vocab)?;
    let grasp = GraspConfig {
        depth: config.grasp_depth,
        restarts: config.grasp_restarts,
        penalty: config.grasp_penalty,
    };
    let result = grasp_search(&dataset, &grasp, derive_seed(config.seed, streams::DISCOVER))?;
    let effects = extract_effect_pairs(&result.dag, &annotators.ee.vocab, &annotators.er.vocab);
    Ok(DiscoveryOutcome {
        dataset,
        result,
        effects,
    })
}

pub fn train_counterfactual_model(corpus: &DialogueCorpus, config: &PipelineConfig) -> Result<TrainedBicogan> {
    train_bicogan(
        &corpus_transitions(corpus),
        &config.bicogan,
        derive_seed(config.seed, streams::TRAIN_CF),
    )
}

/// Counterfactual databases for one selector. The causal selector uses
/// `effects`; the random selector ignores it.
pub fn generate_counterfactuals(
    bicogan: &crate::cfengine::BicoganParams,
    corpus: &DialogueCorpus,
    annotators: &Annotators,
    effects: &CauseEffectMap,
    kind: SelectorKind,
    config: &PipelineConfig,
) -> Result<CfDatabaseSet> {
    let pool = build_action_pool(corpus, config.pool_strategy, Some(&annotators.er.vocab));
    let retriever = Retriever::for_pool(&pool)?;
    let selector = ActionSelector {
        pool: &pool,
        retriever: &retriever,
        map: match kind {
            SelectorKind::Causal => Some(effects),
            SelectorKind::Random => None,
        },
        classifier: &annotators.ee,
        topk: config.topk,
    };
    build_cf_databases(
        bicogan,
        corpus,
        &selector,
        &config.cfgen,
        derive_seed(config.seed, streams::GEN_CF),
    )
}

pub fn train_reward_model(corpus: &DialogueCorpus, config: &PipelineConfig) -> Result<TrainedDdp> {
    let ddp = crate::reward::DdpConfig {
        max_donation: config.max_donation,
        ..config.ddp
    };
    train_ddp(corpus, &ddp, derive_seed(config.seed, streams::TRAIN_DDP))
}

pub fn train_policy(set: &CfDatabaseSet, ddp: &DdpParams, config: &PipelineConfig) -> Result<TrainedQNet> {
    train_d3qn(set, ddp, &config.d3qn, derive_seed(config.seed, streams::TRAIN_POLICY))
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub kind: SelectorKind,
    pub databases: CfDatabaseSet,
    /// Mean distance of counterfactual to factual next states.
    pub cf_distance: f64,
    pub policy: TrainedQNet,
    pub report: PolicyReport,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub corpus: DialogueCorpus,
    pub annotators: Annotators,
    pub discovery: DiscoveryOutcome,
    pub bicogan: TrainedBicogan,
    pub ddp: TrainedDdp,
    pub variants: Vec<VariantOutcome>,
}

impl Experiment {
    pub fn variant(&self, kind: SelectorKind) -> Option<&VariantOutcome> {
        self.variants.iter().find(|v| v.kind == kind)
    }
}

/// Every stage in memory, one policy per configured selector. All
/// selectors share the corpus, annotators, transition model, reward model
/// and seeds, so their results are paired.
pub fn run_experiment(raw: &DialogueCorpus, config: &PipelineConfig) -> Result<Experiment> {
    config.validate()?;
    let (corpus, _) = prepare_corpus(raw, config.max_donation)?;
    let annotators = train_annotators(&corpus, config)?;
    let discovery = discover(&annotate(&corpus, &annotators)?, &annotators, config)?;
    let bicogan = train_counterfactual_model(&corpus, config)?;
    let ddp = train_reward_model(&corpus, config)?;
    let mut variants = Vec::new();
    for &kind in &config.selectors {
        let databases =
            generate_counterfactuals(&bicogan.params, &corpus, &annotators, &discovery.effects, kind, config)?;
        let policy = train_policy(&databases, &ddp.params, config)?;
        let report = evaluate_policy(
            &policy.qnet,
            &databases,
            &corpus,
            &ddp.params,
            config.prefix_len,
            config.cfgen.max_len,
        )?;
        variants.push(VariantOutcome {
            kind,
            cf_distance: next_state_distance(&databases, &corpus),
            databases,
            policy,
            report,
        });
    }
    Ok(Experiment {
        corpus,
        annotators,
        discovery,
        bicogan,
        ddp,
        variants,
    })
}
