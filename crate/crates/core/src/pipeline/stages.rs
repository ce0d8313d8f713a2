//! File-backed stages. Every stage reads its inputs from the output
//! directory, writes fixed-name artifacts there and records input and
//! output digests in `manifest.json`, so unchanged stages are skipped on
//! rerun.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    annotate, discover, generate_counterfactuals, prepare_corpus, train_annotators, train_counterfactual_model,
    train_policy, train_reward_model, Annotators, PipelineConfig, KEYS,
};
use crate::cfengine::{next_state_distance, read_cf_databases, write_cf_databases, BicoganParams};
use crate::corpus::{attach_embeddings, companion_paths, load_corpus, read_corpus_jsonl, write_corpus, DialogueCorpus, NormStats};
use crate::discovery::CauseEffectMap;
use crate::error::{Error, Result};
use crate::policy::{evaluate_policy, DialogueQ, QNet, Rollout};
use crate::reward::DdpParams;
use crate::strategy::ClassifierParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Annotate,
    Discover,
    TrainCf,
    GenCf,
    TrainDdp,
    TrainPolicy,
    Evaluate,
    Report,
}

/// Stages in execution order.
pub const STAGES: [Stage; 9] = [
    Stage::Ingest,
    Stage::Annotate,
    Stage::Discover,
    Stage::TrainCf,
    Stage::GenCf,
    Stage::TrainDdp,
    Stage::TrainPolicy,
    Stage::Evaluate,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Annotate => "annotate",
            Stage::Discover => "discover",
            Stage::TrainCf => "train-cf",
            Stage::GenCf => "gen-cf",
            Stage::TrainDdp => "train-ddp",
            Stage::TrainPolicy => "train-policy",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Config keys whose values the stage's outputs depend on.
    fn config_keys(self) -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = KEYS
            .iter()
            .filter(|(sec, _)| *sec == "run" || *sec == self.name())
            .map(|(_, k)| *k)
            .collect();
        if self == Stage::Evaluate {
            keys.push("max-len");
        }
        keys
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        STAGES
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Fixed artifact names inside the output directory.
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const CORPUS: &str = "corpus.jsonl";
    pub const NORM: &str = "norm.json";
    pub const CLASSIFIER_EE: &str = "classifier_ee.ckpt";
    pub const CLASSIFIER_ER: &str = "classifier_er.ckpt";
    pub const CLASSIFIER_LOSS: &str = "classifier_loss.csv";
    pub const ANNOTATED: &str = "annotated.jsonl";
    pub const DAG_CSV: &str = "dag.csv";
    pub const DAG_JSON: &str = "dag.json";
    pub const EFFECTS: &str = "effects.json";
    pub const BICOGAN: &str = "bicogan.ckpt";
    pub const BICOGAN_TRACE: &str = "bicogan_trace.csv";
    pub const CF_DISTANCE: &str = "cf_distance.csv";
    pub const DDP: &str = "ddp.ckpt";
    pub const DDP_LOSS: &str = "ddp_loss.csv";
    pub const DDP_HELDOUT: &str = "ddp_heldout.csv";
    pub const QVALUES: &str = "qvalues.csv";
    pub const ROLLOUTS: &str = "rollouts.jsonl";
    pub const CUMULATIVE: &str = "cumulative_rewards.csv";
    pub const REPORT_MAX_Q: &str = "report_max_q.csv";
    pub const REPORT_MEAN_Q: &str = "report_mean_q.csv";
    pub const REPORT_CUMULATIVE: &str = "report_cumulative.csv";

    pub fn cf_databases(variant: &str) -> String {
        format!("cf_{variant}.emb")
    }

    pub fn qnet(variant: &str) -> String {
        format!("qnet_{variant}.ckpt")
    }

    pub fn qnet_loss(variant: &str) -> String {
        format!("qnet_{variant}_loss.csv")
    }
}

/// Companion files written next to a corpus JSONL.
fn with_companions(path: PathBuf) -> Vec<PathBuf> {
    let (emb, idx) = companion_paths(&path);
    vec![path, emb, idx]
}

fn cf_files(out: &Path, variant: &str) -> Vec<PathBuf> {
    let emb = out.join(files::cf_databases(variant));
    let idx = emb.with_extension("idx.jsonl");
    vec![emb, idx]
}

/// Embedding block and row index of the source corpus.
fn source_embeddings(config: &PipelineConfig, corpus: &Path) -> (PathBuf, PathBuf) {
    let (emb, idx) = companion_paths(corpus);
    (config.embeddings.clone().unwrap_or(emb), idx)
}

fn variants(config: &PipelineConfig) -> Vec<&'static str> {
    config.selectors.iter().map(|s| s.name()).collect()
}

/// Files a stage reads.
pub fn stage_inputs(stage: Stage, config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let out = &config.out;
    let corpus = || with_companions(out.join(files::CORPUS));
    let classifiers = || vec![out.join(files::CLASSIFIER_EE), out.join(files::CLASSIFIER_ER)];
    let mut v = Vec::new();
    match stage {
        Stage::Ingest => {
            let src = config
                .corpus
                .clone()
                .ok_or_else(|| Error::Config("no corpus path configured".into()))?;
            let (emb, idx) = source_embeddings(config, &src);
            v.extend([src, emb, idx]);
        }
        Stage::Annotate | Stage::TrainCf | Stage::TrainDdp => {
            v.extend(corpus());
            v.push(out.join(files::NORM));
        }
        Stage::Discover => {
            v.extend(with_companions(out.join(files::ANNOTATED)));
            v.push(out.join(files::NORM));
            v.extend(classifiers());
        }
        Stage::GenCf => {
            v.extend(corpus());
            v.extend(classifiers());
            v.push(out.join(files::EFFECTS));
            v.push(out.join(files::BICOGAN));
        }
        Stage::TrainPolicy => {
            for name in variants(config) {
                v.extend(cf_files(out, name));
            }
            v.push(out.join(files::DDP));
        }
        Stage::Evaluate => {
            v.extend(corpus());
            v.push(out.join(files::NORM));
            v.push(out.join(files::DDP));
            for name in variants(config) {
                v.extend(cf_files(out, name));
                v.push(out.join(files::qnet(name)));
            }
        }
        Stage::Report => {
            v.push(out.join(files::QVALUES));
            v.push(out.join(files::CUMULATIVE));
        }
    }
    Ok(v)
}

/// Files a stage writes.
pub fn stage_outputs(stage: Stage, config: &PipelineConfig) -> Vec<PathBuf> {
    let out = &config.out;
    let mut v = Vec::new();
    match stage {
        Stage::Ingest => {
            v.extend(with_companions(out.join(files::CORPUS)));
            v.push(out.join(files::NORM));
        }
        Stage::Annotate => {
            v.push(out.join(files::CLASSIFIER_EE));
            v.push(out.join(files::CLASSIFIER_ER));
            v.push(out.join(files::CLASSIFIER_LOSS));
            v.extend(with_companions(out.join(files::ANNOTATED)));
        }
        Stage::Discover => {
            v.extend([files::DAG_CSV, files::DAG_JSON, files::EFFECTS].map(|f| out.join(f)));
        }
        Stage::TrainCf => {
            v.push(out.join(files::BICOGAN));
            v.push(out.join(files::BICOGAN_TRACE));
        }
        Stage::GenCf => {
            for name in variants(config) {
                v.extend(cf_files(out, name));
            }
            v.push(out.join(files::CF_DISTANCE));
        }
        Stage::TrainDdp => {
            v.extend([files::DDP, files::DDP_LOSS, files::DDP_HELDOUT].map(|f| out.join(f)));
        }
        Stage::TrainPolicy => {
            for name in variants(config) {
                v.push(out.join(files::qnet(name)));
                v.push(out.join(files::qnet_loss(name)));
            }
        }
        Stage::Evaluate => {
            v.extend([files::QVALUES, files::ROLLOUTS, files::CUMULATIVE].map(|f| out.join(f)));
        }
        Stage::Report => {
            v.extend([files::REPORT_MAX_Q, files::REPORT_MEAN_Q, files::REPORT_CUMULATIVE].map(|f| out.join(f)));
        }
    }
    v
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn config_digest(stage: Stage, config: &PipelineConfig) -> String {
    let mut text = String::new();
    for key in stage.config_keys() {
        writeln!(text, "{key}={}", config.get(key).unwrap_or_default()).unwrap();
    }
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_digest: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        }
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.join(files::MANIFEST)
}

impl Manifest {
    /// Reads the manifest of `out`, or an empty one when there is none.
    pub fn load(out: &Path) -> Result<Self> {
        let path = manifest_path(out);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = manifest_path(out);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn digests(paths: &[PathBuf], out: &Path) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let key = p.strip_prefix(out).unwrap_or(p).display().to_string();
            Ok((key, file_digest(p)?))
        })
        .collect()
}

fn stage_record(stage: Stage, config: &PipelineConfig) -> Result<StageRecord> {
    Ok(StageRecord {
        config_digest: config_digest(stage, config),
        seed: config.seed,
        inputs: digests(&stage_inputs(stage, config)?, &config.out)?,
        outputs: BTreeMap::new(),
    })
}

/// Whether the manifest shows `stage` complete for the current inputs,
/// config and output files.
fn is_current(stage: Stage, config: &PipelineConfig, manifest: &Manifest) -> Result<bool> {
    let Some(done) = manifest.stages.get(stage.name()) else {
        return Ok(false);
    };
    let outputs = stage_outputs(stage, config);
    if outputs.iter().any(|p| !p.exists()) {
        return Ok(false);
    }
    let now = stage_record(stage, config)?;
    Ok(done.config_digest == now.config_digest
        && done.inputs == now.inputs
        && done.outputs == digests(&outputs, &config.out)?)
}

fn missing_inputs(stage: Stage, config: &PipelineConfig) -> Result<()> {
    for p in stage_inputs(stage, config)? {
        if !p.exists() {
            return Err(Error::Config(format!("{stage}: input {} does not exist", p.display())));
        }
    }
    Ok(())
}

/// What a stage run did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Runs one stage unless the manifest shows it current. Missing inputs are
/// a config error; failures inside the stage are wrapped with its name.
pub fn run_stage(stage: Stage, config: &PipelineConfig) -> Result<StageOutcome> {
    config.validate()?;
    missing_inputs(stage, config)?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let mut manifest = Manifest::load(&config.out)?;
    if is_current(stage, config, &manifest)? {
        log::info!("{stage}: up to date, skipped");
        return Ok(StageOutcome::Skipped);
    }
    let mut record = stage_record(stage, config)?;
    log::info!("{stage}: running");
    execute(stage, config).map_err(|e| Error::Stage {
        stage: stage.name().to_string(),
        source: Box::new(e),
    })?;
    record.outputs = digests(&stage_outputs(stage, config), &config.out)?;
    manifest.stages.insert(stage.name().to_string(), record);
    manifest.save(&config.out)?;
    Ok(StageOutcome::Ran)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub outcomes: Vec<(Stage, StageOutcome)>,
    /// Final cumulative predicted donation of the ground-truth dialogues.
    pub ground_truth: f64,
    /// Final cumulative predicted donation per selector variant.
    pub optimized: Vec<(String, f64)>,
}

/// Checks paths before any stage starts.
fn validate_paths(config: &PipelineConfig) -> Result<()> {
    missing_inputs(Stage::Ingest, config)?;
    if config.out.exists() && !config.out.is_dir() {
        return Err(Error::Config(format!("output path {} is not a directory", config.out.display())));
    }
    Ok(())
}

/// Every stage in order, skipping those already complete.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate()?;
    validate_paths(config)?;
    let outcomes = STAGES
        .iter()
        .map(|&s| run_stage(s, config).map(|o| (s, o)))
        .collect::<Result<Vec<_>>>()?;
    let (ground_truth, optimized) = final_values(&config.out.join(files::CUMULATIVE))?;
    Ok(PipelineReport {
        outcomes,
        ground_truth,
        optimized,
    })
}

fn final_values(path: &Path) -> Result<(f64, Vec<(String, f64)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let last: Vec<f64> = match lines.last() {
        Some(l) => l
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format(format!("{}: bad number {v:?}", path.display()))))
            .collect::<Result<_>>()?,
        None => vec![0.0; header.len()],
    };
    let get = |i: usize| last.get(i).copied().unwrap_or(0.0);
    let optimized = header.iter().enumerate().skip(2).map(|(i, h)| (h.to_string(), get(i))).collect();
    Ok((get(1), optimized))
}

/// Every CSV in `out`, keyed by file name.
pub fn read_metric_csvs(out: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(out).map_err(|e| Error::io(out, e))? {
        let path = entry.map_err(|e| Error::io(out, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            map.insert(name, fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
    }
    Ok(map)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// The prepared corpus with normalized donations attached.
fn load_prepared(out: &Path, name: &str) -> Result<DialogueCorpus> {
    let stats: NormStats = read_json(&out.join(files::NORM))?;
    let mut corpus = load_corpus(&out.join(name))?;
    for d in &mut corpus.dialogues {
        d.donation_norm = Some(stats.normalize(d.donation_cents));
    }
    Ok(corpus)
}

fn load_annotators(out: &Path) -> Result<Annotators> {
    Ok(Annotators {
        ee: ClassifierParams::load(&out.join(files::CLASSIFIER_EE))?,
        er: ClassifierParams::load(&out.join(files::CLASSIFIER_ER))?,
        ee_loss: Vec::new(),
        er_loss: Vec::new(),
    })
}

fn series_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn loss_csv(trace: &[f64]) -> String {
    series_csv("epoch,loss", trace.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)))
}

#[derive(Serialize, Deserialize)]
struct RolloutRecord {
    variant: String,
    #[serde(flatten)]
    rollout: Rollout,
}

fn execute(stage: Stage, config: &PipelineConfig) -> Result<()> {
    let out = &config.out;
    match stage {
        Stage::Ingest => {
            let src = config.corpus.clone().expect("checked by missing_inputs");
            let (emb, idx) = source_embeddings(config, &src);
            let raw = attach_embeddings(read_corpus_jsonl(&src)?, &emb, &idx)?;
            let (corpus, stats) = prepare_corpus(&raw, config.max_donation)?;
            log::info!(
                "ingest: {} of {} dialogues kept, dimension {}",
                corpus.len(),
                raw.len(),
                corpus.dim
            );
            write_corpus(&corpus, &out.join(files::CORPUS))?;
            write_json(&out.join(files::NORM), &stats)
        }
        Stage::Annotate => {
            let corpus = load_prepared(out, files::CORPUS)?;
            let annotators = train_annotators(&corpus, config)?;
            annotators.ee.save(&out.join(files::CLASSIFIER_EE))?;
            annotators.er.save(&out.join(files::CLASSIFIER_ER))?;
            let n = annotators.ee_loss.len().max(annotators.er_loss.len());
            let at = |v: &[f64], i: usize| v.get(i).map(f64::to_string).unwrap_or_default();
            write_text(
                &out.join(files::CLASSIFIER_LOSS),
                &series_csv(
                    "epoch,ee_loss,er_loss",
                    (0..n).map(|i| format!("{},{},{}", i + 1, at(&annotators.ee_loss, i), at(&annotators.er_loss, i))),
                ),
            )?;
            write_corpus(&annotate(&corpus, &annotators)?, &out.join(files::ANNOTATED))
        }
        Stage::Discover => {
            let annotated = load_prepared(out, files::ANNOTATED)?;
            let annotators = load_annotators(out)?;
            let found = discover(&annotated, &annotators, config)?;
            log::info!(
                "discover: {} edges, {} cause-effect pairs",
                found.result.dag.edge_count(),
                found.effects.pair_count()
            );
            found
                .result
                .dag
                .write_edge_list(&out.join(files::DAG_CSV), &out.join(files::DAG_JSON), found.result.score)?;
            found.effects.save(&out.join(files::EFFECTS))
        }
        Stage::TrainCf => {
            let corpus = load_prepared(out, files::CORPUS)?;
            let trained = train_counterfactual_model(&corpus, config)?;
            trained.params.save(&out.join(files::BICOGAN))?;
            write_text(
                &out.join(files::BICOGAN_TRACE),
                &series_csv(
                    "epoch,d_loss,ge_loss,recon_term,value,disc_accuracy",
                    trained.trace.iter().enumerate().map(|(i, e)| {
                        format!(
                            "{},{},{},{},{},{}",
                            i + 1,
                            e.d_loss,
                            e.ge_loss,
                            e.recon_term,
                            e.value,
                            e.disc_accuracy
                        )
                    }),
                ),
            )
        }
        Stage::GenCf => {
            let corpus = load_corpus(&out.join(files::CORPUS))?;
            let annotators = load_annotators(out)?;
            let effects = CauseEffectMap::load(&out.join(files::EFFECTS))?;
            let bicogan = BicoganParams::load(&out.join(files::BICOGAN))?;
            let mut rows = Vec::new();
            for &kind in &config.selectors {
                let set = generate_counterfactuals(&bicogan, &corpus, &annotators, &effects, kind, config)?;
                rows.push(format!("{},{}", kind.name(), next_state_distance(&set, &corpus)));
                write_cf_databases(&set, &out.join(files::cf_databases(kind.name())))?;
            }
            write_text(&out.join(files::CF_DISTANCE), &series_csv("variant,mean_distance", rows.into_iter()))
        }
        Stage::TrainDdp => {
            let corpus = load_prepared(out, files::CORPUS)?;
            let trained = train_reward_model(&corpus, config)?;
            trained.params.save(&out.join(files::DDP))?;
            write_text(&out.join(files::DDP_LOSS), &loss_csv(&trained.loss_trace))?;
            write_text(
                &out.join(files::DDP_HELDOUT),
                &format!("rmse,r2\n{},{}\n", trained.heldout_rmse, trained.heldout_r2),
            )
        }
        Stage::TrainPolicy => {
            let ddp = DdpParams::load(&out.join(files::DDP))?;
            for &kind in &config.selectors {
                let set = read_cf_databases(&out.join(files::cf_databases(kind.name())))?;
                let trained = train_policy(&set, &ddp, config)?;
                trained.qnet.save(&out.join(files::qnet(kind.name())))?;
                write_text(&out.join(files::qnet_loss(kind.name())), &loss_csv(&trained.loss_trace))?;
            }
            Ok(())
        }
        Stage::Evaluate => evaluate_stage(config),
        Stage::Report => report_stage(out),
    }
}

fn evaluate_stage(config: &PipelineConfig) -> Result<()> {
    let out = &config.out;
    let corpus = load_prepared(out, files::CORPUS)?;
    let ddp = DdpParams::load(&out.join(files::DDP))?;
    let mut q_rows = Vec::new();
    let mut rollouts = String::new();
    let mut ground_truth = Vec::new();
    let mut curves = Vec::new();
    for &kind in &config.selectors {
        let set = read_cf_databases(&out.join(files::cf_databases(kind.name())))?;
        let qnet = QNet::load(&out.join(files::qnet(kind.name())))?;
        let report = evaluate_policy(&qnet, &set, &corpus, &ddp, config.prefix_len, config.cfgen.max_len)?;
        for DialogueQ {
            dialogue_id,
            max_q,
            mean_q,
        } in &report.q
        {
            q_rows.push(format!("{dialogue_id},{max_q},{mean_q},{}", kind.name()));
        }
        for r in report.rollouts {
            let rec = RolloutRecord {
                variant: kind.name().to_string(),
                rollout: r,
            };
            rollouts.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
            rollouts.push('\n');
        }
        ground_truth = report.ground_truth;
        curves.push((kind, report.optimized));
    }
    write_text(&out.join(files::QVALUES), &series_csv("dialogue,max_q,mean_q,variant", q_rows.into_iter()))?;
    write_text(&out.join(files::ROLLOUTS), &rollouts)?;
    let header = std::iter::once("k,ground_truth".to_string())
        .chain(curves.iter().map(|(k, _)| k.name().to_string()))
        .collect::<Vec<_>>()
        .join(",");
    let rows = (0..ground_truth.len()).map(|i| {
        let mut row = format!("{},{}", i + 1, ground_truth[i]);
        for (_, c) in &curves {
            write!(row, ",{}", c[i]).unwrap();
        }
        row
    });
    write_text(&out.join(files::CUMULATIVE), &series_csv(&header, rows))
}

/// Wide per-dialogue series of the max-Q and mean-Q panels plus the
/// cumulative reward panel, one column per variant.
fn report_stage(out: &Path) -> Result<()> {
    let path = out.join(files::QVALUES);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut variants: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), (String, String)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let [dialogue, max_q, mean_q, variant] = f[..] else {
            return Err(Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: "expected dialogue,max_q,mean_q,variant".into(),
            });
        };
        if !order.iter().any(|d| d == dialogue) {
            order.push(dialogue.to_string());
        }
        if !variants.iter().any(|v| v == variant) {
            variants.push(variant.to_string());
        }
        cells.insert((dialogue.to_string(), variant.to_string()), (max_q.to_string(), mean_q.to_string()));
    }
    let panel = |pick: fn(&(String, String)) -> &String| {
        let header = format!("index,dialogue,{}", variants.join(","));
        let rows = order.iter().enumerate().map(|(i, d)| {
            let mut row = format!("{},{d}", i + 1);
            for v in &variants {
                row.push(',');
                if let Some(c) = cells.get(&(d.clone(), v.clone())) {
                    row.push_str(pick(c));
                }
            }
            row
        });
        series_csv(&header, rows)
    };
    write_text(&out.join(files::REPORT_MAX_Q), &panel(|c| &c.0))?;
    write_text(&out.join(files::REPORT_MEAN_Q), &panel(|c| &c.1))?;
    let cumulative = out.join(files::CUMULATIVE);
    let text = fs::read_to_string(&cumulative).map_err(|e| Error::io(&cumulative, e))?;
    write_text(&out.join(files::REPORT_CUMULATIVE), &text)
}
