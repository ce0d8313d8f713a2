use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::actions::PoolVariant;
use crate::cfengine::{BicoganConfig, CfGenConfig};
use crate::error::{Error, Result};
use crate::policy::D3qnConfig;
use crate::reward::DdpConfig;
use crate::strategy::ClassifierConfig;

/// How counterfactual actions are chosen for one evaluated variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectorKind {
    /// Effects of the predicted persuadee strategy in the discovered graph.
    Causal,
    /// Uniform draws from the action pool.
    Random,
}

impl SelectorKind {
    pub fn name(self) -> &'static str {
        match self {
            SelectorKind::Causal => "causal",
            SelectorKind::Random => "random",
        }
    }
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "causal" => Ok(SelectorKind::Causal),
            "random" => Ok(SelectorKind::Random),
            other => Err(Error::Config(format!("unknown selector {other:?} (causal or random)"))),
        }
    }
}

/// Every pipeline setting. Keys are unique across sections, so each one is
/// also accepted as a command-line flag of the same name.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    /// Embedding block of the corpus; defaults to the corpus companion file.
    pub embeddings: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub max_donation: f64,

    pub classifier: ClassifierConfig,
    pub grasp_depth: usize,
    pub grasp_restarts: usize,
    pub grasp_penalty: f64,

    pub bicogan: BicoganConfig,
    pub cfgen: CfGenConfig,
    pub pool_strategy: PoolVariant,
    pub topk: usize,
    pub selectors: Vec<SelectorKind>,

    pub ddp: DdpConfig,
    pub d3qn: D3qnConfig,
    pub prefix_len: usize,

    pub synth_dialogues: usize,
    pub synth_slots: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            embeddings: None,
            out: PathBuf::from("out"),
            seed: 1,
            max_donation: 20.0,
            classifier: ClassifierConfig::default(),
            grasp_depth: 3,
            grasp_restarts: 5,
            grasp_penalty: 2.0,
            bicogan: BicoganConfig::default(),
            cfgen: CfGenConfig::default(),
            pool_strategy: PoolVariant::S2,
            topk: 3,
            selectors: vec![SelectorKind::Causal, SelectorKind::Random],
            ddp: DdpConfig::default(),
            d3qn: D3qnConfig::default(),
            prefix_len: 2,
            synth_dialogues: 200,
            synth_slots: crate::corpus::MAX_DIALOGUE_LEN,
        }
    }
}

/// `(section, key)` of every setting, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("paths", "corpus"),
    ("paths", "embeddings"),
    ("paths", "out"),
    ("run", "seed"),
    ("run", "max-donation"),
    ("annotate", "classifier-epochs"),
    ("annotate", "classifier-batch-size"),
    ("annotate", "classifier-lr"),
    ("discover", "grasp-depth"),
    ("discover", "restarts"),
    ("discover", "bic-penalty"),
    ("train-cf", "gan-epochs"),
    ("train-cf", "gan-batch-size"),
    ("train-cf", "gan-lr"),
    ("train-cf", "lambda"),
    ("train-cf", "gan-hidden-mult"),
    ("train-cf", "gan-hidden-layers"),
    ("gen-cf", "n-databases"),
    ("gen-cf", "max-len"),
    ("gen-cf", "fresh-noise"),
    ("gen-cf", "pool-strategy"),
    ("gen-cf", "topk"),
    ("gen-cf", "selectors"),
    ("train-ddp", "ddp-hidden"),
    ("train-ddp", "ddp-epochs"),
    ("train-ddp", "ddp-batch-size"),
    ("train-ddp", "ddp-lr"),
    ("train-policy", "gamma"),
    ("train-policy", "sync-interval"),
    ("train-policy", "q-batch-size"),
    ("train-policy", "q-lr"),
    ("train-policy", "q-epochs"),
    ("train-policy", "q-hidden"),
    ("evaluate", "prefix-len"),
    ("synth", "synth-dialogues"),
    ("synth", "synth-slots"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl PipelineConfig {
    /// Reads an INI file; unknown keys are an error.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_ini_str(&text)
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (_, props) in &ini {
            for (k, v) in props.iter() {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus" => self.corpus = optional_path(value),
            "embeddings" => self.embeddings = optional_path(value),
            "out" => self.out = PathBuf::from(value.trim()),
            "seed" => self.seed = parse(key, value)?,
            "max-donation" => {
                self.max_donation = parse(key, value)?;
                self.ddp.max_donation = self.max_donation;
            }
            "classifier-epochs" => self.classifier.epochs = parse(key, value)?,
            "classifier-batch-size" => self.classifier.batch_size = parse(key, value)?,
            "classifier-lr" => self.classifier.lr = parse(key, value)?,
            "grasp-depth" => self.grasp_depth = parse(key, value)?,
            "restarts" => self.grasp_restarts = parse(key, value)?,
            "bic-penalty" => self.grasp_penalty = parse(key, value)?,
            "gan-epochs" => self.bicogan.epochs = parse(key, value)?,
            "gan-batch-size" => self.bicogan.batch_size = parse(key, value)?,
            "gan-lr" => self.bicogan.lr = parse(key, value)?,
            "lambda" => self.bicogan.lambda = parse(key, value)?,
            "gan-hidden-mult" => self.bicogan.hidden_mult = parse(key, value)?,
            "gan-hidden-layers" => self.bicogan.hidden_layers = parse(key, value)?,
            "n-databases" => self.cfgen.n_databases = parse(key, value)?,
            "max-len" => self.cfgen.max_len = parse(key, value)?,
            "fresh-noise" => self.cfgen.fresh_noise = parse(key, value)?,
            "pool-strategy" => self.pool_strategy = value.parse()?,
            "topk" => self.topk = parse(key, value)?,
            "selectors" => {
                self.selectors = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "ddp-hidden" => self.ddp.hidden = parse(key, value)?,
            "ddp-epochs" => self.ddp.epochs = parse(key, value)?,
            "ddp-batch-size" => self.ddp.batch_size = parse(key, value)?,
            "ddp-lr" => self.ddp.lr = parse(key, value)?,
            "gamma" => self.d3qn.gamma = parse(key, value)?,
            "sync-interval" => self.d3qn.sync_interval = parse(key, value)?,
            "q-batch-size" => self.d3qn.batch_size = parse(key, value)?,
            "q-lr" => self.d3qn.lr = parse(key, value)?,
            "q-epochs" => self.d3qn.epochs = parse(key, value)?,
            "q-hidden" => self.d3qn.hidden = parse(key, value)?,
            "prefix-len" => self.prefix_len = parse(key, value)?,
            "synth-dialogues" => self.synth_dialogues = parse(key, value)?,
            "synth-slots" => self.synth_slots = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "corpus" => self.corpus.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "embeddings" => self.embeddings.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "out" => self.out.display().to_string(),
            "seed" => self.seed.to_string(),
            "max-donation" => self.max_donation.to_string(),
            "classifier-epochs" => self.classifier.epochs.to_string(),
            "classifier-batch-size" => self.classifier.batch_size.to_string(),
            "classifier-lr" => self.classifier.lr.to_string(),
            "grasp-depth" => self.grasp_depth.to_string(),
            "restarts" => self.grasp_restarts.to_string(),
            "bic-penalty" => self.grasp_penalty.to_string(),
            "gan-epochs" => self.bicogan.epochs.to_string(),
            "gan-batch-size" => self.bicogan.batch_size.to_string(),
            "gan-lr" => self.bicogan.lr.to_string(),
            "lambda" => self.bicogan.lambda.to_string(),
            "gan-hidden-mult" => self.bicogan.hidden_mult.to_string(),
            "gan-hidden-layers" => self.bicogan.hidden_layers.to_string(),
            "n-databases" => self.cfgen.n_databases.to_string(),
            "max-len" => self.cfgen.max_len.to_string(),
            "fresh-noise" => self.cfgen.fresh_noise.to_string(),
            "pool-strategy" => self.pool_strategy.to_string(),
            "topk" => self.topk.to_string(),
            "selectors" => self.selectors.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
            "ddp-hidden" => self.ddp.hidden.to_string(),
            "ddp-epochs" => self.ddp.epochs.to_string(),
            "ddp-batch-size" => self.ddp.batch_size.to_string(),
            "ddp-lr" => self.ddp.lr.to_string(),
            "gamma" => self.d3qn.gamma.to_string(),
            "sync-interval" => self.d3qn.sync_interval.to_string(),
            "q-batch-size" => self.d3qn.batch_size.to_string(),
            "q-lr" => self.d3qn.lr.to_string(),
            "q-epochs" => self.d3qn.epochs.to_string(),
            "q-hidden" => self.d3qn.hidden.to_string(),
            "prefix-len" => self.prefix_len.to_string(),
            "synth-dialogues" => self.synth_dialogues.to_string(),
            "synth-slots" => self.synth_slots.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// The full configuration as INI text (every key, file order).
    pub fn to_ini_string(&self) -> String {
        let mut ini = Ini::new();
        for (section, key) in KEYS {
            ini.with_section(Some(*section)).set(*key, self.get(key).unwrap_or_default());
        }
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is utf-8")
    }

    /// Value-range checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.grasp_depth == 0 {
            return fail("grasp-depth must be at least 1");
        }
        if self.grasp_restarts == 0 {
            return fail("restarts must be at least 1");
        }
        if self.bicogan.lambda < 0.0 {
            return fail("lambda must be non-negative");
        }
        if self.cfgen.n_databases == 0 {
            return fail("n-databases must be at least 1");
        }
        if self.cfgen.max_len == 0 || self.cfgen.max_len > crate::corpus::MAX_DIALOGUE_LEN {
            return fail("max-len must lie in 1..=25");
        }
        if !(0.0..1.0).contains(&self.d3qn.gamma) {
            return fail("gamma must lie in [0, 1)");
        }
        if self.d3qn.sync_interval == 0 {
            return fail("sync-interval must be positive");
        }
        if self.prefix_len == 0 {
            return fail("prefix-len must be at least 1");
        }
        if self.selectors.is_empty() {
            return fail("at least one selector is required");
        }
        if !(self.max_donation > 0.0) {
            return fail("max-donation must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("n-databases", "7").unwrap();
        cfg.set("selectors", "random").unwrap();
        cfg.set("pool-strategy", "3").unwrap();
        let back = PipelineConfig::from_ini_str(&cfg.to_ini_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("gamma", "x").is_err());
        assert!(KEYS.iter().all(|(_, k)| cfg.get(k).is_some()));
    }

    #[test]
    fn sections_are_cosmetic() {
        let cfg = PipelineConfig::from_ini_str("seed = 9\n[train-policy]\ngamma = 0.5\n").unwrap();
        assert_eq!((cfg.seed, cfg.d3qn.gamma), (9, 0.5));
    }
}
