//! `cfdlg`: runs the pipeline stages over files in an output directory.
//!
//! Exit codes: 0 success, 2 config error, 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use causal_dialogue::corpus::write_corpus;
use causal_dialogue::pipeline::{run_pipeline, run_stage, PipelineConfig, Stage, StageOutcome, KEYS, STAGES};
use causal_dialogue::synth::{sample_scm, simulate_corpus, SynthSpec};
use causal_dialogue::Error;

const SYNTH_CORPUS: &str = "synth.jsonl";
const SYNTH_EFFECTS: &str = "synth_effects.json";

fn cli() -> Command {
    let mut cmd = Command::new("cfdlg")
        .about("Causal strategy discovery, counterfactual dialogues and offline policy learning")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("INI config file; flags override its keys"),
        )
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .global(true)
                .action(ArgAction::Count)
                .help("More log output (repeatable)"),
        );
    for (section, key) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .global(true)
                .value_name("VALUE")
                .help(format!("[{section}] {key}")),
        );
    }
    for stage in STAGES {
        cmd = cmd.subcommand(Command::new(stage.name()).about(format!("Run the {stage} stage")));
    }
    cmd.subcommand(Command::new("run").about("Run every stage in order, skipping completed ones"))
        .subcommand(
            Command::new("synth")
                .about("Synthetic corpora")
                .subcommand_required(true)
                .subcommand(Command::new("gen").about(format!(
                    "Write a synthetic corpus ({SYNTH_CORPUS} plus embeddings) and its true effects ({SYNTH_EFFECTS}) to --out"
                ))),
        )
}

fn load_config(m: &ArgMatches) -> causal_dialogue::Result<PipelineConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => PipelineConfig::from_file(Path::new(path))?,
        None => PipelineConfig::default(),
    };
    for (_, key) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_gen(cfg: &PipelineConfig) -> causal_dialogue::Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Config(format!("{}: {e}", cfg.out.display())))?;
    let scm = sample_scm(&SynthSpec::default(), cfg.seed)?;
    let corpus = simulate_corpus(&scm, cfg.synth_dialogues, cfg.synth_slots, cfg.seed);
    let path = cfg.out.join(SYNTH_CORPUS);
    write_corpus(&corpus, &path)?;
    scm.true_effect_map().save(&cfg.out.join(SYNTH_EFFECTS))?;
    Ok(path)
}

fn dispatch(m: &ArgMatches) -> causal_dialogue::Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = load_config(sub)?;
    match name {
        "run" => {
            let report = run_pipeline(&cfg)?;
            for (stage, outcome) in &report.outcomes {
                let what = if *outcome == StageOutcome::Skipped { "skipped" } else { "ran" };
                println!("{stage}: {what}");
            }
            println!("ground_truth: {:.6}", report.ground_truth);
            for (variant, v) in &report.optimized {
                println!("{variant}: {v:.6}");
            }
        }
        "synth" => {
            let path = synth_gen(&cfg)?;
            println!("{}", path.display());
        }
        _ => {
            let stage: Stage = name.parse()?;
            let what = match run_stage(stage, &cfg)? {
                StageOutcome::Ran => "ran",
                StageOutcome::Skipped => "skipped",
            };
            println!("{stage}: {what}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = match matches.get_count("verbose") {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
