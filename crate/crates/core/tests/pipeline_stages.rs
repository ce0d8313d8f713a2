use std::fs;
use std::path::Path;

use causal_dialogue::corpus::write_corpus;
use causal_dialogue::pipeline::{
    manifest_path, run_pipeline, run_stage, stage_outputs, Manifest, PipelineConfig, Stage, StageOutcome, STAGES,
};
use causal_dialogue::synth::{sample_scm, simulate_corpus, SynthSpec};
use causal_dialogue::Error;

fn quick_config(dir: &Path) -> PipelineConfig {
    let scm = sample_scm(&SynthSpec::default(), 4).unwrap();
    let path = dir.join("synth.jsonl");
    write_corpus(&simulate_corpus(&scm, 30, 25, 104), &path).unwrap();
    let mut cfg = PipelineConfig::default();
    for (k, v) in [
        ("seed", "4"),
        ("classifier-epochs", "10"),
        ("gan-epochs", "5"),
        ("n-databases", "2"),
        ("ddp-hidden", "8"),
        ("ddp-epochs", "5"),
        ("q-hidden", "8"),
        ("q-epochs", "1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.corpus = Some(path);
    cfg.out = dir.join("out");
    cfg
}

#[test]
fn rerun_skips_and_config_change_reruns_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    let first = run_pipeline(&cfg).unwrap();
    assert!(first.outcomes.iter().all(|(_, o)| *o == StageOutcome::Ran));
    assert_eq!(first.outcomes.len(), STAGES.len());
    for s in STAGES {
        assert!(stage_outputs(s, &cfg).iter().all(|p| p.exists()), "{s} outputs missing");
    }
    let manifest = Manifest::load(&cfg.out).unwrap();
    assert_eq!(manifest.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest.stages.len(), STAGES.len());
    assert!(manifest.stages.values().all(|r| r.seed == 4 && !r.outputs.is_empty()));

    let second = run_pipeline(&cfg).unwrap();
    assert!(second.outcomes.iter().all(|(_, o)| *o == StageOutcome::Skipped));
    assert_eq!(first.optimized, second.optimized);

    cfg.set("gamma", "0.5").unwrap();
    let third = run_pipeline(&cfg).unwrap();
    for (stage, outcome) in third.outcomes {
        let expect = if stage >= Stage::TrainPolicy { StageOutcome::Ran } else { StageOutcome::Skipped };
        assert_eq!(outcome, expect, "{stage}");
    }
}

#[test]
fn edited_output_forces_a_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    assert_eq!(run_stage(Stage::Ingest, &cfg).unwrap(), StageOutcome::Ran);
    assert_eq!(run_stage(Stage::Ingest, &cfg).unwrap(), StageOutcome::Skipped);
    fs::write(cfg.out.join("norm.json"), "{}").unwrap();
    assert_eq!(run_stage(Stage::Ingest, &cfg).unwrap(), StageOutcome::Ran);
}

#[test]
fn stage_failure_names_the_stage_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    for s in [Stage::Ingest, Stage::Annotate, Stage::Discover, Stage::TrainCf] {
        run_stage(s, &cfg).unwrap();
    }
    fs::write(cfg.out.join("bicogan.ckpt"), b"not a checkpoint").unwrap();
    match run_stage(Stage::GenCf, &cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "gen-cf"),
        other => panic!("expected a stage error, got {other:?}"),
    }
    assert!(cfg.out.join("corpus.jsonl").exists());
    assert!(cfg.out.join("effects.json").exists());
    let manifest = Manifest::load(&cfg.out).unwrap();
    assert!(!manifest.stages.contains_key("gen-cf"));
}

#[test]
fn missing_inputs_fail_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    cfg.corpus = Some(dir.path().join("absent.jsonl"));
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    assert!(!manifest_path(&cfg.out).exists());
    let cfg = quick_config(dir.path());
    assert!(matches!(run_stage(Stage::Discover, &cfg), Err(Error::Config(_))));
}
