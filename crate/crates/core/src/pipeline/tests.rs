use std::path::Path;

use serde_json::json;

use super::*;
use crate::synthetic::SyntheticSpec;

fn small_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        base_dir: dir.to_path_buf(),
        data: DataConfig::Synthetic(SyntheticSpec {
            seed: 3,
            memory_size: 120,
            query_size: 12,
            dim: 12,
            signal_dims: 3,
            ..SyntheticSpec::default()
        }),
        ..PipelineConfig::default()
    };
    cfg.retrieval.shortlist_n = 12;
    cfg.retrieval.mmices_n_visual = 10;
    cfg.train.k = 3;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.peak_lr = 1e-3;
    cfg.eval.modes = vec!["QIMI".into(), "QIMIT".into(), "MMICES".into(), "MSIER".into()];
    cfg.eval.shot_counts = vec![2, 4];
    cfg
}

fn statuses(out: &[StageOutcome]) -> Vec<StageStatus> {
    out.iter().map(|o| o.status).collect()
}

#[test]
fn default_config_is_clean() {
    assert_eq!(PipelineConfig::default().validate(), vec![]);
    let cfg = PipelineConfig::from_json("{}", &[]).unwrap();
    assert_eq!(cfg, PipelineConfig::default());
}

#[test]
fn zero_k_is_one_diagnostic() {
    let mut cfg = PipelineConfig::default();
    cfg.train.k = 0;
    let d = cfg.validate();
    assert_eq!(d.len(), 1, "{d:?}");
    assert_eq!(d[0].severity, Severity::Error);
    assert_eq!(d[0].key, "train.k");
}

#[test]
fn short_shortlist_warns() {
    let mut cfg = PipelineConfig::default();
    cfg.retrieval.shortlist_n = 8;
    let d = cfg.validate();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].severity, Severity::Warning);
    assert!(PipelineConfig::is_runnable(&d));
}

#[test]
fn dotted_overrides() {
    let overrides = vec![
        parse_override("train.k=7").unwrap(),
        parse_override("eval.modes=[\"QIMI\"]").unwrap(),
        parse_override("data.synthetic.memory_size=300").unwrap(),
        parse_override("scorer.endpoint=http://localhost:9").unwrap(),
    ];
    let cfg = PipelineConfig::from_json(r#"{"seed": 4}"#, &overrides).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.train.k, 7);
    assert_eq!(cfg.eval.modes, vec!["QIMI".to_string()]);
    assert_eq!(cfg.scorer.endpoint.as_deref(), Some("http://localhost:9"));
    match cfg.data {
        DataConfig::Synthetic(s) => assert_eq!(s.memory_size, 300),
        other => panic!("{other:?}"),
    }
    assert!(PipelineConfig::from_json("{}", &[parse_override("train.nope=1").unwrap()]).is_err());
    assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#, &[]).is_err());
    assert!(parse_override("novalue").is_err());
}

#[test]
fn override_switches_data_source() {
    let o = ("data.manifest".to_string(), json!({"train": "a.jsonl", "eval": "b.jsonl"}));
    let cfg = PipelineConfig::from_json("{}", &[o]).unwrap();
    assert!(matches!(cfg.data, DataConfig::Manifest { .. }));
    let d = cfg.validate();
    assert!(d.iter().any(|x| x.key == "data.manifest.train"));
    assert!(d.iter().any(|x| x.key == "data.manifest.latent"));
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    assert!("all".parse::<Stage>().is_err());
}

#[test]
fn full_run_then_rerun_is_noop() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = run(&cfg, &Stage::ALL, RunOptions::default()).unwrap();
    assert_eq!(statuses(&first), vec![StageStatus::Ran; 7]);
    let work = cfg.work_dir();
    for f in ["corpus/train/manifest.jsonl", "shortlists.jsonl", "scores.jsonl", "mining.jsonl", "adapter.ckpt", "report.json", "report.txt"] {
        assert!(work.join(f).is_file(), "{f}");
    }
    let report = std::fs::read(work.join("report.json")).unwrap();
    let second = run(&cfg, &Stage::ALL, RunOptions::default()).unwrap();
    assert_eq!(statuses(&second), vec![StageStatus::Skipped; 7]);
    assert_eq!(std::fs::read(work.join("report.json")).unwrap(), report);
    assert!(!work.join(LOCK_FILE).exists());

    let meta = read_meta(&work, "mine").unwrap().unwrap();
    assert_eq!(meta.config_hash, Stage::Mine.config_hash(&cfg));
    assert!(meta.inputs.contains_key("scores.jsonl"));
    assert!(meta.outputs.contains_key("mining.jsonl"));
    let text = std::fs::read_to_string(work.join("report.txt")).unwrap();
    assert!(text.starts_with("CIDEr-D (captioning)\nShots"), "{text}");
}

#[test]
fn train_without_scores_names_scoring_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run(&cfg, &[Stage::Ingest, Stage::Retrieve], RunOptions::default()).unwrap();
    let err = run(&cfg, &[Stage::Train], RunOptions::default()).unwrap_err();
    assert!(matches!(&err, Error::MissingInput { producer, .. } if producer == "score"), "{err}");
    assert!(err.to_string().contains("`score`"));
}

#[test]
fn stale_upstream_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    run(&cfg, &[Stage::Ingest, Stage::Retrieve, Stage::Score, Stage::Mine], RunOptions::default()).unwrap();
    cfg.retrieval.shortlist_n = 14;
    let err = run(&cfg, &[Stage::Mine], RunOptions::default()).unwrap_err();
    assert!(matches!(&err, Error::StaleArtifact { producer, .. } if producer == "retrieve"), "{err}");

    // rerunning retrieve makes score stale through its inputs
    run(&cfg, &[Stage::Retrieve], RunOptions::default()).unwrap();
    let err = run(&cfg, &[Stage::Mine], RunOptions::default()).unwrap_err();
    assert!(matches!(&err, Error::StaleArtifact { producer, .. } if producer == "score"), "{err}");
    let out = run(&cfg, &[Stage::Score, Stage::Mine], RunOptions::default()).unwrap();
    assert_eq!(statuses(&out), vec![StageStatus::Ran, StageStatus::Ran]);
}

#[test]
fn edited_artifact_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run(&cfg, &[Stage::Ingest, Stage::Retrieve], RunOptions::default()).unwrap();
    let p = cfg.work_dir().join("shortlists.jsonl");
    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push('\n');
    std::fs::write(&p, text).unwrap();
    let err = run(&cfg, &[Stage::Score], RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("shortlists.jsonl"), "{err}");
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let _held = WorkLock::acquire(&cfg.work_dir(), "test").unwrap();
    let err = run(&cfg, &[Stage::Ingest], RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Locked { .. }));
}

#[test]
fn invalid_config_is_refused_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.train.k = 0;
    assert!(matches!(run(&cfg, &Stage::ALL, RunOptions::default()), Err(Error::Config(_))));
    assert!(!cfg.work_dir().exists());
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (small_config(a.path()), small_config(b.path()));
    run(&ca, &Stage::ALL, RunOptions::default()).unwrap();
    run(&cb, &Stage::ALL, RunOptions::default()).unwrap();
    for f in ["adapter.ckpt", "report.json", "report.txt", "scores.jsonl", "eval/cells.json"] {
        assert_eq!(
            std::fs::read(ca.work_dir().join(f)).unwrap(),
            std::fs::read(cb.work_dir().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn permutation_study_and_masking() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.eval.modes = vec!["QIMI".into()];
    cfg.eval.permutation_study = true;
    cfg.eval.mask_rate = 0.5;
    run(&cfg, &[Stage::Ingest, Stage::Eval, Stage::Report], RunOptions::default()).unwrap();
    let perms: Vec<crate::eval::PermutationReport> =
        crate::io::read_json(&cfg.work_dir().join("eval/permutations.json")).unwrap();
    assert_eq!(perms.len(), 1);
    assert_eq!(perms[0].orders.len(), 6);
    let text = std::fs::read_to_string(cfg.work_dir().join("report.txt")).unwrap();
    assert!(text.contains("Order permutations (3 shots)"));
}

#[test]
fn offline_predictions_are_scored() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.eval.modes = vec!["QIMI".into()];
    cfg.eval.shot_counts = vec![2];
    run(&cfg, &[Stage::Ingest, Stage::Eval], RunOptions::default()).unwrap();
    let produced = cfg.work_dir().join("eval/predictions/QIMI_2.jsonl");
    let offline = dir.path().join("preds");
    std::fs::create_dir_all(&offline).unwrap();
    std::fs::copy(&produced, offline.join("QIMI_2.jsonl")).unwrap();
    let cells_before = std::fs::read(cfg.work_dir().join("eval/cells.json")).unwrap();

    cfg.eval.generator = GeneratorKind::Offline;
    cfg.eval.predictions_dir = Some("preds".into());
    run(&cfg, &[Stage::Eval], RunOptions::default()).unwrap();
    assert_eq!(std::fs::read(cfg.work_dir().join("eval/cells.json")).unwrap(), cells_before);

    std::fs::write(offline.join("QIMI_2.jsonl"), "").unwrap();
    let err = run(&cfg, &[Stage::Eval], RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("stage `eval`"), "{err}");
}
