use std::time::SystemTime;

use miles::harness::{run_ablation, AblationMode};
use miles::pipeline::*;
use miles::policy::NetConfig;
use miles::Error;

fn quick(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::for_scenario("reach");
    cfg.out = dir.to_path_buf();
    cfg.net = NetConfig::tiny();
    cfg.train.epochs = 3;
    cfg.collector.z = 2;
    cfg.calibration.pairs = 20;
    cfg.eval.trials = 4;
    cfg
}

#[test]
fn empty_config_is_the_default() {
    assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn config_sections_override_defaults() {
    let cfg = RunConfig::from_toml_str(
        r#"
scenario = "peg"
seed = 7

[collector]
z = 4
force_limit = 1.5

[train]
epochs = 12
optimizer = "sgd-momentum"

[eval]
trials = 5

[eval.randomization]
trans_range = 0.02
rot_range = 0.0
"#,
    )
    .unwrap();
    assert_eq!(cfg.scenario, "peg");
    assert_eq!(cfg.collector.z, 4);
    assert_eq!(cfg.collector.force_limit, Some(1.5));
    assert_eq!(cfg.train.epochs, 12);
    assert_eq!(cfg.eval_spec().scenario, "peg");
    assert_eq!(cfg.eval_spec().trials, 5);
    assert_eq!(cfg.eval.randomization.trans_range, 0.02);
    assert_eq!(collector_config(&cfg, Some(0.5)).unwrap().seed, 7);
    assert_eq!(collector_config(&cfg, Some(0.5)).unwrap().theta, 0.5);
    cfg.validate().unwrap();
}

#[test]
fn unknown_keys_name_their_path() {
    for (text, path) in [
        ("colour = 1", "colour"),
        ("[collector]\nzz = 3", "collector.zz"),
        ("[eval.randomization]\ntrans_range = 0.1\nrot_range = 0.1\nskew = 2", "eval.randomization.skew"),
        ("[train]\nepochs = \"many\"", "train.epochs"),
    ] {
        match RunConfig::from_toml_str(text) {
            Err(Error::InvalidConfig(m)) => assert!(m.starts_with(path), "{m}"),
            r => panic!("{text}: {r:?}"),
        }
    }
}

#[test]
fn scenario_defaults_apply() {
    let cfg = RunConfig::for_scenario("push-block");
    assert_eq!(collector_config(&cfg, None).unwrap().force_limit, Some(2.0));
    assert_eq!(collector_config(&RunConfig::default(), None).unwrap().force_limit, None);
    let bad = RunConfig::for_scenario("juggle");
    assert!(matches!(bad.validate(), Err(Error::UnknownScenario(_))));
}

fn mtime(p: &std::path::Path) -> SystemTime {
    std::fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn pipeline_resumes_and_reruns_changed_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    let report = run_pipeline(&cfg).unwrap();
    let p = cfg.paths();
    for f in [&p.demo, &p.dataset, &p.manifest, &p.fused, &p.sidecar, &p.policy, &p.loss, &p.report_csv, &p.report_md, &p.traces, &p.calibration_csv] {
        assert!(f.exists(), "{}", f.display());
    }
    let methods: Vec<&str> = report.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["miles", "demo-replay", "pose-replay"]);

    let before = [mtime(&p.demo), mtime(&p.dataset), mtime(&p.policy), mtime(&p.report_csv)];
    std::thread::sleep(std::time::Duration::from_millis(20));
    assert_eq!(run_pipeline(&cfg).unwrap(), report);
    let after = [mtime(&p.demo), mtime(&p.dataset), mtime(&p.policy), mtime(&p.report_csv)];
    assert_eq!(before, after);

    // A training change reruns training and evaluation only.
    let policy_bytes = std::fs::read(&p.policy).unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.train.epochs = 4;
    run_pipeline(&cfg2).unwrap();
    assert_eq!(mtime(&p.dataset), before[1]);
    assert_ne!(std::fs::read(&p.policy).unwrap(), policy_bytes);

    // Damaged outputs are regenerated.
    std::fs::write(&p.fused, b"").unwrap();
    run_pipeline(&cfg2).unwrap();
    assert!(std::fs::metadata(&p.fused).unwrap().len() > 0);
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    assert!(matches!(stage_train(&cfg), Err(Error::Io { .. })));
    assert!(matches!(stage_collect(&cfg), Err(Error::Io { .. })));
}

#[test]
fn full_fraction_matches_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.baselines = false;
    let main = run_pipeline(&cfg).unwrap();
    let abl = run_ablation(AblationMode::DataFraction(1.0), &cfg).unwrap();
    let (a, b) = (&main.rows[0], &abl.rows[0]);
    assert_eq!((a.successes, a.trials, a.mean_ticks), (b.successes, b.trials, b.mean_ticks));
    assert_eq!(a.config_hash, b.config_hash);
}
