//! Run configuration and the staged, resumable pipeline:
//! demo, collect (with threshold calibration), fuse, train, eval.
//!
//! Every stage records the hash of its inputs and outputs in
//! `stages.json` inside the output directory. A stage whose recorded input
//! hash matches and whose outputs are unchanged on disk is skipped and its
//! outputs are loaded instead. Outputs carry no timings, so identical
//! configs give byte-identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::collector::{self, CollectionResult, CollectorConfig};
use crate::demo::{self, Demonstration};
use crate::deploy::{self, DeployConfig};
use crate::disturbance::{self, Calibration, CalibrationConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusedDataset};
use crate::harness::{self, EvalSpec, Report};
use crate::io;
use crate::policy::{self, NetConfig, Policy, TrainConfig};
use crate::sim::{self, RandomizationSpec, Scenario, SimConfig};
use crate::Pose;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: String,
    /// Seeds the scene and is added to the collector, calibration and
    /// training seeds.
    pub seed: u64,
    pub out: PathBuf,
    /// Calibrate the disturbance threshold on the demonstration. When off,
    /// `collector.theta` is used as given.
    pub calibrate: bool,
    /// Also evaluate the demo-replay and pose-replay baselines.
    pub baselines: bool,
    pub sim: SimConfig,
    pub calibration: CalibrationConfig,
    /// `force_limit` left unset means the scenario's own limit.
    pub collector: CollectorConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub deploy: DeployConfig,
    pub eval: EvalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: "reach".into(),
            seed: 0,
            out: PathBuf::from("out"),
            calibrate: true,
            baselines: true,
            sim: SimConfig::default(),
            calibration: CalibrationConfig::default(),
            collector: CollectorConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            deploy: DeployConfig::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn for_scenario(scenario: &str) -> Self {
        RunConfig {
            scenario: scenario.into(),
            ..Default::default()
        }
    }

    /// Parse TOML. Unknown or mistyped keys are reported with their full
    /// dotted path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::InvalidConfig(format!("{path}: {}", e.into_inner().message().trim()))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        Scenario::get(&self.scenario)?;
        self.sim.validate()?;
        self.collector.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.deploy.validate()?;
        self.eval_spec().validate()
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            scenario: self.scenario.clone(),
            ..self.eval.clone()
        }
    }

    pub fn paths(&self) -> Paths {
        Paths::new(&self.out)
    }
}

/// Artifact locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub demo: PathBuf,
    pub calibration_csv: PathBuf,
    pub calibration_json: PathBuf,
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    pub fused: PathBuf,
    pub sidecar: PathBuf,
    pub policy: PathBuf,
    pub loss: PathBuf,
    pub report_csv: PathBuf,
    pub report_md: PathBuf,
    pub traces: PathBuf,
    pub stages: PathBuf,
}

impl Paths {
    pub fn new(dir: &Path) -> Self {
        let p = |name: &str| dir.join(name);
        Paths {
            demo: p("demo.jsonl"),
            calibration_csv: p("calibration.csv"),
            calibration_json: p("calibration.json"),
            dataset: p("dataset.jsonl"),
            manifest: p("manifest.json"),
            fused: p("fused.jsonl"),
            sidecar: p("fused_sidecar.json"),
            policy: p("policy.bin"),
            loss: p("loss.csv"),
            report_csv: p("report.csv"),
            report_md: p("report.md"),
            traces: p("traces.jsonl"),
            stages: p("stages.json"),
        }
    }
}

fn mix(base: u64, offset: u64) -> u64 {
    base.wrapping_add(offset)
}

fn hash_json(v: serde_json::Value) -> String {
    io::sha256_hex(v.to_string().as_bytes())
}

/// Record the scenario's scripted demonstration.
pub fn record(cfg: &RunConfig) -> Result<Demonstration> {
    demo::record_scenario_demo(&cfg.sim, &cfg.scenario, cfg.seed)
}

/// Collector settings with the run seed and scenario defaults applied.
/// `theta` replaces the configured threshold when given.
pub fn collector_config(cfg: &RunConfig, theta: Option<f64>) -> Result<CollectorConfig> {
    let scenario = Scenario::get(&cfg.scenario)?;
    let mut c = cfg.collector.clone();
    c.seed = mix(cfg.seed, c.seed);
    c.force_limit = c.force_limit.or(scenario.force_limit);
    if let Some(t) = theta {
        c.theta = t;
    }
    Ok(c)
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        seed: mix(cfg.seed, cfg.train.seed),
        ..cfg.train.clone()
    }
}

pub fn calibrate(cfg: &RunConfig, demo: &Demonstration) -> Result<Calibration> {
    let cal = CalibrationConfig {
        seed: mix(cfg.seed, cfg.calibration.seed),
        ..cfg.calibration.clone()
    };
    disturbance::calibrate(&cfg.sim, demo, &cfg.collector.extractor, &cfg.collector.pose_tol, &cal)
}

/// Calibrate (when enabled) and run the collector in a single fresh reset.
pub fn collect_for(cfg: &RunConfig, demo: &Demonstration) -> Result<(CollectionResult, Option<Calibration>)> {
    let cal = if cfg.calibrate { Some(calibrate(cfg, demo)?) } else { None };
    if let Some(c) = &cal {
        if !c.separates() {
            log::warn!(
                "{}: calibration populations overlap (undisturbed min {:.4}, disturbed max {:.4})",
                cfg.scenario,
                c.min_undisturbed,
                c.max_disturbed
            );
        }
    }
    let ccfg = collector_config(cfg, cal.as_ref().map(|c| c.theta))?;
    let mut world = sim::reset_with(cfg.sim.clone(), &cfg.scenario, cfg.seed, &RandomizationSpec::none())?;
    let result = collector::collect(&mut world, demo, &ccfg)?;
    log::info!(
        "{}: R = {}, stop {:?}, {} trajectories, {} unreachable candidates",
        cfg.scenario,
        result.r,
        result.stop_reason,
        result.dataset.len(),
        result.stats.unreachable
    );
    Ok((result, cal))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    input: String,
    output: String,
}

/// Persistent record of completed stages in an output directory.
struct Stages {
    path: PathBuf,
    map: BTreeMap<String, StageRecord>,
}

impl Stages {
    fn open(path: &Path) -> Self {
        let map = std::fs::read(path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        Stages {
            path: path.to_path_buf(),
            map,
        }
    }

    fn outputs_hash(outputs: &[&Path]) -> Option<String> {
        let mut all = Vec::new();
        for p in outputs {
            all.extend(io::sha256_hex(&std::fs::read(p).ok()?).into_bytes());
        }
        Some(io::sha256_hex(&all))
    }

    fn fresh(&self, stage: &str, input: &str, outputs: &[&Path]) -> bool {
        match (self.map.get(stage), Self::outputs_hash(outputs)) {
            (Some(r), Some(h)) => r.input == input && r.output == h,
            _ => false,
        }
    }

    fn mark(&mut self, stage: &str, input: &str, outputs: &[&Path]) -> Result<()> {
        let output = Self::outputs_hash(outputs)
            .ok_or_else(|| Error::Invalid(format!("stage {stage} did not write all of its outputs")))?;
        self.map.insert(
            stage.to_string(),
            StageRecord {
                input: input.to_string(),
                output,
            },
        );
        let bytes = serde_json::to_vec_pretty(&self.map).expect("stage map serializes");
        io::write_atomic(&self.path, &bytes)
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(io::sha256_hex(&io::read_bytes(path)?))
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f();
    log::info!("stage {stage} finished in {:.1?}", t.elapsed());
    out
}

pub fn stage_demo(cfg: &RunConfig) -> Result<Demonstration> {
    let p = cfg.paths();
    let mut stages = Stages::open(&p.stages);
    let input = hash_json(json!({"scenario": cfg.scenario, "seed": cfg.seed, "sim": cfg.sim}));
    if stages.fresh("demo", &input, &[&p.demo]) {
        log::info!("stage demo is up to date");
        return demo::load_demo(&p.demo);
    }
    timed("demo", || {
        let d = record(cfg)?;
        demo::save_demo(&d, &p.demo)?;
        stages.mark("demo", &input, &[&p.demo])?;
        Ok(d)
    })
}

pub fn stage_collect(cfg: &RunConfig) -> Result<CollectionResult> {
    let p = cfg.paths();
    let mut stages = Stages::open(&p.stages);
    let input = hash_json(json!({
        "demo": file_hash(&p.demo)?,
        "calibrate": cfg.calibrate,
        "calibration": cfg.calibration,
        "collector": collector_config(cfg, None)?,
        "seed": cfg.seed,
        "sim": cfg.sim,
    }));
    let outputs: Vec<&Path> = if cfg.calibrate {
        vec![&p.dataset, &p.manifest, &p.calibration_csv, &p.calibration_json]
    } else {
        vec![&p.dataset, &p.manifest]
    };
    if stages.fresh("collect", &input, &outputs) {
        log::info!("stage collect is up to date");
        return collector::load_collection(&p.dataset, &p.manifest);
    }
    let demo = demo::load_demo(&p.demo)?;
    timed("collect", || {
        let (result, cal) = collect_for(cfg, &demo)?;
        if let Some(c) = cal {
            io::write_atomic(&p.calibration_csv, &Calibration::to_csv(&c.rows)?)?;
            let summary = json!({
                "scenario": c.scenario,
                "theta": c.theta,
                "min_undisturbed": c.min_undisturbed,
                "max_disturbed": c.max_disturbed,
                "separates": c.separates(),
                "monotone": c.monotone(),
                "grid": c.grid,
            });
            io::write_atomic(&p.calibration_json, &serde_json::to_vec_pretty(&summary).expect("json"))?;
        }
        collector::save_collection(&result, &p.dataset, &p.manifest)?;
        stages.mark("collect", &input, &outputs)?;
        Ok(result)
    })
}

pub fn stage_fuse(cfg: &RunConfig) -> Result<FusedDataset> {
    let p = cfg.paths();
    let mut stages = Stages::open(&p.stages);
    let input = hash_json(json!({
        "demo": file_hash(&p.demo)?,
        "dataset": file_hash(&p.dataset)?,
        "manifest": file_hash(&p.manifest)?,
    }));
    if stages.fresh("fuse", &input, &[&p.fused, &p.sidecar]) {
        log::info!("stage fuse is up to date");
        return fusion::load_fused(&p.fused, &p.sidecar);
    }
    let demo = demo::load_demo(&p.demo)?;
    let result = collector::load_collection(&p.dataset, &p.manifest)?;
    timed("fuse", || {
        let fused = fusion::fuse(&result, &demo)?;
        fusion::save_fused(&fused, &p.fused, &p.sidecar)?;
        stages.mark("fuse", &input, &[&p.fused, &p.sidecar])?;
        Ok(fused)
    })
}

pub fn stage_train(cfg: &RunConfig) -> Result<Policy> {
    let p = cfg.paths();
    let mut stages = Stages::open(&p.stages);
    let tcfg = train_config(cfg);
    let input = hash_json(json!({
        "fused": file_hash(&p.fused)?,
        "sidecar": file_hash(&p.sidecar)?,
        "net": cfg.net,
        "train": tcfg,
    }));
    if stages.fresh("train", &input, &[&p.policy, &p.loss]) {
        log::info!("stage train is up to date");
        return policy::load_policy_expecting(&p.policy, &cfg.net);
    }
    let fused = fusion::load_fused(&p.fused, &p.sidecar)?;
    timed("train", || {
        let (pol, losses) = policy::train(&fused, &cfg.net, &tcfg)?;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            log::info!("loss {first:.4} -> {last:.4} over {} epochs", losses.len());
        }
        policy::save_policy(&pol, &p.policy)?;
        io::write_atomic(&p.loss, &policy::train::loss_csv(&losses))?;
        stages.mark("train", &input, &[&p.policy, &p.loss])?;
        Ok(pol)
    })
}

pub fn stage_eval(cfg: &RunConfig) -> Result<Report> {
    let p = cfg.paths();
    let mut stages = Stages::open(&p.stages);
    let spec = cfg.eval_spec();
    let mut inputs = json!({
        "policy": file_hash(&p.policy)?,
        "spec": spec.hash(),
        "deploy": cfg.deploy,
        "sim": cfg.sim,
        "baselines": cfg.baselines,
    });
    if cfg.baselines {
        inputs["demo"] = json!(file_hash(&p.demo)?);
        inputs["dataset"] = json!(file_hash(&p.dataset)?);
    }
    let input = hash_json(inputs);
    let outputs: [&Path; 3] = [&p.report_csv, &p.report_md, &p.traces];
    if stages.fresh("eval", &input, &outputs) {
        log::info!("stage eval is up to date");
        return Report::load(&p.report_csv);
    }
    let pol = policy::load_policy_expecting(&p.policy, &cfg.net)?;
    timed("eval", || {
        let (row, episodes) = harness::evaluate_policy("miles", &pol, &spec, &cfg.sim, &cfg.deploy)?;
        log::info!("{}: {}/{} successes", row.scenario, row.successes, row.trials);
        let mut report = Report::single(row);
        if cfg.baselines {
            let demo = demo::load_demo(&p.demo)?;
            let result = collector::load_collection(&p.dataset, &p.manifest)?;
            report.extend(harness::baseline_demo_replay(&demo, &spec, &cfg.sim)?);
            report.extend(harness::baseline_pose_replay(&result, &demo, &spec, &cfg.sim, Pose::IDENTITY)?);
        }
        report.save(&p.report_csv, &p.report_md)?;
        deploy::save_traces(&episodes, &p.traces)?;
        stages.mark("eval", &input, &outputs)?;
        Ok(report)
    })
}

/// Every stage in order. Up-to-date stages are skipped.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    stage_demo(cfg)?;
    stage_collect(cfg)?;
    stage_fuse(cfg)?;
    stage_train(cfg)?;
    stage_eval(cfg)
}
