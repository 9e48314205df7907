//! Success-rate evaluation over randomized trials, the two replay baselines
//! and the ablation grid.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::collector::CollectionResult;
use crate::demo::{self, Demonstration, Observation};
use crate::deploy::{run_episode, Controller, DeployConfig, EpisodeResult, PolicyController};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::io;
use crate::pipeline::{self, RunConfig};
use crate::policy::Policy;
use crate::sim::{self, RandomizationSpec, Scenario, SimConfig, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Filled in from the run's scenario when loaded from a config file.
    #[serde(skip)]
    pub scenario: String,
    pub trials: usize,
    pub randomization: RandomizationSpec,
    /// Trial `i` resets the world with seed `seed_base + i`.
    pub seed_base: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            scenario: "reach".into(),
            trials: 20,
            randomization: RandomizationSpec::boxed(0.04, 4f64.to_radians()),
            seed_base: 1000,
        }
    }
}

impl EvalSpec {
    pub fn new(scenario: &str) -> Self {
        EvalSpec {
            scenario: scenario.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("eval.trials must be at least 1".into()));
        }
        if !(self.randomization.trans_range >= 0.0 && self.randomization.rot_range >= 0.0) {
            return Err(Error::InvalidConfig("eval.randomization ranges must be non-negative".into()));
        }
        Scenario::get(&self.scenario).map(|_| ())
    }

    pub fn trial_seed(&self, i: usize) -> u64 {
        self.seed_base.wrapping_add(i as u64)
    }

    /// The freshly reset world of trial `i`.
    pub fn trial_world(&self, sim: &SimConfig, i: usize) -> Result<World> {
        sim::reset_with(sim.clone(), &self.scenario, self.trial_seed(i), &self.randomization)
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(json!({"scenario": self.scenario, "spec": self}).to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub scenario: String,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    /// Mean ticks per episode, closed loop plus replay.
    pub mean_ticks: f64,
    /// Hash of everything the row depends on.
    pub config_hash: String,
}

impl ReportRow {
    pub fn new(method: &str, scenario: &str, successes: &[bool], ticks: &[usize], config_hash: String) -> Self {
        let trials = successes.len();
        let s = successes.iter().filter(|&&b| b).count();
        ReportRow {
            method: method.into(),
            scenario: scenario.into(),
            trials,
            successes: s,
            rate: if trials == 0 { 0.0 } else { s as f64 / trials as f64 },
            mean_ticks: if ticks.is_empty() {
                0.0
            } else {
                ticks.iter().sum::<usize>() as f64 / ticks.len() as f64
            },
            config_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn single(row: ReportRow) -> Self {
        Report { rows: vec![row] }
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        if self.rows.is_empty() {
            w.write_record(["method", "scenario", "trials", "successes", "rate", "mean_ticks", "config_hash"])
                .expect("in-memory csv");
        }
        w.into_inner().expect("in-memory csv")
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Report> {
        let mut rdr = csv::Reader::from_reader(bytes);
        let mut rows = Vec::new();
        for (i, r) in rdr.deserialize().enumerate() {
            rows.push(r.map_err(|e| Error::parse(i, "row", e))?);
        }
        Ok(Report { rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | Scenario | Success | Rate | Mean ticks |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {}/{} | {:.0}% | {:.1} |\n",
                r.method,
                r.scenario,
                r.successes,
                r.trials,
                100.0 * r.rate,
                r.mean_ticks
            ));
        }
        s
    }

    pub fn save(&self, csv_path: &Path, md_path: &Path) -> Result<()> {
        io::write_atomic(csv_path, &self.to_csv())?;
        io::write_atomic(md_path, self.to_markdown().as_bytes())
    }

    pub fn load(csv_path: &Path) -> Result<Report> {
        Report::from_csv(&io::read_bytes(csv_path)?)
    }
}

/// Run every trial with a fresh controller from `make(i)`. Trials are
/// independent, so they run in parallel; results keep trial order.
pub fn evaluate_with<C, F>(
    method: &str,
    spec: &EvalSpec,
    sim: &SimConfig,
    deploy: &DeployConfig,
    zeta_remaining: &[demo::Action],
    config_hash: String,
    make: F,
) -> Result<(ReportRow, Vec<EpisodeResult>)>
where
    C: Controller,
    F: Fn(usize) -> C + Sync,
{
    spec.validate()?;
    deploy.validate()?;
    let episodes = (0..spec.trials)
        .into_par_iter()
        .map(|i| {
            let mut world = spec.trial_world(sim, i)?;
            let mut ctrl = make(i);
            run_episode(&mut ctrl, &mut world, zeta_remaining, deploy)
        })
        .collect::<Result<Vec<_>>>()?;
    let ok: Vec<bool> = episodes.iter().map(|e| e.success).collect();
    let ticks: Vec<usize> = episodes.iter().map(|e| e.ticks_closed_loop + e.replayed).collect();
    Ok((ReportRow::new(method, &spec.scenario, &ok, &ticks, config_hash), episodes))
}

/// Deploy `policy` on every trial of `spec`.
pub fn evaluate_policy(
    method: &str,
    policy: &Policy,
    spec: &EvalSpec,
    sim: &SimConfig,
    deploy: &DeployConfig,
) -> Result<(ReportRow, Vec<EpisodeResult>)> {
    if policy.scenario != spec.scenario {
        return Err(Error::Invalid(format!(
            "policy was trained on `{}` but the evaluation is on `{}`",
            policy.scenario, spec.scenario
        )));
    }
    let hash = io::sha256_hex(
        json!({"policy": policy.hash(), "spec": spec.hash(), "deploy": deploy, "sim": sim})
            .to_string()
            .as_bytes(),
    );
    evaluate_with(method, spec, sim, deploy, &policy.zeta_remaining, hash, |_| PolicyController::new(policy))
}

pub fn evaluate(policy: &Policy, spec: &EvalSpec) -> Result<Report> {
    let (row, _) = evaluate_policy("miles", policy, spec, &SimConfig::default(), &DeployConfig::default())?;
    Ok(Report::single(row))
}

/// Replay the demonstration actions open loop from each randomized start.
pub fn baseline_demo_replay(demo: &Demonstration, spec: &EvalSpec, sim: &SimConfig) -> Result<Report> {
    spec.validate()?;
    if demo.scenario != spec.scenario {
        return Err(Error::Invalid("demonstration and evaluation scenarios differ".into()));
    }
    let scenario = Scenario::get(&spec.scenario)?;
    let actions = demo.actions_between(0, demo.last_index());
    let ok = (0..spec.trials)
        .into_par_iter()
        .map(|i| {
            let mut world = spec.trial_world(sim, i)?;
            demo::replay(&mut world, &actions);
            Ok(scenario.success(&world))
        })
        .collect::<Result<Vec<bool>>>()?;
    let hash = io::sha256_hex(json!({"demo": demo.hash(), "spec": spec.hash(), "sim": sim}).to_string().as_bytes());
    Ok(Report::single(ReportRow::new(
        "demo-replay",
        &spec.scenario,
        &ok,
        &vec![actions.len(); ok.len()],
        hash,
    )))
}

/// Start-pose estimator of the pose-replay baseline: every collected and
/// demonstrated observation labelled with its pose relative to the first
/// demonstration waypoint.
pub struct PoseEstimator {
    index: crate::deploy::NearestNeighbor,
    labels: Vec<Pose>,
}

impl PoseEstimator {
    pub fn new(result: &CollectionResult, demo: &Demonstration) -> Self {
        let w0_inv = demo.waypoint(0).inverse();
        let steps = demo.steps.iter().chain(result.dataset.iter().flat_map(|t| t.steps.iter()));
        let (pairs, labels): (Vec<(&Observation, demo::Action)>, Vec<Pose>) = steps
            .map(|s| ((&s.obs, s.action), w0_inv.compose(&s.waypoint)))
            .unzip();
        PoseEstimator {
            index: crate::deploy::NearestNeighbor::new(pairs),
            labels,
        }
    }

    /// Estimated pose of the end effector relative to the first waypoint.
    pub fn estimate(&self, obs: &Observation) -> Option<Pose> {
        self.index.lookup(obs).map(|i| self.labels[i])
    }
}

/// Estimate the start offset by image lookup, servo to the demonstrated
/// start (plus `residual`, in the end-effector frame) and replay the whole
/// demonstration.
pub fn baseline_pose_replay(
    result: &CollectionResult,
    demo: &Demonstration,
    spec: &EvalSpec,
    sim: &SimConfig,
    residual: Pose,
) -> Result<Report> {
    spec.validate()?;
    if demo.scenario != spec.scenario || result.demo_hash != demo.hash() {
        return Err(Error::Invalid("collection, demonstration and evaluation do not match".into()));
    }
    let scenario = Scenario::get(&spec.scenario)?;
    let est = PoseEstimator::new(result, demo);
    let actions = demo.actions_between(0, demo.last_index());
    let gripper = demo.gripper_at(0);
    let runs = (0..spec.trials)
        .into_par_iter()
        .map(|i| {
            let mut world = spec.trial_world(sim, i)?;
            let obs = demo::observe(&mut world);
            let rel = est.estimate(&obs).unwrap_or(Pose::IDENTITY);
            let goal = world.ee_pose().compose(&rel.inverse()).compose(&residual);
            let t0 = world.time();
            demo::move_straight(&mut world, &goal, gripper);
            let servo = ((world.time() - t0) * sim.tick_rate).round() as usize;
            demo::replay(&mut world, &actions);
            Ok((scenario.success(&world), servo + actions.len()))
        })
        .collect::<Result<Vec<(bool, usize)>>>()?;
    let (ok, ticks): (Vec<bool>, Vec<usize>) = runs.into_iter().unzip();
    let hash = io::sha256_hex(
        json!({
            "demo": demo.hash(),
            "collection": result.config.hash(),
            "spec": spec.hash(),
            "sim": sim,
            "residual": [residual.x, residual.y, residual.theta],
        })
        .to_string()
        .as_bytes(),
    );
    Ok(Report::single(ReportRow::new("pose-replay", &spec.scenario, &ok, &ticks, hash)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AblationMode {
    NoSequence,
    NoDisturbance,
    NoReachability,
    NoMemory,
    DataFraction(f64),
}

impl AblationMode {
    pub const FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

    pub fn name(&self) -> String {
        match self {
            AblationMode::NoSequence => "no-sequence".into(),
            AblationMode::NoDisturbance => "no-disturbance".into(),
            AblationMode::NoReachability => "no-reachability".into(),
            AblationMode::NoMemory => "no-memory".into(),
            AblationMode::DataFraction(f) => format!("data-fraction-{f}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AblationMode::DataFraction(f) if !Self::FRACTIONS.contains(f) => Err(Error::InvalidConfig(format!(
                "data fraction {f} is not one of 0.25, 0.5, 0.75, 1.0"
            ))),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "no-sequence" => AblationMode::NoSequence,
            "no-disturbance" => AblationMode::NoDisturbance,
            "no-reachability" => AblationMode::NoReachability,
            "no-memory" => AblationMode::NoMemory,
            _ => match s.strip_prefix("data-fraction") {
                Some(rest) => {
                    let f = rest.trim_start_matches(['-', '=', ':']);
                    AblationMode::DataFraction(
                        f.parse()
                            .map_err(|_| Error::InvalidConfig(format!("bad data fraction `{f}`")))?,
                    )
                }
                None => return Err(Error::InvalidConfig(format!("unknown ablation mode `{s}`"))),
            },
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// Re-run collection and training in memory with one ingredient removed,
/// then evaluate. Nothing is written to disk.
pub fn run_ablation(mode: AblationMode, cfg: &RunConfig) -> Result<Report> {
    mode.validate()?;
    let mut cfg = cfg.clone();
    let mut fraction = 1.0;
    match mode {
        AblationMode::NoSequence => cfg.collector.no_sequence = true,
        AblationMode::NoDisturbance => cfg.collector.no_disturbance = true,
        AblationMode::NoReachability => cfg.collector.no_reachability = true,
        AblationMode::NoMemory => cfg.net.memory = false,
        AblationMode::DataFraction(f) => fraction = f,
    }
    let demo = pipeline::record(&cfg)?;
    let (collection, _) = pipeline::collect_for(&cfg, &demo)?;
    let fused = crate::fusion::fuse(&collection, &demo)?.fraction(fraction)?;
    let (policy, _) = crate::policy::train(&fused, &cfg.net, &pipeline::train_config(&cfg))?;
    let (row, _) = evaluate_policy(&mode.name(), &policy, &cfg.eval_spec(), &cfg.sim, &cfg.deploy)?;
    Ok(Report::single(row))
}
