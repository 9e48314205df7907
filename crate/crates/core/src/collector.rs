//! Self-supervised collection of augmentation trajectories.
//!
//! Starting from the first demonstration waypoint and moving forward one
//! waypoint at a time, the collector repeatedly moves the end effector to a
//! random pose near waypoint `k`, drives it back along a straight segment
//! while recording observations and the realized relative motion, and keeps
//! the recording if the end effector really got back to `w[k]`. A trajectory
//! that jams is discarded and the waypoint state is restored by homing and
//! replaying the demonstration. Collection stops for good as soon as the
//! scene no longer looks like the demonstration at `w[k]`.
//!
//! Indices are 0-based: waypoints run `0..=N-1` and `R` is the index of the
//! first waypoint without data after a stop, or `N-1` when every waypoint
//! was covered.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::demo::{self, Action, Demonstration, Step};
use crate::disturbance::{self, FeatureExtractor, PatchFeatures};
use crate::error::{Error, Result};
use crate::geometry::{Pose, PoseTolerance};
use crate::io;
use crate::sim::{render, Gripper, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectorConfig {
    /// Valid trajectories per waypoint.
    pub z: usize,
    pub trans_range: f64,
    pub rot_range: f64,
    /// Similarity below which the scene counts as disturbed.
    pub theta: f64,
    pub pose_tol: PoseTolerance,
    pub max_ticks_per_traj: usize,
    /// Candidates tried per waypoint before moving on with fewer than `z`.
    pub max_attempts_per_waypoint: usize,
    /// Ticks allowed for settling after homing or an outbound move.
    pub settle_ticks: usize,
    /// Stop collecting when a recorded force exceeds this, newtons.
    pub force_limit: Option<f64>,
    pub seed: u64,
    pub extractor: FeatureExtractor,
    pub no_sequence: bool,
    pub no_reachability: bool,
    pub no_disturbance: bool,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            z: 10,
            trans_range: 0.04,
            rot_range: 4f64.to_radians(),
            theta: disturbance::DEFAULT_THETA,
            pose_tol: PoseTolerance::default(),
            max_ticks_per_traj: 40,
            max_attempts_per_waypoint: 40,
            settle_ticks: 10,
            force_limit: None,
            seed: 0,
            extractor: FeatureExtractor::default(),
            no_sequence: false,
            no_reachability: false,
            no_disturbance: false,
        }
    }
}

impl CollectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z == 0 {
            return Err(Error::InvalidConfig("collector.z must be at least 1".into()));
        }
        if !(self.trans_range >= 0.0 && self.rot_range >= 0.0) {
            return Err(Error::InvalidConfig("collector ranges must be non-negative".into()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidConfig("collector.theta must lie in (0, 1)".into()));
        }
        if self.max_ticks_per_traj == 0 || self.max_attempts_per_waypoint < self.z {
            return Err(Error::InvalidConfig(
                "collector.max_ticks_per_traj must be positive and max_attempts_per_waypoint >= z".into(),
            ));
        }
        if let Some(f) = self.force_limit {
            if !(f > 0.0) {
                return Err(Error::InvalidConfig("collector.force_limit must be positive".into()));
            }
        }
        self.extractor.validate()
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    Disturbance,
    ForceLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugTrajectory {
    pub target_index: usize,
    pub steps: Vec<Step>,
    /// End-effector pose after the last step.
    pub end_pose: Pose,
    /// Similarity of the final view to the demonstration view at the target.
    pub end_similarity: f64,
}

impl AugTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn start_pose(&self) -> Pose {
        self.steps[0].waypoint
    }

    pub fn max_force(&self) -> f64 {
        self.steps.iter().map(|s| s.obs.force.magnitude()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub candidates: usize,
    pub unreachable: usize,
    pub timed_out: usize,
    pub recoveries: usize,
    pub ticks: usize,
    /// Waypoints that ran out of attempts before reaching `z`.
    pub short_waypoints: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectionResult {
    pub dataset: Vec<AugTrajectory>,
    pub r: usize,
    /// Demonstration actions `a[R..N-1]`; empty when collection completed.
    pub zeta_remaining: Vec<Action>,
    pub stop_reason: StopReason,
    pub stats: CollectionStats,
    pub scenario: String,
    pub demo_hash: String,
    pub config: CollectorConfig,
}

/// Uniform offset in the box `|dx|, |dy| <= trans_range`, `|dθ| <= rot_range`.
pub fn sample_start_offset<R: Rng>(rng: &mut R, cfg: &CollectorConfig) -> Pose {
    let mut u = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let dx = u(cfg.trans_range);
    let dy = u(cfg.trans_range);
    let dt = u(cfg.rot_range);
    Pose::new(dx, dy, dt)
}

pub fn check_reachability(achieved: &Pose, target: &Pose, tol: &PoseTolerance) -> bool {
    achieved.approx_eq(target, tol)
}

/// Command `goal` until the end effector is within a tenth of the tolerance
/// and nearly at rest, or `max_ticks` run out.
fn settle(world: &mut World, goal: &Pose, gripper: Gripper, tol: &PoseTolerance, max_ticks: usize) -> usize {
    let fine = PoseTolerance::new(tol.trans_tol() * 0.1, tol.rot_tol() * 0.1).expect("positive");
    for i in 0..max_ticks {
        let v = world.ee_velocity();
        if world.ee_pose().approx_eq(goal, &fine) && v[0].hypot(v[1]) < 1e-4 && v[2].abs() < 1e-3 {
            return i;
        }
        world.tick(*goal, gripper);
    }
    max_ticks
}

/// A candidate trajectory and whether it got back to its waypoint.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub traj: AugTrajectory,
    pub reached: bool,
    pub timed_out: bool,
    /// Largest contact force magnitude over the recorded ticks.
    pub max_force: f64,
}

/// Transfer the end effector from waypoint `k` to a random nearby pose
/// without recording, then record the straight return to `w[k]`. The
/// outbound leg is a lifted transfer, so it cannot disturb the scene.
pub fn sample_trajectory<R: Rng>(
    world: &mut World,
    demo: &Demonstration,
    k: usize,
    cfg: &CollectorConfig,
    rng: &mut R,
) -> Candidate {
    let target = *demo.waypoint(k);
    let gripper = demo.gripper_at(k);
    let offset = sample_start_offset(rng, cfg);
    let start = target.compose(&offset);
    world.place_ee(start);
    world.tick(world.ee_pose(), gripper);
    record_return(world, &target, gripper, cfg, k)
}

/// Record a straight return to `target` from wherever the end effector is.
pub fn record_return(world: &mut World, target: &Pose, gripper: Gripper, cfg: &CollectorConfig, k: usize) -> Candidate {
    let from = world.ee_pose();
    let n = demo::ticks_between(&from, target, world.config());
    let mut steps = Vec::new();
    let mut max_force = world.read_force().magnitude();
    let mut record = |world: &mut World, goal: Pose, steps: &mut Vec<Step>| {
        let w = world.ee_pose();
        let obs = demo::observe(world);
        max_force = max_force.max(world.tick(goal, gripper).magnitude());
        steps.push(Step {
            waypoint: w,
            obs,
            action: Action {
                delta: w.relative(&world.ee_pose()),
                gripper,
            },
        });
    };
    for i in 1..=n.min(cfg.max_ticks_per_traj) {
        record(world, from.interpolate(target, i as f64 / n as f64), &mut steps);
    }
    // Compliance may leave the tool short of the goal; keep pushing towards it.
    while steps.len() < cfg.max_ticks_per_traj && !check_reachability(&world.ee_pose(), target, &cfg.pose_tol) {
        let before = world.ee_pose();
        record(world, *target, &mut steps);
        // Stalled against an obstacle: further ticks cannot help.
        if before.translation_distance(&world.ee_pose()) < 1e-5 && before.angular_distance(&world.ee_pose()) < 1e-5 {
            break;
        }
    }
    let reached = check_reachability(&world.ee_pose(), target, &cfg.pose_tol);
    let timed_out = !reached && steps.len() >= cfg.max_ticks_per_traj;
    if steps.is_empty() {
        let w = world.ee_pose();
        steps.push(Step {
            waypoint: w,
            obs: demo::observe(world),
            action: Action::identity(gripper),
        });
    }
    Candidate {
        traj: AugTrajectory {
            target_index: k,
            steps,
            end_pose: world.ee_pose(),
            end_similarity: f64::NAN,
        },
        reached,
        timed_out,
        max_force,
    }
}

/// Home to `w[0]` by a lifted transfer, then replay `a[0..k]`.
pub fn return_to_waypoint(world: &mut World, k: usize, demo: &Demonstration, tol: &PoseTolerance) -> Result<()> {
    world.place_ee(*demo.waypoint(0));
    world.tick(*demo.waypoint(0), demo.gripper_at(0));
    demo::replay(world, &demo.actions_between(0, k));
    let here = world.ee_pose();
    let goal = demo.waypoint(k);
    if !here.approx_eq(goal, tol) {
        return Err(Error::Unrecoverable {
            waypoint: k,
            error_m: here.translation_distance(goal),
            error_rad: here.angular_distance(goal),
        });
    }
    Ok(())
}

/// Index of the demonstration waypoint closest in translation to `p`.
pub fn nearest_waypoint(demo: &Demonstration, p: &Pose) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, s) in demo.steps.iter().enumerate() {
        let d = s.waypoint.translation_distance(p);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

pub fn collect(world: &mut World, demo: &Demonstration, cfg: &CollectorConfig) -> Result<CollectionResult> {
    collect_with(world, demo, cfg, |_, _| {})
}

/// Run the collection loop. `on_arrival(k, world)` is called each time the
/// end effector arrives at waypoint `k`, before any sampling there; tests use
/// it to disturb the scene.
pub fn collect_with<F>(world: &mut World, demo: &Demonstration, cfg: &CollectorConfig, mut on_arrival: F) -> Result<CollectionResult>
where
    F: FnMut(usize, &mut World),
{
    cfg.validate()?;
    demo.validate()?;
    if world.scenario_id() != demo.scenario {
        return Err(Error::Invalid(format!(
            "world is `{}` but the demonstration is `{}`",
            world.scenario_id(),
            demo.scenario
        )));
    }
    let last = demo.last_index();
    let refs = demo
        .steps
        .iter()
        .map(|s| disturbance::extract_features(&s.obs.image, &cfg.extractor))
        .collect::<Result<Vec<PatchFeatures>>>()?;
    let similarity = |world: &World, k: usize| -> Result<f64> {
        let live = disturbance::extract_features(&render(world), &cfg.extractor)?;
        disturbance::avg_cosine_similarity(&refs[k], &live)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..=last).collect();
    if cfg.no_sequence {
        order.shuffle(&mut rng);
    }
    let mut dataset: Vec<AugTrajectory> = Vec::new();
    let mut stats = CollectionStats::default();
    let mut stop = StopReason::Completed;
    let mut r = last;

    if !world.ee_pose().approx_eq(demo.waypoint(0), &cfg.pose_tol) {
        return Err(Error::Invalid("the world must start at the first demonstration waypoint".into()));
    }
    let t0 = world.time();
    'waypoints: for (pos, &k) in order.iter().enumerate() {
        let arrived = world.ee_pose().approx_eq(demo.waypoint(k), &cfg.pose_tol);
        if (cfg.no_sequence && pos > 0) || !arrived {
            stats.recoveries += 1;
            return_to_waypoint(world, k, demo, &cfg.pose_tol)?;
        }
        on_arrival(k, world);
        if !cfg.no_disturbance && similarity(world, k)? < cfg.theta {
            stop = StopReason::Disturbance;
            r = k;
            break 'waypoints;
        }
        let gripper = demo.gripper_at(k);
        let mut valid = 0;
        let mut attempts = 0;
        while valid < cfg.z {
            if attempts == cfg.max_attempts_per_waypoint {
                log::warn!("waypoint {k}: only {valid} of {} trajectories after {attempts} attempts", cfg.z);
                stats.short_waypoints.push(k);
                break;
            }
            attempts += 1;
            stats.candidates += 1;
            let mut cand = sample_trajectory(world, demo, k, cfg, &mut rng);
            if cand.timed_out {
                stats.timed_out += 1;
            }
            let force_hit = cfg.force_limit.is_some_and(|f| cand.max_force > f);
            let mut keep = true;
            if !cand.reached {
                stats.unreachable += 1;
                if cfg.no_reachability {
                    cand.traj.target_index = nearest_waypoint(demo, &cand.traj.end_pose);
                } else {
                    keep = false;
                }
                stats.recoveries += 1;
                return_to_waypoint(world, k, demo, &cfg.pose_tol)?;
            }
            let sim = similarity(world, k)?;
            cand.traj.end_similarity = sim;
            if !cfg.no_disturbance && sim < cfg.theta {
                stop = StopReason::Disturbance;
                r = k;
                break 'waypoints;
            }
            if force_hit && !cfg.no_disturbance {
                stop = StopReason::ForceLimit;
                r = k;
                break 'waypoints;
            }
            if keep {
                dataset.push(cand.traj);
                valid += 1;
            }
        }
        // Settle back on w[k] before proceeding so the next action starts
        // from the demonstrated state.
        settle(world, demo.waypoint(k), gripper, &cfg.pose_tol, cfg.settle_ticks);
        if !cfg.no_sequence && k < last {
            demo::execute(world, &demo.steps[k].action);
        }
    }
    stats.ticks = ((world.time() - t0) * world.config().tick_rate).round() as usize;
    if stop != StopReason::Completed {
        dataset.retain(|t| t.target_index < r);
    }
    Ok(CollectionResult {
        zeta_remaining: demo.actions_between(r, last),
        dataset,
        r,
        stop_reason: stop,
        stats,
        scenario: demo.scenario.clone(),
        demo_hash: demo.hash(),
        config: cfg.clone(),
    })
}

impl CollectionResult {
    pub fn count_for(&self, k: usize) -> usize {
        self.dataset.iter().filter(|t| t.target_index == k).count()
    }

    pub fn manifest(&self, dataset_hash: &str) -> serde_json::Value {
        json!({
            "version": io::FORMAT_VERSION,
            "kind": "manifest",
            "scenario": self.scenario,
            "r": self.r,
            "stop_reason": self.stop_reason,
            "trajectories": self.dataset.len(),
            "zeta_remaining": self.zeta_remaining.iter().map(io::action_value).collect::<Vec<_>>(),
            "stats": self.stats,
            "demo_hash": self.demo_hash,
            "dataset_hash": dataset_hash,
            "config_hash": self.config.hash(),
            "config": self.config,
        })
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let (w, h) = self
            .dataset
            .first()
            .map(|t| (t.steps[0].obs.image.width, t.steps[0].obs.image.height))
            .unwrap_or((0, 0));
        let mut recs = vec![json!({
            "version": io::FORMAT_VERSION,
            "kind": "dataset",
            "scenario": self.scenario,
            "width": w,
            "height": h,
            "channels": crate::sim::Image::CHANNELS,
            "r": self.r,
            "stop_reason": self.stop_reason,
            "trajectories": self.dataset.len(),
            "demo_hash": self.demo_hash,
            "config_hash": self.config.hash(),
        })];
        for t in &self.dataset {
            recs.push(json!({
                "k": t.target_index,
                "len": t.steps.len(),
                "end": t.end_pose,
                "sim": t.end_similarity,
            }));
            for s in &t.steps {
                recs.push(io::step_value(Some(&s.waypoint), &s.obs, &s.action));
            }
        }
        io::to_jsonl(&recs)
    }
}

/// Write the dataset and its manifest. Returns the dataset hash.
pub fn save_collection(result: &CollectionResult, dataset_path: &Path, manifest_path: &Path) -> Result<String> {
    let bytes = result.to_jsonl();
    let hash = io::sha256_hex(&bytes);
    io::write_atomic(dataset_path, &bytes)?;
    let manifest = serde_json::to_vec_pretty(&result.manifest(&hash)).expect("json");
    io::write_atomic(manifest_path, &manifest)?;
    Ok(hash)
}

/// Load a dataset written by [`save_collection`] together with its manifest.
/// The manifest's dataset hash must match the file.
pub fn load_collection(dataset_path: &Path, manifest_path: &Path) -> Result<CollectionResult> {
    let bytes = io::read_bytes(dataset_path)?;
    let manifest: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&io::read_bytes(manifest_path)?)
        .map_err(|e| Error::parse(0, "<manifest>", e))?;
    io::check_version(&manifest)?;
    let expected: String = io::field(&manifest, "dataset_hash", 0)?;
    if io::sha256_hex(&bytes) != expected {
        return Err(Error::Integrity(format!(
            "{} does not match the manifest hash",
            dataset_path.display()
        )));
    }
    let config: CollectorConfig = io::field(&manifest, "config", 0)?;
    let stats: CollectionStats = io::field(&manifest, "stats", 0)?;
    let zeta: Vec<serde_json::Value> = io::field(&manifest, "zeta_remaining", 0)?;
    let zeta_remaining = zeta
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut m = serde_json::Map::new();
            m.insert("a".into(), v.clone());
            io::parse_action(&m, i)
        })
        .collect::<Result<Vec<_>>>()?;

    let recs = io::read_jsonl(dataset_path)?;
    let header = recs.first().ok_or_else(|| Error::parse(0, "<header>", "empty file"))?;
    io::check_version(header)?;
    io::check_kind(header, 0, "dataset")?;
    let scenario: String = io::field(header, "scenario", 0)?;
    let width: usize = io::field(header, "width", 0)?;
    let height: usize = io::field(header, "height", 0)?;
    let r: usize = io::field(header, "r", 0)?;
    let stop_reason: StopReason = io::field(header, "stop_reason", 0)?;
    let count: usize = io::field(header, "trajectories", 0)?;
    let demo_hash: String = io::field(header, "demo_hash", 0)?;
    let mut dataset = Vec::with_capacity(count);
    let mut i = 1;
    for _ in 0..count {
        let rec = recs
            .get(i)
            .ok_or_else(|| Error::parse(i, "<record>", "file truncated: missing trajectory header"))?;
        let target_index: usize = io::field(rec, "k", i)?;
        let len: usize = io::field(rec, "len", i)?;
        let end_pose: Pose = io::field(rec, "end", i)?;
        let end_similarity: f64 = io::field::<Option<f64>>(rec, "sim", i)?.unwrap_or(f64::NAN);
        i += 1;
        let mut steps = Vec::with_capacity(len);
        for _ in 0..len {
            let rec = recs
                .get(i)
                .ok_or_else(|| Error::parse(i, "<record>", "file truncated inside a trajectory"))?;
            steps.push(Step {
                waypoint: io::field(rec, "w", i)?,
                obs: io::parse_observation(rec, i, width, height)?,
                action: io::parse_action(rec, i)?,
            });
            i += 1;
        }
        dataset.push(AugTrajectory {
            target_index,
            steps,
            end_pose,
            end_similarity,
        });
    }
    if recs.len() > i {
        return Err(Error::parse(i, "<record>", "unexpected trailing record"));
    }
    Ok(CollectionResult {
        dataset,
        r,
        zeta_remaining,
        stop_reason,
        stats,
        scenario,
        demo_hash,
        config,
    })
}
