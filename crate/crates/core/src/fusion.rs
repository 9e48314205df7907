//! Fuse augmentation trajectories with the demonstration suffix.
//!
//! Every valid trajectory targeting waypoint `k` becomes a new demonstration:
//! its own (observation, action) pairs followed by the demonstration's pairs
//! for `n = k..=R`. The truncated demonstration itself is the first entry.
//! Waypoints are dropped from the training data and kept in a sidecar so
//! that the sequences can still be replayed in simulation.
//!
//! The action stored at `R` is the identity whenever the demonstration
//! continues past `R`. The policy learns to stop there, which is what hands
//! control over to the replay of the remaining demonstration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::collector::{CollectionResult, CollectorConfig};
use crate::demo::{self, Action, Demonstration, Observation};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::io;
use crate::sim::{self, Image, SimConfig, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedStep {
    pub obs: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    /// `demo` or `traj:<i>` with `i` the index in the collection dataset.
    pub src: String,
    pub steps: Vec<FusedStep>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

/// Replay metadata kept next to, not inside, the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub src: String,
    pub target_index: usize,
    pub start_pose: Pose,
    /// Pose where the trajectory met the demonstration.
    pub seam_pose: Pose,
    pub seam_similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedDataset {
    pub scenario: String,
    pub seed: u64,
    pub r: usize,
    /// Number of demonstration waypoints.
    pub demo_len: usize,
    pub sequences: Vec<FusedSequence>,
    pub sidecar: Vec<SidecarEntry>,
    pub zeta_remaining: Vec<Action>,
    pub demo_hash: String,
    pub collection_hash: String,
}

fn demo_segment(demo: &Demonstration, from: usize, r: usize) -> Vec<FusedStep> {
    (from..=r)
        .map(|n| {
            let s = &demo.steps[n];
            let action = if n == r { Action::identity(s.action.gripper) } else { s.action };
            FusedStep {
                obs: s.obs.clone(),
                action,
            }
        })
        .collect()
}

pub fn fuse(result: &CollectionResult, demo: &Demonstration) -> Result<FusedDataset> {
    if result.demo_hash != demo.hash() {
        return Err(Error::Integrity("collection was made from a different demonstration".into()));
    }
    let r = result.r;
    if r > demo.last_index() {
        return Err(Error::Integrity(format!("R = {r} is past the last waypoint")));
    }
    let cfg: &CollectorConfig = &result.config;
    let mut sequences = vec![FusedSequence {
        src: "demo".into(),
        steps: demo_segment(demo, 0, r),
    }];
    let mut sidecar = vec![SidecarEntry {
        src: "demo".into(),
        target_index: 0,
        start_pose: *demo.waypoint(0),
        seam_pose: *demo.waypoint(0),
        seam_similarity: 1.0,
    }];
    for (i, t) in result.dataset.iter().enumerate() {
        let k = t.target_index;
        if k > r {
            return Err(Error::Integrity(format!("trajectory {i} targets waypoint {k} beyond R = {r}")));
        }
        if !cfg.no_reachability && !t.end_pose.approx_eq(demo.waypoint(k), &cfg.pose_tol) {
            return Err(Error::Integrity(format!("trajectory {i} does not end at waypoint {k}")));
        }
        if !cfg.no_disturbance && !(t.end_similarity >= cfg.theta) {
            return Err(Error::Integrity(format!(
                "trajectory {i} ends in a view unlike the demonstration (similarity {:.4})",
                t.end_similarity
            )));
        }
        let src = format!("traj:{i}");
        let mut steps: Vec<FusedStep> = t
            .steps
            .iter()
            .map(|s| FusedStep {
                obs: s.obs.clone(),
                action: s.action,
            })
            .collect();
        steps.extend(demo_segment(demo, k, r));
        sequences.push(FusedSequence { src: src.clone(), steps });
        sidecar.push(SidecarEntry {
            src,
            target_index: k,
            start_pose: t.start_pose(),
            seam_pose: t.end_pose,
            seam_similarity: t.end_similarity,
        });
    }
    let collection_hash = io::sha256_hex(&result.to_jsonl());
    Ok(FusedDataset {
        scenario: demo.scenario.clone(),
        seed: demo.seed,
        r,
        demo_len: demo.len(),
        sequences,
        sidecar,
        zeta_remaining: result.zeta_remaining.clone(),
        demo_hash: result.demo_hash.clone(),
        collection_hash,
    })
}

impl FusedDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let img = &self.sequences[0].steps[0].obs.image;
        (img.width, img.height)
    }

    /// Keep the demonstration and the first `fraction` of the trajectories.
    pub fn fraction(&self, fraction: f64) -> Result<FusedDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("data fraction {fraction} must lie in (0, 1]")));
        }
        let trajs = self.sequences.len() - 1;
        let keep = 1 + (trajs as f64 * fraction).round() as usize;
        let mut out = self.clone();
        out.sequences.truncate(keep);
        out.sidecar.truncate(keep);
        Ok(out)
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let (w, h) = self.image_dims();
        let mut recs = vec![json!({
            "version": io::FORMAT_VERSION,
            "kind": "fused",
            "scenario": self.scenario,
            "seed": self.seed,
            "width": w,
            "height": h,
            "channels": Image::CHANNELS,
            "r": self.r,
            "demo_len": self.demo_len,
            "sequences": self.sequences.len(),
            "zeta_remaining": self.zeta_remaining.iter().map(io::action_value).collect::<Vec<_>>(),
            "demo_hash": self.demo_hash,
            "collection_hash": self.collection_hash,
        })];
        for s in &self.sequences {
            recs.push(json!({ "src": s.src, "len": s.steps.len() }));
            for st in &s.steps {
                recs.push(io::step_value(None, &st.obs, &st.action));
            }
        }
        io::to_jsonl(&recs)
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(&self.to_jsonl())
    }
}

pub fn save_fused(data: &FusedDataset, path: &Path, sidecar_path: &Path) -> Result<()> {
    io::write_atomic(path, &data.to_jsonl())?;
    let side = json!({
        "version": io::FORMAT_VERSION,
        "kind": "sidecar",
        "fused_hash": data.hash(),
        "entries": data.sidecar,
    });
    io::write_atomic(sidecar_path, &serde_json::to_vec_pretty(&side).expect("json"))
}

pub fn load_fused(path: &Path, sidecar_path: &Path) -> Result<FusedDataset> {
    let recs = io::read_jsonl(path)?;
    let header = recs.first().ok_or_else(|| Error::parse(0, "<header>", "empty file"))?;
    io::check_version(header)?;
    io::check_kind(header, 0, "fused")?;
    let width: usize = io::field(header, "width", 0)?;
    let height: usize = io::field(header, "height", 0)?;
    let count: usize = io::field(header, "sequences", 0)?;
    let zeta: Vec<serde_json::Value> = io::field(header, "zeta_remaining", 0)?;
    let zeta_remaining = zeta
        .iter()
        .map(|v| {
            let mut m = serde_json::Map::new();
            m.insert("a".into(), v.clone());
            io::parse_action(&m, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sequences = Vec::with_capacity(count);
    let mut i = 1;
    for _ in 0..count {
        let rec = recs
            .get(i)
            .ok_or_else(|| Error::parse(i, "<record>", "file truncated: missing sequence header"))?;
        let src: String = io::field(rec, "src", i)?;
        let len: usize = io::field(rec, "len", i)?;
        i += 1;
        let mut steps = Vec::with_capacity(len);
        for _ in 0..len {
            let rec = recs
                .get(i)
                .ok_or_else(|| Error::parse(i, "<record>", "file truncated inside a sequence"))?;
            if rec.contains_key("w") {
                return Err(Error::parse(i, "w", "fused data must not carry waypoints"));
            }
            steps.push(FusedStep {
                obs: io::parse_observation(rec, i, width, height)?,
                action: io::parse_action(rec, i)?,
            });
            i += 1;
        }
        sequences.push(FusedSequence { src, steps });
    }
    if recs.len() > i {
        return Err(Error::parse(i, "<record>", "unexpected trailing record"));
    }
    let side: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&io::read_bytes(sidecar_path)?).map_err(|e| Error::parse(0, "<sidecar>", e))?;
    io::check_version(&side)?;
    let sidecar: Vec<SidecarEntry> = io::field(&side, "entries", 0)?;
    let data = FusedDataset {
        scenario: io::field(header, "scenario", 0)?,
        seed: io::field(header, "seed", 0)?,
        r: io::field(header, "r", 0)?,
        demo_len: io::field(header, "demo_len", 0)?,
        sequences,
        sidecar,
        zeta_remaining,
        demo_hash: io::field(header, "demo_hash", 0)?,
        collection_hash: io::field(header, "collection_hash", 0)?,
    };
    let fused_hash: String = io::field(&side, "fused_hash", 0)?;
    if fused_hash != data.hash() {
        return Err(Error::Integrity("sidecar belongs to a different fused dataset".into()));
    }
    if data.sidecar.len() != data.sequences.len() {
        return Err(Error::Integrity("sidecar and dataset disagree on the sequence count".into()));
    }
    Ok(data)
}

/// Execute sequence `i` open-loop from its recorded start pose in a freshly
/// reset copy of the collection scene.
pub fn replay_fused(data: &FusedDataset, i: usize, cfg: &SimConfig) -> Result<World> {
    let mut world = sim::reset_with(cfg.clone(), &data.scenario, data.seed, &sim::RandomizationSpec::none())?;
    world.place_ee(data.sidecar[i].start_pose);
    for s in &data.sequences[i].steps {
        demo::execute(&mut world, &s.action);
    }
    Ok(world)
}
