//! Closed-loop rollout with the identity stopping rule, then replay of the
//! demonstration suffix.
//!
//! The identity test is applied before execution: an identity prediction is
//! counted and not executed. After `identity_consecutive` identity
//! predictions in a row, or at the timeout, control passes to the replay of
//! `zeta_remaining`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::demo::{self, Action, Observation};
use crate::error::{Error, Result};
use crate::io;
use crate::policy::{Policy, PolicyState};
use crate::sim::{Scenario, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeployConfig {
    /// meters
    pub identity_eps_trans: f64,
    /// radians
    pub identity_eps_rot: f64,
    pub identity_consecutive: usize,
    pub timeout_ticks: usize,
    /// Hz
    pub tick_rate: f64,
}

impl Default for DeployConfig {
    fn default() -> Self {
        DeployConfig {
            identity_eps_trans: 0.0005,
            identity_eps_rot: 0.25f64.to_radians(),
            identity_consecutive: 3,
            // 20 s at 10 Hz
            timeout_ticks: 200,
            tick_rate: 10.0,
        }
    }
}

impl DeployConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.identity_eps_trans > 0.0
            && self.identity_eps_rot > 0.0
            && self.identity_consecutive > 0
            && self.timeout_ticks > 0
            && self.tick_rate > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("deploy settings must all be positive".into()))
        }
    }
}

pub fn is_identity_action(a: &Action, cfg: &DeployConfig) -> bool {
    a.delta.translation_norm() <= cfg.identity_eps_trans && a.delta.theta.abs() <= cfg.identity_eps_rot
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchedBy {
    Identity,
    Timeout,
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: usize,
    /// Magnitude of the force reading.
    pub force: f64,
    /// Mean pixel intensity in [0, 1].
    pub brightness: f64,
    pub action: Action,
    pub executed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub ticks_closed_loop: usize,
    pub switched_by: SwitchedBy,
    pub replayed: usize,
    pub trace: Vec<TraceEntry>,
}

/// Anything that maps observations to actions during an episode. The world
/// is passed for scripted reference controllers; learned policies ignore it.
pub trait Controller {
    fn act(&mut self, obs: &Observation, world: &World) -> Result<Action>;
}

pub struct PolicyController<'a> {
    policy: &'a Policy,
    state: PolicyState,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a Policy) -> Self {
        PolicyController {
            policy,
            state: policy.new_state(),
        }
    }
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, obs: &Observation, _world: &World) -> Result<Action> {
        self.policy.act(obs, &mut self.state)
    }
}

/// Emit the action recorded with the closest dataset image (squared L2 on
/// raw pixels). Used as a coverage oracle, not as a method.
#[derive(Debug, Clone)]
pub struct NearestNeighbor {
    images: Vec<Vec<u8>>,
    actions: Vec<Action>,
}

impl NearestNeighbor {
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a Observation, Action)>) -> Self {
        let (images, actions) = pairs.into_iter().map(|(o, a)| (o.image.data.clone(), a)).unzip();
        NearestNeighbor { images, actions }
    }

    pub fn lookup(&self, obs: &Observation) -> Option<usize> {
        let q = &obs.image.data;
        let mut best: Option<(u64, usize)> = None;
        for (i, img) in self.images.iter().enumerate() {
            if img.len() != q.len() {
                continue;
            }
            let mut d = 0u64;
            for (a, b) in img.iter().zip(q) {
                let e = *a as i64 - *b as i64;
                d += (e * e) as u64;
            }
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i)
    }
}

impl Controller for NearestNeighbor {
    fn act(&mut self, obs: &Observation, _world: &World) -> Result<Action> {
        let i = self.lookup(obs).ok_or_else(|| Error::Invalid("nearest-neighbor table is empty".into()))?;
        Ok(self.actions[i])
    }
}

/// Run one episode: closed loop until the stopping rule or the timeout, then
/// replay `zeta_remaining`, then evaluate the scenario's success predicate.
pub fn run_episode(
    ctrl: &mut dyn Controller,
    world: &mut World,
    zeta_remaining: &[Action],
    cfg: &DeployConfig,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let scenario = Scenario::get(world.scenario_id())?;
    let mut trace = Vec::new();
    let mut consecutive = 0;
    let mut stopped = false;
    while trace.len() < cfg.timeout_ticks {
        let obs = demo::observe(world);
        let action = ctrl.act(&obs, world)?;
        let identity = is_identity_action(&action, cfg);
        if !identity {
            demo::execute(world, &action.clipped(world.config()));
        }
        trace.push(TraceEntry {
            tick: trace.len(),
            force: obs.force.magnitude(),
            brightness: obs.image.data.iter().map(|&v| v as f64).sum::<f64>() / (255.0 * obs.image.data.len() as f64),
            action,
            executed: !identity,
        });
        if identity {
            consecutive += 1;
            if consecutive >= cfg.identity_consecutive {
                stopped = true;
                break;
            }
        } else {
            consecutive = 0;
        }
    }
    let ticks_closed_loop = trace.len();
    let switched_by = if zeta_remaining.is_empty() {
        SwitchedBy::NotApplicable
    } else if stopped {
        SwitchedBy::Identity
    } else {
        SwitchedBy::Timeout
    };
    for a in zeta_remaining {
        demo::execute(world, a);
    }
    Ok(EpisodeResult {
        success: scenario.success(world),
        ticks_closed_loop,
        switched_by,
        replayed: zeta_remaining.len(),
        trace,
    })
}

/// Deploy a trained policy in `world`.
pub fn deploy(policy: &Policy, world: &mut World, cfg: &DeployConfig) -> Result<EpisodeResult> {
    let mut ctrl = PolicyController::new(policy);
    run_episode(&mut ctrl, world, &policy.zeta_remaining, cfg)
}

/// Episode traces as JSON lines: one header record per episode followed by
/// its ticks.
pub fn traces_jsonl(episodes: &[EpisodeResult]) -> Vec<u8> {
    let mut recs = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        recs.push(json!({
            "episode": i,
            "success": e.success,
            "ticks_closed_loop": e.ticks_closed_loop,
            "switched_by": e.switched_by,
            "replayed": e.replayed,
        }));
        for t in &e.trace {
            recs.push(json!({
                "t": t.tick,
                "force": t.force,
                "brightness": t.brightness,
                "a": io::action_value(&t.action),
                "executed": t.executed,
            }));
        }
    }
    io::to_jsonl(&recs)
}

pub fn save_traces(episodes: &[EpisodeResult], path: &Path) -> Result<()> {
    io::write_atomic(path, &traces_jsonl(episodes))
}
