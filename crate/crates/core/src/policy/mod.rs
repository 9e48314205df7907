//! The behavioral-cloning policy: a recurrent visuomotor network plus the
//! demonstration suffix replayed after it hands over.
//!
//! The network consumes observations only. Waypoints never reach it, which
//! is also why translating the whole scene leaves its actions unchanged.
//!
//! Policy files are binary: a magic tag, a JSON header (format version,
//! network config, tensor shapes, R, hidden reset interval, action scales),
//! the parameter block as little-endian f64, the suffix actions and a
//! SHA-256 checksum of everything before it.

pub mod net;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::demo::{Action, Observation};
use crate::error::{Error, Result};
use crate::fusion::FusedDataset;
use crate::geometry::Pose;
use crate::io;
use crate::sim::Gripper;

pub use net::{Layout, Net, NetConfig, StepCache};
pub use train::{Optimizer, TrainConfig, TrainOutcome};

const MAGIC: &[u8; 8] = b"MILESPOL";
pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Net,
    /// Scale of each normalized delta output, (x, y, theta).
    pub action_std: [f64; 3],
    pub scenario: String,
    pub r: usize,
    /// Number of demonstration waypoints.
    pub demo_len: usize,
    pub hidden_reset_interval: usize,
    pub zeta_remaining: Vec<Action>,
    /// Hash of the fused dataset the policy was trained on.
    pub dataset_hash: String,
    pub train_config: TrainConfig,
}

/// Recurrent state carried between deployment ticks.
#[derive(Debug, Clone)]
pub struct PolicyState {
    cache: StepCache,
    ticks_since_reset: usize,
}

impl PolicyState {
    pub fn hidden(&self) -> &[f64] {
        &self.cache.h_prev
    }

    pub fn reset(&mut self) {
        self.cache.h_prev.fill(0.0);
        self.ticks_since_reset = 0;
    }
}

/// Decode a head output into an action.
pub fn decode(out: &[f64; net::OUTPUTS], std: &[f64; 3]) -> Action {
    Action {
        delta: Pose::new(out[0] * std[0], out[1] * std[1], out[2] * std[2]),
        gripper: if out[3] > 0.0 { Gripper::Closed } else { Gripper::Open },
    }
}

/// Run the network over an observation sequence starting from state `h0`.
/// Returns the raw head outputs and the final state.
pub fn forward(net: &Net, obs: &[Observation], h0: &[f64]) -> Result<(Vec<[f64; net::OUTPUTS]>, Vec<f64>)> {
    if h0.len() != net.cfg.hidden {
        return Err(Error::Shape {
            layer: "hidden state".into(),
            expected: net.cfg.hidden.to_string(),
            found: h0.len().to_string(),
        });
    }
    let mut c = StepCache::new(&net.cfg);
    c.h_prev.copy_from_slice(h0);
    let mut outs = Vec::with_capacity(obs.len());
    for o in obs {
        let img = net::encode_image(&o.image, net.cfg.image_size)?;
        net.step(&img, net::encode_force(&o.force, &net.cfg), &mut c);
        outs.push(c.out);
        let h = std::mem::take(&mut c.h);
        c.h_prev.copy_from_slice(&h);
        c.h = h;
    }
    Ok((outs, c.h_prev.clone()))
}

/// Recurrent state reset period for a policy whose data ends at waypoint
/// `r`: twice the number of waypoints with collected data.
pub fn hidden_reset_interval(r: usize) -> usize {
    2 * (r + 1)
}

/// Train a policy on `data`. The suffix, R and the hidden reset interval
/// come from the dataset.
pub fn train(data: &FusedDataset, net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<(Policy, Vec<f64>)> {
    let out = train::fit(data, net_cfg, cfg)?;
    let policy = Policy {
        net: out.net,
        action_std: out.action_std,
        scenario: data.scenario.clone(),
        r: data.r,
        demo_len: data.demo_len,
        hidden_reset_interval: hidden_reset_interval(data.r),
        zeta_remaining: data.zeta_remaining.clone(),
        dataset_hash: data.hash(),
        train_config: cfg.clone(),
    };
    policy.validate()?;
    Ok((policy, out.epoch_loss))
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        if self.demo_len == 0 || self.r >= self.demo_len {
            return Err(Error::Integrity(format!("R = {} outside a {}-waypoint demonstration", self.r, self.demo_len)));
        }
        let complete = self.r + 1 == self.demo_len;
        if complete != self.zeta_remaining.is_empty() {
            return Err(Error::Integrity(
                "the replay suffix must be empty exactly when collection completed".into(),
            ));
        }
        if self.hidden_reset_interval == 0 {
            return Err(Error::Integrity("hidden reset interval must be positive".into()));
        }
        Ok(())
    }

    pub fn new_state(&self) -> PolicyState {
        PolicyState {
            cache: StepCache::new(&self.net.cfg),
            ticks_since_reset: 0,
        }
    }

    /// One closed-loop step. The state is cleared every
    /// `hidden_reset_interval` calls.
    pub fn act(&self, obs: &Observation, state: &mut PolicyState) -> Result<Action> {
        if state.ticks_since_reset == self.hidden_reset_interval {
            state.reset();
        }
        let img = net::encode_image(&obs.image, self.net.cfg.image_size)?;
        let c = &mut state.cache;
        self.net.step(&img, net::encode_force(&obs.force, &self.net.cfg), c);
        let h = std::mem::take(&mut c.h);
        c.h_prev.copy_from_slice(&h);
        c.h = h;
        state.ticks_since_reset += 1;
        Ok(decode(&c.out, &self.action_std))
    }

    /// Actions for a whole observation sequence from a zero state, without
    /// hidden resets.
    pub fn actions(&self, obs: &[Observation]) -> Result<Vec<Action>> {
        let (outs, _) = forward(&self.net, obs, &vec![0.0; self.net.cfg.hidden])?;
        Ok(outs.iter().map(|o| decode(o, &self.action_std)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = PolicyHeader {
            version: POLICY_VERSION,
            net: self.net.cfg.clone(),
            tensors: self
                .net
                .layout
                .tensors
                .iter()
                .map(|t| (t.name.clone(), t.shape.clone()))
                .collect(),
            params: self.net.params.len(),
            action_std: self.action_std,
            scenario: self.scenario.clone(),
            r: self.r,
            demo_len: self.demo_len,
            hidden_reset_interval: self.hidden_reset_interval,
            dataset_hash: self.dataset_hash.clone(),
            train: self.train_config.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&POLICY_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.net.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&(self.zeta_remaining.len() as u64).to_le_bytes());
        for a in &self.zeta_remaining {
            for v in [a.delta.x, a.delta.y, a.delta.theta] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(a.gripper.bit());
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    /// Parse a policy file. When `expected` is given, the stored network
    /// must have the same tensor shapes.
    pub fn from_bytes(bytes: &[u8], expected: Option<&NetConfig>) -> Result<Policy> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::parse(0, "<magic>", "not a policy file"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != POLICY_VERSION {
            return Err(Error::Version {
                found: version,
                expected: POLICY_VERSION,
            });
        }
        let hlen = r.u64()? as usize;
        let header: PolicyHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::parse(0, "<header>", e))?;
        header.net.validate()?;
        let layout = Layout::new(&header.net);
        let stored = Layout {
            tensors: header
                .tensors
                .iter()
                .scan(0, |off, (name, shape)| {
                    let t = net::Tensor {
                        name: name.clone(),
                        shape: shape.clone(),
                        offset: *off,
                    };
                    *off += t.len();
                    Some(t)
                })
                .collect(),
            len: header.params,
        };
        if let Some((layer, expected, found)) = layout.first_mismatch(&stored) {
            return Err(Error::Shape { layer, expected, found });
        }
        if let Some(cfg) = expected {
            if let Some((layer, expected, found)) = Layout::new(cfg).first_mismatch(&layout) {
                return Err(Error::Shape { layer, expected, found });
            }
        }
        if header.params != layout.len {
            return Err(Error::Shape {
                layer: "parameters".into(),
                expected: layout.len.to_string(),
                found: header.params.to_string(),
            });
        }
        let mut params = Vec::with_capacity(layout.len);
        for _ in 0..layout.len {
            params.push(r.f64()?);
        }
        let n = r.u64()? as usize;
        let mut zeta_remaining = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let (x, y, t) = (r.f64()?, r.f64()?, r.f64()?);
            let gripper = match r.take(1)?[0] {
                0 => Gripper::Open,
                1 => Gripper::Closed,
                b => return Err(Error::parse(0, "<suffix>", format!("bad gripper byte {b}"))),
            };
            zeta_remaining.push(Action {
                delta: Pose::new(x, y, t),
                gripper,
            });
        }
        if r.pos != body.len() {
            return Err(Error::parse(0, "<trailer>", "unexpected bytes after the suffix"));
        }
        let policy = Policy {
            net: Net {
                cfg: header.net,
                layout,
                params,
            },
            action_std: header.action_std,
            scenario: header.scenario,
            r: header.r,
            demo_len: header.demo_len,
            hidden_reset_interval: header.hidden_reset_interval,
            zeta_remaining,
            dataset_hash: header.dataset_hash,
            train_config: header.train,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(&self.to_bytes())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyHeader {
    version: u32,
    net: NetConfig,
    tensors: Vec<(String, Vec<usize>)>,
    params: usize,
    action_std: [f64; 3],
    scenario: String,
    r: usize,
    demo_len: usize,
    hidden_reset_interval: usize,
    dataset_hash: String,
    train: TrainConfig,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(0, "<body>", "policy file truncated")),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_policy(policy: &Policy, path: &Path) -> Result<()> {
    io::write_atomic(path, &policy.to_bytes())
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    Policy::from_bytes(&io::read_bytes(path)?, None)
}

/// Load a policy and require its network to match `cfg`.
pub fn load_policy_expecting(path: &Path, cfg: &NetConfig) -> Result<Policy> {
    Policy::from_bytes(&io::read_bytes(path)?, Some(cfg))
}
