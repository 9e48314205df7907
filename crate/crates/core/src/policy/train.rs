//! Behavioral cloning on a fused dataset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{encode_force, encode_image, step_loss, Net, NetConfig, StepCache, Workspace};
use crate::error::{Error, Result};
use crate::fusion::FusedDataset;
use crate::sim::Gripper;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sequences per gradient step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient norm limit.
    pub clip_norm: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Brightness, contrast and pixel-noise jitter on training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            clip_norm: 1.0,
            seed: 0,
            optimizer: Optimizer::Adam,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.epochs > 0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "learning_rate, batch_size, epochs and clip_norm must be positive".into(),
            ))
        }
    }
}

/// One fused sequence, preprocessed for the network.
#[derive(Debug, Clone)]
pub struct SeqTensor {
    /// Pooled images, `len * input_len` values.
    pub images: Vec<f64>,
    pub forces: Vec<[f64; 3]>,
    /// Normalized delta targets.
    pub targets: Vec<[f64; 3]>,
    pub closed: Vec<bool>,
}

impl SeqTensor {
    pub fn len(&self) -> usize {
        self.forces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forces.is_empty()
    }

    pub fn image(&self, t: usize, input_len: usize) -> &[f64] {
        &self.images[t * input_len..(t + 1) * input_len]
    }
}

/// Per-component standard deviation of the action deltas. Components that
/// never vary get a scale of 1.
pub fn action_std(data: &FusedDataset) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0.0;
    for s in &data.sequences {
        for st in &s.steps {
            let d = [st.action.delta.x, st.action.delta.y, st.action.delta.theta];
            for c in 0..3 {
                sum[c] += d[c];
                sq[c] += d[c] * d[c];
            }
            n += 1.0;
        }
    }
    let mut out = [1.0; 3];
    if n > 0.0 {
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            if var.sqrt() > 1e-9 {
                out[c] = var.sqrt();
            }
        }
    }
    out
}

pub fn prepare(data: &FusedDataset, cfg: &NetConfig, std: &[f64; 3]) -> Result<Vec<SeqTensor>> {
    data.sequences
        .iter()
        .map(|s| {
            let mut t = SeqTensor {
                images: Vec::with_capacity(s.len() * cfg.input_len()),
                forces: Vec::with_capacity(s.len()),
                targets: Vec::with_capacity(s.len()),
                closed: Vec::with_capacity(s.len()),
            };
            for st in &s.steps {
                t.images.extend(encode_image(&st.obs.image, cfg.image_size)?);
                t.forces.push(encode_force(&st.obs.force, cfg));
                let d = st.action.delta;
                t.targets.push([d.x / std[0], d.y / std[1], d.theta / std[2]]);
                t.closed.push(st.action.gripper == Gripper::Closed);
            }
            Ok(t)
        })
        .collect()
}

/// Mean per-step loss over `batch` and its gradient (accumulated into
/// `grad`, which is overwritten). Each sequence starts from a zero state.
pub fn loss_and_grad(net: &Net, batch: &[&SeqTensor], grad: &mut [f64]) -> f64 {
    grad.fill(0.0);
    let cfg = &net.cfg;
    let il = cfg.input_len();
    let steps: usize = batch.iter().map(|s| s.len()).sum();
    if steps == 0 {
        return 0.0;
    }
    let scale = 1.0 / steps as f64;
    let max_len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut caches: Vec<StepCache> = (0..max_len).map(|_| StepCache::new(cfg)).collect();
    let mut ws = Workspace::new(cfg);
    let mut total = 0.0;
    let mut douts = vec![[0.0; 4]; max_len];
    for seq in batch {
        let n = seq.len();
        for t in 0..n {
            let (done, rest) = caches.split_at_mut(t);
            let c = &mut rest[0];
            match done.last() {
                Some(prev) => c.h_prev.copy_from_slice(&prev.h),
                None => c.h_prev.fill(0.0),
            }
            net.step(seq.image(t, il), seq.forces[t], c);
            let (l, d) = step_loss(&c.out, &seq.targets[t], seq.closed[t]);
            total += l;
            douts[t] = d.map(|v| v * scale);
        }
        ws.reset_state();
        for t in (0..n).rev() {
            net.step_backward(seq.image(t, il), &caches[t], &douts[t], grad, &mut ws);
        }
    }
    total * scale
}

/// Mean per-step loss without gradients.
pub fn loss(net: &Net, batch: &[&SeqTensor]) -> f64 {
    let cfg = &net.cfg;
    let il = cfg.input_len();
    let mut c = StepCache::new(cfg);
    let (mut total, mut steps) = (0.0, 0usize);
    for seq in batch {
        c.h_prev.fill(0.0);
        for t in 0..seq.len() {
            net.step(seq.image(t, il), seq.forces[t], &mut c);
            total += step_loss(&c.out, &seq.targets[t], seq.closed[t]).0;
            let h = std::mem::take(&mut c.h);
            c.h_prev.copy_from_slice(&h);
            c.h = h;
            steps += 1;
        }
    }
    if steps == 0 {
        0.0
    } else {
        total / steps as f64
    }
}

/// Scale `grad` down to norm `c` if it is longer. Returns the original norm.
pub fn clip_gradient(grad: &mut [f64], c: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > c {
        let s = c / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(n: usize) -> Self {
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::Adam => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
            Optimizer::SgdMomentum => {
                for i in 0..params.len() {
                    self.m[i] = 0.9 * self.m[i] + grad[i];
                    params[i] -= lr * self.m[i];
                }
            }
        }
    }
}

fn jitter<R: Rng>(seq: &SeqTensor, rng: &mut R) -> SeqTensor {
    let brightness = rng.random_range(-0.1..=0.1);
    let contrast = rng.random_range(0.9..=1.1);
    let mut out = seq.clone();
    for v in &mut out.images {
        *v = contrast * *v + brightness + rng.random_range(-0.02..=0.02);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: Net,
    pub action_std: [f64; 3],
    /// Mean per-step training loss of each epoch, epoch 0 first.
    pub epoch_loss: Vec<f64>,
}

pub fn fit(data: &FusedDataset, net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if data.is_empty() || data.total_steps() == 0 {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    let std = action_std(data);
    let seqs = prepare(data, net_cfg, &std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Net::init(net_cfg, &mut rng)?;
    let mut grad = vec![0.0; net.param_count()];
    let mut opt = OptState::new(net.param_count());
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let jittered: Vec<SeqTensor>;
            let batch: Vec<&SeqTensor> = if cfg.augment {
                jittered = chunk.iter().map(|&i| jitter(&seqs[i], &mut rng)).collect();
                jittered.iter().collect()
            } else {
                chunk.iter().map(|&i| &seqs[i]).collect()
            };
            let n: usize = batch.iter().map(|s| s.len()).sum();
            let l = loss_and_grad(&net, &batch, &mut grad);
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            clip_gradient(&mut grad, cfg.clip_norm);
            opt.update(&mut net.params, &grad, cfg);
            sum += l * n as f64;
            steps += n;
        }
        let mean = sum / steps as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        if epoch >= 5 && mean > epoch_loss[epoch - 5] {
            log::warn!(
                "epoch {epoch}: loss {mean:.6} is above epoch {} ({:.6})",
                epoch - 5,
                epoch_loss[epoch - 5]
            );
        }
        epoch_loss.push(mean);
    }
    Ok(TrainOutcome {
        net,
        action_std: std,
        epoch_loss,
    })
}

pub fn loss_csv(epoch_loss: &[f64]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss"]).expect("in-memory csv");
    for (e, l) in epoch_loss.iter().enumerate() {
        w.write_record([e.to_string(), format!("{l:.17e}")]).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}
