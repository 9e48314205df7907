//! The visuomotor network and its hand-written reverse-mode gradients.
//!
//! Per step: the image goes through two strided convolutions and a dense
//! layer, the force reading through a two-layer perceptron, the two
//! embeddings are concatenated and fed to a GRU (or a plain dense layer when
//! memory is disabled) and a linear head emits `(dx, dy, dtheta, gripper
//! logit)`. All layers except the head use ReLU; the recurrent core uses
//! the usual sigmoid/tanh gates.
//!
//! Parameters live in one flat vector; [`Layout`] names the views into it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{ForceReading, Image};

/// Convolution kernel size, stride and padding. Each convolution halves the
/// spatial side.
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
/// Output width of the head.
pub const OUTPUTS: usize = 4;
const KK: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Side of the pooled input image; the camera image is average-pooled
    /// down to it.
    pub image_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub image_embed: usize,
    pub force_hidden: usize,
    pub force_embed: usize,
    /// Recurrent state size.
    pub hidden: usize,
    /// With `false` the GRU is replaced by a feedforward layer of the same
    /// width (the no-memory ablation).
    pub memory: bool,
    /// Multipliers applied to (fx, fy, torque) before the force encoder.
    pub force_scale: [f64; 3],
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 32,
            conv1_channels: 8,
            conv2_channels: 16,
            image_embed: 64,
            force_hidden: 100,
            force_embed: 100,
            hidden: 64,
            memory: true,
            force_scale: [0.1, 0.1, 10.0],
        }
    }
}

impl NetConfig {
    /// Tiny configuration used for gradient checks: 8x8 images, hidden size 4.
    pub fn tiny() -> Self {
        NetConfig {
            image_size: 8,
            conv1_channels: 2,
            conv2_channels: 3,
            image_embed: 5,
            force_hidden: 6,
            force_embed: 4,
            hidden: 4,
            memory: true,
            force_scale: [0.1, 0.1, 10.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.conv1_channels,
            self.conv2_channels,
            self.image_embed,
            self.force_hidden,
            self.force_embed,
            self.hidden,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig("network layer sizes must be positive".into()));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.force_scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("force_scale must be finite".into()));
        }
        Ok(())
    }

    fn side1(&self) -> usize {
        self.image_size / 2
    }

    fn side2(&self) -> usize {
        self.image_size / 4
    }

    /// Length of the flattened second convolution output.
    pub fn conv_features(&self) -> usize {
        self.conv2_channels * self.side2() * self.side2()
    }

    /// Width of the recurrent input.
    pub fn core_input(&self) -> usize {
        self.image_embed + self.force_embed
    }

    pub fn input_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of inputs feeding one output, used for initialization.
    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product::<usize>().max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tensors: Vec<Tensor>,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &NetConfig) -> Layout {
        let (c1, c2, e, i, h) = (
            cfg.conv1_channels,
            cfg.conv2_channels,
            cfg.image_embed,
            cfg.core_input(),
            cfg.hidden,
        );
        let mut spec: Vec<(String, Vec<usize>)> = [
            ("conv1.w".to_string(), vec![c1, 3, KERNEL, KERNEL]),
            ("conv1.b".to_string(), vec![c1]),
            ("conv2.w".to_string(), vec![c2, c1, KERNEL, KERNEL]),
            ("conv2.b".to_string(), vec![c2]),
            ("fc.w".to_string(), vec![e, cfg.conv_features()]),
            ("fc.b".to_string(), vec![e]),
            ("force1.w".to_string(), vec![cfg.force_hidden, 3]),
            ("force1.b".to_string(), vec![cfg.force_hidden]),
            ("force2.w".to_string(), vec![cfg.force_embed, cfg.force_hidden]),
            ("force2.b".to_string(), vec![cfg.force_embed]),
        ]
        .into();
        if cfg.memory {
            for g in ["z", "r", "n"] {
                spec.push((format!("gru.w{g}"), vec![h, i]));
                spec.push((format!("gru.u{g}"), vec![h, h]));
                spec.push((format!("gru.b{g}"), vec![h]));
            }
        } else {
            spec.push(("core.w".to_string(), vec![h, i]));
            spec.push(("core.b".to_string(), vec![h]));
        }
        spec.push(("head.w".to_string(), vec![OUTPUTS, h]));
        spec.push(("head.b".to_string(), vec![OUTPUTS]));
        let mut offset = 0;
        let tensors = spec
            .into_iter()
            .map(|(name, shape)| {
                let t = Tensor {
                    name,
                    shape,
                    offset,
                };
                offset += t.len();
                t
            })
            .collect();
        Layout { tensors, len: offset }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn offset(&self, name: &str) -> usize {
        self.get(name).map(|t| t.offset).unwrap_or(usize::MAX)
    }

    /// First tensor whose shape differs from `other`, by name.
    pub fn first_mismatch(&self, other: &Layout) -> Option<(String, String, String)> {
        for (i, t) in self.tensors.iter().enumerate() {
            match other.tensors.get(i) {
                Some(o) if o.name == t.name && o.shape == t.shape => {}
                Some(o) if o.name == t.name => {
                    return Some((t.name.clone(), format!("{:?}", t.shape), format!("{:?}", o.shape)))
                }
                Some(o) => return Some((t.name.clone(), t.name.clone(), o.name.clone())),
                None => return Some((t.name.clone(), format!("{:?}", t.shape), "nothing".into())),
            }
        }
        if let Some(o) = other.tensors.get(self.tensors.len()) {
            return Some((o.name.clone(), "nothing".into(), format!("{:?}", o.shape)));
        }
        None
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    c1w: usize,
    c1b: usize,
    c2w: usize,
    c2b: usize,
    fcw: usize,
    fcb: usize,
    f1w: usize,
    f1b: usize,
    f2w: usize,
    f2b: usize,
    // GRU gates z, r, n: input weights, recurrent weights, bias. Without
    // memory only the `n` input weights and bias are used (the dense core).
    w: [usize; 3],
    u: [usize; 3],
    b: [usize; 3],
    hw: usize,
    hb: usize,
}

impl Offsets {
    fn new(l: &Layout, memory: bool) -> Self {
        let (w, u, b) = if memory {
            (
                [l.offset("gru.wz"), l.offset("gru.wr"), l.offset("gru.wn")],
                [l.offset("gru.uz"), l.offset("gru.ur"), l.offset("gru.un")],
                [l.offset("gru.bz"), l.offset("gru.br"), l.offset("gru.bn")],
            )
        } else {
            (
                [usize::MAX, usize::MAX, l.offset("core.w")],
                [usize::MAX; 3],
                [usize::MAX, usize::MAX, l.offset("core.b")],
            )
        };
        Offsets {
            c1w: l.offset("conv1.w"),
            c1b: l.offset("conv1.b"),
            c2w: l.offset("conv2.w"),
            c2b: l.offset("conv2.b"),
            fcw: l.offset("fc.w"),
            fcb: l.offset("fc.b"),
            f1w: l.offset("force1.w"),
            f1b: l.offset("force1.b"),
            f2w: l.offset("force2.w"),
            f2b: l.offset("force2.b"),
            w,
            u,
            b,
            hw: l.offset("head.w"),
            hb: l.offset("head.b"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub cfg: NetConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
}

/// Activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    /// Concatenated image and force embeddings.
    pub x: Vec<f64>,
    pub f1: Vec<f64>,
    pub force: [f64; 3],
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub rh: Vec<f64>,
    pub n: Vec<f64>,
    pub h: Vec<f64>,
    pub out: [f64; OUTPUTS],
}

impl StepCache {
    pub fn new(cfg: &NetConfig) -> Self {
        let s1 = cfg.side1();
        let h = cfg.hidden;
        StepCache {
            a1: vec![0.0; cfg.conv1_channels * s1 * s1],
            a2: vec![0.0; cfg.conv_features()],
            x: vec![0.0; cfg.core_input()],
            f1: vec![0.0; cfg.force_hidden],
            force: [0.0; 3],
            h_prev: vec![0.0; h],
            z: vec![0.0; h],
            r: vec![0.0; h],
            rh: vec![0.0; h],
            n: vec![0.0; h],
            h: vec![0.0; h],
            out: [0.0; OUTPUTS],
        }
    }
}

/// Scratch buffers for the backward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    dh: Vec<f64>,
    dh_prev: Vec<f64>,
    dx: Vec<f64>,
    da: [Vec<f64>; 3],
    drh: Vec<f64>,
    df1: Vec<f64>,
    da2: Vec<f64>,
    da1: Vec<f64>,
}

impl Workspace {
    pub fn new(cfg: &NetConfig) -> Self {
        let h = cfg.hidden;
        let s1 = cfg.side1();
        Workspace {
            dh: vec![0.0; h],
            dh_prev: vec![0.0; h],
            dx: vec![0.0; cfg.core_input()],
            da: [vec![0.0; h], vec![0.0; h], vec![0.0; h]],
            drh: vec![0.0; h],
            df1: vec![0.0; cfg.force_hidden],
            da2: vec![0.0; cfg.conv_features()],
            da1: vec![0.0; cfg.conv1_channels * s1 * s1],
        }
    }

    /// Clear the gradient flowing in from later steps, before the last step
    /// of a sequence.
    pub fn reset_state(&mut self) {
        self.dh.fill(0.0);
    }
}

/// Average-pool an RGB image to `size` x `size`, channel-major, centered.
pub fn encode_image(img: &Image, size: usize) -> Result<Vec<f64>> {
    if img.width != img.height || img.width < size || img.width % size != 0 {
        return Err(Error::Shape {
            layer: "input image".into(),
            expected: format!("square image with side a multiple of {size}"),
            found: format!("{}x{}", img.width, img.height),
        });
    }
    let p = img.width / size;
    let norm = 1.0 / (255.0 * (p * p) as f64);
    let mut out = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let mut s = 0u32;
                for dy in 0..p {
                    for dx in 0..p {
                        s += img.get(y * p + dy, x * p + dx, ch) as u32;
                    }
                }
                out[(ch * size + y) * size + x] = s as f64 * norm - 0.5;
            }
        }
    }
    Ok(out)
}

pub fn encode_force(f: &ForceReading, cfg: &NetConfig) -> [f64; 3] {
    [f.fx * cfg.force_scale[0], f.fy * cfg.force_scale[1], f.torque * cfg.force_scale[2]]
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Range of output columns whose input column `2 * ox + kx - PAD` is inside
/// `0..side`.
#[inline]
fn valid_range(k: usize, side: usize, out_side: usize) -> (usize, usize) {
    let lo = if k < PAD { (PAD - k).div_ceil(STRIDE) } else { 0 };
    let hi = ((side + PAD - k - 1) / STRIDE + 1).min(out_side);
    (lo, hi)
}

fn conv_forward(inp: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let os = side / STRIDE;
    let plane = side * side;
    for (co, o) in out.chunks_exact_mut(os * os).enumerate() {
        o.fill(b[co]);
        for ci in 0..cin {
            let src = &inp[ci * plane..(ci + 1) * plane];
            for ky in 0..KERNEL {
                let (ylo, yhi) = valid_range(ky, side, os);
                for kx in 0..KERNEL {
                    let (xlo, xhi) = valid_range(kx, side, os);
                    let wv = w[((co * cin + ci) * KERNEL + ky) * KERNEL + kx];
                    for oy in ylo..yhi {
                        let row = &src[(STRIDE * oy + ky - PAD) * side..];
                        let orow = &mut o[oy * os..(oy + 1) * os];
                        for ox in xlo..xhi {
                            orow[ox] += wv * row[STRIDE * ox + kx - PAD];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    inp: &[f64],
    cin: usize,
    side: usize,
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    let os = side / STRIDE;
    let plane = side * side;
    for (co, d) in dout.chunks_exact(os * os).enumerate() {
        db[co] += d.iter().sum::<f64>();
        for ci in 0..cin {
            let src = &inp[ci * plane..(ci + 1) * plane];
            for ky in 0..KERNEL {
                let (ylo, yhi) = valid_range(ky, side, os);
                for kx in 0..KERNEL {
                    let (xlo, xhi) = valid_range(kx, side, os);
                    let wi = ((co * cin + ci) * KERNEL + ky) * KERNEL + kx;
                    let wv = w[wi];
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = STRIDE * oy + ky - PAD;
                        let row = &src[iy * side..];
                        let drow = &d[oy * os..(oy + 1) * os];
                        for ox in xlo..xhi {
                            acc += drow[ox] * row[STRIDE * ox + kx - PAD];
                        }
                        if let Some(din) = din.as_deref_mut() {
                            let irow = &mut din[ci * plane + iy * side..];
                            for ox in xlo..xhi {
                                irow[STRIDE * ox + kx - PAD] += wv * drow[ox];
                            }
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
}

/// `out = W x + b` with `W` row-major `[out.len(), x.len()]`.
#[inline]
fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W x` (no bias).
#[inline]
fn dense_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulate `dW += d x^T` and, if given, `dx += W^T d`.
#[inline]
fn dense_backward(w: &[f64], x: &[f64], d: &[f64], dw: &mut [f64], dx: Option<&mut [f64]>) {
    let n = x.len();
    for (row, &dv) in dw.chunks_exact_mut(n).zip(d) {
        if dv != 0.0 {
            for (g, xv) in row.iter_mut().zip(x) {
                *g += dv * xv;
            }
        }
    }
    if let Some(dx) = dx {
        for (row, &dv) in w.chunks_exact(n).zip(d) {
            if dv != 0.0 {
                for (g, wv) in dx.iter_mut().zip(row) {
                    *g += dv * wv;
                }
            }
        }
    }
}

impl Net {
    pub fn zeros(cfg: &NetConfig) -> Result<Net> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        Ok(Net {
            cfg: cfg.clone(),
            params: vec![0.0; layout.len],
            layout,
        })
    }

    /// Uniform initialization with variance `1 / fan_in` for weights, zero
    /// biases and a head scaled down by 10.
    pub fn init<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Result<Net> {
        let mut net = Net::zeros(cfg)?;
        for t in &net.layout.tensors {
            if t.shape.len() < 2 {
                continue;
            }
            let mut a = (3.0 / t.fan_in() as f64).sqrt();
            if t.name == "head.w" {
                a *= 0.1;
            }
            for p in &mut net.params[t.offset..t.offset + t.len()] {
                *p = rng.random_range(-a..=a);
            }
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Named view into the parameter vector.
    pub fn view(&self, name: &str) -> Option<(&[f64], &[usize])> {
        self.layout
            .get(name)
            .map(|t| (&self.params[t.offset..t.offset + t.len()], t.shape.as_slice()))
    }

    pub fn view_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.get(name)?.clone();
        Some(&mut self.params[t.offset..t.offset + t.len()])
    }

    fn offsets(&self) -> Offsets {
        Offsets::new(&self.layout, self.cfg.memory)
    }

    /// One step forward. `img` is the pooled image from [`encode_image`],
    /// `force` the scaled reading; `c.h_prev` must hold the incoming state.
    pub fn step(&self, img: &[f64], force: [f64; 3], c: &mut StepCache) {
        let cfg = &self.cfg;
        let p = &self.params;
        let o = self.offsets();
        let (c1, c2, s0, s1) = (cfg.conv1_channels, cfg.conv2_channels, cfg.image_size, cfg.side1());
        let h = cfg.hidden;

        conv_forward(img, 3, s0, &p[o.c1w..o.c1w + c1 * 3 * KK], &p[o.c1b..o.c1b + c1], &mut c.a1);
        c.a1.iter_mut().for_each(|v| *v = v.max(0.0));
        conv_forward(&c.a1, c1, s1, &p[o.c2w..o.c2w + c2 * c1 * KK], &p[o.c2b..o.c2b + c2], &mut c.a2);
        c.a2.iter_mut().for_each(|v| *v = v.max(0.0));

        let e = cfg.image_embed;
        let nf = cfg.conv_features();
        let (xe, xf) = c.x.split_at_mut(e);
        dense(&p[o.fcw..o.fcw + e * nf], &p[o.fcb..o.fcb + e], &c.a2, xe);
        xe.iter_mut().for_each(|v| *v = v.max(0.0));

        c.force = force;
        let fh = cfg.force_hidden;
        let fe = cfg.force_embed;
        dense(&p[o.f1w..o.f1w + fh * 3], &p[o.f1b..o.f1b + fh], &force, &mut c.f1);
        c.f1.iter_mut().for_each(|v| *v = v.max(0.0));
        dense(&p[o.f2w..o.f2w + fe * fh], &p[o.f2b..o.f2b + fe], &c.f1, xf);
        xf.iter_mut().for_each(|v| *v = v.max(0.0));

        let i = cfg.core_input();
        if cfg.memory {
            dense(&p[o.w[0]..o.w[0] + h * i], &p[o.b[0]..o.b[0] + h], &c.x, &mut c.z);
            dense_add(&p[o.u[0]..o.u[0] + h * h], &c.h_prev, &mut c.z);
            c.z.iter_mut().for_each(|v| *v = sigmoid(*v));
            dense(&p[o.w[1]..o.w[1] + h * i], &p[o.b[1]..o.b[1] + h], &c.x, &mut c.r);
            dense_add(&p[o.u[1]..o.u[1] + h * h], &c.h_prev, &mut c.r);
            c.r.iter_mut().for_each(|v| *v = sigmoid(*v));
            for j in 0..h {
                c.rh[j] = c.r[j] * c.h_prev[j];
            }
            dense(&p[o.w[2]..o.w[2] + h * i], &p[o.b[2]..o.b[2] + h], &c.x, &mut c.n);
            dense_add(&p[o.u[2]..o.u[2] + h * h], &c.rh, &mut c.n);
            c.n.iter_mut().for_each(|v| *v = v.tanh());
            for j in 0..h {
                c.h[j] = (1.0 - c.z[j]) * c.n[j] + c.z[j] * c.h_prev[j];
            }
        } else {
            dense(&p[o.w[2]..o.w[2] + h * i], &p[o.b[2]..o.b[2] + h], &c.x, &mut c.n);
            c.n.iter_mut().for_each(|v| *v = v.tanh());
            c.h.copy_from_slice(&c.n);
        }
        dense(&p[o.hw..o.hw + OUTPUTS * h], &p[o.hb..o.hb + OUTPUTS], &c.h, &mut c.out);
    }

    /// Backward through one step. `dout` is the loss gradient on the head
    /// output; `ws.dh` on entry holds the gradient arriving from the next
    /// step and on exit the gradient for the previous state.
    pub fn step_backward(&self, img: &[f64], c: &StepCache, dout: &[f64; OUTPUTS], grad: &mut [f64], ws: &mut Workspace) {
        let cfg = &self.cfg;
        let p = &self.params;
        let o = self.offsets();
        let h = cfg.hidden;
        let i = cfg.core_input();

        dense_backward(&p[o.hw..o.hw + OUTPUTS * h], &c.h, dout, &mut grad[o.hw..o.hw + OUTPUTS * h], Some(&mut ws.dh));
        for (g, d) in grad[o.hb..o.hb + OUTPUTS].iter_mut().zip(dout) {
            *g += d;
        }

        ws.dx.fill(0.0);
        ws.dh_prev.fill(0.0);
        if cfg.memory {
            // h = (1 - z) n + z h_prev
            for j in 0..h {
                let dh = ws.dh[j];
                let dn = dh * (1.0 - c.z[j]);
                ws.da[2][j] = dn * (1.0 - c.n[j] * c.n[j]);
                ws.da[0][j] = dh * (c.h_prev[j] - c.n[j]) * c.z[j] * (1.0 - c.z[j]);
                ws.dh_prev[j] = dh * c.z[j];
            }
            // n = tanh(Wn x + Un (r h_prev) + bn)
            ws.drh.fill(0.0);
            let (wn, un, bn) = (o.w[2], o.u[2], o.b[2]);
            dense_backward(&p[wn..wn + h * i], &c.x, &ws.da[2], &mut grad[wn..wn + h * i], Some(&mut ws.dx));
            dense_backward(&p[un..un + h * h], &c.rh, &ws.da[2], &mut grad[un..un + h * h], Some(&mut ws.drh));
            for j in 0..h {
                grad[bn + j] += ws.da[2][j];
                ws.dh_prev[j] += ws.drh[j] * c.r[j];
                ws.da[1][j] = ws.drh[j] * c.h_prev[j] * c.r[j] * (1.0 - c.r[j]);
            }
            for g in 0..2 {
                let (wg, ug, bg) = (o.w[g], o.u[g], o.b[g]);
                dense_backward(&p[wg..wg + h * i], &c.x, &ws.da[g], &mut grad[wg..wg + h * i], Some(&mut ws.dx));
                dense_backward(&p[ug..ug + h * h], &c.h_prev, &ws.da[g], &mut grad[ug..ug + h * h], Some(&mut ws.dh_prev));
                for j in 0..h {
                    grad[bg + j] += ws.da[g][j];
                }
            }
        } else {
            for j in 0..h {
                ws.da[2][j] = ws.dh[j] * (1.0 - c.n[j] * c.n[j]);
            }
            let (wn, bn) = (o.w[2], o.b[2]);
            dense_backward(&p[wn..wn + h * i], &c.x, &ws.da[2], &mut grad[wn..wn + h * i], Some(&mut ws.dx));
            for j in 0..h {
                grad[bn + j] += ws.da[2][j];
            }
        }
        std::mem::swap(&mut ws.dh, &mut ws.dh_prev);

        // ReLU on both embeddings.
        for (d, x) in ws.dx.iter_mut().zip(&c.x) {
            if *x <= 0.0 {
                *d = 0.0;
            }
        }
        let e = cfg.image_embed;
        let (dxe, dxf) = ws.dx.split_at(e);

        let (fh, fe) = (cfg.force_hidden, cfg.force_embed);
        ws.df1.fill(0.0);
        dense_backward(&p[o.f2w..o.f2w + fe * fh], &c.f1, dxf, &mut grad[o.f2w..o.f2w + fe * fh], Some(&mut ws.df1));
        for (g, d) in grad[o.f2b..o.f2b + fe].iter_mut().zip(dxf) {
            *g += d;
        }
        for (d, a) in ws.df1.iter_mut().zip(&c.f1) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        dense_backward(&p[o.f1w..o.f1w + fh * 3], &c.force, &ws.df1, &mut grad[o.f1w..o.f1w + fh * 3], None);
        for (g, d) in grad[o.f1b..o.f1b + fh].iter_mut().zip(&ws.df1) {
            *g += d;
        }

        let nf = cfg.conv_features();
        ws.da2.fill(0.0);
        dense_backward(&p[o.fcw..o.fcw + e * nf], &c.a2, dxe, &mut grad[o.fcw..o.fcw + e * nf], Some(&mut ws.da2));
        for (g, d) in grad[o.fcb..o.fcb + e].iter_mut().zip(dxe) {
            *g += d;
        }
        for (d, a) in ws.da2.iter_mut().zip(&c.a2) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }

        let (c1, c2, s0, s1) = (cfg.conv1_channels, cfg.conv2_channels, cfg.image_size, cfg.side1());
        ws.da1.fill(0.0);
        let (g_lo, g_hi) = grad.split_at_mut(o.c2b);
        conv_backward(
            &c.a1,
            c1,
            s1,
            &p[o.c2w..o.c2w + c2 * c1 * KK],
            &ws.da2,
            &mut g_lo[o.c2w..o.c2w + c2 * c1 * KK],
            &mut g_hi[..c2],
            Some(&mut ws.da1),
        );
        for (d, a) in ws.da1.iter_mut().zip(&c.a1) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        let (g_lo, g_hi) = grad.split_at_mut(o.c1b);
        conv_backward(
            img,
            3,
            s0,
            &p[o.c1w..o.c1w + c1 * 3 * KK],
            &ws.da1,
            &mut g_lo[o.c1w..o.c1w + c1 * 3 * KK],
            &mut g_hi[..c1],
            None,
        );
    }
}

/// Per-step loss: squared error on the three normalized delta components
/// plus binary cross-entropy on the gripper logit. Returns the loss and its
/// gradient with respect to the head output.
pub fn step_loss(out: &[f64; OUTPUTS], target: &[f64; 3], closed: bool) -> (f64, [f64; OUTPUTS]) {
    let mut loss = 0.0;
    let mut d = [0.0; OUTPUTS];
    for c in 0..3 {
        let e = out[c] - target[c];
        loss += e * e;
        d[c] = 2.0 * e;
    }
    let l = out[3];
    let y = if closed { 1.0 } else { 0.0 };
    loss += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
    d[3] = sigmoid(l) - y;
    (loss, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        for memory in [true, false] {
            let cfg = NetConfig {
                memory,
                ..NetConfig::default()
            };
            let l = Layout::new(&cfg);
            let mut off = 0;
            for t in &l.tensors {
                assert_eq!(t.offset, off);
                off += t.len();
            }
            assert_eq!(off, l.len);
        }
        assert!(Layout::new(&NetConfig::default()).get("gru.un").is_some());
    }

    #[test]
    fn valid_range_matches_bounds() {
        for side in [4usize, 8, 32] {
            let os = side / 2;
            for k in 0..KERNEL {
                let (lo, hi) = valid_range(k, side, os);
                for ox in 0..os {
                    let ix = (STRIDE * ox + k) as isize - PAD as isize;
                    let inside = ix >= 0 && (ix as usize) < side;
                    assert_eq!(inside, ox >= lo && ox < hi, "side {side} k {k} ox {ox}");
                }
            }
        }
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let (l, _) = step_loss(&[0.0; 4], &[0.0; 3], true);
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pooling_averages_blocks() {
        let mut img = Image::new(4, 4);
        for y in 0..2 {
            for x in 0..2 {
                img.data[(y * 4 + x) * 3] = 255;
            }
        }
        let v = encode_image(&img, 2).unwrap();
        assert_eq!(v[0], 0.5);
        assert_eq!(v[1], -0.5);
        assert!(encode_image(&Image::new(6, 6), 4).is_err());
    }
}
