//! Wrist-camera rasterizer.
//!
//! The camera looks straight down at the ground plane and is rigidly attached
//! to the end-effector frame: image up is the end effector's +x axis and
//! image left is its +y axis. Pixels are flat-shaded with supersampled
//! coverage, so sub-pixel motion of edges changes intensities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shape::{Polygon, Vec2};
use super::{Gripper, World};

const BACKGROUND: [f64; 3] = [0.86, 0.83, 0.76];
const TOOL: [f64; 3] = [0.25, 0.25, 0.28];
const FINGER: [f64; 3] = [0.1, 0.1, 0.1];

/// Row-major RGB image with one byte per channel; intensity is `byte / 255`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * Self::CHANNELS],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    #[inline]
    pub fn intensity(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.get(row, col, ch) as f64 / 255.0
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Number of pixels (not channels) that differ.
    pub fn pixel_diff_count(&self, other: &Image) -> usize {
        self.data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .filter(|(a, b)| a != b)
            .count()
    }
}

struct Shape {
    polygon: Polygon,
    lo: Vec2,
    hi: Vec2,
    color: [f64; 3],
}

/// Noise-free render of the wrist camera.
pub fn render(world: &World) -> Image {
    let cfg = world.config();
    let mut scene = Vec::new();
    for obj in world.objects() {
        for (polygon, part) in obj.scene_parts() {
            let (lo, hi) = polygon.bounds();
            scene.push(Shape {
                polygon,
                lo,
                hi,
                color: part.color,
            });
        }
    }
    let finger_y = match world.gripper() {
        Gripper::Open => 0.016,
        Gripper::Closed => 0.011,
    };
    let fingers = [
        Polygon::rect(0.0, finger_y, 0.006, 0.002),
        Polygon::rect(0.0, -finger_y, 0.006, 0.002),
    ];
    let tool_r2 = cfg.ee_radius * cfg.ee_radius;

    let n = cfg.image_size;
    let ss = cfg.supersample;
    let px = cfg.pixel_size();
    let half = n as f64 / 2.0;
    let ee = world.ee_scene_pose();
    let (s, c) = ee.theta.sin_cos();
    let weight = 1.0 / (ss * ss) as f64;

    let mut img = Image::new(n, n);
    for row in 0..n {
        for col in 0..n {
            let mut acc = [0.0; 3];
            for sr in 0..ss {
                let fwd = (half - (row as f64 + (sr as f64 + 0.5) / ss as f64)) * px;
                for sc in 0..ss {
                    let left = (half - (col as f64 + (sc as f64 + 0.5) / ss as f64)) * px;
                    let color = if fingers.iter().any(|f| f.contains([fwd, left])) {
                        FINGER
                    } else if fwd * fwd + left * left <= tool_r2 {
                        TOOL
                    } else {
                        let p = [ee.x + c * fwd - s * left, ee.y + s * fwd + c * left];
                        scene
                            .iter()
                            .rev()
                            .find(|sh| {
                                p[0] >= sh.lo[0]
                                    && p[0] <= sh.hi[0]
                                    && p[1] >= sh.lo[1]
                                    && p[1] <= sh.hi[1]
                                    && sh.polygon.contains(p)
                            })
                            .map_or(BACKGROUND, |sh| sh.color)
                    };
                    for k in 0..3 {
                        acc[k] += color[k];
                    }
                }
            }
            let base = (row * n + col) * 3;
            for k in 0..3 {
                img.data[base + k] = quantize(acc[k] * weight);
            }
        }
    }
    img
}

/// Render with additive Gaussian noise of standard deviation `sigma`,
/// reproducible from `noise_seed`.
pub fn render_noisy(world: &World, noise_seed: u64, sigma: f64) -> Image {
    let mut img = render(world);
    add_noise(&mut img, noise_seed, sigma);
    img
}

pub(crate) fn add_noise(img: &mut Image, noise_seed: u64, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in img.data.iter_mut() {
        let x = *v as f64 / 255.0 + normal.sample(&mut rng);
        *v = quantize(x);
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
