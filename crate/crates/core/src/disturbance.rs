//! Scene-disturbance detection by patch-feature cosine similarity.
//!
//! Every image is cut into a grid of square patches. Each patch gets a small
//! unit-norm descriptor and two images are compared by the mean cosine
//! similarity of corresponding patches. A live view whose similarity to the
//! demonstration view falls below a threshold means the scene has changed.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{Demonstration, Observation};
use crate::error::{Error, Result};
use crate::geometry::{Pose, PoseTolerance};
use crate::sim::{self, render, Image, Scenario, SimConfig, World};

/// Threshold used by the collector unless calibration overrides it.
pub const DEFAULT_THETA: f64 = 0.94;

/// Magnitude separating weak from strong gradients in the histograms.
const STRONG_GRADIENT: f64 = 0.08;
/// Constant component so that flat mid-gray patches still have a direction.
const BIAS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureExtractor {
    /// Mean colour plus horizontal and vertical gradient histograms.
    PatchDescriptor { patch_size: usize },
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::PatchDescriptor { patch_size: 8 }
    }
}

impl FeatureExtractor {
    pub const DIM: usize = 3 + 8 + 1;

    pub fn patch_size(&self) -> usize {
        match self {
            FeatureExtractor::PatchDescriptor { patch_size } => *patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size() == 0 {
            return Err(Error::InvalidConfig("extractor.patch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A `grid x grid` array of unit vectors of length `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub grid: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PatchFeatures {
    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }
}

pub fn extract_features(img: &Image, ex: &FeatureExtractor) -> Result<PatchFeatures> {
    let p = ex.patch_size();
    if p == 0 || img.width != img.height || img.width % p != 0 {
        return Err(Error::Shape {
            layer: "feature extractor".into(),
            expected: format!("square image with side divisible by {p}"),
            found: format!("{}x{}", img.width, img.height),
        });
    }
    let grid = img.width / p;
    let dim = FeatureExtractor::DIM;
    let gray = |r: usize, c: usize| {
        (img.intensity(r, c, 0) + img.intensity(r, c, 1) + img.intensity(r, c, 2)) / 3.0
    };
    let mut data = Vec::with_capacity(grid * grid * dim);
    let area = (p * p) as f64;
    for gr in 0..grid {
        for gc in 0..grid {
            let mut f = [0.0; FeatureExtractor::DIM];
            for r in gr * p..(gr + 1) * p {
                for c in gc * p..(gc + 1) * p {
                    for ch in 0..3 {
                        f[ch] += img.intensity(r, c, ch);
                    }
                    let g = gray(r, c);
                    if c + 1 < img.width {
                        bin(&mut f[3..7], gray(r, c + 1) - g);
                    }
                    if r + 1 < img.height {
                        bin(&mut f[7..11], gray(r + 1, c) - g);
                    }
                }
            }
            for v in f.iter_mut().take(11) {
                *v /= area;
            }
            for v in f.iter_mut().take(3) {
                *v -= 0.5;
            }
            for v in f[3..11].iter_mut() {
                *v *= 4.0;
            }
            f[11] = BIAS;
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(f.iter().map(|v| v / n));
        }
    }
    Ok(PatchFeatures { grid, dim, data })
}

fn bin(h: &mut [f64], d: f64) {
    let i = match d {
        d if d <= -STRONG_GRADIENT => 0,
        d if d < 0.0 => 1,
        d if d < STRONG_GRADIENT => 2,
        _ => 3,
    };
    h[i] += d.abs();
}

/// Mean over patches of the dot product of corresponding unit vectors.
pub fn avg_cosine_similarity(a: &PatchFeatures, b: &PatchFeatures) -> Result<f64> {
    if a.grid != b.grid || a.dim != b.dim || a.data.len() != b.data.len() {
        return Err(Error::Shape {
            layer: "patch features".into(),
            expected: format!("{0}x{0}x{1}", a.grid, a.dim),
            found: format!("{0}x{0}x{1}", b.grid, b.dim),
        });
    }
    let n = a.patches();
    if n == 0 {
        return Err(Error::Invalid("empty feature grid".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        total += a.patch(i).iter().zip(b.patch(i)).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

pub fn image_similarity(a: &Image, b: &Image, ex: &FeatureExtractor) -> Result<f64> {
    avg_cosine_similarity(&extract_features(a, ex)?, &extract_features(b, ex)?)
}

/// True when the live view differs from the demonstration view.
pub fn check_env_disturbance(
    demo_obs: &Observation,
    live_img: &Image,
    theta: f64,
    ex: &FeatureExtractor,
) -> Result<bool> {
    if !demo_obs.image.same_dims(live_img) {
        return Err(Error::Shape {
            layer: "disturbance check".into(),
            expected: format!("{}x{}", demo_obs.image.width, demo_obs.image.height),
            found: format!("{}x{}", live_img.width, live_img.height),
        });
    }
    Ok(image_similarity(&demo_obs.image, live_img, ex)? < theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub pairs: usize,
    /// Camera noise added to every calibration render.
    pub noise: f64,
    /// Smallest displacement that must be detected, pixels.
    pub min_disturbance_px: f64,
    pub max_disturbance_px: f64,
    /// Displacements of the monotonicity grid, pixels.
    pub grid_px: Vec<f64>,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            pairs: 100,
            noise: 0.02,
            min_disturbance_px: 8.0,
            max_disturbance_px: 16.0,
            grid_px: vec![0.0, 2.0, 4.0, 8.0, 16.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub scenario: String,
    /// Object displacement in pixels; 0 for undisturbed pairs.
    pub displacement: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scenario: String,
    /// Midpoint of the gap between the two populations.
    pub theta: f64,
    pub min_undisturbed: f64,
    pub max_disturbed: f64,
    /// Mean similarity over the waypoints for each grid displacement.
    pub grid: Vec<(f64, f64)>,
    pub rows: Vec<CalibrationRow>,
}

impl Calibration {
    pub fn separates(&self) -> bool {
        self.max_disturbed < self.min_undisturbed
    }

    pub fn monotone(&self) -> bool {
        self.grid.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn to_csv(rows: &[CalibrationRow]) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// Scene snapshots at every demonstration waypoint, obtained by replaying
/// the demonstration in a fresh world.
pub fn demo_snapshots(cfg: &SimConfig, demo: &Demonstration) -> Result<Vec<World>> {
    let mut world = sim::reset_with(cfg.clone(), &demo.scenario, demo.seed, &sim::RandomizationSpec::none())?;
    let mut out = Vec::with_capacity(demo.len());
    for s in &demo.steps {
        out.push(world.clone());
        crate::demo::execute(&mut world, &s.action);
    }
    Ok(out)
}

fn displaced(world: &World, object: usize, offset: [f64; 2]) -> World {
    let mut w = world.clone();
    let p = &mut w.objects_mut()[object].pose;
    p.x += offset[0];
    p.y += offset[1];
    w
}

/// Render disturbed and undisturbed pairs at the demonstration waypoints and
/// pick the threshold halfway between the two similarity populations.
/// Undisturbed views carry camera noise and an end-effector pose error up to
/// `pose_tol`; disturbed views move the scenario's key object.
pub fn calibrate(
    cfg: &SimConfig,
    demo: &Demonstration,
    ex: &FeatureExtractor,
    pose_tol: &PoseTolerance,
    cal: &CalibrationConfig,
) -> Result<Calibration> {
    if cal.pairs == 0 || cal.min_disturbance_px <= 0.0 || cal.max_disturbance_px < cal.min_disturbance_px {
        return Err(Error::InvalidConfig("calibration needs pairs > 0 and a valid displacement range".into()));
    }
    let key = Scenario::get(&demo.scenario)?.key_object;
    let snaps = demo_snapshots(cfg, demo)?;
    let refs = snaps
        .iter()
        .map(|w| extract_features(&render(w), ex))
        .collect::<Result<Vec<_>>>()?;
    let px = cfg.pixel_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cal.seed);
    let mut rows = Vec::new();
    let mut min_undisturbed = f64::INFINITY;
    let mut max_disturbed = f64::NEG_INFINITY;
    let noisy = |w: &World, seed: u64| -> Result<PatchFeatures> {
        extract_features(&sim::render_noisy(w, seed, cal.noise), ex)
    };
    for i in 0..cal.pairs {
        let n = i % snaps.len();
        // Undisturbed: small pose error plus noise.
        let mut w = snaps[n].clone();
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(0.0..=pose_tol.trans_tol());
        let dth = rng.random_range(-pose_tol.rot_tol()..=pose_tol.rot_tol());
        let ee = w.ee_pose();
        w.teleport_ee(ee.compose(&Pose::new(r * ang.cos(), r * ang.sin(), dth)));
        let s = avg_cosine_similarity(&refs[n], &noisy(&w, rng.random())?)?;
        min_undisturbed = min_undisturbed.min(s);
        rows.push(CalibrationRow {
            scenario: demo.scenario.clone(),
            displacement: 0.0,
            similarity: s,
        });
        // Disturbed: key object moved in a random direction.
        let d = rng.random_range(cal.min_disturbance_px..=cal.max_disturbance_px);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let moved = displaced(&snaps[n], key, [d * px * ang.cos(), d * px * ang.sin()]);
        let s = avg_cosine_similarity(&refs[n], &noisy(&moved, rng.random())?)?;
        max_disturbed = max_disturbed.max(s);
        rows.push(CalibrationRow {
            scenario: demo.scenario.clone(),
            displacement: d,
            similarity: s,
        });
    }
    // Noise-free displacement grid along the key object's +x axis.
    let mut grid = Vec::new();
    for &d in &cal.grid_px {
        let mut total = 0.0;
        for (n, w) in snaps.iter().enumerate() {
            let dir = w.objects()[key].pose.theta;
            let moved = displaced(w, key, [d * px * dir.cos(), d * px * dir.sin()]);
            total += avg_cosine_similarity(&refs[n], &extract_features(&render(&moved), ex)?)?;
        }
        grid.push((d, total / snaps.len() as f64));
    }
    Ok(Calibration {
        scenario: demo.scenario.clone(),
        theta: 0.5 * (min_undisturbed + max_disturbed),
        min_undisturbed,
        max_disturbed,
        grid,
        rows,
    })
}

/// One line per scenario summarising calibrations.
pub fn summary(cals: &[Calibration]) -> String {
    let mut s = String::new();
    for c in cals {
        let _ = writeln!(
            s,
            "{}: theta={:.4} undisturbed>={:.4} disturbed<={:.4}",
            c.scenario, c.theta, c.min_undisturbed, c.max_disturbed
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(grid: usize, rows: &[&[f64]]) -> PatchFeatures {
        PatchFeatures {
            grid,
            dim: rows[0].len(),
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[test]
    fn uniform_image_has_identical_patches() {
        let img = Image::filled(64, 64, [0, 0, 0]);
        let f = extract_features(&img, &FeatureExtractor::default()).unwrap();
        assert_eq!(f.grid, 8);
        for i in 1..f.patches() {
            assert_eq!(f.patch(i), f.patch(0));
        }
        for i in 0..f.patches() {
            let n: f64 = f.patch(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_indivisible_images() {
        let img = Image::filled(60, 60, [9, 9, 9]);
        assert!(extract_features(&img, &FeatureExtractor::default()).is_err());
    }

    #[test]
    fn hand_built_similarities() {
        let a = feats(2, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(avg_cosine_similarity(&a, &a).unwrap(), 1.0);
        let neg = PatchFeatures {
            data: a.data.iter().map(|v| -v).collect(),
            ..a.clone()
        };
        assert_eq!(avg_cosine_similarity(&a, &neg).unwrap(), -1.0);
        let b = PatchFeatures {
            data: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            ..a.clone()
        };
        assert_eq!(avg_cosine_similarity(&a, &b).unwrap(), 0.5);
        assert_eq!(avg_cosine_similarity(&b, &a).unwrap(), 0.5);
    }

    #[test]
    fn identical_view_is_not_a_disturbance() {
        let w = sim::reset("push-block", 0, &sim::RandomizationSpec::none()).unwrap();
        let obs = Observation {
            image: render(&w),
            force: w.read_force(),
        };
        let ex = FeatureExtractor::default();
        assert!(!check_env_disturbance(&obs, &obs.image, DEFAULT_THETA, &ex).unwrap());
        assert_eq!(image_similarity(&obs.image, &obs.image, &ex).unwrap(), 1.0);
    }
}
