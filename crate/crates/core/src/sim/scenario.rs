//! Registered task scenarios.
//!
//! Every scenario starts with the end effector at rest at the scene origin,
//! heading +x. Scene layouts, scripted demonstrations and success predicates
//! are expressed relative to the task objects so that randomizing the object
//! poses at reset changes nothing but the relative start pose.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::shape::Polygon;
use super::{Gripper, Hinge, Part, SceneObject, ShapeKind, SimConfig, World};
use crate::error::{Error, Result};
use crate::geometry::{PoseTolerance, Pose};

pub type ScenarioId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RandomizationShape {
    #[default]
    Box,
    Sphere,
}

/// Range of the random object offset applied at reset. The offset is a
/// rigid transform about the scene origin (the end-effector start).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomizationSpec {
    pub trans_range: f64,
    pub rot_range: f64,
    #[serde(default)]
    pub shape: RandomizationShape,
}

impl Default for RandomizationSpec {
    fn default() -> Self {
        RandomizationSpec::none()
    }
}

impl RandomizationSpec {
    pub fn none() -> Self {
        RandomizationSpec {
            trans_range: 0.0,
            rot_range: 0.0,
            shape: RandomizationShape::Box,
        }
    }

    pub fn boxed(trans_range: f64, rot_range: f64) -> Self {
        RandomizationSpec {
            trans_range,
            rot_range,
            shape: RandomizationShape::Box,
        }
    }

    pub fn sphere(radius: f64, rot_range: f64) -> Self {
        RandomizationSpec {
            trans_range: radius,
            rot_range,
            shape: RandomizationShape::Sphere,
        }
    }

    pub fn is_none(&self) -> bool {
        self.trans_range == 0.0 && self.rot_range == 0.0
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Pose {
        if self.is_none() {
            return Pose::IDENTITY;
        }
        let (dx, dy) = match self.shape {
            RandomizationShape::Box => (
                sym(rng, self.trans_range),
                sym(rng, self.trans_range),
            ),
            RandomizationShape::Sphere => loop {
                let (x, y) = (sym(rng, self.trans_range), sym(rng, self.trans_range));
                if x.hypot(y) <= self.trans_range {
                    break (x, y);
                }
            },
        };
        Pose::new(dx, dy, sym(rng, self.rot_range))
    }
}

fn sym<R: Rng>(rng: &mut R, range: f64) -> f64 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptPoint {
    pub pose: Pose,
    pub gripper: Gripper,
}

/// Key poses of a scripted demonstration, in the canonical scene frame. The
/// recorder interpolates between them at the per-tick step limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointScript {
    pub points: Vec<ScriptPoint>,
}

impl WaypointScript {
    pub fn straight(points: &[(f64, f64, f64)]) -> Self {
        WaypointScript {
            points: points
                .iter()
                .map(|&(x, y, t)| ScriptPoint {
                    pose: Pose::new(x, y, t),
                    gripper: Gripper::Open,
                })
                .collect(),
        }
    }
}

pub struct Scenario {
    pub id: &'static str,
    pub description: &'static str,
    build: fn() -> Vec<SceneObject>,
    script: fn() -> WaypointScript,
    success: fn(&World) -> bool,
    /// Object used as the reference for success and disturbance calibration.
    pub key_object: usize,
    /// Collector force limit appropriate for this task, newtons.
    pub force_limit: Option<f64>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario").field("id", &self.id).finish()
    }
}

pub static SCENARIOS: &[Scenario] = &[
    Scenario {
        id: "reach",
        description: "free-space reach to a pose next to two markers",
        build: reach_objects,
        script: reach_script,
        success: reach_success,
        key_object: 0,
        force_limit: None,
    },
    Scenario {
        id: "peg",
        description: "insert the tool into a low-clearance slot",
        build: peg_objects,
        script: peg_script,
        success: peg_success,
        key_object: 0,
        force_limit: None,
    },
    Scenario {
        id: "push-block",
        description: "push a movable block forward",
        build: push_objects,
        script: push_script,
        success: push_success,
        key_object: 0,
        force_limit: Some(2.0),
    },
    Scenario {
        id: "lid",
        description: "swing a hinged lid open",
        build: lid_objects,
        script: lid_script,
        success: lid_success,
        key_object: 0,
        force_limit: Some(2.0),
    },
];

impl Scenario {
    pub fn get(id: &str) -> Result<&'static Scenario> {
        SCENARIOS
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownScenario(id.to_string()))
    }

    pub fn canonical_objects(&self) -> Vec<SceneObject> {
        (self.build)()
    }

    pub fn script(&self) -> WaypointScript {
        (self.script)()
    }

    pub fn success(&self, world: &World) -> bool {
        (self.success)(world)
    }
}

pub fn reset(scenario: &str, seed: u64, randomization: &RandomizationSpec) -> Result<World> {
    reset_with(SimConfig::default(), scenario, seed, randomization)
}

pub fn reset_with(
    cfg: SimConfig,
    scenario: &str,
    seed: u64,
    randomization: &RandomizationSpec,
) -> Result<World> {
    let sc = Scenario::get(scenario)?;
    cfg.validate()?;
    let mut world = World::new(cfg, sc.id, sc.canonical_objects(), seed);
    let offset = randomization.sample(world.rng_mut());
    for obj in world.objects_mut() {
        obj.pose = offset.compose(&obj.pose);
    }
    Ok(world)
}

const WALL: [f64; 3] = [0.30, 0.55, 0.35];
const WALL_B: [f64; 3] = [0.20, 0.45, 0.55];

fn fixed(name: &str, shape: ShapeKind, friction: f64, parts: Vec<Part>) -> SceneObject {
    SceneObject {
        name: name.into(),
        shape,
        pose: Pose::IDENTITY,
        movable: false,
        hinge_angle: 0.0,
        hinge: None,
        friction_coeff: friction,
        resistance: f64::INFINITY,
        parts,
    }
}

fn part(polygon: Polygon, color: [f64; 3]) -> Part {
    Part {
        polygon,
        color,
        solid: true,
        articulated: false,
    }
}

fn decal(polygon: Polygon, color: [f64; 3]) -> Part {
    Part {
        polygon,
        color,
        solid: false,
        articulated: false,
    }
}

/// Pose of the end effector relative to object `i`.
fn ee_in_object(world: &World, i: usize) -> Pose {
    world.objects()[i].pose.relative(&world.ee_scene_pose())
}

// reach: two markers flank the path, never within reach of the sampling box.

fn reach_objects() -> Vec<SceneObject> {
    vec![
        fixed(
            "marker",
            ShapeKind::Box,
            0.5,
            vec![
                part(Polygon::rect(0.045, 0.07, 0.02, 0.015), [0.80, 0.25, 0.20]),
                decal(Polygon::rect(0.057, 0.076, 0.007, 0.006), [0.95, 0.85, 0.20]),
            ],
        ),
        fixed(
            "tag",
            ShapeKind::Box,
            0.5,
            vec![part(Polygon::rect(0.02, -0.07, 0.012, 0.014), [0.20, 0.35, 0.80])],
        ),
    ]
}

fn reach_script() -> WaypointScript {
    WaypointScript::straight(&[(0.045, 0.0, 20f64.to_radians())])
}

fn reach_success(world: &World) -> bool {
    let goal = Pose::new(0.045, 0.0, 20f64.to_radians());
    let tol = PoseTolerance::new(0.01, 5f64.to_radians()).expect("positive");
    ee_in_object(world, 0).approx_eq(&goal, &tol)
}

// peg: a socket whose slot is 4 mm wider than the tool, with a chamfered mouth.

fn peg_objects() -> Vec<SceneObject> {
    vec![fixed(
        "socket",
        ShapeKind::SocketWithSlot,
        1.0,
        vec![
            decal(Polygon::rect(0.115, 0.0, 0.025, 0.012), [0.45, 0.40, 0.35]),
            part(
                Polygon::new(vec![
                    [0.08, 0.022],
                    [0.09, 0.012],
                    [0.14, 0.012],
                    [0.14, 0.05],
                    [0.08, 0.05],
                ]),
                WALL,
            ),
            part(
                Polygon::new(vec![
                    [0.08, -0.05],
                    [0.14, -0.05],
                    [0.14, -0.012],
                    [0.09, -0.012],
                    [0.08, -0.022],
                ]),
                WALL_B,
            ),
            part(Polygon::rect(0.15, 0.0, 0.01, 0.05), [0.35, 0.35, 0.40]),
            decal(Polygon::rect(0.11, 0.038, 0.012, 0.006), [0.90, 0.90, 0.30]),
        ],
    )]
}

fn peg_script() -> WaypointScript {
    WaypointScript::straight(&[(0.125, 0.0, 0.0)])
}

fn peg_success(world: &World) -> bool {
    let p = ee_in_object(world, 0);
    p.x >= 0.11 && p.y.abs() <= 0.012
}

// push-block: a movable block in front of the start pose.

pub(crate) const PUSH_DISTANCE: f64 = 0.06;

fn push_objects() -> Vec<SceneObject> {
    let mut block = fixed(
        "block",
        ShapeKind::Box,
        0.3,
        vec![
            part(Polygon::rect(0.0, 0.0, 0.02, 0.02), [0.90, 0.55, 0.15]),
            decal(Polygon::rect(0.0, 0.01, 0.02, 0.004), [0.55, 0.20, 0.10]),
        ],
    );
    block.pose = Pose::from_translation(0.11, 0.0);
    block.movable = true;
    block.resistance = 3.0;
    let pad = fixed(
        "pad",
        ShapeKind::Box,
        0.5,
        vec![
            decal(Polygon::rect(0.15, -0.05, 0.05, 0.008), [0.35, 0.65, 0.40]),
            decal(Polygon::rect(0.15, 0.05, 0.05, 0.008), [0.55, 0.70, 0.85]),
        ],
    );
    vec![block, pad]
}

fn push_script() -> WaypointScript {
    WaypointScript::straight(&[(0.08 + PUSH_DISTANCE, 0.0, 0.0)])
}

fn push_success(world: &World) -> bool {
    // The pad moves with the initial block placement, so it carries the
    // block's start pose.
    let start = world.objects()[1].pose.compose(&Pose::from_translation(0.11, 0.0));
    let moved = start.relative(&world.objects()[0].pose);
    (moved.x - PUSH_DISTANCE).abs() <= 0.015 && moved.y.abs() <= 0.015
}

// lid: a lid hinged at its lower end, pushed open clockwise.

fn lid_objects() -> Vec<SceneObject> {
    let mut box_ = fixed(
        "lidbox",
        ShapeKind::HingedLid,
        0.4,
        vec![
            part(Polygon::rect(0.105, -0.06, 0.012, 0.01), [0.35, 0.35, 0.40]),
            decal(Polygon::rect(0.16, 0.0, 0.04, 0.05), [0.75, 0.72, 0.60]),
            Part {
                polygon: Polygon::rect(0.105, 0.0, 0.005, 0.05),
                color: [0.55, 0.30, 0.65],
                solid: true,
                articulated: true,
            },
            Part {
                polygon: Polygon::rect(0.105, 0.04, 0.005, 0.01),
                color: [0.95, 0.90, 0.95],
                solid: false,
                articulated: true,
            },
        ],
    );
    box_.hinge = Some(Hinge {
        anchor: [0.105, -0.05],
        direction: -1.0,
        max_angle: 80f64.to_radians(),
    });
    box_.resistance = 3.0;
    vec![box_]
}

fn lid_script() -> WaypointScript {
    WaypointScript::straight(&[(0.085, 0.03, 0.0), (0.16, 0.03, 0.0)])
}

fn lid_success(world: &World) -> bool {
    world.objects()[0].hinge_angle >= 25f64.to_radians()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unknown_scenario_rejected() {
        assert!(matches!(
            reset("nope", 0, &RandomizationSpec::none()),
            Err(Error::UnknownScenario(_))
        ));
    }

    #[test]
    fn zero_randomization_is_canonical() {
        for sc in SCENARIOS {
            let w = reset(sc.id, 5, &RandomizationSpec::none()).unwrap();
            assert_eq!(w.ee_pose(), Pose::IDENTITY);
            assert_eq!(w.objects(), sc.canonical_objects().as_slice());
        }
    }

    #[test]
    fn sphere_randomization_stays_in_radius() {
        let spec = RandomizationSpec::sphere(0.20, 0.0);
        for seed in 0..50 {
            let w = reset("peg", seed, &spec).unwrap();
            let p = w.object_pose(0);
            assert!(p.translation_norm() <= 0.20 + 1e-12);
        }
        let w = reset("peg", 7, &spec).unwrap();
        assert!(w.object_pose(0).translation_norm() > 0.0);
    }

    #[test]
    fn reset_is_deterministic() {
        let spec = RandomizationSpec::boxed(0.04, 0.07);
        let a = reset("lid", 11, &spec).unwrap();
        let b = reset("lid", 11, &spec).unwrap();
        assert_eq!(a, b);
        let c = reset("lid", 12, &spec).unwrap();
        assert_ne!(a.objects(), c.objects());
    }

    #[test]
    fn box_samples_stay_in_box() {
        let spec = RandomizationSpec::boxed(0.04, 0.07);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = spec.sample(&mut rng);
            assert!(p.x.abs() <= 0.04 && p.y.abs() <= 0.04 && p.theta.abs() <= 0.07);
        }
    }
}
