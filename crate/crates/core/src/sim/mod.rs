//! Deterministic planar compliant-manipulation world.
//!
//! The end effector is a circular tool tracked by a critically damped
//! spring-damper (impedance) law towards a commanded target pose. Each
//! control tick is integrated with implicit-Euler substeps at the physics
//! rate; contacts with convex object parts are resolved with a velocity
//! impulse, Coulomb friction and positional projection. Movable boxes and
//! hinged lids are pushed quasi-statically and resist with a constant force.
//!
//! All geometry lives in a scene frame whose offset from the world frame is
//! [`World::origin`]. Moving the whole scene only touches that offset, so
//! stepping and rendering are exactly equivariant under global translation.

mod render;
mod scenario;
pub mod shape;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, Pose};
use shape::{cross, dot, norm, Polygon, Vec2};

pub use render::{render, render_noisy, Image};
pub use scenario::{
    reset, reset_with, RandomizationShape, RandomizationSpec, Scenario, ScenarioId, ScriptPoint,
    WaypointScript, SCENARIOS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Gripper {
    #[default]
    Open,
    Closed,
}

impl Gripper {
    pub fn bit(self) -> u8 {
        match self {
            Gripper::Open => 0,
            Gripper::Closed => 1,
        }
    }

    pub fn from_bit(b: u8) -> Option<Self> {
        match b {
            0 => Some(Gripper::Open),
            1 => Some(Gripper::Closed),
            _ => None,
        }
    }
}

/// Contact wrench acting on the end effector, expressed in the end-effector
/// frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct ForceReading {
    pub fx: f64,
    pub fy: f64,
    pub torque: f64,
}

impl From<[f64; 3]> for ForceReading {
    fn from(v: [f64; 3]) -> Self {
        ForceReading {
            fx: v[0],
            fy: v[1],
            torque: v[2],
        }
    }
}

impl From<ForceReading> for [f64; 3] {
    fn from(f: ForceReading) -> Self {
        [f.fx, f.fy, f.torque]
    }
}

impl ForceReading {
    pub const ZERO: ForceReading = ForceReading {
        fx: 0.0,
        fy: 0.0,
        torque: 0.0,
    };

    pub fn magnitude(&self) -> f64 {
        self.fx.hypot(self.fy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Side of the square ground patch seen by the wrist camera, meters.
    pub camera_fov: f64,
    /// Supersampling factor per pixel axis.
    pub supersample: usize,
    pub tick_rate: f64,
    pub physics_rate: f64,
    /// Natural frequency of the translational impedance, rad/s.
    pub omega_trans: f64,
    pub omega_rot: f64,
    pub mass: f64,
    /// Clamp on the impedance force, newtons.
    pub max_force: f64,
    pub ee_radius: f64,
    /// Largest commanded translation per control tick, meters.
    pub max_step_trans: f64,
    /// Largest commanded rotation per control tick, radians.
    pub max_step_rot: f64,
    pub contact_slop: f64,
    /// Standard deviation of additive camera noise. Zero disables noise.
    pub camera_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            image_size: 64,
            camera_fov: 0.24,
            supersample: 4,
            tick_rate: 10.0,
            physics_rate: 100.0,
            omega_trans: 300.0,
            omega_rot: 300.0,
            mass: 1.0,
            max_force: 100.0,
            ee_radius: 0.01,
            max_step_trans: 0.005,
            max_step_rot: 3f64.to_radians(),
            contact_slop: 1e-4,
            camera_noise: 0.0,
        }
    }
}

impl SimConfig {
    pub fn tick_dt(&self) -> f64 {
        1.0 / self.tick_rate
    }

    /// Meters per pixel of the wrist camera.
    pub fn pixel_size(&self) -> f64 {
        self.camera_fov / self.image_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("camera_fov", self.camera_fov),
            ("tick_rate", self.tick_rate),
            ("physics_rate", self.physics_rate),
            ("omega_trans", self.omega_trans),
            ("omega_rot", self.omega_rot),
            ("mass", self.mass),
            ("max_force", self.max_force),
            ("ee_radius", self.ee_radius),
            ("max_step_trans", self.max_step_trans),
            ("max_step_rot", self.max_step_rot),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("sim.{name} must be positive")));
            }
        }
        if self.image_size == 0 || self.supersample == 0 {
            return Err(Error::InvalidConfig("sim.image_size and sim.supersample must be positive".into()));
        }
        if self.camera_noise < 0.0 || self.contact_slop < 0.0 {
            return Err(Error::InvalidConfig("sim.camera_noise and sim.contact_slop must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Box,
    SocketWithSlot,
    HingedLid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    /// Vertices in the object frame (or the lid frame for articulated parts).
    pub polygon: Polygon,
    pub color: [f64; 3],
    pub solid: bool,
    /// Rotates with the hinge.
    pub articulated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hinge {
    /// Hinge axis location in the object frame.
    pub anchor: Vec2,
    /// +1 opens counter-clockwise, -1 clockwise.
    pub direction: f64,
    pub max_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub shape: ShapeKind,
    /// Pose in the scene frame.
    pub pose: Pose,
    pub movable: bool,
    pub hinge_angle: f64,
    pub hinge: Option<Hinge>,
    pub friction_coeff: f64,
    /// Force felt while pushing a movable object or lid, newtons.
    pub resistance: f64,
    pub parts: Vec<Part>,
}

impl SceneObject {
    /// Scene-frame pose of articulated parts.
    pub fn lid_pose(&self) -> Pose {
        match &self.hinge {
            Some(h) => {
                let a = Pose::from_translation(h.anchor[0], h.anchor[1]);
                self.pose
                    .compose(&a)
                    .compose(&Pose::new(0.0, 0.0, h.direction * self.hinge_angle))
                    .compose(&a.inverse())
            }
            None => self.pose,
        }
    }

    pub fn part_pose(&self, part: &Part) -> Pose {
        if part.articulated {
            self.lid_pose()
        } else {
            self.pose
        }
    }

    /// Scene-frame polygons of all parts, paired with the part.
    pub fn scene_parts(&self) -> impl Iterator<Item = (Polygon, &Part)> + '_ {
        let base = self.pose;
        let lid = self.lid_pose();
        self.parts.iter().map(move |p| {
            let pose = if p.articulated { lid } else { base };
            (p.polygon.transformed(&pose), p)
        })
    }

    fn yields(&self) -> bool {
        self.movable || self.hinge.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    cfg: Arc<SimConfig>,
    scenario_id: String,
    origin: Vec2,
    ee: Pose,
    ee_vel: [f64; 3],
    ee_target: Pose,
    gripper: Gripper,
    attached: Option<(usize, Pose)>,
    objects: Vec<SceneObject>,
    rng: ChaCha8Rng,
    time: f64,
    force: ForceReading,
}

struct Hit {
    object: usize,
    part: usize,
    contact: shape::Contact,
}

impl World {
    pub fn new(cfg: SimConfig, scenario_id: &str, objects: Vec<SceneObject>, seed: u64) -> Self {
        World {
            cfg: Arc::new(cfg),
            scenario_id: scenario_id.to_string(),
            origin: [0.0, 0.0],
            ee: Pose::IDENTITY,
            ee_vel: [0.0; 3],
            ee_target: Pose::IDENTITY,
            gripper: Gripper::Open,
            attached: None,
            objects,
            rng: ChaCha8Rng::seed_from_u64(seed),
            time: 0.0,
            force: ForceReading::ZERO,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn scenario_id(&self) -> &str {
        &self.scenario_id
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    /// End-effector pose in the world frame.
    pub fn ee_pose(&self) -> Pose {
        Pose {
            x: self.ee.x + self.origin[0],
            y: self.ee.y + self.origin[1],
            theta: self.ee.theta,
        }
    }

    /// End-effector pose in the scene frame.
    pub fn ee_scene_pose(&self) -> Pose {
        self.ee
    }

    pub fn ee_target(&self) -> Pose {
        self.to_world(&self.ee_target)
    }

    pub fn ee_velocity(&self) -> [f64; 3] {
        self.ee_vel
    }

    pub fn gripper(&self) -> Gripper {
        self.gripper
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn objects_mut(&mut self) -> &mut [SceneObject] {
        &mut self.objects
    }

    /// World-frame pose of object `i`.
    pub fn object_pose(&self, i: usize) -> Pose {
        self.to_world(&self.objects[i].pose)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn read_force(&self) -> ForceReading {
        self.force
    }

    fn to_world(&self, p: &Pose) -> Pose {
        Pose {
            x: p.x + self.origin[0],
            y: p.y + self.origin[1],
            theta: p.theta,
        }
    }

    fn to_scene(&self, p: &Pose) -> Pose {
        Pose {
            x: p.x - self.origin[0],
            y: p.y - self.origin[1],
            theta: p.theta,
        }
    }

    /// Apply a global translation to every pose in the world.
    pub fn translate_scene(&mut self, dx: f64, dy: f64) {
        self.origin[0] += dx;
        self.origin[1] += dy;
    }

    /// Place the end effector at rest at `pose` (world frame) without
    /// simulating the motion. Used when building scenes.
    pub fn teleport_ee(&mut self, pose: Pose) {
        self.ee = self.to_scene(&pose);
        self.ee_target = self.ee;
        self.ee_vel = [0.0; 3];
        self.force = ForceReading::ZERO;
    }

    /// Lifted transfer: carry the end effector above the scene and lower it
    /// at `pose` (world frame), at rest. If the tool would land inside a
    /// solid part it is pushed out through the nearest face. Objects are
    /// never moved.
    pub fn place_ee(&mut self, pose: Pose) {
        self.teleport_ee(pose);
        for _ in 0..16 {
            let hits = self.contacts([self.ee.x, self.ee.y], 0.0);
            let mut moved = false;
            for hit in hits {
                let d = hit.contact.depth;
                if d > 0.0 {
                    moved = true;
                    let n = hit.contact.normal;
                    self.ee.x += n[0] * (d + 1e-9);
                    self.ee.y += n[1] * (d + 1e-9);
                }
            }
            if !moved {
                break;
            }
        }
        self.ee_target = self.ee;
    }

    /// Advance by `dt` seconds tracking `target` (world frame).
    pub fn step(&mut self, target: Pose, gripper: Gripper, dt: f64) -> ForceReading {
        let t = self.to_scene(&target);
        self.step_scene(t, gripper, dt)
    }

    /// Advance tracking a target given relative to the current end-effector
    /// pose. This never touches world coordinates.
    pub fn step_relative(&mut self, delta: &Pose, gripper: Gripper, dt: f64) -> ForceReading {
        let t = self.ee.compose(delta);
        self.step_scene(t, gripper, dt)
    }

    /// One control tick towards a relative target.
    pub fn tick_relative(&mut self, delta: &Pose, gripper: Gripper) -> ForceReading {
        let dt = self.cfg.tick_dt();
        self.step_relative(delta, gripper, dt)
    }

    /// One control tick towards an absolute (world-frame) target.
    pub fn tick(&mut self, target: Pose, gripper: Gripper) -> ForceReading {
        let dt = self.cfg.tick_dt();
        self.step(target, gripper, dt)
    }

    fn step_scene(&mut self, target: Pose, gripper: Gripper, dt: f64) -> ForceReading {
        assert!(dt > 0.0, "dt must be positive");
        self.ee_target = target;
        self.set_gripper(gripper);
        let substeps = ((dt * self.cfg.physics_rate).round() as usize).max(1);
        let h = dt / substeps as f64;
        // Report the strongest substep reading so brief contacts are not lost.
        let mut peak = ForceReading::ZERO;
        for _ in 0..substeps {
            self.substep(h);
            if self.force.magnitude() > peak.magnitude() {
                peak = self.force;
            }
        }
        self.time += dt;
        self.force = peak;
        peak
    }

    fn set_gripper(&mut self, cmd: Gripper) {
        if cmd == self.gripper {
            return;
        }
        self.gripper = cmd;
        match cmd {
            Gripper::Open => self.attached = None,
            Gripper::Closed => {
                let c = [self.ee.x, self.ee.y];
                let reach = self.cfg.ee_radius;
                let grab = self.objects.iter().enumerate().find(|(_, o)| {
                    o.movable
                        && o.scene_parts()
                            .any(|(poly, p)| p.solid && poly.circle_contact(c, reach, 1e-3).is_some())
                });
                if let Some((i, o)) = grab {
                    self.attached = Some((i, self.ee.relative(&o.pose)));
                }
            }
        }
    }

    fn contacts(&self, center: Vec2, slop: f64) -> Vec<Hit> {
        let r = self.cfg.ee_radius;
        let mut hits = Vec::new();
        for (oi, obj) in self.objects.iter().enumerate() {
            if matches!(self.attached, Some((a, _)) if a == oi) {
                continue;
            }
            for (pi, (poly, part)) in obj.scene_parts().enumerate() {
                if !part.solid {
                    continue;
                }
                if let Some(contact) = poly.circle_contact(center, r, slop) {
                    hits.push(Hit {
                        object: oi,
                        part: pi,
                        contact,
                    });
                }
            }
        }
        hits
    }

    fn substep(&mut self, h: f64) {
        let cfg = Arc::clone(&self.cfg);
        let m = cfg.mass;

        // Implicit Euler on x'' = k (T - x) - c x' with c = 2 sqrt(k).
        let k = cfg.omega_trans * cfg.omega_trans;
        let c = 2.0 * cfg.omega_trans;
        let denom = 1.0 + h * c + h * h * k;
        let mut v = [
            (self.ee_vel[0] + h * k * (self.ee_target.x - self.ee.x)) / denom,
            (self.ee_vel[1] + h * k * (self.ee_target.y - self.ee.y)) / denom,
        ];
        let accel = [(v[0] - self.ee_vel[0]) / h, (v[1] - self.ee_vel[1]) / h];
        let f = norm(accel) * m;
        if f > cfg.max_force {
            let s = cfg.max_force / f;
            v = [self.ee_vel[0] + h * accel[0] * s, self.ee_vel[1] + h * accel[1] * s];
        }
        let kr = cfg.omega_rot * cfg.omega_rot;
        let cr = 2.0 * cfg.omega_rot;
        let err = angle_diff(self.ee.theta, self.ee_target.theta);
        let w = (self.ee_vel[2] + h * kr * err) / (1.0 + h * cr + h * h * kr);

        // Velocity-level contact response.
        let center = [self.ee.x, self.ee.y];
        let mut wrench = [0.0; 3];
        let mut touched = false;
        let mut yielding = vec![false; self.objects.len()];
        for hit in self.contacts(center, cfg.contact_slop) {
            let n = hit.contact.normal;
            // Inward speed that would merely close the remaining gap is allowed.
            let gap = (-hit.contact.depth).max(0.0);
            let jn_full = -dot(v, n) - gap / h;
            if jn_full <= 0.0 {
                continue;
            }
            touched = true;
            let obj = &self.objects[hit.object];
            let jn = jn_full;
            if obj.yields() {
                // Quasi-static pushing: the object is displaced kinematically
                // during projection, which is where its resistance is felt.
                yielding[hit.object] = true;
                continue;
            }
            v = [v[0] + jn * n[0], v[1] + jn * n[1]];
            let vt_vec = [v[0] - dot(v, n) * n[0], v[1] - dot(v, n) * n[1]];
            let vt = norm(vt_vec);
            let mut impulse = [jn * n[0], jn * n[1]];
            if vt > 0.0 {
                let jt = vt.min(obj.friction_coeff * jn);
                let dir = [vt_vec[0] / vt, vt_vec[1] / vt];
                v = [v[0] - jt * dir[0], v[1] - jt * dir[1]];
                impulse = [impulse[0] - jt * dir[0], impulse[1] - jt * dir[1]];
            }
            let force = [impulse[0] * m / h, impulse[1] * m / h];
            let arm = [-n[0] * cfg.ee_radius, -n[1] * cfg.ee_radius];
            wrench[0] += force[0];
            wrench[1] += force[1];
            wrench[2] += cross(arm, force);
        }

        self.ee.x += h * v[0];
        self.ee.y += h * v[1];
        self.ee.theta = crate::geometry::wrap_angle(self.ee.theta + h * w);
        self.ee_vel = [v[0], v[1], w];

        // Positional projection. Yielding objects are pushed, everything else
        // pushes the end effector back out.
        let mut pushed = vec![false; self.objects.len()];
        for _ in 0..4 {
            let hits = self.contacts([self.ee.x, self.ee.y], 0.0);
            let mut moved = false;
            for hit in hits {
                let d = hit.contact.depth;
                if d <= 0.0 {
                    continue;
                }
                moved = true;
                let n = hit.contact.normal;
                if yielding[hit.object] {
                    if !pushed[hit.object] {
                        pushed[hit.object] = true;
                        touched = true;
                        let r = self.objects[hit.object].resistance;
                        let force = [n[0] * r, n[1] * r];
                        let arm = [-n[0] * cfg.ee_radius, -n[1] * cfg.ee_radius];
                        wrench[0] += force[0];
                        wrench[1] += force[1];
                        wrench[2] += cross(arm, force);
                    }
                    self.push_object(hit.object, hit.part, &hit.contact);
                } else {
                    self.ee.x += n[0] * d;
                    self.ee.y += n[1] * d;
                }
            }
            if !moved {
                break;
            }
        }

        if let Some((i, rel)) = self.attached {
            self.objects[i].pose = self.ee.compose(&rel);
        }

        self.force = if touched {
            let (s, c) = self.ee.theta.sin_cos();
            ForceReading {
                fx: c * wrench[0] + s * wrench[1],
                fy: -s * wrench[0] + c * wrench[1],
                torque: wrench[2],
            }
        } else {
            ForceReading::ZERO
        };
    }

    fn push_object(&mut self, oi: usize, pi: usize, contact: &shape::Contact) {
        let n = contact.normal;
        let d = contact.depth;
        let obj = &mut self.objects[oi];
        let articulated = obj.parts[pi].articulated;
        match obj.hinge {
            Some(h) if articulated => {
                let pivot = obj.pose.transform_point(h.anchor);
                let lever = [contact.point[0] - pivot[0], contact.point[1] - pivot[1]];
                let r = norm(lever).max(1e-6);
                // Rotating by dphi moves the contact point by dphi * (z x lever).
                let tangential = cross(lever, [-n[0], -n[1]]) / r;
                if tangential.abs() < 1e-9 {
                    self.ee.x += n[0] * d;
                    self.ee.y += n[1] * d;
                    return;
                }
                let dphi = d / (r * tangential.abs()) * tangential.signum();
                let new_angle = (obj.hinge_angle + h.direction * dphi).clamp(0.0, h.max_angle);
                let applied = new_angle - obj.hinge_angle;
                obj.hinge_angle = new_angle;
                let remaining = d - (applied * h.direction).abs() * r * tangential.abs();
                if remaining > 1e-12 {
                    self.ee.x += n[0] * remaining;
                    self.ee.y += n[1] * remaining;
                }
            }
            _ if obj.movable => {
                obj.pose.x -= n[0] * d;
                obj.pose.y -= n[1] * d;
            }
            _ => {
                self.ee.x += n[0] * d;
                self.ee.y += n[1] * d;
            }
        }
    }
}
