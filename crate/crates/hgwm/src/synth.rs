//! Deterministic two-arm toy world that produces demonstrations with exact
//! ground truth.
//!
//! Every body is a rigid cluster of Gaussians: boxes become a 4×4×4
//! lattice, spheres 64 surface samples. Each arm is a gripper block with a
//! forearm block on top, posed at the bin centre of its current action.
//! Moving an arm applies the same rigid transform to its Gaussians and to
//! the object it holds. An object is grasped when a gripper closes within
//! 3 cm of its centre and released when that gripper opens again.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::{discretize_action, undiscretize_action, ContinuousPose, WorkspaceBounds};
use crate::camera::{ring_rig, Camera};
use crate::error::{Error, Result};
use crate::geometry::{euler_zyx_deg_to_matrix, quat_from_matrix, quat_mul, Mat3, Vec3};
use crate::image::{DepthImage, LabelImage};
use crate::io::{write_demo, write_scene};
use crate::raster::{render, RasterConfig};
use crate::types::{
    Arm, ArmAction, BimanualAction, DemoStep, DemoTrajectory, Gaussian, GaussianSet, Observation, Proprio,
    RoleAssignment, View, NUM_CLASSES,
};

pub const CLASS_STABILIZING: u8 = 0;
pub const CLASS_ACTING: u8 = 1;
pub const CLASS_TARGET: u8 = 2;

/// Logit magnitude of a Gaussian's own class.
pub const CLASS_LOGIT: f64 = 10.0;
/// A closing gripper grasps an object whose centre is closer than this.
pub const GRASP_RADIUS: f64 = 0.03;
/// Pixels with accumulated opacity at or below this are labelled ignore.
pub const LABEL_COVERAGE: f64 = 0.5;
pub const MAX_REJECTIONS: usize = 20;

const BOX_LATTICE: usize = 4;
const SPHERE_SAMPLES: usize = 64;
const OPACITY: f64 = 0.9;
/// Peak-to-peak amplitude of the per-Gaussian colour jitter.
const COLOR_JITTER: f64 = 0.06;

const GRIPPER_HALF: [f64; 3] = [0.05, 0.05, 0.04];
const FOREARM_HALF: [f64; 3] = [0.035, 0.035, 0.15];
/// Gripper centres closer than this count as overlapping arm bases.
const MIN_BASE_SEPARATION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
}

impl Shape {
    /// Half-extent of the axis-aligned box bounding every rotation.
    fn reach(&self) -> f64 {
        match *self {
            Shape::Box { half } => (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt(),
            Shape::Sphere { radius } => radius,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub rotation: Mat3,
    pub color: [f64; 3],
    pub class: u8,
}

impl Primitive {
    /// Gaussians of the primitive in world space; `rng` jitters each colour.
    fn gaussians(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Gaussian>> {
        let q = quat_from_matrix(&self.rotation);
        let mut logits = [0.0; NUM_CLASSES];
        logits[self.class as usize] = CLASS_LOGIT;
        let c = Vec3::from(self.center);
        let (locals, scale): (Vec<Vec3>, [f64; 3]) = match self.shape {
            Shape::Box { half } => {
                let offs = [-0.75, -0.25, 0.25, 0.75];
                let mut pts = Vec::with_capacity(BOX_LATTICE.pow(3));
                for &a in &offs {
                    for &b in &offs {
                        for &d in &offs {
                            pts.push(Vec3::new(a * half[0], b * half[1], d * half[2]));
                        }
                    }
                }
                (pts, half.map(|h| h / 4.0))
            }
            Shape::Sphere { radius } => (fibonacci_sphere(SPHERE_SAMPLES, 0.8 * radius), [0.3 * radius; 3]),
        };
        locals
            .iter()
            .map(|l| {
                let mu = c + self.rotation * l;
                let color = self
                    .color
                    .map(|v| (v + COLOR_JITTER * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0));
                Gaussian::new([mu.x, mu.y, mu.z], color, q, scale, OPACITY, logits)
            })
            .collect()
    }
}

fn fibonacci_sphere(n: usize, r: f64) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * rho * phi.cos(), r * rho * phi.sin(), r * z)
        })
        .collect()
}

/// Initial world layout of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<Primitive>,
    /// Starting action of the left and right arm.
    pub arm_bases: [ArmAction; 2],
    pub roles: RoleAssignment,
    pub cameras: Vec<Camera>,
    pub bounds: WorkspaceBounds,
    /// Seeds the colour jitter.
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.class as usize >= NUM_CLASSES {
                return Err(Error::SceneSpec(format!("object {i} has class {}", o.class)));
            }
            let r = o.shape.reach();
            let lo = o.center.map(|c| c - r);
            let hi = o.center.map(|c| c + r);
            if !self.bounds.contains(lo) || !self.bounds.contains(hi) {
                return Err(Error::SceneSpec(format!("object {i} at {:?} leaves the workspace", o.center)));
            }
            if o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::SceneSpec(format!("object {i} colour {:?}", o.color)));
            }
        }
        let [l, r] = self.arm_bases.map(|a| undiscretize_action(&a, &self.bounds).position);
        let d = ((l[0] - r[0]).powi(2) + (l[1] - r[1]).powi(2) + (l[2] - r[2]).powi(2)).sqrt();
        if d < MIN_BASE_SEPARATION {
            return Err(Error::SceneSpec(format!("arm bases {l:?} and {r:?} overlap")));
        }
        if self.cameras.is_empty() {
            return Err(Error::SceneSpec("no cameras".into()));
        }
        Ok(())
    }

    pub fn arm_class(&self, arm: Arm) -> u8 {
        match (self.roles, arm) {
            (RoleAssignment::LeftStabilizes, Arm::Left) | (RoleAssignment::RightStabilizes, Arm::Right) => {
                CLASS_STABILIZING
            }
            _ => CLASS_ACTING,
        }
    }
}

/// Arm pose and gripper state.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmState {
    pub action: ArmAction,
    pub position: [f64; 3],
    pub rotation: Mat3,
    pub open: bool,
    /// Index into [`SimState::objects`] of the held object.
    pub holding: Option<usize>,
}

impl ArmState {
    fn at(action: ArmAction, bounds: &WorkspaceBounds) -> Self {
        let (position, rotation) = arm_pose(&action, bounds);
        Self {
            action,
            position,
            rotation,
            open: action.open(),
            holding: None,
        }
    }
}

fn arm_pose(action: &ArmAction, bounds: &WorkspaceBounds) -> ([f64; 3], Mat3) {
    let p = undiscretize_action(action, bounds);
    (p.position, euler_zyx_deg_to_matrix(p.euler_deg))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectState {
    pub center: [f64; 3],
    pub rotation: Mat3,
    pub class: u8,
}

/// World state: every Gaussian plus the bookkeeping needed to move them.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub gaussians: Vec<Gaussian>,
    /// Body of each Gaussian: 0 left arm, 1 right arm, `2 + j` object `j`.
    pub owner: Vec<usize>,
    pub arms: [ArmState; 2],
    pub objects: Vec<ObjectState>,
    pub time: u64,
    pub bounds: WorkspaceBounds,
}

/// Body index of an object in [`SimState::owner`].
pub fn object_body(j: usize) -> usize {
    2 + j
}

impl SimState {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut gaussians = Vec::new();
        let mut owner = Vec::new();
        let arms = [Arm::Left, Arm::Right].map(|a| ArmState::at(spec.arm_bases[a.index()], &spec.bounds));
        for arm in Arm::BOTH {
            let st = &arms[arm.index()];
            for part in arm_parts(st, spec.arm_class(arm), arm) {
                let g = part.gaussians(&mut rng)?;
                owner.extend(std::iter::repeat_n(arm.index(), g.len()));
                gaussians.extend(g);
            }
        }
        let mut objects = Vec::with_capacity(spec.objects.len());
        for (j, o) in spec.objects.iter().enumerate() {
            let g = o.gaussians(&mut rng)?;
            owner.extend(std::iter::repeat_n(object_body(j), g.len()));
            gaussians.extend(g);
            objects.push(ObjectState {
                center: o.center,
                rotation: o.rotation,
                class: o.class,
            });
        }
        Ok(Self {
            gaussians,
            owner,
            arms,
            objects,
            time: 0,
            bounds: spec.bounds,
        })
    }

    pub fn to_set(&self) -> GaussianSet {
        GaussianSet::new(self.gaussians.clone(), self.time)
    }

    pub fn body_count(&self, body: usize) -> usize {
        self.owner.iter().filter(|&&o| o == body).count()
    }

    pub fn proprio(&self) -> Proprio {
        Proprio {
            time_index: self.time as u32,
            left_open: self.arms[0].open,
            right_open: self.arms[1].open,
        }
    }

    /// Which arm holds object `j`, if any.
    pub fn holder(&self, j: usize) -> Option<Arm> {
        Arm::BOTH.into_iter().find(|a| self.arms[a.index()].holding == Some(j))
    }

    /// Moves every Gaussian of `bodies` and the matching object records by
    /// the rigid motion taking `(p0, r0)` to `(p1, r1)`.
    fn move_bodies(&mut self, bodies: &[usize], p0: [f64; 3], r0: &Mat3, p1: [f64; 3], r1: &Mat3) -> Result<()> {
        let pure_translation = r0 == r1;
        let delta_r = r1 * r0.transpose();
        let delta_q = quat_from_matrix(&delta_r);
        let v0 = Vec3::from(p0);
        let v1 = Vec3::from(p1);
        let d = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let apply = |x: [f64; 3]| -> [f64; 3] {
            if pure_translation {
                [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
            } else {
                let y = v1 + delta_r * (Vec3::from(x) - v0);
                [y.x, y.y, y.z]
            }
        };
        for (g, &o) in self.gaussians.iter_mut().zip(&self.owner) {
            if !bodies.contains(&o) {
                continue;
            }
            let rot = if pure_translation { g.rot() } else { quat_mul(delta_q, g.rot()) };
            *g = g.with_pose(apply(g.mu()), rot)?;
        }
        for &b in bodies {
            if b >= 2 {
                let obj = &mut self.objects[b - 2];
                obj.center = apply(obj.center);
                if !pure_translation {
                    obj.rotation = delta_r * obj.rotation;
                }
            }
        }
        Ok(())
    }
}

fn arm_parts(st: &ArmState, class: u8, arm: Arm) -> [Primitive; 2] {
    let color = match class {
        CLASS_STABILIZING => [0.2, 0.35, 0.85],
        _ => [0.9, 0.55, 0.15],
    };
    // the two arms differ slightly in shade so they stay distinguishable
    let shade = if arm == Arm::Left { 0.0 } else { 0.08 };
    let color = color.map(|c: f64| (c + shade).min(1.0));
    let forearm_offset = st.rotation * Vec3::new(0.0, 0.0, GRIPPER_HALF[2] + FOREARM_HALF[2]);
    let p = st.position;
    [
        Primitive {
            shape: Shape::Box { half: GRIPPER_HALF },
            center: p,
            rotation: st.rotation,
            color,
            class,
        },
        Primitive {
            shape: Shape::Box { half: FOREARM_HALF },
            center: [p[0] + forearm_offset.x, p[1] + forearm_offset.y, p[2] + forearm_offset.z],
            rotation: st.rotation,
            color: color.map(|c| 0.8 * c),
            class,
        },
    ]
}

/// Ground-truth gaussians of a scene.
pub fn build_scene(spec: &SceneSpec) -> Result<GaussianSet> {
    Ok(SimState::new(spec)?.to_set())
}

/// Advances the world by one keyframe action. Arms move to the bin centres
/// of their actions; an arm whose pose is unchanged leaves its Gaussians
/// bit-identical. Grippers that open release, grippers that close next to
/// an object grasp it (a later grasp takes the object from the other arm).
pub fn step_env(state: &SimState, action: &BimanualAction) -> Result<SimState> {
    let mut next = state.clone();
    next.time += 1;
    for arm in Arm::BOTH {
        let i = arm.index();
        let a = action.arm(arm);
        let (p1, r1) = arm_pose(&a, &state.bounds);
        let (p0, r0) = (state.arms[i].position, state.arms[i].rotation);
        if p0 != p1 || r0 != r1 {
            let mut bodies = vec![i];
            if let Some(j) = state.arms[i].holding {
                bodies.push(object_body(j));
            }
            next.move_bodies(&bodies, p0, &r0, p1, &r1)?;
        }
        next.arms[i].action = a;
        next.arms[i].position = p1;
        next.arms[i].rotation = r1;
    }
    for arm in Arm::BOTH {
        let i = arm.index();
        let open = action.arm(arm).open();
        if open {
            next.arms[i].holding = None;
        }
    }
    for arm in Arm::BOTH {
        let i = arm.index();
        let closing = state.arms[i].open && !action.arm(arm).open();
        if closing {
            let p = Vec3::from(next.arms[i].position);
            let nearest = next
                .objects
                .iter()
                .enumerate()
                .map(|(j, o)| (j, (Vec3::from(o.center) - p).norm()))
                .filter(|(_, d)| *d < GRASP_RADIUS)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, _)) = nearest {
                for other in &mut next.arms {
                    if other.holding == Some(j) {
                        other.holding = None;
                    }
                }
                next.arms[i].holding = Some(j);
            }
        }
        next.arms[i].open = action.arm(arm).open();
    }
    Ok(next)
}

/// RGB, depth and instance labels of the state from each camera.
pub fn render_state(state: &SimState, cameras: &[Camera], cfg: &RasterConfig) -> Result<(Observation, Vec<LabelImage>)> {
    let set = state.to_set();
    let mut views = Vec::with_capacity(cameras.len());
    let mut labels = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let out = render(&set, cam, cfg)?;
        labels.push(out.label_image(LABEL_COVERAGE));
        views.push(View {
            camera: cam.clone(),
            rgb: out.rgb_image().quantized(),
            depth: DepthImage {
                width: cam.width(),
                height: cam.height(),
                data: out.surface_depth(),
            }
            .quantized(),
        });
    }
    Ok((
        Observation {
            views,
            proprio: state.proprio(),
        },
        labels,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskId {
    PushBox,
    LiftTray,
    Handover,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::PushBox, TaskId::LiftTray, TaskId::Handover];

    pub fn language(self) -> &'static str {
        match self {
            TaskId::PushBox => "push the box forward",
            TaskId::LiftTray => "lift the tray with both hands",
            TaskId::Handover => "hand the item to the other arm",
        }
    }

    pub fn roles(self) -> RoleAssignment {
        match self {
            TaskId::PushBox | TaskId::Handover => RoleAssignment::RightStabilizes,
            TaskId::LiftTray => RoleAssignment::LeftStabilizes,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskId::PushBox => "push-box",
            TaskId::LiftTray => "lift-tray-two-handed",
            TaskId::Handover => "handover-item",
        })
    }
}

impl FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "push-box" => Ok(TaskId::PushBox),
            "lift-tray-two-handed" | "lift-tray" => Ok(TaskId::LiftTray),
            "handover-item" | "handover" => Ok(TaskId::Handover),
            other => Err(Error::invalid(
                "task",
                format!("`{other}` (expected push-box, lift-tray-two-handed or handover-item)"),
            )),
        }
    }
}

/// Keyframe schedule of one episode plus the success check.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskScript {
    pub task: TaskId,
    pub roles: RoleAssignment,
    /// Waypoints of the left and right arm, one per keyframe.
    pub schedule: [Vec<ArmAction>; 2],
    /// Arm positions may not leave this box.
    pub reach: WorkspaceBounds,
    /// Target object position at the start, used by the success check.
    pub start: [f64; 3],
}

/// Region the scripted arms can reach.
pub fn default_reach() -> WorkspaceBounds {
    WorkspaceBounds {
        lo: [-0.6, -0.6, 0.0],
        hi: [0.6, 0.6, 0.7],
    }
}

impl TaskScript {
    pub fn len(&self) -> usize {
        self.schedule[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, bounds: &WorkspaceBounds) -> Result<()> {
        if self.schedule[0].len() != self.schedule[1].len() {
            return Err(Error::Script(format!(
                "schedule lengths differ: {} vs {}",
                self.schedule[0].len(),
                self.schedule[1].len()
            )));
        }
        if self.is_empty() {
            return Err(Error::Script("empty schedule".into()));
        }
        for (arm, sched) in self.schedule.iter().enumerate() {
            for (k, a) in sched.iter().enumerate() {
                let p = undiscretize_action(a, bounds).position;
                if !self.reach.contains(p) {
                    return Err(Error::Script(format!("arm {arm} waypoint {k} at {p:?} is out of reach")));
                }
            }
        }
        Ok(())
    }

    pub fn action(&self, k: usize) -> BimanualAction {
        BimanualAction::from_arms(self.schedule[0][k], self.schedule[1][k], self.roles)
    }

    /// Whether the final state completes the task.
    pub fn success(&self, state: &SimState) -> bool {
        let Some(obj) = state.objects.first() else {
            return false;
        };
        let c = obj.center;
        let s = self.start;
        match self.task {
            TaskId::PushBox => state.holder(0).is_none() && c[0] - s[0] > 0.28 && (c[2] - s[2]).abs() < 1e-6,
            TaskId::LiftTray => state.holder(0).is_none() && c[2] - s[2] > 0.28,
            TaskId::Handover => {
                let receiver = match self.roles {
                    RoleAssignment::RightStabilizes => Arm::Right,
                    RoleAssignment::LeftStabilizes => Arm::Left,
                };
                state.holder(0) == Some(receiver) && (c[1] - s[1]).abs() > 0.25
            }
        }
    }
}

/// Generation settings shared by every episode.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub bounds: WorkspaceBounds,
    pub raster: RasterConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            views: 3,
            width: 64,
            height: 64,
            bounds: WorkspaceBounds::default(),
            raster: RasterConfig::default(),
        }
    }
}

fn snap(p: [f64; 3], bounds: &WorkspaceBounds) -> Result<[f64; 3]> {
    let a = discretize_action(
        &ContinuousPose {
            position: p,
            euler_deg: [0.0; 3],
            open: 1.0,
            collide: 0.0,
        },
        bounds,
    )?;
    Ok(undiscretize_action(&a, bounds).position)
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Builds waypoint actions on the bin lattice.
struct Planner<'a> {
    bounds: &'a WorkspaceBounds,
}

impl Planner<'_> {
    fn at(&self, p: [f64; 3], open: bool, collide: bool) -> Result<ArmAction> {
        self.turned(p, 0.0, open, collide)
    }

    /// Waypoint with the gripper yawed by `yaw_deg` about the world z axis.
    fn turned(&self, p: [f64; 3], yaw_deg: f64, open: bool, collide: bool) -> Result<ArmAction> {
        let pose = ContinuousPose {
            position: self.bounds.clamp(p),
            euler_deg: [0.0, 0.0, yaw_deg],
            open: open as u8 as f64,
            collide: collide as u8 as f64,
        };
        discretize_action(&pose, self.bounds)
    }
}

fn bin_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Samples a randomized scene and the matching expert script.
pub fn sample_episode(task: TaskId, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<(SceneSpec, TaskScript)> {
    let b = &cfg.bounds;
    let plan = Planner { bounds: b };
    let roles = task.roles();
    let left_base = plan.at([0.01, 0.45, 0.45], true, false)?;
    let right_base = plan.at([0.01, -0.45, 0.45], true, false)?;
    let identity = Mat3::identity();
    let (object, left, right) = match task {
        TaskId::PushBox => {
            let c = snap([bin_range(rng, -0.45, 0.4), bin_range(rng, -0.15, 0.15), 0.11], b)?;
            let object = Primitive {
                shape: Shape::Box { half: [0.1; 3] },
                center: c,
                rotation: identity,
                color: [0.85, 0.15, 0.15],
                class: CLASS_TARGET,
            };
            let goal = add(c, [0.3, 0.0, 0.0]);
            let left = vec![
                plan.at(add(c, [0.0, 0.0, 0.25]), true, false)?,
                plan.at(c, true, true)?,
                plan.at(c, false, true)?,
                plan.at(goal, false, true)?,
                plan.at(goal, true, false)?,
                plan.at(add(goal, [0.0, 0.0, 0.25]), true, false)?,
            ];
            let brace = add(c, [0.0, -0.2, 0.0]);
            let right = vec![
                plan.at(add(brace, [0.0, 0.0, 0.2]), true, false)?,
                plan.at(brace, true, false)?,
                plan.at(brace, false, false)?,
                plan.at(brace, false, false)?,
                plan.at(brace, true, false)?,
                plan.at(add(brace, [0.0, 0.0, 0.2]), true, false)?,
            ];
            (object, left, right)
        }
        TaskId::LiftTray => {
            let c = snap([bin_range(rng, -0.3, 0.3), bin_range(rng, -0.15, 0.15), 0.03], b)?;
            let object = Primitive {
                shape: Shape::Box { half: [0.2, 0.1, 0.03] },
                center: c,
                rotation: identity,
                color: [0.2, 0.75, 0.3],
                class: CLASS_TARGET,
            };
            let side = add(c, [-0.14, 0.0, 0.0]);
            let lift = [0.0, 0.0, 0.3];
            let left = vec![
                plan.at(add(side, [0.0, 0.0, 0.2]), true, false)?,
                plan.at(side, true, true)?,
                plan.at(side, false, true)?,
                plan.at(add(side, lift), false, true)?,
                plan.at(add(side, lift), true, false)?,
                plan.at(add(side, [0.0, 0.0, 0.45]), true, false)?,
            ];
            let right = vec![
                plan.at(add(c, [0.0, 0.0, 0.2]), true, false)?,
                plan.at(c, true, true)?,
                plan.at(c, false, true)?,
                plan.at(add(c, lift), false, true)?,
                plan.at(add(c, lift), true, false)?,
                plan.at(add(c, [0.0, 0.0, 0.45]), true, false)?,
            ];
            (object, left, right)
        }
        TaskId::Handover => {
            let c = snap([bin_range(rng, -0.35, 0.35), bin_range(rng, 0.1, 0.3), 0.09], b)?;
            let object = Primitive {
                shape: Shape::Sphere { radius: 0.08 },
                center: c,
                rotation: identity,
                color: [0.95, 0.85, 0.2],
                class: CLASS_TARGET,
            };
            let m = snap([c[0], 0.01, 0.35], b)?;
            let left = vec![
                plan.at(add(c, [0.0, 0.0, 0.2]), true, false)?,
                plan.at(c, true, true)?,
                plan.at(c, false, true)?,
                plan.at(m, false, true)?,
                plan.at(m, false, true)?,
                plan.at(m, true, false)?,
                plan.at(add(m, [0.0, 0.25, 0.1]), true, false)?,
            ];
            let right = vec![
                right_base,
                right_base,
                right_base,
                plan.at(add(m, [0.0, -0.2, 0.0]), true, false)?,
                plan.at(m, true, true)?,
                plan.at(m, false, true)?,
                plan.turned(add(m, [0.0, -0.3, -0.1]), 90.0, false, true)?,
            ];
            (object, left, right)
        }
    };
    let spec = SceneSpec {
        objects: vec![object],
        arm_bases: [left_base, right_base],
        roles,
        cameras: ring_rig(cfg.views, cfg.width, cfg.height)?,
        bounds: *b,
        seed: rng.gen(),
    };
    let script = TaskScript {
        task,
        roles,
        schedule: [left, right],
        reach: default_reach(),
        start: object.center,
    };
    Ok((spec, script))
}

/// Runs a script from its scene: one step per keyframe plus a final
/// observation whose action repeats the last keyframe. Returns the demo and
/// the world state at every step.
pub fn run_episode(spec: &SceneSpec, script: &TaskScript, cfg: &GenConfig) -> Result<(DemoTrajectory, Vec<SimState>)> {
    script.validate(&spec.bounds)?;
    let mut state = SimState::new(spec)?;
    let mut states = Vec::with_capacity(script.len() + 1);
    let mut steps: Vec<DemoStep> = Vec::with_capacity(script.len() + 1);
    for k in 0..=script.len() {
        let (obs, labels) = render_state(&state, &spec.cameras, &cfg.raster)?;
        if let Some(prev) = steps.last_mut() {
            prev.next_rgb = Some(obs.views.iter().map(|v| v.rgb.clone()).collect());
        }
        let action = script.action(k.min(script.len() - 1));
        steps.push(DemoStep {
            observation: obs,
            action,
            next_rgb: None,
            labels,
        });
        states.push(state.clone());
        if k < script.len() {
            state = step_env(&state, &action)?;
        }
    }
    Ok((
        DemoTrajectory {
            steps,
            language: script.task.language().to_string(),
        },
        states,
    ))
}

/// One accepted episode and how many samples were rejected before it.
pub struct Episode {
    pub demo: DemoTrajectory,
    pub spec: SceneSpec,
    pub script: TaskScript,
    pub states: Vec<SimState>,
    pub rejected: usize,
}

/// Samples until an episode passes the script's checks. Episode `index`
/// draws from its own RNG stream of `seed`.
pub fn generate_episode(task: TaskId, cfg: &GenConfig, seed: u64, index: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut rejected = 0;
    loop {
        let attempt = sample_episode(task, cfg, &mut rng).and_then(|(spec, script)| {
            let (demo, states) = run_episode(&spec, &script, cfg)?;
            if states.last().is_some_and(|end| script.success(end)) {
                Ok(Some((demo, spec, script, states)))
            } else {
                Ok(None)
            }
        });
        match attempt {
            Ok(Some((demo, spec, script, states))) => {
                return Ok(Episode {
                    demo,
                    spec,
                    script,
                    states,
                    rejected,
                })
            }
            Ok(None) | Err(Error::Script(_)) | Err(Error::SceneSpec(_)) => {
                rejected += 1;
                log::debug!("episode {index}: rejected sample {rejected}");
                if rejected > MAX_REJECTIONS {
                    return Err(Error::Script(format!(
                        "{task}: more than {MAX_REJECTIONS} consecutive rejected episodes"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Writes `n` episodes to `<out>/demos/demo_<i>`, each step with its
/// ground-truth scene as `scene.bgs`. Returns the episode lengths in steps.
pub fn generate_demos(task: TaskId, n: usize, seed: u64, cfg: &GenConfig, out: &Path) -> Result<Vec<usize>> {
    let mut lengths = Vec::with_capacity(n);
    for i in 0..n {
        let ep = generate_episode(task, cfg, seed, i as u64)?;
        let mut meta = BTreeMap::new();
        meta.insert("task".to_string(), task.to_string());
        meta.insert("role".to_string(), ep.script.roles.to_string());
        meta.insert("seed".to_string(), seed.to_string());
        meta.insert("episode".to_string(), i.to_string());
        meta.insert("rejected".to_string(), ep.rejected.to_string());
        let dir = out.join("demos").join(format!("demo_{i:04}"));
        write_demo(&dir, &ep.demo, &meta)?;
        for (k, st) in ep.states.iter().enumerate() {
            write_scene(&dir.join(format!("step_{k}")).join("scene.bgs"), &st.to_set())?;
        }
        lengths.push(ep.demo.steps.len());
    }
    Ok(lengths)
}
