//! Domain value types: Gaussians, actions, observations, demonstrations.

use std::fmt;
use std::str::FromStr;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::quat_normalize;
use crate::image::{DepthImage, LabelImage, RgbImage};

/// Number of scalar fields per Gaussian in the scene file.
pub const GAUSSIAN_FIELDS: usize = 17;
/// Instance classes carried by the logits: stabilizing arm, acting arm,
/// target object.
pub const NUM_CLASSES: usize = 3;
pub const TRANS_BINS: usize = 100;
pub const ROT_BINS: usize = 72;
pub const ROT_BIN_DEG: f64 = 5.0;

/// One task-oriented Gaussian: position, colour, orientation, per-axis
/// standard deviation, opacity and instance logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    mu: [f64; 3],
    color: [f64; 3],
    rot: [f64; 4],
    scale: [f64; 3],
    opacity: f64,
    logits: [f64; 3],
}

impl Gaussian {
    /// Validates every field and normalizes `rot`.
    pub fn new(
        mu: [f64; 3],
        color: [f64; 3],
        rot: [f64; 4],
        scale: [f64; 3],
        opacity: f64,
        logits: [f64; 3],
    ) -> Result<Self> {
        let finite = mu
            .iter()
            .chain(&color)
            .chain(&rot)
            .chain(&scale)
            .chain(&logits)
            .chain(std::iter::once(&opacity))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                what: "gaussian parameter".into(),
            });
        }
        let rot = quat_normalize(rot).ok_or_else(|| Error::invalid("gaussian rot", "zero quaternion"))?;
        if scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("gaussian scale", format!("{scale:?} must be > 0")));
        }
        if !(opacity > 0.0 && opacity <= 1.0) {
            return Err(Error::invalid("gaussian opacity", format!("{opacity} outside (0, 1]")));
        }
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("gaussian color", format!("{color:?} outside [0, 1]")));
        }
        Ok(Self {
            mu,
            color,
            rot,
            scale,
            opacity,
            logits,
        })
    }

    pub fn mu(&self) -> [f64; 3] {
        self.mu
    }
    pub fn color(&self) -> [f64; 3] {
        self.color
    }
    pub fn rot(&self) -> [f64; 4] {
        self.rot
    }
    pub fn scale(&self) -> [f64; 3] {
        self.scale
    }
    pub fn opacity(&self) -> f64 {
        self.opacity
    }
    pub fn logits(&self) -> [f64; 3] {
        self.logits
    }

    /// Same Gaussian moved to a new position and orientation; the inherent
    /// properties are copied untouched.
    pub fn with_pose(&self, mu: [f64; 3], rot: [f64; 4]) -> Result<Self> {
        if !mu.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "gaussian mu".into() });
        }
        let rot = quat_normalize(rot).ok_or_else(|| Error::invalid("gaussian rot", "zero quaternion"))?;
        Ok(Self { mu, rot, ..self.clone() })
    }

    /// Field order of the scene file.
    pub fn to_fields(&self) -> [f64; GAUSSIAN_FIELDS] {
        let mut out = [0.0; GAUSSIAN_FIELDS];
        out[0..3].copy_from_slice(&self.mu);
        out[3..6].copy_from_slice(&self.color);
        out[6..10].copy_from_slice(&self.rot);
        out[10..13].copy_from_slice(&self.scale);
        out[13] = self.opacity;
        out[14..17].copy_from_slice(&self.logits);
        out
    }

    pub fn from_fields(f: &[f64; GAUSSIAN_FIELDS]) -> Result<Self> {
        Self::new(
            [f[0], f[1], f[2]],
            [f[3], f[4], f[5]],
            [f[6], f[7], f[8], f[9]],
            [f[10], f[11], f[12]],
            f[13],
            [f[14], f[15], f[16]],
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    pub timestamp: u64,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>, timestamp: u64) -> Self {
        Self { gaussians, timestamp }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Struct-of-arrays view used by the rasterizer and the tape.
    pub fn to_params(&self) -> GaussianParams {
        let n = self.len();
        let mut p = GaussianParams::with_capacity(n);
        for g in &self.gaussians {
            p.mu.extend_from_slice(&g.mu);
            p.color.extend_from_slice(&g.color);
            p.rot.extend_from_slice(&g.rot);
            p.scale.extend_from_slice(&g.scale);
            p.opacity.push(g.opacity);
            p.logits.extend_from_slice(&g.logits);
        }
        p
    }
}

/// Flat parameter arrays for `n` Gaussians. Unlike [`Gaussian`] these are
/// not validated: finite-difference probes perturb them freely.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub color: Vec<f64>,
    pub rot: Vec<f64>,
    pub scale: Vec<f64>,
    pub opacity: Vec<f64>,
    pub logits: Vec<f64>,
}

/// The six parameter groups of a Gaussian, in scene-file order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Mu,
    Color,
    Rot,
    Scale,
    Opacity,
    Logits,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Mu,
        ParamGroup::Color,
        ParamGroup::Rot,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Logits,
    ];

    pub fn width(self) -> usize {
        match self {
            ParamGroup::Rot => 4,
            ParamGroup::Opacity => 1,
            _ => 3,
        }
    }
}

impl GaussianParams {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            mu: Vec::with_capacity(3 * n),
            color: Vec::with_capacity(3 * n),
            rot: Vec::with_capacity(4 * n),
            scale: Vec::with_capacity(3 * n),
            opacity: Vec::with_capacity(n),
            logits: Vec::with_capacity(3 * n),
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Mu => &self.mu,
            ParamGroup::Color => &self.color,
            ParamGroup::Rot => &self.rot,
            ParamGroup::Scale => &self.scale,
            ParamGroup::Opacity => &self.opacity,
            ParamGroup::Logits => &self.logits,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<f64> {
        match g {
            ParamGroup::Mu => &mut self.mu,
            ParamGroup::Color => &mut self.color,
            ParamGroup::Rot => &mut self.rot,
            ParamGroup::Scale => &mut self.scale,
            ParamGroup::Opacity => &mut self.opacity,
            ParamGroup::Logits => &mut self.logits,
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let n = self.len();
        for g in ParamGroup::ALL {
            if self.group(g).len() != n * g.width() {
                return Err(Error::Shape {
                    op: "gaussian params",
                    left: vec![n, g.width()],
                    right: vec![self.group(g).len()],
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        ParamGroup::ALL.iter().all(|&g| self.group(g).iter().all(|v| v.is_finite()))
    }

    /// Converts back into validated Gaussians.
    pub fn to_set(&self, timestamp: u64) -> Result<GaussianSet> {
        self.check_shapes()?;
        let gaussians = (0..self.len())
            .map(|i| {
                Gaussian::new(
                    [self.mu[3 * i], self.mu[3 * i + 1], self.mu[3 * i + 2]],
                    [self.color[3 * i], self.color[3 * i + 1], self.color[3 * i + 2]],
                    [self.rot[4 * i], self.rot[4 * i + 1], self.rot[4 * i + 2], self.rot[4 * i + 3]],
                    [self.scale[3 * i], self.scale[3 * i + 1], self.scale[3 * i + 2]],
                    self.opacity[i],
                    [self.logits[3 * i], self.logits[3 * i + 1], self.logits[3 * i + 2]],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianSet::new(gaussians, timestamp))
    }
}

/// Discretized keyframe action of one end-effector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArmAction {
    trans_bin: [usize; 3],
    rot_bins: [usize; 3],
    open: bool,
    collide: bool,
}

impl ArmAction {
    pub fn new(trans_bin: [usize; 3], rot_bins: [usize; 3], open: bool, collide: bool) -> Result<Self> {
        if trans_bin.iter().any(|&b| b >= TRANS_BINS) {
            return Err(Error::invalid("trans_bin", format!("{trans_bin:?} outside [0, {TRANS_BINS})")));
        }
        if rot_bins.iter().any(|&b| b >= ROT_BINS) {
            return Err(Error::invalid("rot_bins", format!("{rot_bins:?} outside [0, {ROT_BINS})")));
        }
        Ok(Self {
            trans_bin,
            rot_bins,
            open,
            collide,
        })
    }

    pub fn trans_bin(&self) -> [usize; 3] {
        self.trans_bin
    }
    pub fn rot_bins(&self) -> [usize; 3] {
        self.rot_bins
    }
    pub fn open(&self) -> bool {
        self.open
    }
    pub fn collide(&self) -> bool {
        self.collide
    }

    /// The eight class labels in head order: 3 translation axes,
    /// 3 rotation axes, openness, collision flag.
    pub fn head_targets(&self) -> [usize; 8] {
        [
            self.trans_bin[0],
            self.trans_bin[1],
            self.trans_bin[2],
            self.rot_bins[0],
            self.rot_bins[1],
            self.rot_bins[2],
            self.open as usize,
            self.collide as usize,
        ]
    }
}

/// Which physical arm holds the stabilizing role at a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum RoleAssignment {
    LeftStabilizes,
    #[default]
    RightStabilizes,
}

impl RoleAssignment {
    pub fn swapped(self) -> Self {
        match self {
            RoleAssignment::LeftStabilizes => RoleAssignment::RightStabilizes,
            RoleAssignment::RightStabilizes => RoleAssignment::LeftStabilizes,
        }
    }
}

impl fmt::Display for RoleAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoleAssignment::LeftStabilizes => "left-stabilizes",
            RoleAssignment::RightStabilizes => "right-stabilizes",
        })
    }
}

impl FromStr for RoleAssignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "left-stabilizes" => Ok(RoleAssignment::LeftStabilizes),
            "right-stabilizes" => Ok(RoleAssignment::RightStabilizes),
            other => Err(Error::invalid("role assignment", other.to_string())),
        }
    }
}

/// Physical arm index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Left, Arm::Right];

    pub fn index(self) -> usize {
        match self {
            Arm::Left => 0,
            Arm::Right => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BimanualAction {
    pub stabilizing: ArmAction,
    pub acting: ArmAction,
    pub role: RoleAssignment,
}

impl BimanualAction {
    pub fn from_arms(left: ArmAction, right: ArmAction, role: RoleAssignment) -> Self {
        match role {
            RoleAssignment::LeftStabilizes => Self {
                stabilizing: left,
                acting: right,
                role,
            },
            RoleAssignment::RightStabilizes => Self {
                stabilizing: right,
                acting: left,
                role,
            },
        }
    }

    pub fn left(&self) -> ArmAction {
        self.arm(Arm::Left)
    }

    pub fn right(&self) -> ArmAction {
        self.arm(Arm::Right)
    }

    pub fn arm(&self, arm: Arm) -> ArmAction {
        match (self.role, arm) {
            (RoleAssignment::LeftStabilizes, Arm::Left) | (RoleAssignment::RightStabilizes, Arm::Right) => {
                self.stabilizing
            }
            _ => self.acting,
        }
    }

    pub fn stabilizing_arm(&self) -> Arm {
        match self.role {
            RoleAssignment::LeftStabilizes => Arm::Left,
            RoleAssignment::RightStabilizes => Arm::Right,
        }
    }
}

/// Proprioception: step index and both gripper states.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Proprio {
    pub time_index: u32,
    pub left_open: bool,
    pub right_open: bool,
}

impl Proprio {
    /// Channels broadcast over the volumetric grid.
    pub fn to_vec(&self) -> [f64; 3] {
        [
            self.time_index as f64 / 10.0,
            self.left_open as u8 as f64,
            self.right_open as u8 as f64,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub rgb: RgbImage,
    pub depth: DepthImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub views: Vec<View>,
    pub proprio: Proprio,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            let (w, h) = (v.camera.width(), v.camera.height());
            if v.rgb.width != w || v.rgb.height != h || v.depth.width != w || v.depth.height != h {
                return Err(Error::invalid("observation", format!("view {i} resolution does not match its camera")));
            }
            if v.depth.data.iter().any(|d| !(*d >= 0.0)) {
                return Err(Error::invalid("observation", format!("view {i} has negative or NaN depth")));
            }
        }
        Ok(())
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    pub observation: Observation,
    pub action: BimanualAction,
    /// RGB of every view at the next step; `None` only on the final step.
    pub next_rgb: Option<Vec<RgbImage>>,
    /// Instance labels of every view at this step.
    pub labels: Vec<LabelImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoTrajectory {
    pub steps: Vec<DemoStep>,
    pub language: String,
}

impl DemoTrajectory {
    pub fn validate(&self) -> Result<()> {
        let n = self.steps.len();
        for (k, s) in self.steps.iter().enumerate() {
            s.observation.validate()?;
            let views = s.observation.views.len();
            if s.labels.len() != views {
                return Err(Error::invalid("demo", format!("step {k} has {} label maps for {views} views", s.labels.len())));
            }
            match (&s.next_rgb, k + 1 < n) {
                (Some(next), true) if next.len() == views => {}
                (None, false) | (Some(_), false) => {}
                _ => return Err(Error::invalid("demo", format!("step {k} lacks next-step images"))),
            }
        }
        Ok(())
    }

    /// Indices of steps that have a future frame.
    pub fn transition_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.next_rgb.is_some())
            .map(|(k, _)| k)
    }
}
