//! Mapping between continuous end-effector keyframes and action bins.

use crate::error::{Error, Result};
use crate::types::{ArmAction, ROT_BINS, ROT_BIN_DEG, TRANS_BINS};

/// Axis-aligned workspace box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorkspaceBounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for WorkspaceBounds {
    fn default() -> Self {
        Self {
            lo: [-1.0; 3],
            hi: [1.0; 3],
        }
    }
}

impl WorkspaceBounds {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(hi[i] > lo[i]) || !lo[i].is_finite() || !hi[i].is_finite()) {
            return Err(Error::invalid("workspace bounds", format!("{lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| p[i].clamp(self.lo[i], self.hi[i]))
    }
}

/// Continuous keyframe of one arm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuousPose {
    pub position: [f64; 3],
    /// ZYX Euler angles in degrees, `[about x, about y, about z]`.
    pub euler_deg: [f64; 3],
    pub open: f64,
    pub collide: f64,
}

pub fn discretize_action(pose: &ContinuousPose, bounds: &WorkspaceBounds) -> Result<ArmAction> {
    if !pose.position.iter().all(|v| v.is_finite()) || !pose.euler_deg.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { what: "action pose".into() });
    }
    if !bounds.contains(pose.position) {
        return Err(Error::OutOfWorkspace {
            position: pose.position,
            lo: bounds.lo,
            hi: bounds.hi,
        });
    }
    let ext = bounds.extent();
    let trans = [0, 1, 2].map(|i| {
        let b = (TRANS_BINS as f64 * (pose.position[i] - bounds.lo[i]) / ext[i]).floor();
        (b.max(0.0) as usize).min(TRANS_BINS - 1)
    });
    let rot = pose.euler_deg.map(|a| {
        let b = (a.rem_euclid(360.0) / ROT_BIN_DEG).floor() as usize;
        b.min(ROT_BINS - 1)
    });
    ArmAction::new(trans, rot, pose.open > 0.5, pose.collide > 0.5)
}

/// Bin centres of an action.
pub fn undiscretize_action(action: &ArmAction, bounds: &WorkspaceBounds) -> ContinuousPose {
    let ext = bounds.extent();
    let tb = action.trans_bin();
    let position = [0, 1, 2].map(|i| bounds.lo[i] + (tb[i] as f64 + 0.5) * ext[i] / TRANS_BINS as f64);
    let euler_deg = action.rot_bins().map(|b| (b as f64 + 0.5) * ROT_BIN_DEG);
    ContinuousPose {
        position,
        euler_deg,
        open: action.open() as u8 as f64,
        collide: action.collide() as u8 as f64,
    }
}

/// Eight-dimensional conditioning vector fed to the deformation models:
/// bin-centre position, angles rescaled to `[-1, 1)`, openness, collision flag.
pub fn action_features(action: &ArmAction, bounds: &WorkspaceBounds) -> [f64; 8] {
    let p = undiscretize_action(action, bounds);
    [
        p.position[0],
        p.position[1],
        p.position[2],
        p.euler_deg[0] / 180.0 - 1.0,
        p.euler_deg[1] / 180.0 - 1.0,
        p.euler_deg[2] / 180.0 - 1.0,
        p.open,
        p.collide,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose(position: [f64; 3], euler_deg: [f64; 3]) -> ContinuousPose {
        ContinuousPose {
            position,
            euler_deg,
            open: 1.0,
            collide: 0.0,
        }
    }

    #[test]
    fn lower_corner_maps_to_zero_bins() {
        let a = discretize_action(&pose([-1.0; 3], [0.0; 3]), &WorkspaceBounds::default()).unwrap();
        assert_eq!(a.trans_bin(), [0, 0, 0]);
        assert_eq!(a.rot_bins(), [0, 0, 0]);
        assert!(a.open() && !a.collide());
    }

    #[test]
    fn upper_corner_clamps_and_359_degrees_is_last_bin() {
        let a = discretize_action(&pose([1.0; 3], [359.0, 0.0, 0.0]), &WorkspaceBounds::default()).unwrap();
        assert_eq!(a.trans_bin(), [99, 99, 99]);
        assert_eq!(a.rot_bins()[0], 71);
    }

    #[test]
    fn midpoint_is_bin_fifty() {
        let a = discretize_action(&pose([0.0; 3], [0.0; 3]), &WorkspaceBounds::default()).unwrap();
        assert_eq!(a.trans_bin(), [50, 50, 50]);
    }

    #[test]
    fn outside_bounds_is_an_error() {
        let err = discretize_action(&pose([0.0, 1.5, 0.0], [0.0; 3]), &WorkspaceBounds::default());
        assert!(matches!(err, Err(Error::OutOfWorkspace { .. })));
    }

    #[test]
    fn threshold_is_strict() {
        let mut p = pose([0.0; 3], [0.0; 3]);
        p.open = 0.5;
        p.collide = 0.51;
        let a = discretize_action(&p, &WorkspaceBounds::default()).unwrap();
        assert!(!a.open() && a.collide());
    }

    proptest! {
        #[test]
        fn discretize_is_idempotent_through_bin_centres(
            x in -1.0f64..=1.0, y in -1.0f64..=1.0, z in -1.0f64..=1.0,
            ax in 0.0f64..360.0, ay in 0.0f64..360.0, az in 0.0f64..360.0,
            open in 0.0f64..1.0, collide in 0.0f64..1.0,
        ) {
            let b = WorkspaceBounds::new([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]).unwrap();
            let p = ContinuousPose { position: [x, y, z], euler_deg: [ax, ay, az], open, collide };
            let a = discretize_action(&p, &b).unwrap();
            let again = discretize_action(&undiscretize_action(&a, &b), &b).unwrap();
            prop_assert_eq!(a, again);
        }
    }
}
