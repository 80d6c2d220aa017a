//! Action codec: continuous gripper poses to and from discrete voxel indices,
//! 5-degree rotation bins, and the binary gripper state, plus the Euler and
//! quaternion conversions.
//!
//! Conventions, fixed once: Euler angles are Z-Y-X intrinsic (yaw about z
//! first, then pitch, then roll), each wrapped into [0, 2*pi). Quaternions
//! are scalar-last (x, y, z, w), unit norm, canonicalized to w >= 0.
//! Translation bins are lower-edge inclusive; rotation bins round to the
//! nearest bin center with ties toward the lower bin.

use crate::error::{AgentError, Result};
use serde::{Deserialize, Serialize};
use voxbc_sim::{v3, GripperState, Vec3, TAU, WORKSPACE};

pub const ROT_BINS: usize = 72;
/// Rotation bin width: 5 degrees.
pub const ROT_BIN_RAD: f64 = TAU / ROT_BINS as f64;
pub const GRIP_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscretizedAction {
    /// Voxel indices (ix, iy, iz), each in [0, V).
    pub coord: [usize; 3],
    /// Per-axis rotation bins in [0, 72).
    pub rot: [usize; 3],
    /// Gripper class: false = open (index 0), true = close (index 1).
    pub close: bool,
}

impl DiscretizedAction {
    pub fn grip_index(&self) -> usize {
        usize::from(self.close)
    }

    /// Row-major flat voxel index: iz + V*iy + V^2*ix.
    pub fn flat_coord(&self, v: usize) -> usize {
        self.coord[2] + v * self.coord[1] + v * v * self.coord[0]
    }

    pub fn from_flat_coord(flat: usize, v: usize, rot: [usize; 3], close: bool) -> Self {
        DiscretizedAction { coord: unflatten_coord(flat, v), rot, close }
    }
}

pub fn unflatten_coord(flat: usize, v: usize) -> [usize; 3] {
    [flat / (v * v), (flat / v) % v, flat % v]
}

/// Lower-edge-inclusive position binning; the workspace upper face maps to
/// the last voxel.
pub fn discretize_coord(p: f64, v: usize) -> usize {
    ((p * v as f64).floor() as usize).min(v - 1)
}

/// Nearest-bin rotation binning with ties toward the lower bin, modulo a turn.
pub fn discretize_angle(a: f64) -> usize {
    let wrapped = a.rem_euclid(TAU);
    let bin = (wrapped / ROT_BIN_RAD - 0.5).ceil() as isize;
    bin.rem_euclid(ROT_BINS as isize) as usize
}

pub fn discretize(pose: &GripperState, v: usize) -> Result<DiscretizedAction> {
    if !WORKSPACE.contains(pose.pos) {
        return Err(AgentError::Range(format!(
            "pose position {:?} outside the unit workspace",
            pose.pos
        )));
    }
    Ok(DiscretizedAction {
        coord: [
            discretize_coord(pose.pos.x, v),
            discretize_coord(pose.pos.y, v),
            discretize_coord(pose.pos.z, v),
        ],
        rot: [
            discretize_angle(pose.euler.x),
            discretize_angle(pose.euler.y),
            discretize_angle(pose.euler.z),
        ],
        close: !pose.open,
    })
}

/// Discrete action back to a continuous pose: voxel centers and bin centers.
/// Also returns the reconstructed scalar-last quaternion.
pub fn undiscretize(a: &DiscretizedAction, v: usize) -> (GripperState, [f64; 4]) {
    let c = |i: usize| (i as f64 + 0.5) / v as f64;
    let euler = v3(
        a.rot[0] as f64 * ROT_BIN_RAD,
        a.rot[1] as f64 * ROT_BIN_RAD,
        a.rot[2] as f64 * ROT_BIN_RAD,
    );
    let pose = GripperState {
        pos: v3(c(a.coord[0]), c(a.coord[1]), c(a.coord[2])),
        euler,
        open: !a.close,
    };
    let quat = euler_to_quat(euler);
    (pose, quat)
}

/// Z-Y-X intrinsic Euler (roll = e.x, pitch = e.y, yaw = e.z) to scalar-last
/// quaternion with w >= 0.
pub fn euler_to_quat(e: Vec3) -> [f64; 4] {
    let (sr, cr) = (e.x / 2.0).sin_cos();
    let (sp, cp) = (e.y / 2.0).sin_cos();
    let (sy, cy) = (e.z / 2.0).sin_cos();
    let w = cr * cp * cy + sr * sp * sy;
    let x = sr * cp * cy - cr * sp * sy;
    let y = cr * sp * cy + sr * cp * sy;
    let z = cr * cp * sy - sr * sp * cy;
    if w < 0.0 {
        [-x, -y, -z, -w]
    } else {
        [x, y, z, w]
    }
}

const GIMBAL_EPS: f64 = 1e-9;

/// Scalar-last quaternion to Z-Y-X intrinsic Euler angles in [0, 2*pi).
/// At gimbal lock (|pitch| = 90 degrees) roll is fixed to zero.
pub fn quat_to_euler(q: [f64; 4]) -> Result<Vec3> {
    let [x, y, z, w] = q;
    let norm = (x * x + y * y + z * z + w * w).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(AgentError::Numeric(format!("quaternion norm {norm} is not 1")));
    }
    let sin_pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0);
    let wrap = |a: f64| a.rem_euclid(TAU);
    if sin_pitch.abs() > 1.0 - GIMBAL_EPS {
        let pitch = if sin_pitch > 0.0 { TAU / 4.0 } else { 3.0 * TAU / 4.0 };
        // with roll pinned to 0, yaw/2 = atan2(z, w) in both lock hemispheres
        let yaw = wrap(2.0 * z.atan2(w));
        return Ok(v3(0.0, pitch, yaw));
    }
    let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let pitch = sin_pitch.asin();
    let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    Ok(v3(wrap(roll), wrap(pitch), wrap(yaw)))
}

/// Geodesic angle between two unit quaternions, in radians.
pub fn quat_geodesic(a: [f64; 4], b: [f64; 4]) -> f64 {
    let dot: f64 = (0..4).map(|i| a[i] * b[i]).sum();
    2.0 * dot.abs().clamp(0.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DEG: f64 = TAU / 360.0;

    fn pose(pos: Vec3, euler: Vec3) -> GripperState {
        GripperState { pos, euler, open: true }
    }

    #[test]
    fn center_point_bins_to_midgrid_at_v100() {
        let a = discretize(&pose(v3(0.505, 0.505, 0.505), Vec3::ZERO), 100).unwrap();
        assert_eq!(a.coord, [50, 50, 50]);
        assert_eq!(a.rot, [0, 0, 0]);
        assert!(!a.close);
    }

    #[test]
    fn boundary_half_meter_is_lower_edge_inclusive() {
        assert_eq!(discretize_coord(0.5, 100), 50);
        assert_eq!(discretize_coord(0.0, 100), 0);
        assert_eq!(discretize_coord(1.0, 100), 99);
    }

    #[test]
    fn angle_binning_rounds_to_nearest_with_wraparound() {
        assert_eq!(discretize_angle(7.0 * DEG), 1);
        assert_eq!(discretize_angle(357.6 * DEG), 0);
        assert_eq!(discretize_angle(2.5 * DEG), 0, "tie goes to the lower bin");
        assert_eq!(discretize_angle(2.5000001 * DEG), 1);
        assert_eq!(discretize_angle(0.0), 0);
    }

    #[test]
    fn out_of_workspace_pose_is_a_range_error() {
        let err = discretize(&pose(v3(1.2, 0.5, 0.5), Vec3::ZERO), 32);
        assert!(matches!(err, Err(AgentError::Range(_))));
    }

    #[test]
    fn identity_rotation_quaternion() {
        assert_eq!(euler_to_quat(Vec3::ZERO), [0.0, 0.0, 0.0, 1.0]);
        let (p, q) = undiscretize(
            &DiscretizedAction { coord: [0, 0, 0], rot: [0, 0, 0], close: false },
            32,
        );
        assert_eq!(q, [0.0, 0.0, 0.0, 1.0]);
        assert!((p.pos.x - 0.5 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn yaw_quarter_turn_closed_form() {
        let q = euler_to_quat(v3(0.0, 0.0, TAU / 4.0));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q[2] - s).abs() < 1e-15);
        assert!((q[3] - s).abs() < 1e-15);
        assert!(q[0].abs() < 1e-15 && q[1].abs() < 1e-15);
    }

    #[test]
    fn codec_roundtrip_identity_on_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let a = DiscretizedAction {
                coord: [rng.gen_range(0..32), rng.gen_range(0..32), rng.gen_range(0..32)],
                rot: [
                    rng.gen_range(0..ROT_BINS),
                    rng.gen_range(0..ROT_BINS),
                    rng.gen_range(0..ROT_BINS),
                ],
                close: rng.gen(),
            };
            let (p, _) = undiscretize(&a, 32);
            assert_eq!(discretize(&p, 32).unwrap(), a);
        }
    }

    #[test]
    fn roundtrip_errors_bounded_by_half_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = pose(
                v3(rng.gen(), rng.gen(), rng.gen()),
                v3(
                    rng.gen_range(0.0..TAU),
                    rng.gen_range(0.0..TAU),
                    rng.gen_range(0.0..TAU),
                ),
            );
            let a = discretize(&p, 100).unwrap();
            let (r, _) = undiscretize(&a, 100);
            for (got, want) in [
                (r.pos.x, p.pos.x),
                (r.pos.y, p.pos.y),
                (r.pos.z, p.pos.z),
            ] {
                assert!((got - want).abs() <= 0.005 + 1e-12);
            }
            for axis in 0..3 {
                let (got, want) = match axis {
                    0 => (r.euler.x, p.euler.x),
                    1 => (r.euler.y, p.euler.y),
                    _ => (r.euler.z, p.euler.z),
                };
                let diff = (got - want).rem_euclid(TAU);
                let circ = diff.min(TAU - diff);
                assert!(circ <= 2.5 * DEG + 1e-12);
            }
        }
    }

    #[test]
    fn euler_quat_roundtrip_away_from_gimbal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 1000 {
            let e = v3(
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.0..TAU),
            );
            let q = euler_to_quat(e);
            let sin_pitch: f64 = 2.0 * (q[3] * q[1] - q[2] * q[0]);
            if sin_pitch.abs() > 0.999 {
                continue;
            }
            let back = quat_to_euler(q).unwrap();
            let q2 = euler_to_quat(back);
            assert!(quat_geodesic(q, q2) < 1e-6, "e={e:?} back={back:?}");
            checked += 1;
        }
    }

    #[test]
    fn gimbal_lock_pins_roll_to_zero() {
        for pitch in [TAU / 4.0, -TAU / 4.0] {
            let q = euler_to_quat(v3(0.7, pitch, 1.3));
            let e = quat_to_euler(q).unwrap();
            assert_eq!(e.x, 0.0);
            let q2 = euler_to_quat(e);
            assert!(quat_geodesic(q, q2) < 1e-9, "same rotation despite re-parameterization");
        }
    }

    #[test]
    fn non_unit_quaternion_is_a_numeric_error() {
        assert!(matches!(
            quat_to_euler([0.0, 0.0, 0.0, 1.1]),
            Err(AgentError::Numeric(_))
        ));
    }

    #[test]
    fn flat_coord_matches_enumeration_at_v4() {
        let v = 4;
        let mut flat = 0;
        for ix in 0..v {
            for iy in 0..v {
                for iz in 0..v {
                    let a = DiscretizedAction { coord: [ix, iy, iz], rot: [0; 3], close: false };
                    assert_eq!(a.flat_coord(v), flat);
                    assert_eq!(unflatten_coord(flat, v), [ix, iy, iz]);
                    flat += 1;
                }
            }
        }
    }
}
