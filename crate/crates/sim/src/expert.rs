//! Scripted experts: straight-line waypoint plans with trapezoidal speed
//! profiles, two-step zero-speed dwells at every waypoint, and gripper
//! toggles applied on arrival.
//!
//! The dwell structure is the contract downstream code leans on: away from
//! waypoints the per-step speed never drops below `MIN_TRAVEL_SPEED`, at
//! waypoints it is exactly zero for two consecutive steps, and toggles only
//! happen on the first dwell step. Slow-frame detection therefore recovers
//! precisely the planted dwell indices.

use crate::camera::Camera;
use crate::env::Env;
use crate::error::{Result, SimError};
use crate::geometry::{v3, Vec3};
use crate::render::RgbdImage;
use crate::task::{TaskKind, BLOCK_HALF, DRAWER_EXPERT_PULL};

/// Lower bound on per-step travel distance away from dwells.
pub const MIN_TRAVEL_SPEED: f64 = 0.015;
const CRUISE: f64 = 0.06;
const RAMP: [f64; 2] = [0.02, 0.04];
const DWELL_STEPS: usize = 2;
const MIN_HOP: f64 = 0.03;

#[derive(Debug, Clone, Copy)]
struct Waypoint {
    pos: Vec3,
    /// New gripper open state applied on arrival, if any.
    toggle: Option<bool>,
}

fn wp(pos: Vec3) -> Waypoint {
    Waypoint { pos, toggle: None }
}

fn wpt(pos: Vec3, open: bool) -> Waypoint {
    Waypoint { pos, toggle: Some(open) }
}

fn plan(env: &Env) -> Result<Vec<Waypoint>> {
    let plan = match env.kind() {
        TaskKind::PressButton => {
            let c = env.button_contact().expect("press scene");
            vec![
                wp(v3(c.x, c.y, c.z + 0.10)),
                wp(v3(c.x, c.y, c.z + 0.01)),
                wp(v3(c.x, c.y, c.z + 0.14)),
            ]
        }
        TaskKind::OpenDrawer => {
            let band = env.target_band().expect("drawer scene");
            let g = env.band_grasp(band).expect("band exists");
            let pulled = g - v3(0.0, DRAWER_EXPERT_PULL, 0.0);
            vec![
                wp(v3(g.x, g.y, g.z + 0.12)),
                wpt(g, false),
                wpt(pulled, true),
                wp(v3(pulled.x, pulled.y, pulled.z + 0.12)),
            ]
        }
        TaskKind::SlideBlock => {
            let b = env.object_center("block").expect("slide scene");
            let z = env.zone_target().expect("slide scene");
            vec![
                wp(v3(b.x, b.y, b.z + 0.10)),
                wpt(b, false),
                wpt(z, true),
                wp(v3(z.x, z.y, z.z + 0.12)),
            ]
        }
        TaskKind::StackBlock => {
            let a = env.object_center("block_a").expect("stack scene");
            let b = env.object_center("block_b").expect("stack scene");
            let lift = 0.26;
            let place = b.z + 2.0 * BLOCK_HALF;
            vec![
                wp(v3(a.x, a.y, a.z + 0.12)),
                wpt(a, false),
                wp(v3(a.x, a.y, lift)),
                wp(v3(b.x, b.y, lift)),
                wpt(v3(b.x, b.y, place), true),
                wp(v3(b.x, b.y, lift)),
            ]
        }
    };
    Ok(plan)
}

/// Per-step travel distances for one straight segment. Ramps up, cruises,
/// ramps down; the remainder is spread evenly so no step falls below
/// `MIN_TRAVEL_SPEED`.
fn segment_speeds(len: f64) -> Vec<f64> {
    // full ramp up + down covers 0.12
    let base: f64 = RAMP.iter().sum::<f64>() * 2.0;
    debug_assert!(len >= MIN_HOP);
    if len >= base {
        let n_cruise = ((len - base) / CRUISE).floor() as usize;
        let mut speeds = Vec::with_capacity(4 + n_cruise);
        speeds.extend_from_slice(&RAMP);
        speeds.extend(std::iter::repeat(CRUISE).take(n_cruise));
        speeds.push(RAMP[1]);
        speeds.push(RAMP[0]);
        let rem = len - speeds.iter().sum::<f64>();
        let k = speeds.len() as f64;
        for s in &mut speeds {
            *s += rem / k;
        }
        speeds
    } else if len >= 0.08 {
        [1.0, 2.0, 2.0, 1.0].iter().map(|p| len * p / 6.0).collect()
    } else if len >= 0.04 {
        vec![len / 2.0, len / 2.0]
    } else {
        vec![len]
    }
}

#[derive(Debug, Clone)]
pub struct ExpertStep {
    pub pos: Vec3,
    pub euler: Vec3,
    pub open: bool,
    /// Distance travelled into this step; zero during dwells.
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct ExpertTrajectory {
    pub steps: Vec<ExpertStep>,
    /// Per step, per camera; present when cameras were supplied.
    pub images: Option<Vec<Vec<RgbdImage>>>,
    /// Indices of the zero-speed dwell steps, two per waypoint, sorted.
    pub dwell_indices: Vec<usize>,
}

impl ExpertTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Drives `env` through the scripted plan for its task, recording every
/// timestep. The terminal state always satisfies the task predicate; anything
/// else is a generation error.
pub fn run_expert(env: &mut Env, cameras: Option<&[Camera]>) -> Result<ExpertTrajectory> {
    let plan = plan(env)?;
    let mut steps: Vec<ExpertStep> = Vec::new();
    let mut images = cameras.map(|_| Vec::new());
    let mut dwell_indices = Vec::new();

    let record = |env: &Env,
                  speed: f64,
                  steps: &mut Vec<ExpertStep>,
                  images: &mut Option<Vec<Vec<RgbdImage>>>| {
        let g = env.gripper();
        steps.push(ExpertStep { pos: g.pos, euler: g.euler, open: g.open, speed });
        if let (Some(imgs), Some(cams)) = (images.as_mut(), cameras) {
            imgs.push(env.observe(cams));
        }
    };

    record(env, 0.0, &mut steps, &mut images);
    for waypoint in plan {
        let from = env.gripper().pos;
        let seg = waypoint.pos - from;
        let len = seg.norm();
        if len < MIN_HOP {
            return Err(SimError::Generation(format!(
                "waypoints {from:?} and {:?} are closer than {MIN_HOP}",
                waypoint.pos
            )));
        }
        let dir = seg / len;
        let speeds = segment_speeds(len);
        let mut cum = 0.0;
        let last = speeds.len() - 1;
        for (i, s) in speeds.iter().enumerate() {
            cum += s;
            let target = if i == last { waypoint.pos } else { from + dir * cum };
            env.advance_to(target);
            record(env, *s, &mut steps, &mut images);
        }
        for d in 0..DWELL_STEPS {
            if d == 0 {
                if let Some(open) = waypoint.toggle {
                    env.set_gripper_open(open);
                }
            }
            dwell_indices.push(steps.len());
            record(env, 0.0, &mut steps, &mut images);
        }
    }
    if !env.success() {
        return Err(SimError::Generation(format!(
            "expert finished without satisfying the {} predicate",
            env.kind().name()
        )));
    }
    Ok(ExpertTrajectory { steps, images, dwell_indices })
}
