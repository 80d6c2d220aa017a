//! The live environment: gripper state, object state, macro-action stepping,
//! and the per-task success predicates.
//!
//! Motion model, in one paragraph: the gripper is a point. A macro step moves
//! it along a straight segment to the target pose in 1 cm sub-steps, carrying
//! any grasped block rigidly and dragging a grasped drawer handle along its
//! rail. Solid geometry (table slab, drawer body) blocks the whole step up
//! front; traversable objects never do. Orientation is tracked and recorded
//! but has no collision semantics. There is no gravity; the one concession is
//! that a released block settles straight down onto its support so stacked
//! and dragged blocks end at exact rest heights.

use crate::camera::Camera;
use crate::error::{Result, SimError};
use crate::geometry::{v3, Aabb, Vec3};
use crate::render::{render, RenderBox, RgbdImage};
use crate::scene::{ObjKind, SceneObject, TABLE, TABLE_COLOR, TABLE_TOP, WORKSPACE};
use crate::task::{
    build_scene, TaskAnchors, TaskKind, BLOCK_HALF, BLOCK_REST_Z, BUTTON_CONTACT_XY,
    BUTTON_CONTACT_Z, CAP_PRESS_DROP, DRAWER_MAX_PULL, DRAWER_SUCCESS_DISP, GRASP_RADIUS,
    SLIDE_TOL_XY, SLIDE_TOL_Z, STACK_TOL_XY, STACK_TOL_Z,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const TAU: f64 = std::f64::consts::TAU;
/// Sub-step length for motion and contact checks.
const SUBSTEP: f64 = 0.01;
/// Solids are shrunk by this margin so a path that merely grazes a face does
/// not count as a hit.
const SOLID_INSET: f64 = 1e-6;
const GRIPPER_MARKER_HALF: f64 = 0.015;
const GRIPPER_OPEN_COLOR: [f64; 3] = [1.0, 0.85, 0.1];
const GRIPPER_CLOSED_COLOR: [f64; 3] = [0.9, 0.45, 0.05];
const HOME_POS: Vec3 = Vec3 { x: 0.5, y: 0.12, z: 0.40 };

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if w >= TAU { 0.0 } else { w }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub pos: Vec3,
    /// Z-Y-X intrinsic Euler angles, each wrapped into [0, 2*pi).
    pub euler: Vec3,
    pub open: bool,
}

/// One macro action: an absolute target pose plus the desired gripper state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub pos: Vec3,
    pub euler: Vec3,
    pub open: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Straight segment to the target crosses solid geometry; state unchanged.
    InvalidPath,
    /// Target position outside the unit workspace; state unchanged.
    OutOfWorkspace,
}

#[derive(Debug, Clone, Copy)]
enum Grasp {
    Block { index: usize, offset: Vec3 },
    Handle { band: usize, anchor_y: f64, anchor_disp: f64 },
}

#[derive(Debug, Clone, Copy)]
struct BandState {
    slide_index: usize,
    handle_index: usize,
    grasp_base: Vec3,
    slide_base: Aabb,
    handle_base: Aabb,
    disp: f64,
}

#[derive(Debug, Clone)]
enum TaskRt {
    Press { cap_index: usize, contact: Vec3, pressed: bool },
    Drawer { bands: [BandState; 3], target: usize },
    Slide { block_index: usize, zone: Vec3 },
    Stack { a: usize, b: usize },
}

#[derive(Debug, Clone)]
pub struct Env {
    kind: TaskKind,
    variation: usize,
    objects: Vec<SceneObject>,
    task: TaskRt,
    gripper: GripperState,
    grasped: Option<Grasp>,
}

impl Env {
    /// Builds a fresh episode. `rng` drives layout jitter only; stepping is
    /// fully deterministic afterwards.
    pub fn new(
        kind: TaskKind,
        variation: usize,
        jitter: f64,
        extra_objects: &[SceneObject],
        rng: &mut impl Rng,
    ) -> Result<Env> {
        let scene = build_scene(kind, variation, jitter, rng)?;
        let mut objects = scene.objects;
        for extra in extra_objects {
            if extra.movable {
                return Err(SimError::Config(format!(
                    "extra object `{}` must be static",
                    extra.name
                )));
            }
            objects.push(extra.clone());
        }
        let task = match scene.anchors {
            TaskAnchors::PressButton { cap_index, contact } => {
                TaskRt::Press { cap_index, contact, pressed: false }
            }
            TaskAnchors::OpenDrawer { bands, target_band } => {
                let rt = bands.map(|b| BandState {
                    slide_index: b.slide_index,
                    handle_index: b.handle_index,
                    grasp_base: b.grasp,
                    slide_base: objects[b.slide_index].aabb,
                    handle_base: objects[b.handle_index].aabb,
                    disp: 0.0,
                });
                TaskRt::Drawer { bands: rt, target: target_band }
            }
            TaskAnchors::SlideBlock { block_index, zone_center } => {
                TaskRt::Slide { block_index, zone: zone_center }
            }
            TaskAnchors::StackBlock { a_index, b_index } => {
                TaskRt::Stack { a: a_index, b: b_index }
            }
        };
        // Pressing is done with a closed gripper; every other task starts open.
        let open = kind != TaskKind::PressButton;
        Ok(Env {
            kind,
            variation,
            objects,
            task,
            gripper: GripperState { pos: HOME_POS, euler: Vec3::ZERO, open },
            grasped: None,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn variation(&self) -> usize {
        self.variation
    }

    pub fn gripper(&self) -> &GripperState {
        &self.gripper
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn is_grasping(&self) -> bool {
        self.grasped.is_some()
    }

    pub fn object_center(&self, name: &str) -> Option<Vec3> {
        self.objects.iter().find(|o| o.name == name).map(|o| o.center())
    }

    /// Contact reference for the button task: cap center x/y at unpressed cap top.
    pub fn button_contact(&self) -> Option<Vec3> {
        match &self.task {
            TaskRt::Press { contact, .. } => Some(*contact),
            _ => None,
        }
    }

    pub fn target_band(&self) -> Option<usize> {
        match &self.task {
            TaskRt::Drawer { target, .. } => Some(*target),
            _ => None,
        }
    }

    /// Current grasp point of a drawer handle, following any pull so far.
    pub fn band_grasp(&self, band: usize) -> Option<Vec3> {
        match &self.task {
            TaskRt::Drawer { bands, .. } => {
                let b = bands.get(band)?;
                Some(b.grasp_base - v3(0.0, b.disp, 0.0))
            }
            _ => None,
        }
    }

    pub fn drawer_disp(&self, band: usize) -> Option<f64> {
        match &self.task {
            TaskRt::Drawer { bands, .. } => bands.get(band).map(|b| b.disp),
            _ => None,
        }
    }

    /// Drag target for the slide task: zone center at block rest height.
    pub fn zone_target(&self) -> Option<Vec3> {
        match &self.task {
            TaskRt::Slide { zone, .. } => Some(*zone),
            _ => None,
        }
    }

    fn solids(&self) -> Vec<Aabb> {
        let mut s = vec![TABLE.inset(SOLID_INSET)];
        for o in &self.objects {
            if o.solid {
                s.push(o.aabb.inset(SOLID_INSET));
            }
        }
        s
    }

    fn path_blocked(&self, a: Vec3, b: Vec3) -> bool {
        self.solids().iter().any(|s| s.segment_hits(a, b))
    }

    fn set_band_disp(&mut self, band: usize, disp: f64) {
        let TaskRt::Drawer { bands, .. } = &mut self.task else { return };
        let b = &mut bands[band];
        b.disp = disp;
        let shift = v3(0.0, -disp, 0.0);
        let slide = b.slide_base.translated(shift);
        let handle = b.handle_base.translated(shift);
        let (si, hi) = (b.slide_index, b.handle_index);
        self.objects[si].aabb = slide;
        self.objects[hi].aabb = handle;
    }

    /// Teleports a movable box so its center lands at `c`, clamped to keep the
    /// box inside the workspace.
    fn place_object(&mut self, index: usize, c: Vec3) {
        let half = (self.objects[index].aabb.max - self.objects[index].aabb.min) * 0.5;
        let c = Vec3 {
            x: c.x.clamp(half.x, 1.0 - half.x),
            y: c.y.clamp(half.y, 1.0 - half.y),
            z: c.z.clamp(half.z, 1.0 - half.z),
        };
        self.objects[index].aabb = Aabb::centered(c, half);
    }

    fn move_gripper_to(&mut self, p: Vec3) {
        self.gripper.pos = p;
        match self.grasped {
            Some(Grasp::Block { index, offset }) => self.place_object(index, p + offset),
            Some(Grasp::Handle { band, anchor_y, anchor_disp }) => {
                let disp = (anchor_disp + (anchor_y - p.y)).clamp(0.0, DRAWER_MAX_PULL);
                self.set_band_disp(band, disp);
            }
            None => {}
        }
        let g = self.gripper.pos;
        if let TaskRt::Press { cap_index, contact, pressed } = &mut self.task {
            let hit = (g.x - contact.x).abs() <= BUTTON_CONTACT_XY
                && (g.y - contact.y).abs() <= BUTTON_CONTACT_XY
                && (g.z - contact.z).abs() <= BUTTON_CONTACT_Z;
            if hit && !*pressed {
                // Latch once; the cap sinks and darkens.
                *pressed = true;
                let cap = &mut self.objects[*cap_index];
                cap.aabb = cap.aabb.translated(v3(0.0, 0.0, -CAP_PRESS_DROP));
                for ch in &mut cap.color {
                    *ch *= 0.4;
                }
            }
        }
    }

    /// Drops a block straight down onto the highest support under its
    /// footprint (table top or another block).
    fn settle_block(&mut self, index: usize) {
        let c = self.objects[index].center();
        let half_z = (self.objects[index].aabb.max.z - self.objects[index].aabb.min.z) * 0.5;
        let mut support = TABLE_TOP;
        for (j, o) in self.objects.iter().enumerate() {
            if j == index || o.kind != ObjKind::Block {
                continue;
            }
            let oc = o.center();
            if (oc.x - c.x).abs() < 2.0 * BLOCK_HALF && (oc.y - c.y).abs() < 2.0 * BLOCK_HALF {
                support = support.max(o.aabb.max.z);
            }
        }
        self.place_object(index, v3(c.x, c.y, support + half_z));
    }

    /// Opens or closes the gripper. Closing grabs the nearest graspable object
    /// whose center is within `GRASP_RADIUS` (Chebyshev); ties go to the lower
    /// object index. Opening releases and lets a held block settle.
    pub fn set_gripper_open(&mut self, open: bool) {
        if open == self.gripper.open {
            return;
        }
        if open {
            if let Some(Grasp::Block { index, .. }) = self.grasped {
                self.grasped = None;
                self.settle_block(index);
            }
            self.grasped = None;
        } else {
            let g = self.gripper.pos;
            let mut best: Option<(usize, f64)> = None;
            for (i, o) in self.objects.iter().enumerate() {
                if !o.kind.graspable() {
                    continue;
                }
                let d = o.center().chebyshev(g);
                if d <= GRASP_RADIUS && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            if let Some((i, _)) = best {
                self.grasped = Some(match self.objects[i].kind {
                    ObjKind::Block => Grasp::Block { index: i, offset: self.objects[i].center() - g },
                    ObjKind::Handle => {
                        let band = match &self.task {
                            TaskRt::Drawer { bands, .. } => bands
                                .iter()
                                .position(|b| b.handle_index == i)
                                .expect("handle belongs to a band"),
                            _ => unreachable!("handles only exist in drawer scenes"),
                        };
                        let disp = self.drawer_disp(band).unwrap_or(0.0);
                        Grasp::Handle { band, anchor_y: g.y, anchor_disp: disp }
                    }
                    _ => unreachable!("graspable() admits blocks and handles only"),
                });
            }
        }
        self.gripper.open = open;
    }

    /// Moves the gripper straight to `p` in 1 cm sub-steps, carrying grasped
    /// objects and evaluating button contact along the way. Callers must have
    /// validated the path.
    pub fn advance_to(&mut self, p: Vec3) {
        let a = self.gripper.pos;
        let d = p - a;
        let len = d.norm();
        if len == 0.0 {
            return;
        }
        let n = (len / SUBSTEP).ceil().max(1.0) as usize;
        for i in 1..=n {
            let q = if i == n { p } else { a + d * (i as f64 / n as f64) };
            self.move_gripper_to(q);
        }
    }

    /// Applies one macro action. Refused actions leave the state untouched.
    pub fn step(&mut self, action: &Action) -> Status {
        if !WORKSPACE.contains(action.pos) {
            return Status::OutOfWorkspace;
        }
        if self.path_blocked(self.gripper.pos, action.pos) {
            return Status::InvalidPath;
        }
        self.advance_to(action.pos);
        self.gripper.euler =
            v3(wrap_angle(action.euler.x), wrap_angle(action.euler.y), wrap_angle(action.euler.z));
        self.set_gripper_open(action.open);
        Status::Ok
    }

    fn block_grasped(&self, index: usize) -> bool {
        matches!(self.grasped, Some(Grasp::Block { index: i, .. }) if i == index)
    }

    pub fn success(&self) -> bool {
        match &self.task {
            TaskRt::Press { pressed, .. } => *pressed,
            TaskRt::Drawer { bands, target } => bands[*target].disp >= DRAWER_SUCCESS_DISP,
            TaskRt::Slide { block_index, zone } => {
                let c = self.objects[*block_index].center();
                !self.block_grasped(*block_index)
                    && (c.x - zone.x).abs() <= SLIDE_TOL_XY
                    && (c.y - zone.y).abs() <= SLIDE_TOL_XY
                    && (c.z - BLOCK_REST_Z).abs() <= SLIDE_TOL_Z
            }
            TaskRt::Stack { a, b } => {
                let ca = self.objects[*a].center();
                let cb = self.objects[*b].center();
                !self.block_grasped(*a)
                    && (ca.x - cb.x).abs() <= STACK_TOL_XY
                    && (ca.y - cb.y).abs() <= STACK_TOL_XY
                    && (ca.z - (cb.z + 2.0 * BLOCK_HALF)).abs() <= STACK_TOL_Z
            }
        }
    }

    /// Renders the scene plus a gripper marker cube from each camera, in the
    /// order the cameras are given.
    pub fn observe(&self, cameras: &[Camera]) -> Vec<RgbdImage> {
        let mut boxes = Vec::with_capacity(self.objects.len() + 2);
        boxes.push(RenderBox { aabb: TABLE, color: TABLE_COLOR });
        for o in &self.objects {
            boxes.push(o.render_box());
        }
        let h = GRIPPER_MARKER_HALF;
        let m = self.gripper.pos.clamped(v3(h, h, h), v3(1.0 - h, 1.0 - h, 1.0 - h));
        boxes.push(RenderBox {
            aabb: Aabb::centered(m, v3(h, h, h)),
            color: if self.gripper.open { GRIPPER_OPEN_COLOR } else { GRIPPER_CLOSED_COLOR },
        });
        cameras.iter().map(|c| render(&boxes, c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{COLOR_RGB, DRAWER_EXPERT_PULL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(kind: TaskKind, variation: usize, seed: u64) -> Env {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Env::new(kind, variation, 0.0, &[], &mut rng).unwrap()
    }

    fn act(pos: Vec3, open: bool) -> Action {
        Action { pos, euler: Vec3::ZERO, open }
    }

    #[test]
    fn press_descent_latches_and_darkens_cap() {
        let mut e = env(TaskKind::PressButton, 1, 0);
        let c = e.button_contact().unwrap();
        assert_eq!(e.step(&act(v3(c.x, c.y, 0.30), false)), Status::Ok);
        assert!(!e.success());
        assert_eq!(e.step(&act(v3(c.x, c.y, c.z + 0.01), false)), Status::Ok);
        assert!(e.success());
        let cap = e.objects().iter().find(|o| o.name == "button_cap").unwrap();
        assert!((cap.center().z - (0.145 - CAP_PRESS_DROP)).abs() < 1e-12);
        assert!(cap.color[1] < COLOR_RGB[1][1]);
    }

    #[test]
    fn refused_actions_leave_state_untouched() {
        let mut e = env(TaskKind::PressButton, 0, 1);
        let before = format!("{:?}", (e.gripper(), e.objects()));
        assert_eq!(e.step(&act(v3(0.5, 0.5, 1.2), false)), Status::OutOfWorkspace);
        assert_eq!(e.step(&act(v3(0.5, 0.5, 0.08), false)), Status::InvalidPath);
        let after = format!("{:?}", (e.gripper(), e.objects()));
        assert_eq!(before, after);
    }

    #[test]
    fn stepping_is_deterministic() {
        let mut a = env(TaskKind::SlideBlock, 2, 9);
        let mut b = a.clone();
        let actions =
            [act(v3(0.52, 0.30, 0.12), false), act(v3(0.73, 0.51, 0.12), false), act(v3(0.73, 0.51, 0.12), true)];
        for action in &actions {
            assert_eq!(a.step(action), b.step(action));
        }
        assert_eq!(format!("{:?}", (a.gripper(), a.objects())), format!("{:?}", (b.gripper(), b.objects())));
    }

    #[test]
    fn drawer_pull_moves_band_and_succeeds() {
        let mut e = env(TaskKind::OpenDrawer, 0, 3);
        let g = e.band_grasp(0).unwrap();
        assert_eq!(e.step(&act(v3(g.x, g.y, g.z + 0.12), true)), Status::Ok);
        assert_eq!(e.step(&act(g, true)), Status::Ok);
        assert_eq!(e.step(&act(g, false)), Status::Ok);
        assert!(e.is_grasping());
        assert_eq!(e.step(&act(v3(g.x, g.y - DRAWER_EXPERT_PULL, g.z), false)), Status::Ok);
        assert!((e.drawer_disp(0).unwrap() - DRAWER_EXPERT_PULL).abs() < 1e-9);
        assert!(e.success());
        // handle followed the pull; other bands stayed put
        let h = e.band_grasp(0).unwrap();
        assert!((h.y - (g.y - DRAWER_EXPERT_PULL)).abs() < 1e-9);
        assert_eq!(e.drawer_disp(1).unwrap(), 0.0);
    }

    #[test]
    fn drawer_pull_clamps_at_max() {
        let mut e = env(TaskKind::OpenDrawer, 2, 4);
        let g = e.band_grasp(2).unwrap();
        e.step(&act(v3(g.x, g.y, g.z + 0.12), true));
        e.step(&act(g, true));
        e.step(&act(g, false));
        e.step(&act(v3(g.x, g.y - 0.35, g.z), false));
        assert!((e.drawer_disp(2).unwrap() - DRAWER_MAX_PULL).abs() < 1e-12);
    }

    #[test]
    fn slide_drag_release_settles_block_on_zone() {
        let mut e = env(TaskKind::SlideBlock, 1, 5);
        let b = e.object_center("block").unwrap();
        let z = e.zone_target().unwrap();
        e.step(&act(v3(b.x, b.y, b.z + 0.10), true));
        e.step(&act(b, true));
        e.step(&act(b, false));
        assert!(e.is_grasping());
        e.step(&act(z, false));
        assert!(!e.success(), "still grasped");
        e.step(&act(z, true));
        assert!(!e.is_grasping());
        let c = e.object_center("block").unwrap();
        assert!((c.z - BLOCK_REST_Z).abs() < 1e-12);
        assert!(e.success());
    }

    #[test]
    fn stack_places_a_on_b_at_exact_height() {
        let mut e = env(TaskKind::StackBlock, 0, 6);
        let a = e.object_center("block_a").unwrap();
        let b = e.object_center("block_b").unwrap();
        e.step(&act(v3(a.x, a.y, a.z + 0.12), true));
        e.step(&act(a, true));
        e.step(&act(a, false));
        e.step(&act(v3(a.x, a.y, 0.26), false));
        e.step(&act(v3(b.x, b.y, 0.26), false));
        e.step(&act(v3(b.x, b.y, b.z + 2.0 * BLOCK_HALF), false));
        e.step(&act(v3(b.x, b.y, b.z + 2.0 * BLOCK_HALF), true));
        let ca = e.object_center("block_a").unwrap();
        assert!((ca.z - (b.z + 2.0 * BLOCK_HALF)).abs() < 1e-12);
        assert!(e.success());
    }

    #[test]
    fn closing_far_from_everything_grasps_nothing() {
        let mut e = env(TaskKind::SlideBlock, 0, 7);
        let b = e.object_center("block").unwrap();
        e.step(&act(v3(b.x + 0.05, b.y, b.z + 0.05), true));
        e.step(&act(v3(b.x + 0.05, b.y, b.z + 0.05), false));
        assert!(!e.is_grasping());
    }

    #[test]
    fn euler_wraps_into_one_turn() {
        let mut e = env(TaskKind::PressButton, 0, 8);
        let mut a = act(v3(0.5, 0.5, 0.5), false);
        a.euler = v3(-0.1, TAU + 0.2, 7.0);
        assert_eq!(e.step(&a), Status::Ok);
        let g = e.gripper().euler;
        assert!((g.x - (TAU - 0.1)).abs() < 1e-12);
        assert!((g.y - 0.2).abs() < 1e-12);
        assert!((g.z - (7.0 - TAU)).abs() < 1e-12);
        for c in [g.x, g.y, g.z] {
            assert!((0.0..TAU).contains(&c));
        }
    }

    #[test]
    fn observation_resolution_and_camera_count() {
        let e = env(TaskKind::StackBlock, 1, 10);
        let cams = crate::camera::default_cameras(24);
        let imgs = e.observe(&cams);
        assert_eq!(imgs.len(), 4);
        for img in &imgs {
            assert_eq!(img.resolution, 24);
            // scene must actually be visible: some finite depth somewhere
            assert!(img.depth.iter().any(|d| d.is_finite()));
        }
    }
}
