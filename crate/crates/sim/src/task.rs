//! Task definitions: the four desk tasks, their three variations each, scene
//! layouts with per-episode jitter, and instruction templates.

use crate::error::{Result, SimError};
use crate::geometry::{v3, Aabb, Vec3};
use crate::scene::{ObjKind, SceneObject, TABLE_TOP};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PressButton,
    OpenDrawer,
    SlideBlock,
    StackBlock,
}

pub const ALL_TASKS: [TaskKind; 4] = [
    TaskKind::PressButton,
    TaskKind::OpenDrawer,
    TaskKind::SlideBlock,
    TaskKind::StackBlock,
];

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PressButton => "press_button",
            TaskKind::OpenDrawer => "open_drawer",
            TaskKind::SlideBlock => "slide_block",
            TaskKind::StackBlock => "stack_block",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_TASKS
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| SimError::Input(format!("unknown task `{s}`")))
    }

    pub fn index(self) -> usize {
        ALL_TASKS.iter().position(|t| *t == self).expect("task in ALL_TASKS")
    }

    pub fn variation_count(self) -> usize {
        3
    }
}

pub const COLOR_NAMES: [&str; 3] = ["red", "green", "blue"];
pub const COLOR_RGB: [[f64; 3]; 3] = [[0.82, 0.12, 0.12], [0.12, 0.68, 0.2], [0.15, 0.3, 0.85]];
/// Drawer bands top to bottom; variation v opens band v.
pub const BAND_NAMES: [&str; 3] = ["top", "middle", "bottom"];
pub const BAND_CENTERS_Z: [f64; 3] = [0.40, 0.28, 0.16];

pub const BLOCK_HALF: f64 = 0.02;
/// Center height of a block resting on the table.
pub const BLOCK_REST_Z: f64 = TABLE_TOP + BLOCK_HALF;

pub const GRASP_RADIUS: f64 = 0.02;
pub const BUTTON_CAP_TOP: f64 = 0.16;
pub const BUTTON_CONTACT_XY: f64 = 0.04;
pub const BUTTON_CONTACT_Z: f64 = 0.045;
pub const CAP_PRESS_DROP: f64 = 0.02;
pub const DRAWER_MAX_PULL: f64 = 0.18;
pub const DRAWER_SUCCESS_DISP: f64 = 0.10;
pub const DRAWER_EXPERT_PULL: f64 = 0.15;
pub const SLIDE_TOL_XY: f64 = 0.045;
pub const SLIDE_TOL_Z: f64 = 0.01;
pub const STACK_TOL_XY: f64 = 0.035;
pub const STACK_TOL_Z: f64 = 0.01;

const BUTTON_XS: [f64; 3] = [0.30, 0.50, 0.70];
const BUTTON_Y: f64 = 0.45;
const ZONE_XS: [f64; 3] = [0.25, 0.50, 0.75];
const ZONE_Y: f64 = 0.50;
/// (a_color, a_pos, b_color, b_pos) per stack variation; a is stacked onto b.
const STACK_LAYOUTS: [(usize, [f64; 2], usize, [f64; 2]); 3] = [
    (0, [0.35, 0.35], 2, [0.65, 0.35]),
    (1, [0.65, 0.30], 0, [0.35, 0.42]),
    (2, [0.50, 0.25], 1, [0.50, 0.48]),
];

/// Drawer band geometry resolved against the jittered cabinet position.
#[derive(Debug, Clone, Copy)]
pub struct DrawerBand {
    pub slide_index: usize,
    pub handle_index: usize,
    /// Where the expert grips: the handle center.
    pub grasp: Vec3,
}

/// Semantic handles into the object list, built alongside the scene.
#[derive(Debug, Clone)]
pub enum TaskAnchors {
    PressButton {
        cap_index: usize,
        /// Contact reference: jittered cap center x/y at the unpressed cap top.
        contact: Vec3,
    },
    OpenDrawer {
        bands: [DrawerBand; 3],
        /// Band this variation must open.
        target_band: usize,
    },
    SlideBlock {
        block_index: usize,
        /// Drag target: zone center x/y at block rest height.
        zone_center: Vec3,
    },
    StackBlock { a_index: usize, b_index: usize },
}

#[derive(Debug, Clone)]
pub struct TaskScene {
    pub objects: Vec<SceneObject>,
    pub anchors: TaskAnchors,
}

fn check_variation(kind: TaskKind, variation: usize) -> Result<()> {
    if variation >= kind.variation_count() {
        return Err(SimError::Input(format!(
            "task {} has {} variations, got index {variation}",
            kind.name(),
            kind.variation_count()
        )));
    }
    Ok(())
}

fn jit(rng: &mut impl Rng, jitter: f64) -> f64 {
    if jitter == 0.0 { 0.0 } else { rng.gen_range(-jitter..=jitter) }
}

fn block(name: &str, color: [f64; 3], cx: f64, cy: f64) -> Result<SceneObject> {
    let aabb = Aabb::centered(v3(cx, cy, BLOCK_REST_Z), v3(BLOCK_HALF, BLOCK_HALF, BLOCK_HALF));
    SceneObject::new(ObjKind::Block, name, aabb, color, true, false)
}

/// Builds the jittered scene for one episode. Jitter draws are taken in a
/// fixed order so a seeded rng reproduces the layout exactly.
pub fn build_scene(
    kind: TaskKind,
    variation: usize,
    jitter: f64,
    rng: &mut impl Rng,
) -> Result<TaskScene> {
    check_variation(kind, variation)?;
    if !(0.0..=0.05).contains(&jitter) {
        return Err(SimError::Config(format!("jitter {jitter} outside [0, 0.05]")));
    }
    let mut objects = Vec::new();
    let anchors = match kind {
        TaskKind::PressButton => {
            let bx = BUTTON_XS[variation] + jit(rng, jitter);
            let by = BUTTON_Y + jit(rng, jitter);
            objects.push(SceneObject::new(
                ObjKind::Button,
                "button_base",
                Aabb::centered(v3(bx, by, 0.115), v3(0.04, 0.04, 0.015)),
                [0.25, 0.25, 0.27],
                false,
                false,
            )?);
            let cap_index = objects.len();
            objects.push(SceneObject::new(
                ObjKind::Button,
                "button_cap",
                Aabb::centered(v3(bx, by, 0.145), v3(0.025, 0.025, 0.015)),
                COLOR_RGB[variation],
                false,
                false,
            )?);
            TaskAnchors::PressButton { cap_index, contact: v3(bx, by, BUTTON_CAP_TOP) }
        }
        TaskKind::OpenDrawer => {
            let jx = jit(rng, jitter);
            objects.push(SceneObject::new(
                ObjKind::DrawerBody,
                "drawer_body",
                Aabb::new(v3(0.35 + jx, 0.62, 0.10), v3(0.65 + jx, 0.92, 0.46)),
                [0.35, 0.24, 0.16],
                false,
                true,
            )?);
            let mut bands = Vec::with_capacity(3);
            for (b, zc) in BAND_CENTERS_Z.iter().enumerate() {
                let slide_index = objects.len();
                objects.push(SceneObject::new(
                    ObjKind::DrawerSlide,
                    format!("slide_{}", BAND_NAMES[b]),
                    Aabb::new(v3(0.37 + jx, 0.63, zc - 0.05), v3(0.63 + jx, 0.90, zc + 0.05)),
                    [0.62, 0.465, 0.28],
                    true,
                    false,
                )?);
                let handle_index = objects.len();
                objects.push(SceneObject::new(
                    ObjKind::Handle,
                    format!("handle_{}", BAND_NAMES[b]),
                    Aabb::centered(v3(0.50 + jx, 0.608, *zc), v3(0.05, 0.01, 0.015)),
                    [0.75, 0.75, 0.78],
                    true,
                    false,
                )?);
                bands.push(DrawerBand { slide_index, handle_index, grasp: v3(0.50 + jx, 0.608, *zc) });
            }
            TaskAnchors::OpenDrawer {
                bands: [bands[0], bands[1], bands[2]],
                target_band: variation,
            }
        }
        TaskKind::SlideBlock => {
            let bx = 0.50 + jit(rng, jitter);
            let by = 0.28 + jit(rng, jitter);
            let zx = ZONE_XS[variation] + jit(rng, jitter);
            let zy = ZONE_Y + jit(rng, jitter);
            let block_index = objects.len();
            objects.push(block("block", [0.9, 0.55, 0.15], bx, by)?);
            objects.push(SceneObject::new(
                ObjKind::TargetZone,
                "zone",
                Aabb::new(v3(zx - 0.06, zy - 0.06, 0.100), v3(zx + 0.06, zy + 0.06, 0.102)),
                COLOR_RGB[variation],
                false,
                false,
            )?);
            TaskAnchors::SlideBlock { block_index, zone_center: v3(zx, zy, BLOCK_REST_Z) }
        }
        TaskKind::StackBlock => {
            let (ac, apos, bc, bpos) = STACK_LAYOUTS[variation];
            let ax = apos[0] + jit(rng, jitter);
            let ay = apos[1] + jit(rng, jitter);
            let bx = bpos[0] + jit(rng, jitter);
            let by = bpos[1] + jit(rng, jitter);
            let a_index = objects.len();
            objects.push(block("block_a", COLOR_RGB[ac], ax, ay)?);
            let b_index = objects.len();
            objects.push(block("block_b", COLOR_RGB[bc], bx, by)?);
            TaskAnchors::StackBlock { a_index, b_index }
        }
    };
    Ok(TaskScene { objects, anchors })
}

pub fn default_templates(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::PressButton => {
            &["press the {color} button", "push down the {color} button", "poke the {color} button"]
        }
        TaskKind::OpenDrawer => &[
            "open the {pos} drawer",
            "grip the {pos} handle and pull the {pos} drawer open",
            "slide the {pos} drawer open",
        ],
        TaskKind::SlideBlock => &[
            "slide the block onto the {color} target",
            "push the block to the {color} square",
            "move the block onto the {color} mark",
        ],
        TaskKind::StackBlock => &[
            "stack the {color} block on top of the {other} block",
            "place the {color} block onto the {other} block",
            "put the {color} block on the {other} block",
        ],
    }
}

/// Substitutes the variation's slot values into one template.
pub fn fill_template(kind: TaskKind, variation: usize, template: &str) -> Result<String> {
    check_variation(kind, variation)?;
    let (color, pos, other) = match kind {
        TaskKind::PressButton | TaskKind::SlideBlock => (COLOR_NAMES[variation], "", ""),
        TaskKind::OpenDrawer => ("", BAND_NAMES[variation], ""),
        TaskKind::StackBlock => {
            let (ac, _, bc, _) = STACK_LAYOUTS[variation];
            (COLOR_NAMES[ac], "", COLOR_NAMES[bc])
        }
    };
    let filled = template.replace("{color}", color).replace("{pos}", pos).replace("{other}", other);
    if filled.contains('{') || filled.contains('}') {
        return Err(SimError::Config(format!("template `{template}` has an unknown slot")));
    }
    Ok(filled)
}

/// Instruction variety modes for demo generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangMode {
    /// Always the first template.
    Single,
    /// Uniform draw over all templates.
    Multi,
}

impl LangMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(LangMode::Single),
            "multi" => Ok(LangMode::Multi),
            other => Err(SimError::Input(format!("unknown language mode `{other}`"))),
        }
    }
}

/// Picks and fills an instruction. `templates` must be non-empty; callers pass
/// either `default_templates` or a configured override.
pub fn language_for(
    templates: &[String],
    kind: TaskKind,
    variation: usize,
    mode: LangMode,
    rng: &mut impl Rng,
) -> Result<String> {
    if templates.is_empty() {
        return Err(SimError::Config(format!("task {} has no templates", kind.name())));
    }
    let idx = match mode {
        LangMode::Single => 0,
        LangMode::Multi => rng.gen_range(0..templates.len()),
    };
    fill_template(kind, variation, &templates[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn owned(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn every_task_parses_and_has_three_variations() {
        for kind in ALL_TASKS {
            assert_eq!(TaskKind::parse(kind.name()).unwrap(), kind);
            assert_eq!(kind.variation_count(), 3);
            assert!(default_templates(kind).len() >= 2);
        }
        assert!(TaskKind::parse("juggle").is_err());
    }

    #[test]
    fn scenes_build_for_all_variations_under_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in ALL_TASKS {
            for v in 0..kind.variation_count() {
                for _ in 0..20 {
                    let scene = build_scene(kind, v, 0.03, &mut rng).unwrap();
                    assert!(!scene.objects.is_empty());
                }
            }
        }
    }

    #[test]
    fn variation_out_of_range_is_an_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_scene(TaskKind::PressButton, 3, 0.0, &mut rng);
        assert!(matches!(err, Err(SimError::Input(_))));
    }

    #[test]
    fn drawer_anchors_sit_inside_their_handles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = build_scene(TaskKind::OpenDrawer, 1, 0.03, &mut rng).unwrap();
        let TaskAnchors::OpenDrawer { bands, target_band } = &scene.anchors else {
            panic!("wrong anchors")
        };
        assert_eq!(*target_band, 1);
        for band in bands {
            let handle = &scene.objects[band.handle_index];
            assert_eq!(handle.kind, ObjKind::Handle);
            assert!(handle.aabb.contains(band.grasp));
            assert!((handle.center() - band.grasp).norm() < 1e-12);
        }
    }

    #[test]
    fn stack_blocks_start_well_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in 0..3 {
            for _ in 0..20 {
                let scene = build_scene(TaskKind::StackBlock, v, 0.03, &mut rng).unwrap();
                let TaskAnchors::StackBlock { a_index, b_index } = scene.anchors else {
                    panic!("wrong anchors")
                };
                let d = scene.objects[a_index].center() - scene.objects[b_index].center();
                assert!(d.x.abs().max(d.y.abs()) > 0.08, "blocks too close: {d:?}");
            }
        }
    }

    #[test]
    fn single_mode_is_deterministic_and_slots_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = owned(default_templates(TaskKind::OpenDrawer));
        let a = language_for(&t, TaskKind::OpenDrawer, 0, LangMode::Single, &mut rng).unwrap();
        let b = language_for(&t, TaskKind::OpenDrawer, 0, LangMode::Single, &mut rng).unwrap();
        assert_eq!(a, "open the top drawer");
        assert_eq!(a, b);
    }

    #[test]
    fn multi_mode_draws_every_filled_template() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = owned(default_templates(TaskKind::StackBlock));
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..100 {
            seen.insert(
                language_for(&t, TaskKind::StackBlock, 0, LangMode::Multi, &mut rng).unwrap(),
            );
        }
        assert_eq!(seen.len(), 3);
        assert!(seen.contains("stack the red block on top of the blue block"));
    }

    #[test]
    fn unknown_slot_is_rejected() {
        let err = fill_template(TaskKind::PressButton, 0, "press the {shape} button");
        assert!(matches!(err, Err(SimError::Config(_))));
    }
}
