//! Desk-scale tabletop manipulation environment.
//!
//! Everything lives in a unit workspace cube: a table slab, task objects built
//! from axis-aligned boxes, a point gripper, and a four-camera RGB-D rig with
//! an analytic ray-cast renderer. Four tasks (press a button, open a drawer,
//! slide a block onto a zone, stack one block on another) each come in three
//! language-addressable variations with scripted experts that always succeed.
//!
//! Rendering is data-parallel when the `parallel` feature (on by default) is
//! enabled; the sequential fallback produces bit-identical images.

pub mod camera;
pub mod config;
pub mod env;
pub mod error;
pub mod expert;
pub mod geometry;
pub mod render;
pub mod scene;
pub mod task;

pub use camera::{default_cameras, Camera, CAMERA_NAMES, DEFAULT_RESOLUTION};
pub use config::SimConfig;
pub use env::{wrap_angle, Action, Env, GripperState, Status, TAU};
pub use error::{Result, SimError};
pub use expert::{run_expert, ExpertStep, ExpertTrajectory, MIN_TRAVEL_SPEED};
pub use geometry::{v3, Aabb, Vec3};
pub use render::{RenderBox, RgbdImage, DEPTH_MISS};
pub use scene::{ObjKind, SceneObject, TABLE_TOP, WORKSPACE};
pub use task::{
    build_scene, default_templates, fill_template, language_for, LangMode, TaskKind, ALL_TASKS,
    BAND_NAMES, COLOR_NAMES,
};
