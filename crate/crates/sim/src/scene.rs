//! Scene objects: axis-aligned boxes with semantics attached.
//!
//! All scene content lives inside the unit workspace cube. Geometry is kept
//! deliberately box-shaped so the renderer and the collision checks share one
//! primitive.

use crate::error::{Result, SimError};
use crate::geometry::{Aabb, Vec3};
use crate::render::RenderBox;
use serde::{Deserialize, Serialize};

/// Workspace bounds. Poses and scene geometry must stay inside this cube.
pub const WORKSPACE: Aabb = Aabb {
    min: Vec3 { x: 0.0, y: 0.0, z: 0.0 },
    max: Vec3 { x: 1.0, y: 1.0, z: 1.0 },
};

/// Table slab spanning the workspace floor. Solid in every scene.
pub const TABLE: Aabb = Aabb {
    min: Vec3 { x: 0.0, y: 0.0, z: 0.06 },
    max: Vec3 { x: 1.0, y: 1.0, z: 0.10 },
};

pub const TABLE_TOP: f64 = 0.10;
pub const TABLE_COLOR: [f64; 3] = [0.45, 0.35, 0.28];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjKind {
    Block,
    DrawerBody,
    DrawerSlide,
    Handle,
    Button,
    TargetZone,
}

impl ObjKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(ObjKind::Block),
            "drawer_body" => Ok(ObjKind::DrawerBody),
            "drawer_slide" => Ok(ObjKind::DrawerSlide),
            "handle" => Ok(ObjKind::Handle),
            "button" => Ok(ObjKind::Button),
            "target_zone" => Ok(ObjKind::TargetZone),
            other => Err(SimError::Config(format!("unknown object kind `{other}`"))),
        }
    }

    /// Kinds the gripper may pick up when closing near their center.
    pub fn graspable(self) -> bool {
        matches!(self, ObjKind::Block | ObjKind::Handle)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjKind,
    pub name: String,
    pub aabb: Aabb,
    pub color: [f64; 3],
    /// Movable objects follow the gripper while grasped (blocks) or follow a
    /// constrained axis (drawer slides and handles).
    pub movable: bool,
    /// Solid objects block gripper motion; everything else is traversable.
    pub solid: bool,
}

impl SceneObject {
    pub fn new(
        kind: ObjKind,
        name: impl Into<String>,
        aabb: Aabb,
        color: [f64; 3],
        movable: bool,
        solid: bool,
    ) -> Result<Self> {
        let name = name.into();
        if !aabb.is_valid() {
            return Err(SimError::Config(format!("object `{name}` has an inverted box")));
        }
        if !WORKSPACE.contains(aabb.min) || !WORKSPACE.contains(aabb.max) {
            return Err(SimError::Config(format!(
                "object `{name}` extends outside the unit workspace"
            )));
        }
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(SimError::Config(format!("object `{name}` color outside [0,1]")));
        }
        Ok(SceneObject { kind, name, aabb, color, movable, solid })
    }

    pub fn center(&self) -> Vec3 {
        self.aabb.center()
    }

    pub fn render_box(&self) -> RenderBox {
        RenderBox { aabb: self.aabb, color: self.color }
    }
}
