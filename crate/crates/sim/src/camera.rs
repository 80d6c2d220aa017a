//! Pinhole cameras around the workspace.

use crate::geometry::{v3, Vec3};

pub const CAMERA_NAMES: [&str; 4] = ["front", "left_shoulder", "right_shoulder", "wrist"];
pub const DEFAULT_RESOLUTION: usize = 128;

#[derive(Debug, Clone)]
pub struct Camera {
    pub name: String,
    pub position: Vec3,
    pub look_at: Vec3,
    /// Pixels; images are square.
    pub resolution: usize,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
}

/// Orthonormal frame: forward toward the look-at point, right and down in
/// image order.
#[derive(Debug, Clone, Copy)]
pub struct CameraBasis {
    pub right: Vec3,
    pub down: Vec3,
    pub forward: Vec3,
}

impl Camera {
    pub fn new(name: &str, position: Vec3, look_at: Vec3, resolution: usize) -> Camera {
        Camera {
            name: name.to_string(),
            position,
            look_at,
            resolution,
            focal_scale: 0.75,
        }
    }

    pub fn basis(&self) -> CameraBasis {
        let forward = (self.look_at - self.position).normalized();
        // Keep image rows level with the ground; fall back to a y-up hint
        // when looking straight along z.
        let up_hint = if forward.dot(Vec3::Z).abs() > 0.99 {
            v3(0.0, 1.0, 0.0)
        } else {
            Vec3::Z
        };
        let right = forward.cross(up_hint).normalized();
        let down = forward.cross(right);
        CameraBasis {
            right,
            down,
            forward,
        }
    }

    pub fn focal(&self) -> f64 {
        self.focal_scale * self.resolution as f64
    }

    /// Unit ray through the center of pixel (row, col).
    pub fn pixel_ray(&self, basis: &CameraBasis, row: usize, col: usize) -> Vec3 {
        let half = self.resolution as f64 / 2.0;
        let f = self.focal();
        let dx = (col as f64 + 0.5 - half) / f;
        let dy = (row as f64 + 0.5 - half) / f;
        (basis.right * dx + basis.down * dy + basis.forward).normalized()
    }

    /// Workspace point for a pixel at the given ray distance; the exact
    /// inverse of the renderer's depth definition.
    pub fn unproject(&self, basis: &CameraBasis, row: usize, col: usize, depth: f64) -> Vec3 {
        self.position + self.pixel_ray(basis, row, col) * depth
    }
}

/// The four fixed viewpoints: one frontal, two elevated shoulders, one
/// top-down. All sit outside the workspace cube looking in.
pub fn default_cameras(resolution: usize) -> [Camera; 4] {
    [
        Camera::new(
            "front",
            v3(0.5, -0.85, 0.55),
            v3(0.5, 0.5, 0.25),
            resolution,
        ),
        Camera::new(
            "left_shoulder",
            v3(-0.55, -0.35, 0.75),
            v3(0.5, 0.5, 0.2),
            resolution,
        ),
        Camera::new(
            "right_shoulder",
            v3(1.55, -0.35, 0.75),
            v3(0.5, 0.5, 0.2),
            resolution,
        ),
        Camera::new(
            "wrist",
            v3(0.5, 0.48, 1.35),
            v3(0.5, 0.5, 0.12),
            resolution,
        ),
    ]
}
