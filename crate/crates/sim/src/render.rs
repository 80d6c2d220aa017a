//! Ray-cast rendering of box scenes into RGB-D images.
//!
//! Every pixel casts one ray; the nearest box hit wins. Misses write black
//! with an infinite-depth sentinel. Pixels are independent, so the parallel
//! and sequential paths produce bit-identical images.

use crate::camera::Camera;
use crate::geometry::Aabb;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const DEPTH_MISS: f32 = f32::INFINITY;

/// One renderable box. Render geometry is decoupled from scene semantics;
/// the environment decides what to show (including the gripper marker).
#[derive(Debug, Clone, Copy)]
pub struct RenderBox {
    pub aabb: Aabb,
    pub color: [f64; 3],
}

/// Channel-major RGB ([3, H, W], values in [0,1]) plus depth ([H, W],
/// meters along the ray, `DEPTH_MISS` where nothing was hit).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub resolution: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
}

impl RgbdImage {
    pub fn pixel_rgb(&self, row: usize, col: usize) -> [f32; 3] {
        let n = self.resolution * self.resolution;
        let i = row * self.resolution + col;
        [self.rgb[i], self.rgb[n + i], self.rgb[2 * n + i]]
    }

    pub fn pixel_depth(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.resolution + col]
    }
}

fn shade_row(
    camera: &Camera,
    basis: &crate::camera::CameraBasis,
    boxes: &[RenderBox],
    row: usize,
    row_rgb: &mut [[f32; 3]],
    row_depth: &mut [f32],
) {
    for col in 0..camera.resolution {
        let dir = camera.pixel_ray(basis, row, col);
        let mut best_t = f64::INFINITY;
        let mut best_color = [0.0f64; 3];
        for b in boxes {
            if let Some(t) = b.aabb.ray_hit(camera.position, dir) {
                if t < best_t {
                    best_t = t;
                    best_color = b.color;
                }
            }
        }
        if best_t.is_finite() {
            row_rgb[col] = [
                best_color[0] as f32,
                best_color[1] as f32,
                best_color[2] as f32,
            ];
            row_depth[col] = best_t as f32;
        } else {
            row_rgb[col] = [0.0; 3];
            row_depth[col] = DEPTH_MISS;
        }
    }
}

pub fn render_seq(boxes: &[RenderBox], camera: &Camera) -> RgbdImage {
    let res = camera.resolution;
    let basis = camera.basis();
    let mut pixels = vec![[0.0f32; 3]; res * res];
    let mut depth = vec![0.0f32; res * res];
    for (row, (rgb_row, depth_row)) in pixels
        .chunks_exact_mut(res)
        .zip(depth.chunks_exact_mut(res))
        .enumerate()
    {
        shade_row(camera, &basis, boxes, row, rgb_row, depth_row);
    }
    pack(res, &pixels, depth)
}

#[cfg(feature = "parallel")]
pub fn render_par(boxes: &[RenderBox], camera: &Camera) -> RgbdImage {
    let res = camera.resolution;
    let basis = camera.basis();
    let mut pixels = vec![[0.0f32; 3]; res * res];
    let mut depth = vec![0.0f32; res * res];
    pixels
        .par_chunks_exact_mut(res)
        .zip(depth.par_chunks_exact_mut(res))
        .enumerate()
        .for_each(|(row, (rgb_row, depth_row))| {
            shade_row(camera, &basis, boxes, row, rgb_row, depth_row);
        });
    pack(res, &pixels, depth)
}

pub fn render(boxes: &[RenderBox], camera: &Camera) -> RgbdImage {
    #[cfg(feature = "parallel")]
    {
        if camera.resolution >= 64 {
            return render_par(boxes, camera);
        }
    }
    render_seq(boxes, camera)
}

fn pack(resolution: usize, pixels: &[[f32; 3]], depth: Vec<f32>) -> RgbdImage {
    let n = resolution * resolution;
    let mut rgb = vec![0.0f32; 3 * n];
    for (i, p) in pixels.iter().enumerate() {
        rgb[i] = p[0];
        rgb[n + i] = p[1];
        rgb[2 * n + i] = p[2];
    }
    RgbdImage {
        resolution,
        rgb,
        depth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::v3;

    fn unit_box(color: [f64; 3]) -> RenderBox {
        RenderBox {
            aabb: Aabb::new(v3(0.0, 0.0, 0.0), v3(1.0, 1.0, 1.0)),
            color,
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let cam = Camera::new("front", v3(0.5, -2.0, 0.5), v3(0.5, 0.5, 0.5), 8);
        let img = render(&[], &cam);
        assert!(img.rgb.iter().all(|&v| v == 0.0));
        assert!(img.depth.iter().all(|&d| d == DEPTH_MISS));
    }

    #[test]
    fn center_ray_depth_is_analytic_distance() {
        // 1x1 resolution: the single ray is the optical axis. Camera 2 m
        // from the box face on the -x axis.
        let cam = Camera::new("probe", v3(-2.0, 0.5, 0.5), v3(1.0, 0.5, 0.5), 1);
        let img = render_seq(&[unit_box([1.0, 0.0, 0.0])], &cam);
        assert!((img.pixel_depth(0, 0) - 2.0).abs() < 1e-6);
        assert_eq!(img.pixel_rgb(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn nearer_of_nested_boxes_wins() {
        let outer = unit_box([0.0, 1.0, 0.0]);
        let inner = RenderBox {
            aabb: Aabb::new(v3(0.25, 0.25, 0.25), v3(0.75, 0.75, 0.75)),
            color: [0.0, 0.0, 1.0],
        };
        let cam = Camera::new("probe", v3(0.5, -2.0, 0.5), v3(0.5, 0.5, 0.5), 1);
        // Outer surface sits 2.0 m away, inner 2.25: outer color wins.
        let img = render_seq(&[inner, outer], &cam);
        assert_eq!(img.pixel_rgb(0, 0), [0.0, 1.0, 0.0]);
        assert!((img.pixel_depth(0, 0) - 2.0).abs() < 1e-6);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let boxes = [
            unit_box([0.3, 0.6, 0.9]),
            RenderBox {
                aabb: Aabb::new(v3(0.1, 0.4, 1.0), v3(0.4, 0.8, 1.4)),
                color: [0.9, 0.2, 0.1],
            },
        ];
        for cam in crate::camera::default_cameras(33) {
            let a = render_seq(&boxes, &cam);
            let b = render_par(&boxes, &cam);
            assert_eq!(a, b, "{}", cam.name);
        }
    }
}
