//! RGB-D back-projection to colored point clouds and voxelization into the
//! (7, V, V, V) feature grid the policy consumes.
//!
//! Feature channels: 0 occupancy {0,1}; 1..=3 mean RGB of contributing
//! points (zero when unoccupied); 4..=6 the voxel center in normalized
//! workspace coordinates (filled for every voxel).

use crate::action::discretize_coord;
use crate::error::Result;
use voxbc_sim::{Camera, RgbdImage, Vec3, WORKSPACE};
use voxbc_tensor::DenseArray;

pub const GRID_CHANNELS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub pos: Vec3,
    pub rgb: [f32; 3],
}

/// Pinhole back-projection of one RGB-D image into the workspace frame.
/// Miss-sentinel and non-positive depths are dropped.
pub fn unproject(img: &RgbdImage, camera: &Camera) -> Vec<ColoredPoint> {
    let basis = camera.basis();
    let res = img.resolution;
    let mut points = Vec::new();
    for row in 0..res {
        for col in 0..res {
            let d = img.pixel_depth(row, col);
            if !d.is_finite() || d <= 0.0 {
                continue;
            }
            let pos = camera.unproject(&basis, row, col, d as f64);
            points.push(ColoredPoint { pos, rgb: img.pixel_rgb(row, col) });
        }
    }
    points
}

/// Dense voxel feature grid over the unit workspace.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub v: usize,
    /// Shape (7, V, V, V), channel-major.
    pub features: DenseArray<f32>,
}

impl VoxelGrid {
    fn flat(&self, c: usize, i: [usize; 3]) -> usize {
        ((c * self.v + i[0]) * self.v + i[1]) * self.v + i[2]
    }

    pub fn occupancy(&self, i: [usize; 3]) -> f32 {
        self.features.data()[self.flat(0, i)]
    }

    pub fn rgb(&self, i: [usize; 3]) -> [f32; 3] {
        [1, 2, 3].map(|c| self.features.data()[self.flat(c, i)])
    }

    pub fn occupied_count(&self) -> usize {
        let v3 = self.v * self.v * self.v;
        self.features.data()[..v3].iter().filter(|&&o| o > 0.0).count()
    }
}

#[derive(Clone)]
struct Partial {
    count: Vec<u32>,
    rgb_sum: Vec<[f64; 3]>,
}

impl Partial {
    fn new(n: usize) -> Partial {
        Partial { count: vec![0; n], rgb_sum: vec![[0.0; 3]; n] }
    }

    fn add(&mut self, flat: usize, rgb: [f32; 3]) {
        self.count[flat] += 1;
        for (s, c) in self.rgb_sum[flat].iter_mut().zip(rgb) {
            *s += c as f64;
        }
    }

    fn merge(&mut self, other: &Partial) {
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        for (a, b) in self.rgb_sum.iter_mut().zip(&other.rgb_sum) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn bin_point(p: &ColoredPoint, v: usize) -> Option<usize> {
    if !WORKSPACE.contains(p.pos) {
        return None;
    }
    let i = discretize_coord(p.pos.x, v);
    let j = discretize_coord(p.pos.y, v);
    let k = discretize_coord(p.pos.z, v);
    Some((i * v + j) * v + k)
}

fn fold_chunk(chunk: &[ColoredPoint], v: usize) -> Partial {
    let mut partial = Partial::new(v * v * v);
    for p in chunk {
        if let Some(flat) = bin_point(p, v) {
            partial.add(flat, p.rgb);
        }
    }
    partial
}

const PAR_CHUNK: usize = 8192;

/// Bins points from all cameras into one grid. Out-of-workspace points are
/// dropped. Chunk partials are merged in a fixed order, so the parallel and
/// sequential paths are bit-identical.
pub fn voxelize(point_sets: &[Vec<ColoredPoint>], v: usize) -> Result<VoxelGrid> {
    #[cfg(feature = "parallel")]
    return voxelize_par(point_sets, v);
    #[cfg(not(feature = "parallel"))]
    return voxelize_seq(point_sets, v);
}

pub fn voxelize_seq(point_sets: &[Vec<ColoredPoint>], v: usize) -> Result<VoxelGrid> {
    let chunks = chunked(point_sets);
    let partials: Vec<Partial> = chunks.iter().map(|c| fold_chunk(c, v)).collect();
    assemble(&partials, v)
}

#[cfg(feature = "parallel")]
pub fn voxelize_par(point_sets: &[Vec<ColoredPoint>], v: usize) -> Result<VoxelGrid> {
    use rayon::prelude::*;
    let chunks = chunked(point_sets);
    let partials: Vec<Partial> = chunks.par_iter().map(|c| fold_chunk(c, v)).collect();
    assemble(&partials, v)
}

fn chunked(point_sets: &[Vec<ColoredPoint>]) -> Vec<&[ColoredPoint]> {
    point_sets.iter().flat_map(|s| s.chunks(PAR_CHUNK)).collect()
}

fn assemble(partials: &[Partial], v: usize) -> Result<VoxelGrid> {
    let mut total = Partial::new(v * v * v);
    for p in partials {
        total.merge(p);
    }

    let n = v * v * v;
    let mut data = vec![0.0f32; GRID_CHANNELS * n];
    for flat in 0..n {
        if total.count[flat] > 0 {
            data[flat] = 1.0;
            let c = total.count[flat] as f64;
            for ch in 0..3 {
                data[(1 + ch) * n + flat] = (total.rgb_sum[flat][ch] / c) as f32;
            }
        }
    }
    for i in 0..v {
        for j in 0..v {
            for k in 0..v {
                let flat = (i * v + j) * v + k;
                data[4 * n + flat] = ((i as f64 + 0.5) / v as f64) as f32;
                data[5 * n + flat] = ((j as f64 + 0.5) / v as f64) as f32;
                data[6 * n + flat] = ((k as f64 + 0.5) / v as f64) as f32;
            }
        }
    }
    Ok(VoxelGrid { v, features: DenseArray::from_vec(data, &[GRID_CHANNELS, v, v, v])? })
}

/// Renders, unprojects, and voxelizes one environment observation.
pub fn observe_grid(env: &voxbc_sim::Env, cameras: &[Camera], v: usize) -> Result<VoxelGrid> {
    let images = env.observe(cameras);
    let sets: Vec<Vec<ColoredPoint>> =
        images.iter().zip(cameras).map(|(img, cam)| unproject(img, cam)).collect();
    voxelize(&sets, v)
}
