//! Vectors, boxes, and the ray/segment intersection tests the renderer and
//! motion checks are built on. All geometry is f64 in the workspace frame,
//! a 1 m cube with z up.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn v3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = v3(0.0, 0.0, 0.0);
    pub const Z: Vec3 = v3(0.0, 0.0, 1.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        v3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            Vec3::ZERO
        } else {
            self / n
        }
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    /// Largest per-axis absolute difference.
    pub fn chebyshev(self, o: Vec3) -> f64 {
        (self.x - o.x)
            .abs()
            .max((self.y - o.y).abs())
            .max((self.z - o.z).abs())
    }

    pub fn clamped(self, lo: Vec3, hi: Vec3) -> Vec3 {
        v3(
            self.x.clamp(lo.x, hi.x),
            self.y.clamp(lo.y, hi.y),
            self.z.clamp(lo.z, hi.z),
        )
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        v3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        v3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        v3(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        v3(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        v3(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    /// Box given by center and per-axis half extents.
    pub fn centered(center: Vec3, half: Vec3) -> Aabb {
        Aabb {
            min: center - half,
            max: center + half,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn translated(&self, d: Vec3) -> Aabb {
        Aabb {
            min: self.min + d,
            max: self.max + d,
        }
    }

    /// Shrinks (negative grows) every face inward by `m`.
    pub fn inset(&self, m: f64) -> Aabb {
        Aabb {
            min: self.min + v3(m, m, m),
            max: self.max - v3(m, m, m),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.min.x < self.max.x && self.min.y < self.max.y && self.min.z < self.max.z
    }

    /// Nearest positive distance along a unit ray, by the slab method.
    /// Origins inside the box report the exit distance.
    pub fn ray_hit(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for i in 0..3 {
            let o = origin.axis(i);
            let d = dir.axis(i);
            let (lo, hi) = (self.min.axis(i), self.max.axis(i));
            if d.abs() < 1e-12 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let inv = 1.0 / d;
                let (mut t1, mut t2) = ((lo - o) * inv, (hi - o) * inv);
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                t_near = t_near.max(t1);
                t_far = t_far.min(t2);
                if t_near > t_far {
                    return None;
                }
            }
        }
        const T_MIN: f64 = 1e-9;
        if t_far < T_MIN {
            return None;
        }
        Some(if t_near > T_MIN { t_near } else { t_far })
    }

    /// Whether the closed segment a→b passes through the box.
    pub fn segment_hits(&self, a: Vec3, b: Vec3) -> bool {
        let d = b - a;
        let mut t_near: f64 = 0.0;
        let mut t_far: f64 = 1.0;
        for i in 0..3 {
            let o = a.axis(i);
            let dd = d.axis(i);
            let (lo, hi) = (self.min.axis(i), self.max.axis(i));
            if dd.abs() < 1e-12 {
                if o < lo || o > hi {
                    return false;
                }
            } else {
                let inv = 1.0 / dd;
                let (mut t1, mut t2) = ((lo - o) * inv, (hi - o) * inv);
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                t_near = t_near.max(t1);
                t_far = t_far.min(t2);
                if t_near > t_far {
                    return false;
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: Aabb = Aabb {
        min: v3(0.0, 0.0, 0.0),
        max: v3(1.0, 1.0, 1.0),
    };

    #[test]
    fn ray_from_minus_x_hits_near_face() {
        let t = UNIT.ray_hit(v3(-2.0, 0.5, 0.5), v3(1.0, 0.0, 0.0));
        assert_eq!(t, Some(2.0));
    }

    #[test]
    fn ray_pointing_away_misses() {
        assert_eq!(UNIT.ray_hit(v3(-2.0, 0.5, 0.5), v3(-1.0, 0.0, 0.0)), None);
    }

    #[test]
    fn ray_parallel_outside_slab_misses() {
        assert_eq!(UNIT.ray_hit(v3(-2.0, 1.5, 0.5), v3(1.0, 0.0, 0.0)), None);
    }

    #[test]
    fn diagonal_ray_distance_is_analytic() {
        let dir = v3(1.0, 1.0, 0.0).normalized();
        let t = UNIT.ray_hit(v3(-1.0, -1.0, 0.5), dir).unwrap();
        assert!((t - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn origin_inside_reports_exit() {
        let t = UNIT.ray_hit(v3(0.5, 0.5, 0.5), v3(0.0, 0.0, 1.0));
        assert_eq!(t, Some(0.5));
    }

    #[test]
    fn segment_through_box_hits() {
        assert!(UNIT.segment_hits(v3(-1.0, 0.5, 0.5), v3(2.0, 0.5, 0.5)));
    }

    #[test]
    fn segment_stopping_short_misses() {
        assert!(!UNIT.segment_hits(v3(-1.0, 0.5, 0.5), v3(-0.1, 0.5, 0.5)));
    }

    #[test]
    fn segment_fully_inside_hits() {
        assert!(UNIT.segment_hits(v3(0.2, 0.2, 0.2), v3(0.8, 0.8, 0.8)));
    }

    #[test]
    fn segment_beside_box_misses() {
        assert!(!UNIT.segment_hits(v3(-1.0, 2.0, 0.5), v3(2.0, 2.0, 0.5)));
    }

    #[test]
    fn chebyshev_is_max_axis_gap() {
        assert_eq!(v3(0.0, 0.0, 0.0).chebyshev(v3(0.01, -0.03, 0.02)), 0.03);
    }
}
