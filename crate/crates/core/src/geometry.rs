//! Ray and overlap queries against boxes and spheres.

use serde::{Deserialize, Serialize};

use crate::dynamics::Vec3;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn from_center(center: Vec3, half: Vec3) -> Self {
        Self::new(center - half, center + half)
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| {
            self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]
        })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    /// Open-interval overlap: touching faces do not count.
    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    /// Euclidean distance from `p` to the box, zero inside.
    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2.sqrt()
    }

    /// Whether a sphere overlaps the box.
    pub fn intersects_sphere(&self, center: &Vec3, radius: f64) -> bool {
        self.distance_to(center) < radius
    }
}

/// A box rotated about the vertical axis through its center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YawBox {
    pub center: Vec3,
    pub half: Vec3,
    /// Radians.
    pub yaw: f64,
}

impl YawBox {
    /// Map a world point into box-local coordinates (centered, unrotated).
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn dir_to_local(&self, d: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn local_aabb(&self) -> Aabb {
        Aabb::new(-self.half, self.half)
    }

    /// World-frame bounding box of the rotated box.
    pub fn bounds(&self) -> Aabb {
        let (s, c) = self.yaw.sin_cos();
        let hx = self.half.x * c.abs() + self.half.y * s.abs();
        let hy = self.half.x * s.abs() + self.half.y * c.abs();
        Aabb::from_center(self.center, Vec3::new(hx, hy, self.half.z))
    }

    pub fn distance_to(&self, p: &Vec3) -> f64 {
        self.local_aabb().distance_to(&self.to_local(p))
    }

    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        ray_aabb(
            &self.to_local(origin),
            &self.dir_to_local(dir),
            &self.local_aabb(),
        )
    }
}

/// Slab test. Returns the entry distance along `dir` (unit) or `None` on a
/// miss. An origin inside the box reports distance zero.
pub fn ray_aabb(origin: &Vec3, dir: &Vec3, b: &Aabb) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i] < b.min[i] || origin[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let mut t0 = (b.min[i] - origin[i]) * inv;
        let mut t1 = (b.max[i] - origin[i]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        None
    } else {
        Some(t_near.max(0.0))
    }
}

/// Distance from a point inside `room` to its boundary along `dir`.
pub fn ray_room_exit(origin: &Vec3, dir: &Vec3, room: &Aabb) -> f64 {
    let mut t_exit = f64::INFINITY;
    for i in 0..3 {
        let t = if dir[i] > 0.0 {
            (room.max[i] - origin[i]) / dir[i]
        } else if dir[i] < 0.0 {
            (room.min[i] - origin[i]) / dir[i]
        } else {
            continue;
        };
        t_exit = t_exit.min(t);
    }
    t_exit.max(0.0)
}

/// First intersection of a ray with a sphere, `None` when missed or behind.
pub fn ray_sphere(origin: &Vec3, dir: &Vec3, center: &Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    if b > 0.0 {
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}
