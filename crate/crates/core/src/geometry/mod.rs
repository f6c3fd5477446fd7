//! Spatial primitives and acceleration structures.

mod grid;
mod octree;

pub use grid::{SparseVoxelGrid, VoxelKey};
pub use octree::{Leaf, LeafHit, Octree};

use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Half-line `origin + t * direction`, `t >= 0`, with a unit direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`. Panics on a zero or non-finite direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        let n = direction.norm();
        assert!(n.is_finite() && n > 0.0, "ray direction must be non-zero");
        Ray { origin, direction: direction / n }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        debug_assert!(min.iter().zip(max.iter()).all(|(a, b)| a <= b));
        Aabb { min, max }
    }

    pub fn cube(min: Vec3, edge: f64) -> Self {
        Aabb { min, max: min + Vec3::repeat(edge) }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }
}

/// Slab test. Returns the raw parameters `(t_in, t_out)` of the infinite line;
/// the ray hits when `t_out >= max(t_in, 0)`. `t_in` may be negative when the
/// origin is inside the box.
pub fn ray_aabb_intersect(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d == 0.0 {
            if o < aabb.min[a] || o > aabb.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut t0 = (aabb.min[a] - o) * inv;
        let mut t1 = (aabb.max[a] - o) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_in = t_in.max(t0);
        t_out = t_out.min(t1);
    }
    (t_out >= t_in.max(0.0)).then_some((t_in, t_out))
}

/// Ray / sphere chord, clamped to `t >= 0`.
pub fn ray_sphere_intersect(ray: &Ray, center: &Vec3, radius: f64) -> Option<(f64, f64)> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let (t0, t1) = (-b - root, -b + root);
    if t1 < 0.0 {
        return None;
    }
    Some((t0.max(0.0), t1))
}
