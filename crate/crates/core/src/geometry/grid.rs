use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ray_aabb_intersect, Aabb, Ray, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoxelKey {
    pub i: i64,
    pub j: i64,
    pub k: i64,
}

impl VoxelKey {
    pub const fn new(i: i64, j: i64, k: i64) -> Self {
        VoxelKey { i, j, k }
    }
}

/// Occupancy envelope on a regular lattice of cubic cells `[lo, lo + s)`.
///
/// The occupied set is ordered so iteration (octree build, meshing) is
/// reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseVoxelGrid {
    origin: Vec3,
    voxel_size: f64,
    occupied: BTreeSet<VoxelKey>,
    /// Inclusive key range of `occupied`, kept in step with insertions.
    range: Option<(VoxelKey, VoxelKey)>,
}

impl SparseVoxelGrid {
    pub fn new(origin: Vec3, voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0 && voxel_size.is_finite(), "voxel size must be positive");
        SparseVoxelGrid { origin, voxel_size, occupied: BTreeSet::new(), range: None }
    }

    /// Bins points into cells; a key is occupied iff some point falls in it.
    pub fn from_points<'a>(
        points: impl IntoIterator<Item = &'a Vec3>,
        voxel_size: f64,
        origin: Vec3,
    ) -> Self {
        let mut grid = SparseVoxelGrid::new(origin, voxel_size);
        for p in points {
            let key = grid.key_of(p);
            grid.insert(key);
        }
        grid
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VoxelKey> + '_ {
        self.occupied.iter()
    }

    pub fn insert(&mut self, key: VoxelKey) -> bool {
        self.range = Some(match self.range {
            None => (key, key),
            Some((lo, hi)) => (
                VoxelKey::new(lo.i.min(key.i), lo.j.min(key.j), lo.k.min(key.k)),
                VoxelKey::new(hi.i.max(key.i), hi.j.max(key.j), hi.k.max(key.k)),
            ),
        });
        self.occupied.insert(key)
    }

    pub fn contains_key(&self, key: &VoxelKey) -> bool {
        self.occupied.contains(key)
    }

    pub fn key_of(&self, p: &Vec3) -> VoxelKey {
        let q = (p - self.origin) / self.voxel_size;
        VoxelKey::new(q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
    }

    /// Whether `p` lies in an occupied cell.
    pub fn contains_point(&self, p: &Vec3) -> bool {
        self.occupied.contains(&self.key_of(p))
    }

    pub fn cell(&self, key: &VoxelKey) -> Aabb {
        let lo = self.origin
            + Vec3::new(key.i as f64, key.j as f64, key.k as f64) * self.voxel_size;
        Aabb::cube(lo, self.voxel_size)
    }

    pub fn cell_center(&self, key: &VoxelKey) -> Vec3 {
        self.cell(key).center()
    }

    /// Inclusive key range `(min, max)` of the occupied set.
    pub fn key_bounds(&self) -> Option<(VoxelKey, VoxelKey)> {
        self.range
    }

    /// World-space bounds of all occupied cells.
    pub fn bounds(&self) -> Option<Aabb> {
        let (lo, hi) = self.key_bounds()?;
        Some(self.cell(&lo).union(&self.cell(&hi)))
    }

    /// Morphological dilation with a `(2r+1)^3` cube (26-connectivity).
    pub fn dilate(&self, radius: u32) -> SparseVoxelGrid {
        let r = radius as i64;
        let mut out = SparseVoxelGrid::new(self.origin, self.voxel_size);
        for key in &self.occupied {
            for di in -r..=r {
                for dj in -r..=r {
                    for dk in -r..=r {
                        out.insert(VoxelKey::new(key.i + di, key.j + dj, key.k + dk));
                    }
                }
            }
        }
        out
    }

    /// First entry / last exit over occupied cells, walking the lattice in
    /// ray order. The returned entry is clamped to `t >= 0`.
    pub fn ray_intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (t_box_in, t_box_out) = ray_aabb_intersect(ray, &self.bounds()?)?;
        let (lo, hi) = self.key_bounds()?;
        let lo = [lo.i, lo.j, lo.k];
        let hi = [hi.i, hi.j, hi.k];
        let s = self.voxel_size;

        let t_start = t_box_in.max(0.0);
        // Locate the starting cell from a point nudged into the box interior.
        let t_probe = t_start + 1e-9 * s.min(t_box_out - t_start).max(0.0);
        let p = ray.at(t_probe);
        let q = (p - self.origin) / s;
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            cell[a] = (q[a].floor() as i64).clamp(lo[a], hi[a]);
            let d = ray.direction[a];
            if d > 0.0 {
                step[a] = 1;
                let boundary = self.origin[a] + (cell[a] + 1) as f64 * s;
                t_max[a] = (boundary - ray.origin[a]) / d;
                t_delta[a] = s / d;
            } else if d < 0.0 {
                step[a] = -1;
                let boundary = self.origin[a] + cell[a] as f64 * s;
                t_max[a] = (boundary - ray.origin[a]) / d;
                t_delta[a] = -s / d;
            }
        }

        let mut first: Option<f64> = None;
        let mut last: Option<f64> = None;
        loop {
            let key = VoxelKey::new(cell[0], cell[1], cell[2]);
            if self.occupied.contains(&key) {
                if let Some((t_in, t_out)) = ray_aabb_intersect(ray, &self.cell(&key)) {
                    let t_in = t_in.max(0.0);
                    first = Some(first.map_or(t_in, |f: f64| f.min(t_in)));
                    last = Some(last.map_or(t_out, |l: f64| l.max(t_out)));
                }
            }
            let a = if t_max[0] < t_max[1] {
                if t_max[0] < t_max[2] { 0 } else { 2 }
            } else if t_max[1] < t_max[2] {
                1
            } else {
                2
            };
            if t_max[a] > t_box_out || step[a] == 0 {
                break;
            }
            cell[a] += step[a];
            if cell[a] < lo[a] || cell[a] > hi[a] {
                break;
            }
            t_max[a] += t_delta[a];
        }
        match (first, last) {
            (Some(a), Some(b)) if a < b => Some((a, b)),
            _ => None,
        }
    }
}
