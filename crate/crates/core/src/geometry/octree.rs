use std::collections::BTreeSet;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use super::{ray_aabb_intersect, Aabb, Ray, SparseVoxelGrid, Vec3};
use crate::{Error, Result};

const NONE: u32 = u32::MAX;

/// Cached payload of a materialized leaf.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    /// Integer coordinates on the `2^depth` leaf lattice.
    pub coord: [u32; 3],
    /// SDF at the leaf center, `None` until the first refresh.
    pub sdf: Option<f64>,
    /// Iteration of the last write.
    pub stamp: u64,
}

/// A leaf crossed by a ray, in traversal order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeafHit {
    pub leaf: usize,
    pub t_in: f64,
    pub t_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Node {
    children: [u32; 8],
}

impl Node {
    fn empty() -> Self {
        Node { children: [NONE; 8] }
    }
}

/// Sparse cubic octree with uniform-depth leaves.
///
/// Internal levels `0..depth` live in `nodes` (root at index 0); children of
/// nodes on level `depth - 1` index into `leaves`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Octree {
    root: Aabb,
    depth: u32,
    leaf_edge: f64,
    nodes: Vec<Node>,
    leaves: Vec<Leaf>,
}

impl Octree {
    /// Cube root anchored at the grid's minimum corner, with an edge of
    /// `s * 2^m` voxels covering the grid. Leaves are materialized where they
    /// overlap an occupied voxel.
    pub fn build(grid: &SparseVoxelGrid, depth: u32) -> Result<Octree> {
        if depth == 0 || depth > 20 {
            return Err(Error::Config(format!("octree depth must be in 1..=20, got {depth}")));
        }
        let (lo, hi) = grid.key_bounds().ok_or(Error::EmptyGrid)?;
        let span = (hi.i - lo.i).max(hi.j - lo.j).max(hi.k - lo.k) + 1;
        let m = (span as u64).next_power_of_two().trailing_zeros() as i32;
        let s = grid.voxel_size();
        let root_min = grid.cell(&lo).min;
        let root_edge = s * 2f64.powi(m);
        let leaf_edge = s * 2f64.powi(m - depth as i32);

        let mut coords = BTreeSet::new();
        let shift = depth as i32 - m;
        for key in grid.keys() {
            let rel = [key.i - lo.i, key.j - lo.j, key.k - lo.k];
            if shift >= 0 {
                // Each voxel splits into 2^shift leaves per axis.
                let n = 1i64 << shift;
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            coords.insert([
                                (rel[0] * n + a) as u32,
                                (rel[1] * n + b) as u32,
                                (rel[2] * n + c) as u32,
                            ]);
                        }
                    }
                }
            } else {
                let sh = -shift;
                coords.insert([(rel[0] >> sh) as u32, (rel[1] >> sh) as u32, (rel[2] >> sh) as u32]);
            }
        }

        let mut tree = Octree {
            root: Aabb::cube(root_min, root_edge),
            depth,
            leaf_edge,
            nodes: vec![Node::empty()],
            leaves: Vec::with_capacity(coords.len()),
        };
        for coord in coords {
            tree.insert_leaf(coord);
        }
        Ok(tree)
    }

    fn child_slot(&self, coord: &[u32; 3], level: u32) -> usize {
        let bit = self.depth - 1 - level;
        (((coord[0] >> bit) & 1) | (((coord[1] >> bit) & 1) << 1) | (((coord[2] >> bit) & 1) << 2))
            as usize
    }

    fn insert_leaf(&mut self, coord: [u32; 3]) {
        let mut node = 0usize;
        for level in 0..self.depth {
            let slot = self.child_slot(&coord, level);
            let next = self.nodes[node].children[slot];
            if level + 1 == self.depth {
                debug_assert_eq!(next, NONE);
                self.nodes[node].children[slot] = self.leaves.len() as u32;
                self.leaves.push(Leaf { coord, sdf: None, stamp: 0 });
            } else if next == NONE {
                self.nodes[node].children[slot] = self.nodes.len() as u32;
                self.nodes.push(Node::empty());
                node = self.nodes.len() - 1;
            } else {
                node = next as usize;
            }
        }
    }

    pub fn root(&self) -> Aabb {
        self.root
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn leaf_edge(&self) -> f64 {
        self.leaf_edge
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn leaves_mut(&mut self) -> &mut [Leaf] {
        &mut self.leaves
    }

    pub fn leaf_bounds(&self, leaf: &Leaf) -> Aabb {
        let lo = self.root.min
            + Vec3::new(leaf.coord[0] as f64, leaf.coord[1] as f64, leaf.coord[2] as f64)
                * self.leaf_edge;
        Aabb::cube(lo, self.leaf_edge)
    }

    pub fn leaf_center(&self, leaf: &Leaf) -> Vec3 {
        self.leaf_bounds(leaf).center()
    }

    /// Materialized leaf containing `p` (half-open cells), found by descending
    /// one level per step.
    pub fn leaf_at(&self, p: &Vec3) -> Option<usize> {
        let q = (p - self.root.min) / self.leaf_edge;
        let n = (1u64 << self.depth) as f64;
        if (0..3).any(|a| !(q[a] >= 0.0 && q[a] < n)) {
            return None;
        }
        let coord = [q.x as u32, q.y as u32, q.z as u32];
        let mut node = 0usize;
        for level in 0..self.depth {
            let next = self.nodes[node].children[self.child_slot(&coord, level)];
            if next == NONE {
                return None;
            }
            if level + 1 == self.depth {
                return Some(next as usize);
            }
            node = next as usize;
        }
        None
    }

    /// Visits the materialized leaves crossed by `ray` (for `t >= 0`) in
    /// ascending entry order. The visitor may stop early.
    pub fn traverse<B>(
        &self,
        ray: &Ray,
        mut visit: impl FnMut(LeafHit) -> ControlFlow<B>,
    ) -> Option<B> {
        ray_aabb_intersect(ray, &self.root)?;
        match self.descend(ray, 0, 0, [0, 0, 0], &mut visit) {
            ControlFlow::Break(b) => Some(b),
            ControlFlow::Continue(()) => None,
        }
    }

    /// `corner` is in leaf-lattice units; the node's edge is `2^(depth-level)`.
    fn descend<B>(
        &self,
        ray: &Ray,
        node: usize,
        level: u32,
        corner: [u32; 3],
        visit: &mut impl FnMut(LeafHit) -> ControlFlow<B>,
    ) -> ControlFlow<B> {
        let half = 1u32 << (self.depth - level - 1);
        let mut hits: Vec<(f64, f64, u32, [u32; 3])> = Vec::with_capacity(8);
        for slot in 0..8u32 {
            let child = self.nodes[node].children[slot as usize];
            if child == NONE {
                continue;
            }
            let c = [
                corner[0] + (slot & 1) * half,
                corner[1] + ((slot >> 1) & 1) * half,
                corner[2] + ((slot >> 2) & 1) * half,
            ];
            let lo = self.root.min
                + Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.leaf_edge;
            let bounds = Aabb::cube(lo, half as f64 * self.leaf_edge);
            if let Some((t_in, t_out)) = ray_aabb_intersect(ray, &bounds) {
                hits.push((t_in.max(0.0), t_out, child, c));
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for (t_in, t_out, child, c) in hits {
            if level + 1 == self.depth {
                visit(LeafHit { leaf: child as usize, t_in, t_out })?;
            } else {
                self.descend(ray, child as usize, level + 1, c, visit)?;
            }
        }
        ControlFlow::Continue(())
    }
}
