//! Marching cubes over the cells of occupied envelope voxels.
//!
//! The 256-case triangle table is derived once from the face rule: on every
//! cube face, each run of inside corners is cut off by one segment (so on
//! ambiguous faces the inside corners are separated), segments chain into
//! loops around the cube, and each loop is fan-triangulated. Because the rule
//! only looks at a face's own corners, neighboring cells always agree on
//! shared faces and closed surfaces come out watertight.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::SdfField;
use crate::geometry::{SparseVoxelGrid, Vec3, VoxelKey};
use crate::scene_io::{save_ply, PlyData, PlyEncoding};
use crate::{Error, Exec, Result};

/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const fn corner(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as corner pairs (lower corner first).
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [2, 3],
    [4, 5],
    [6, 7],
    [0, 2],
    [1, 3],
    [4, 6],
    [5, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Faces with corners counter-clockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], // x = 0
    [1, 3, 7, 5], // x = 1
    [0, 1, 5, 4], // y = 0
    [2, 6, 7, 3], // y = 1
    [0, 2, 3, 1], // z = 0
    [4, 5, 7, 6], // z = 1
];

fn edge_index(a: usize, b: usize) -> usize {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    EDGES.iter().position(|e| *e == [lo, hi]).expect("cube edge")
}

/// Triangles (as edge-index triples) for every inside-corner bitmask.
pub fn case_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(triangulate_case))
}

fn triangulate_case(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    // next[e] = edge that follows crossing edge e along its loop.
    let mut next = [usize::MAX; 12];
    for face in FACES {
        // Walk the face; an out->in edge starts a run of inside corners and
        // the following in->out edge ends it.
        let mut entries = Vec::new();
        let mut exits = Vec::new();
        for i in 0..4 {
            let (a, b) = (face[i], face[(i + 1) % 4]);
            match (inside(a), inside(b)) {
                (false, true) => entries.push((i, edge_index(a, b))),
                (true, false) => exits.push((i, edge_index(a, b))),
                _ => {}
            }
        }
        for &(i, entry) in &entries {
            // The exit closing this run is the first one after it, cyclically.
            let &(_, exit) = exits
                .iter()
                .min_by_key(|(j, _)| (j + 4 - i) % 4)
                .expect("every entry has an exit");
            // Loops run entry -> exit so triangles face the outside.
            next[entry] = exit;
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            lp.push(e as u8);
            e = next[e];
        }
        for k in 1..lp.len().saturating_sub(1) {
            tris.push([lp[0], lp[k], lp[k + 1]]);
        }
    }
    tris
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: &[u32; 3]) -> [Vec3; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// Area-weighted vertex normals.
    pub fn compute_normals(&mut self) {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = self.triangle(t);
            let fnorm = (b - a).cross(&(c - a));
            for &i in t {
                n[i as usize] += fnorm;
            }
        }
        self.normals = Some(n.into_iter().map(|v| v.try_normalize(0.0).unwrap_or_else(Vec3::zeros)).collect());
    }

    pub fn to_ply(&self) -> PlyData {
        let mut ply = PlyData::from_points(self.vertices.clone());
        ply.normals = self.normals.clone();
        ply.faces = self.triangles.clone();
        ply
    }

    pub fn from_ply(ply: &PlyData) -> Self {
        TriMesh { vertices: ply.positions.clone(), triangles: ply.faces.clone(), normals: ply.normals.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_ply(path, &self.to_ply(), PlyEncoding::BinaryLittleEndian)
    }
}

type Lattice = [i64; 3];

/// Extracts the zero isosurface of `field` from the cells of occupied voxels,
/// `cells_per_voxel` cells per voxel edge.
pub fn marching_cubes(field: &impl SdfField, grid: &SparseVoxelGrid, cells_per_voxel: usize, exec: Exec) -> Result<TriMesh> {
    if cells_per_voxel == 0 {
        return Err(Error::Config("cells_per_voxel must be >= 1".into()));
    }
    let n = cells_per_voxel as i64;
    let h = grid.voxel_size() / n as f64;
    let origin = grid.origin();
    let pos = |l: &Lattice| origin + Vec3::new(l[0] as f64, l[1] as f64, l[2] as f64) * h;

    // Lattice vertices of every occupied voxel, evaluated once.
    let mut verts = BTreeSet::new();
    for key in grid.keys() {
        let base = [key.i * n, key.j * n, key.k * n];
        for a in 0..=n {
            for b in 0..=n {
                for c in 0..=n {
                    verts.insert([base[0] + a, base[1] + b, base[2] + c]);
                }
            }
        }
    }
    let verts: Vec<Lattice> = verts.into_iter().collect();
    let points: Vec<Vec3> = verts.iter().map(pos).collect();
    let values: Vec<f64> = exec.map_chunks(&points, 4096, |_, c| field.sdf_batch(c)).concat();
    let value: HashMap<Lattice, f64> = verts.iter().copied().zip(values).collect();

    let keys: Vec<VoxelKey> = grid.keys().copied().collect();
    let table = case_table();
    let soups = exec.map(&keys, |key| {
        let mut out: Vec<[Vec3; 3]> = Vec::new();
        let base = [key.i * n, key.j * n, key.k * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let cell = [base[0] + a, base[1] + b, base[2] + c];
                    let lat: [Lattice; 8] = std::array::from_fn(|k| {
                        let o = corner(k);
                        [cell[0] + o[0] as i64, cell[1] + o[1] as i64, cell[2] + o[2] as i64]
                    });
                    let d: [f64; 8] = std::array::from_fn(|k| value[&lat[k]]);
                    let case = (0..8).fold(0usize, |m, k| m | (usize::from(d[k] < 0.0) << k));
                    for tri in &table[case] {
                        out.push(tri.map(|e| {
                            let [p, q] = EDGES[e as usize];
                            // Interpolate from the lower corner so shared edges
                            // produce bit-identical points.
                            let t = d[p] / (d[p] - d[q]);
                            let (pp, pq) = (pos(&lat[p]), pos(&lat[q]));
                            pp + (pq - pp) * t
                        }));
                    }
                }
            }
        }
        out
    });

    // Merge identical vertices through a quantized spatial hash.
    let quantum = 1e-6 * h;
    let mut index: HashMap<[i64; 3], u32> = HashMap::new();
    let mut mesh = TriMesh::default();
    for tri in soups.into_iter().flatten() {
        let ids = tri.map(|p| {
            let q = [0, 1, 2].map(|k| (p[k] / quantum).round() as i64);
            *index.entry(q).or_insert_with(|| {
                mesh.vertices.push(p);
                (mesh.vertices.len() - 1) as u32
            })
        });
        if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
            continue;
        }
        let t = [ids[0], ids[1], ids[2]];
        if mesh.triangle_area(&t) > 1e-12 {
            mesh.triangles.push(t);
        }
    }
    if mesh.triangles.is_empty() {
        log::warn!("marching cubes: no zero crossing inside the envelope, mesh is empty");
    }
    mesh.compute_normals();
    Ok(mesh)
}

/// Area-weighted uniform surface samples, `round(density * area)` of them.
pub fn sample_mesh_points(mesh: &TriMesh, density: f64, seed: u64) -> Result<Vec<Vec3>> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::Config("sampling density must be positive".into()));
    }
    if mesh.is_empty() {
        return Ok(Vec::new());
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in &mesh.triangles {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    let count = (density * acc).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(&mesh.triangles[k]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect())
}
