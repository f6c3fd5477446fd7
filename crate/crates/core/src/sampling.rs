//! Ray sampling: the sphere-based baseline, voxel-guided sampling over the
//! envelope, surface-guided sampling around the cached zero crossing, one
//! importance pass, and their hybrid. Also ray pruning and the SDF cache.

use std::fmt;
use std::ops::ControlFlow;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::SdfField;
use crate::geometry::{ray_sphere_intersect, Aabb, Octree, Ray, SparseVoxelGrid, Vec3};
use crate::renderer::alphas_from_sdf;
use crate::scene_io::{save_ply, PlyData, PlyEncoding, SceneConfig};
use crate::{Error, Exec, Result};

/// Random source for stratified jitter.
pub type SampleRng = ChaCha8Rng;

/// Independent stream for one ray of one iteration.
pub fn ray_rng(seed: u64, iteration: u64, ray: u64) -> SampleRng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [iteration, ray] {
        h = splitmix(h ^ splitmix(v));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sphere,
    Voxel,
    Hybrid,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sphere => "sphere",
            Strategy::Voxel => "voxel",
            Strategy::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Strategy::Sphere),
            "voxel" => Ok(Strategy::Voxel),
            "hybrid" => Ok(Strategy::Hybrid),
            other => Err(Error::Config(format!("unknown strategy {other:?} (expected sphere, voxel or hybrid)"))),
        }
    }
}

/// Which pass produced a sample. The discriminant is the `stage` value in
/// exported PLY files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Voxel = 0,
    Surface = 1,
    Importance = 2,
    Sphere = 3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    pub n_v: usize,
    pub n_s: usize,
    pub t_s: f64,
    pub jitter: bool,
    pub sphere_center: Vec3,
    pub sphere_radius: f64,
    /// Inverse standard deviation used to build the importance PDF.
    pub importance_sharpness: f64,
    /// Minimum gap enforced between consecutive samples.
    pub eps: f64,
}

impl SamplingConfig {
    /// Resolves scene-relative settings against the envelope bounds.
    pub fn from_scene(cfg: &SceneConfig, bounds: &Aabb, strategy: Strategy) -> Self {
        let half_extent = 0.5 * bounds.extent().max();
        SamplingConfig {
            strategy,
            n_v: cfg.n_v,
            n_s: cfg.n_s,
            t_s: cfg.t_s(),
            jitter: cfg.sampling.jitter,
            sphere_center: cfg.sampling.sphere_center.unwrap_or_else(|| bounds.center()),
            sphere_radius: cfg.sampling.sphere_radius.unwrap_or_else(|| 0.5 * bounds.extent().norm()),
            importance_sharpness: cfg.sampling.importance_sharpness / half_extent,
            eps: 1e-7 * bounds.extent().norm(),
        }
    }

    /// Samples per ray for any strategy: `n_v + 2 n_s`.
    pub fn samples_per_ray(&self) -> usize {
        self.n_v + 2 * self.n_s
    }
}

/// Ascending sample depths along a ray with the pass that produced each.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub ray: Ray,
    pub t: Vec<f64>,
    pub stages: Vec<Stage>,
}

impl RaySamples {
    pub fn empty(ray: Ray) -> Self {
        RaySamples { ray, t: Vec::new(), stages: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.t.iter().map(|&t| self.ray.at(t)).collect()
    }

    /// Merges `t` tagged with `stage`, keeping the list sorted. Values within
    /// `eps` of their predecessor are pushed forward to keep it strictly
    /// ascending without dropping samples.
    pub fn merge(&mut self, t: &[f64], stage: Stage, eps: f64) {
        let mut all: Vec<(f64, Stage)> = self.t.iter().copied().zip(self.stages.iter().copied()).collect();
        all.extend(t.iter().map(|&v| (v, stage)));
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        for i in 1..all.len() {
            if all[i].0 < all[i - 1].0 + eps {
                all[i].0 = all[i - 1].0 + eps;
            }
        }
        self.t = all.iter().map(|p| p.0).collect();
        self.stages = all.iter().map(|p| p.1).collect();
    }

    fn from_stage(ray: Ray, t: Vec<f64>, stage: Stage, eps: f64) -> Self {
        let mut s = RaySamples::empty(ray);
        s.merge(&t, stage, eps);
        s
    }
}

/// `n` stratified values in `[t0, t1]`: bin centers, or uniform within each
/// bin when an RNG is given.
pub fn stratified(t0: f64, t1: f64, n: usize, rng: Option<&mut SampleRng>) -> Vec<f64> {
    let step = (t1 - t0) / n as f64;
    match rng {
        None => (0..n).map(|i| t0 + (i as f64 + 0.5) * step).collect(),
        Some(rng) => (0..n).map(|i| t0 + (i as f64 + rng.random::<f64>()) * step).collect(),
    }
}

/// Baseline: `n` samples between the ray's entry into and exit from the
/// bounding sphere.
pub fn sphere_sample(ray: &Ray, n: usize, center: &Vec3, radius: f64, rng: Option<&mut SampleRng>) -> RaySamples {
    match ray_sphere_intersect(ray, center, radius) {
        None => RaySamples::empty(*ray),
        Some((t0, t1)) => {
            RaySamples { ray: *ray, t: stratified(t0, t1, n, rng), stages: vec![Stage::Sphere; n] }
        }
    }
}

/// Indices of rays to keep: those that intersect the envelope, plus sky rays.
/// Also returns the kept fraction.
pub fn prune_rays(rays: &[Ray], sky: &[bool], grid: &SparseVoxelGrid, exec: Exec) -> (Vec<usize>, f64) {
    assert_eq!(rays.len(), sky.len());
    let hits = exec.map_range(rays.len(), |i| sky[i] || grid.ray_intersect(&rays[i]).is_some());
    let kept: Vec<usize> = hits.iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| i).collect();
    let frac = if rays.is_empty() { 0.0 } else { kept.len() as f64 / rays.len() as f64 };
    (kept, frac)
}

/// `n_v` stratified samples between the first entry into and the last exit
/// from occupied voxels.
pub fn voxel_guided_sample(ray: &Ray, grid: &SparseVoxelGrid, n_v: usize, rng: Option<&mut SampleRng>) -> RaySamples {
    match grid.ray_intersect(ray) {
        None => RaySamples::empty(*ray),
        Some((t0, t1)) => RaySamples { ray: *ray, t: stratified(t0, t1, n_v, rng), stages: vec![Stage::Voxel; n_v] },
    }
}

/// `n_s` stratified samples in `[max(t_hat - t_s, 0), t_hat + t_s]`.
pub fn surface_guided_sample(ray: &Ray, t_hat: f64, t_s: f64, n_s: usize, rng: Option<&mut SampleRng>) -> RaySamples {
    let t = stratified((t_hat - t_s).max(0.0), t_hat + t_s, n_s, rng);
    RaySamples { ray: *ray, t, stages: vec![Stage::Surface; n_s] }
}

/// Draws `n` depths from the piecewise-constant PDF over the intervals of
/// `t`, with mass proportional to the rendering weights that `sdf` induces at
/// the given sharpness. All-zero weights fall back to a uniform PDF.
pub fn importance_sample(t: &[f64], sdf: &[f64], n: usize, sharpness: f64, rng: Option<&mut SampleRng>) -> Vec<f64> {
    assert!(t.len() >= 2 && t.len() == sdf.len(), "need at least two samples with SDF values");
    let alphas = alphas_from_sdf(sdf, sharpness);
    let mut transmittance = 1.0;
    let mut mass: Vec<f64> = alphas
        .iter()
        .map(|a| {
            let w = a * transmittance;
            transmittance *= 1.0 - a;
            w
        })
        .collect();
    let total: f64 = mass.iter().sum();
    if !(total > 1e-12) {
        mass = t.windows(2).map(|w| w[1] - w[0]).collect();
    }
    sample_piecewise_constant(t, &mass, n, rng)
}

/// Inverse-CDF sampling of a piecewise-constant density over the intervals of
/// `edges` with per-interval `mass` (unnormalized). Uses stratified uniforms.
pub fn sample_piecewise_constant(edges: &[f64], mass: &[f64], n: usize, rng: Option<&mut SampleRng>) -> Vec<f64> {
    assert_eq!(edges.len(), mass.len() + 1);
    let total: f64 = mass.iter().sum();
    let mut cdf = Vec::with_capacity(edges.len());
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in mass {
        acc += m / total;
        cdf.push(acc);
    }
    let u = stratified(0.0, 1.0, n, rng);
    u.into_iter().map(|u| invert_cdf(edges, &cdf, u)).collect()
}

fn invert_cdf(edges: &[f64], cdf: &[f64], u: f64) -> f64 {
    // First interval whose upper CDF exceeds u, skipping zero-mass intervals.
    let last = cdf.len() - 1;
    let k = cdf[1..].partition_point(|c| *c <= u).min(last - 1);
    let span = cdf[k + 1] - cdf[k];
    let frac = if span > 0.0 { ((u - cdf[k]) / span).clamp(0.0, 1.0) } else { 0.5 };
    edges[k] + frac * (edges[k + 1] - edges[k])
}

/// Octree over the envelope whose leaves cache SDF values at their centers.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfCache {
    pub octree: Octree,
    pub refresh_period: u64,
    pub last_refresh: Option<u64>,
}

impl SdfCache {
    pub fn new(grid: &SparseVoxelGrid, depth: u32, refresh_period: u64) -> Result<Self> {
        Ok(SdfCache { octree: Octree::build(grid, depth)?, refresh_period, last_refresh: None })
    }

    pub fn is_due(&self, iteration: u64) -> bool {
        match self.last_refresh {
            None => true,
            Some(last) => iteration.saturating_sub(last) >= self.refresh_period,
        }
    }

    /// Re-evaluates `field` at every leaf center.
    pub fn refresh(&mut self, field: &impl SdfField, iteration: u64, exec: Exec) {
        let centers: Vec<Vec3> = self.octree.leaves().iter().map(|l| self.octree.leaf_center(l)).collect();
        let values: Vec<f64> = exec.map_chunks(&centers, 4096, |_, c| field.sdf_batch(c)).concat();
        for (leaf, v) in self.octree.leaves_mut().iter_mut().zip(values) {
            leaf.sdf = Some(v);
            leaf.stamp = iteration;
        }
        self.last_refresh = Some(iteration);
    }

    /// Refreshes when due or when `force` is set. Returns whether it ran.
    pub fn refresh_if_due(&mut self, field: &impl SdfField, iteration: u64, force: bool, exec: Exec) -> bool {
        if force || self.is_due(iteration) {
            self.refresh(field, iteration, exec);
            true
        } else {
            false
        }
    }

    /// First `+` to `-` sign change of cached values along the ray, linearly
    /// interpolated. Each visited leaf contributes one reading at the
    /// midpoint of the ray's chord through it.
    pub fn query_surface(&self, ray: &Ray) -> Option<f64> {
        let leaves = self.octree.leaves();
        let mut prev: Option<(f64, f64)> = None;
        self.octree.traverse(ray, |hit| {
            let Some(d) = leaves[hit.leaf].sdf else {
                return ControlFlow::Continue(());
            };
            let t = 0.5 * (hit.t_in.max(0.0) + hit.t_out);
            if let Some((t0, d0)) = prev {
                if d0 > 0.0 && d <= 0.0 {
                    return ControlFlow::Break(crossing(t0, d0, t, d));
                }
            }
            prev = Some((t, d));
            ControlFlow::Continue(())
        })
    }
}

/// Zero of the line through `(t0, d0)` and `(t1, d1)`.
pub fn crossing(t0: f64, d0: f64, t1: f64, d1: f64) -> f64 {
    t0 + (t1 - t0) * d0 / (d0 - d1)
}

/// Everything a sampler may read.
pub struct SamplerContext<'a, F: SdfField> {
    pub grid: &'a SparseVoxelGrid,
    pub cache: Option<&'a SdfCache>,
    pub field: &'a F,
    pub cfg: &'a SamplingConfig,
}

impl<F: SdfField> SamplerContext<'_, F> {
    /// Samples one ray with the configured strategy. Returns an empty set when
    /// the ray misses the sampling domain; otherwise exactly
    /// `n_v + 2 n_s` samples.
    pub fn sample(&self, ray: &Ray, rng: &mut SampleRng) -> RaySamples {
        match self.cfg.strategy {
            Strategy::Sphere => self.sphere_with_importance(ray, rng),
            Strategy::Voxel => self.voxel_with_importance(ray, rng),
            Strategy::Hybrid => self.hybrid(ray, rng),
        }
    }

    fn jitter<'r>(&self, rng: &'r mut SampleRng) -> Option<&'r mut SampleRng> {
        self.cfg.jitter.then_some(rng)
    }

    fn importance_pass(&self, mut s: RaySamples, rng: &mut SampleRng) -> RaySamples {
        let sdf = self.field.sdf_batch(&s.points());
        let extra = importance_sample(&s.t, &sdf, self.cfg.n_s, self.cfg.importance_sharpness, self.jitter(rng));
        s.merge(&extra, Stage::Importance, self.cfg.eps);
        s
    }

    fn sphere_with_importance(&self, ray: &Ray, rng: &mut SampleRng) -> RaySamples {
        let c = self.cfg;
        let s = sphere_sample(ray, c.n_v + c.n_s, &c.sphere_center, c.sphere_radius, self.jitter(rng));
        if s.is_empty() {
            return s;
        }
        let s = RaySamples::from_stage(*ray, s.t, Stage::Sphere, c.eps);
        self.importance_pass(s, rng)
    }

    fn voxel_with_importance(&self, ray: &Ray, rng: &mut SampleRng) -> RaySamples {
        let c = self.cfg;
        let s = voxel_guided_sample(ray, self.grid, c.n_v + c.n_s, self.jitter(rng));
        if s.is_empty() {
            return s;
        }
        let s = RaySamples::from_stage(*ray, s.t, Stage::Voxel, c.eps);
        self.importance_pass(s, rng)
    }

    /// Voxel-guided `n_v`, then surface-guided `n_s` around the cached
    /// crossing (or a second voxel-guided stratum of `n_s` on a cache miss),
    /// then `n_s` importance samples.
    pub fn hybrid(&self, ray: &Ray, rng: &mut SampleRng) -> RaySamples {
        let c = self.cfg;
        let voxel = voxel_guided_sample(ray, self.grid, c.n_v, self.jitter(rng));
        if voxel.is_empty() {
            return voxel;
        }
        let mut s = RaySamples::from_stage(*ray, voxel.t, Stage::Voxel, c.eps);
        match self.cache.and_then(|cache| cache.query_surface(ray)) {
            Some(t_hat) => {
                let surf = surface_guided_sample(ray, t_hat, c.t_s, c.n_s, self.jitter(rng));
                s.merge(&surf.t, Stage::Surface, c.eps);
            }
            None => {
                let extra = voxel_guided_sample(ray, self.grid, c.n_s, self.jitter(rng));
                s.merge(&extra.t, Stage::Voxel, c.eps);
            }
        }
        self.importance_pass(s, rng)
    }
}

/// Writes sample positions with a per-vertex integer `stage` property.
pub fn export_samples_ply(path: &Path, samples: &[RaySamples]) -> Result<()> {
    let mut positions = Vec::new();
    let mut stages = Vec::new();
    for s in samples {
        positions.extend(s.points());
        stages.extend(s.stages.iter().map(|st| *st as i32));
    }
    let mut ply = PlyData::from_points(positions);
    ply.int_properties.push(("stage".to_string(), stages));
    save_ply(path, &ply, PlyEncoding::BinaryLittleEndian)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    use super::*;
    use crate::geometry::VoxelKey;

    struct Sphere {
        center: Vec3,
        radius: f64,
    }

    impl SdfField for Sphere {
        fn sdf(&self, p: &Vec3) -> f64 {
            (p - self.center).norm() - self.radius
        }
    }

    fn unit_sphere() -> Sphere {
        Sphere { center: Vec3::zeros(), radius: 1.0 }
    }

    fn shell_grid(radius: f64, s: f64) -> SparseVoxelGrid {
        let mut pts = Vec::new();
        let n = 4000;
        for i in 0..n {
            // Fibonacci sphere
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * 2.399_963_229_728_653;
            pts.push(Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius);
        }
        SparseVoxelGrid::from_points(&pts, s, Vec3::repeat(-2.0)).dilate(1)
    }

    fn random_hitting_ray(rng: &mut impl Rng, radius: f64) -> Ray {
        loop {
            let o = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if o.norm() < 0.2 {
                continue;
            }
            let o = o.normalize() * 3.0 * radius;
            let target = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                * 0.7
                * radius;
            let ray = Ray::new(o, target - o);
            if ray_sphere_intersect(&ray, &Vec3::zeros(), radius).is_some() {
                return ray;
            }
        }
    }

    #[test]
    fn strategy_round_trip() {
        for s in [Strategy::Sphere, Strategy::Voxel, Strategy::Hybrid] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("nerf".parse::<Strategy>().is_err());
    }

    #[test]
    fn sphere_sample_bin_centers() {
        let ray = Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z());
        let s = sphere_sample(&ray, 4, &Vec3::zeros(), 1.0, None);
        assert_eq!(s.t, vec![1.25, 1.75, 2.25, 2.75]);
        let tangent = Ray::new(Vec3::new(1.0, 0.0, -2.0), Vec3::z());
        let s = sphere_sample(&tangent, 3, &Vec3::zeros(), 1.0, None);
        assert_eq!(s.len(), 3);
        assert!(s.t.iter().all(|t| (t - 2.0).abs() < 1e-7));
        let miss = Ray::new(Vec3::new(2.0, 0.0, -2.0), Vec3::z());
        assert!(sphere_sample(&miss, 4, &Vec3::zeros(), 1.0, None).is_empty());
    }

    #[test]
    fn sphere_samples_inside_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let ray = random_hitting_ray(&mut rng, 1.0);
            let mut jrng = rng.clone();
            let s = sphere_sample(&ray, 24, &Vec3::zeros(), 1.0, Some(&mut jrng));
            assert!(s.points().iter().all(|p| p.norm() <= 1.0 + 1e-9));
        }
    }

    #[test]
    fn voxel_guided_single_voxel() {
        let mut grid = SparseVoxelGrid::new(Vec3::zeros(), 1.0);
        grid.insert(VoxelKey::new(0, 0, 0));
        let ray = Ray::new(Vec3::new(0.5, 0.5, -1.0), Vec3::z());
        assert_eq!(voxel_guided_sample(&ray, &grid, 2, None).t, vec![1.25, 1.75]);
        let s = voxel_guided_sample(&ray, &grid, 8, None);
        let spacing: Vec<f64> = s.t.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(spacing.iter().all(|d| (d - 1.0 / 8.0).abs() < 1e-12));
    }

    #[test]
    fn voxel_guided_within_interval() {
        let grid = shell_grid(1.0, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let ray = random_hitting_ray(&mut rng, 1.0);
            let (t0, t1) = grid.ray_intersect(&ray).unwrap();
            let s = voxel_guided_sample(&ray, &grid, 8, Some(&mut rng));
            assert!(s.t.iter().all(|t| *t >= t0 && *t <= t1));
        }
    }

    #[test]
    fn surface_guided_window() {
        let ray = Ray::new(Vec3::zeros(), Vec3::x());
        assert_eq!(surface_guided_sample(&ray, 2.0, 0.5, 2, None).t, vec![1.75, 2.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let th = rng.random_range(0.0..3.0);
            let s = surface_guided_sample(&ray, th, 0.04375, 8, Some(&mut rng));
            assert!(s.t.iter().all(|t| *t >= (th - 0.04375).max(0.0) && *t <= th + 0.04375));
        }
        // window clipped at the ray origin
        let s = surface_guided_sample(&ray, 0.1, 0.5, 2, None);
        assert!((s.t[0] - 0.15).abs() < 1e-15 && (s.t[1] - 0.45).abs() < 1e-15, "{:?}", s.t);
    }

    #[test]
    fn crossing_interpolation() {
        assert_eq!(crossing(1.0, 0.5, 2.0, -0.5), 1.5);
    }

    #[test]
    fn importance_concentrates_and_falls_back() {
        let t = [0.0, 1.0, 2.0, 3.0];
        // sharp crossing inside [1, 2]
        let s = importance_sample(&t, &[1.5, 0.5, -0.5, -1.5], 16, 1000.0, None);
        assert!(s.iter().all(|v| (1.0..=2.0).contains(v)));
        // no crossing, everything positive and equal: uniform fallback
        let s = importance_sample(&t, &[1.0, 1.0, 1.0, 1.0], 6, 10.0, None);
        assert_eq!(s, vec![0.25, 0.75, 1.25, 1.75, 2.25, 2.75]);
    }

    #[test]
    fn piecewise_inverse_cdf_matches_tabulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges: Vec<f64> = {
            let mut e: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..5.0)).collect();
            e.sort_by(f64::total_cmp);
            e
        };
        let mut mass: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        mass[3] = 0.0;
        let total: f64 = mass.iter().sum();
        let n = 10_000;
        let samples = sample_piecewise_constant(&edges, &mass, n, None);
        // Brute-force CDF on a dense grid: P(X <= x) = integral of the density.
        let cdf_at = |x: f64| -> f64 {
            let mut acc = 0.0;
            for k in 0..mass.len() {
                let (a, b) = (edges[k], edges[k + 1]);
                if x >= b {
                    acc += mass[k];
                } else if x > a && b > a {
                    acc += mass[k] * (x - a) / (b - a);
                }
            }
            acc / total
        };
        for (j, x) in samples.iter().enumerate() {
            let u = (j as f64 + 0.5) / n as f64;
            assert!((cdf_at(*x) - u).abs() < 1e-9, "sample {j}: F({x}) = {} vs {u}", cdf_at(*x));
        }
        // No sample lands in the zero-mass interval's interior.
        assert!(samples.iter().all(|x| !(*x > edges[3] && *x < edges[4])));
    }

    #[test]
    fn prune_extremes() {
        let grid = shell_grid(1.0, 0.2);
        let away: Vec<Ray> = (0..50).map(|i| Ray::new(Vec3::new(5.0, i as f64 * 0.01, 0.0), Vec3::x())).collect();
        let (kept, frac) = prune_rays(&away, &[false; 50], &grid, Exec::Sequential);
        assert!(kept.is_empty() && frac == 0.0);
        let (kept, _) = prune_rays(&away, &[true; 50], &grid, Exec::Sequential);
        assert_eq!(kept.len(), 50);
        let toward: Vec<Ray> = (0..50).map(|i| Ray::new(Vec3::new(-5.0, i as f64 * 0.001, 0.0), Vec3::x())).collect();
        let (_, frac) = prune_rays(&toward, &[false; 50], &grid, Exec::Parallel);
        assert_eq!(frac, 1.0);
    }

    #[test]
    fn refresh_writes_analytic_values() {
        let grid = shell_grid(1.0, 0.25);
        let mut cache = SdfCache::new(&grid, 4, 2000).unwrap();
        assert!(cache.is_due(0));
        cache.refresh(&unit_sphere(), 7, Exec::Parallel);
        for leaf in cache.octree.leaves() {
            let c = cache.octree.leaf_center(leaf);
            assert!((leaf.sdf.unwrap() - (c.norm() - 1.0)).abs() < 1e-12);
            assert_eq!(leaf.stamp, 7);
        }
        let before = cache.clone();
        cache.refresh(&unit_sphere(), 7, Exec::Sequential);
        assert_eq!(before, cache);
        assert!(!cache.is_due(2006));
        assert!(cache.is_due(2007));
    }

    #[test]
    fn query_surface_near_true_intersection() {
        let grid = shell_grid(1.0, 0.25);
        let mut cache = SdfCache::new(&grid, 5, 2000).unwrap();
        let diameter = cache.octree.leaf_edge() * 3f64.sqrt();
        assert_eq!(cache.query_surface(&Ray::new(Vec3::new(-3.0, 0.0, 0.0), Vec3::x())), None);
        cache.refresh(&unit_sphere(), 0, Exec::Sequential);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let ray = random_hitting_ray(&mut rng, 1.0);
            let (t_true, _) = ray_sphere_intersect(&ray, &Vec3::zeros(), 1.0).unwrap();
            let t_hat = cache.query_surface(&ray).expect("hitting ray");
            assert!((t_hat - t_true).abs() <= diameter, "{t_hat} vs {t_true}");
        }
    }

    #[test]
    fn query_surface_all_positive_is_none() {
        let grid = shell_grid(1.0, 0.25);
        let mut cache = SdfCache::new(&grid, 4, 2000).unwrap();
        cache.refresh(&Sphere { center: Vec3::zeros(), radius: 0.1 }, 0, Exec::Sequential);
        let ray = Ray::new(Vec3::new(-3.0, 0.0, 0.95), Vec3::x());
        assert_eq!(cache.query_surface(&ray), None);
    }

    fn ctx_parts(strategy: Strategy) -> (SparseVoxelGrid, SdfCache, SamplingConfig) {
        let grid = shell_grid(1.0, 0.25);
        let mut cache = SdfCache::new(&grid, 5, 2000).unwrap();
        cache.refresh(&unit_sphere(), 0, Exec::Sequential);
        let scene = SceneConfig { voxel_size: 0.25, octree_depth: 5, ..SceneConfig::default() };
        let bounds = grid.bounds().unwrap();
        (grid, cache, SamplingConfig::from_scene(&scene, &bounds, strategy))
    }

    #[test]
    fn every_strategy_emits_exact_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for strategy in [Strategy::Sphere, Strategy::Voxel, Strategy::Hybrid] {
            let (grid, cache, cfg) = ctx_parts(strategy);
            let field = unit_sphere();
            let ctx = SamplerContext { grid: &grid, cache: Some(&cache), field: &field, cfg: &cfg };
            for i in 0..200 {
                let ray = random_hitting_ray(&mut rng, 1.0);
                let s = ctx.sample(&ray, &mut ray_rng(1, 2, i));
                assert_eq!(s.len(), 24);
                assert!(s.t.windows(2).all(|w| w[1] > w[0]));
                assert!(s.t.iter().all(|t| *t >= 0.0));
            }
        }
    }

    #[test]
    fn hybrid_cache_miss_falls_back() {
        let (grid, _, cfg) = ctx_parts(Strategy::Hybrid);
        let field = unit_sphere();
        let ctx = SamplerContext { grid: &grid, cache: None, field: &field, cfg: &cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ray = random_hitting_ray(&mut rng, 1.0);
        let s = ctx.hybrid(&ray, &mut rng);
        assert_eq!(s.len(), 24);
        assert_eq!(s.stages.iter().filter(|s| **s == Stage::Voxel).count(), 16);
        assert_eq!(s.stages.iter().filter(|s| **s == Stage::Surface).count(), 0);
    }

    #[test]
    fn hybrid_is_union_of_stages() {
        let (grid, cache, cfg) = ctx_parts(Strategy::Hybrid);
        let field = unit_sphere();
        let ctx = SamplerContext { grid: &grid, cache: Some(&cache), field: &field, cfg: &cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..50 {
            let ray = random_hitting_ray(&mut rng, 1.0);
            let s = ctx.hybrid(&ray, &mut ray_rng(9, 0, i));
            // Recompute stage by stage with the same stream.
            let mut r = ray_rng(9, 0, i);
            let v = voxel_guided_sample(&ray, &grid, cfg.n_v, Some(&mut r));
            let t_hat = cache.query_surface(&ray).unwrap();
            let su = surface_guided_sample(&ray, t_hat, cfg.t_s, cfg.n_s, Some(&mut r));
            let mut both = RaySamples::from_stage(ray, v.t.clone(), Stage::Voxel, cfg.eps);
            both.merge(&su.t, Stage::Surface, cfg.eps);
            let sdf = field.sdf_batch(&both.points());
            let imp = importance_sample(&both.t, &sdf, cfg.n_s, cfg.importance_sharpness, Some(&mut r));
            let mut expect: Vec<f64> = v.t.iter().chain(&su.t).chain(&imp).copied().collect();
            expect.sort_by(f64::total_cmp);
            for (a, b) in s.t.iter().zip(&expect) {
                assert!((a - b).abs() <= 24.0 * cfg.eps);
            }
            for (stage, n) in [(Stage::Voxel, 8), (Stage::Surface, 8), (Stage::Importance, 8)] {
                assert_eq!(s.stages.iter().filter(|x| **x == stage).count(), n);
            }
        }
    }

    #[test]
    fn ray_streams_differ() {
        let a: u64 = ray_rng(1, 2, 3).random();
        let b: u64 = ray_rng(1, 2, 4).random();
        let c: u64 = ray_rng(1, 3, 3).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, ray_rng(1, 2, 3).random::<u64>());
    }

    #[test]
    fn samples_ply_has_stage_property() {
        let dir = tempfile::tempdir().unwrap();
        let ray = Ray::new(Vec3::zeros(), Vec3::x());
        let mut s = RaySamples::from_stage(ray, vec![1.0, 2.0], Stage::Voxel, 1e-9);
        s.merge(&[1.5], Stage::Surface, 1e-9);
        let path = dir.path().join("s.ply");
        export_samples_ply(&path, &[s]).unwrap();
        let ply = crate::scene_io::load_ply(&path).unwrap();
        assert_eq!(ply.int_property("stage").unwrap(), &[0, 1, 0]);
        assert_eq!(ply.positions[1], Vec3::new(1.5, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn merge_is_strictly_ascending(a in prop::collection::vec(0.0f64..10.0, 1..30), b in prop::collection::vec(0.0f64..10.0, 0..30)) {
            let ray = Ray::new(Vec3::zeros(), Vec3::x());
            let mut s = RaySamples::from_stage(ray, a.clone(), Stage::Voxel, 1e-6);
            s.merge(&b, Stage::Importance, 1e-6);
            prop_assert_eq!(s.len(), a.len() + b.len());
            prop_assert!(s.t.windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn stratified_stays_in_range(t0 in 0.0f64..5.0, len in 0.0f64..5.0, n in 1usize..50, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = stratified(t0, t0 + len, n, Some(&mut rng));
            prop_assert!(v.iter().all(|t| *t >= t0 && *t <= t0 + len));
        }
    }
}
