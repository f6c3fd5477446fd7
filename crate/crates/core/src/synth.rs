//! Analytic test scenes in the same on-disk layout as a real capture:
//! Lambertian renders with a per-image color tint, sky masks from the exact
//! silhouette, COLMAP text files whose points lie on the surface, and a dense
//! ground-truth point cloud.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::SdfField;
use crate::geometry::{Ray, Vec3};
use crate::scene_io::{
    save_mask, save_ply, save_rgb, write_colmap_scene, Camera, ColmapScene, ImageMeta, ImageRecord, PlyData,
    PlyEncoding, Scene, SceneConfig, SfmPoint,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half: [f64; 3] },
    TwoSpheres { a: [f64; 3], ra: f64, b: [f64; 3], rb: f64 },
}

impl FromStr for Shape {
    type Err = Error;

    /// Default instances for the tags `sphere`, `box` and `two-spheres`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Shape::Sphere { center: [0.0; 3], radius: 0.5 }),
            "box" => Ok(Shape::Box { center: [0.0; 3], half: [0.4, 0.3, 0.35] }),
            "two-spheres" => Ok(Shape::TwoSpheres { a: [-0.25, 0.0, 0.0], ra: 0.35, b: [0.3, 0.05, 0.0], rb: 0.25 }),
            other => Err(Error::UnknownShape(other.to_string())),
        }
    }
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::from(a)
}

impl SdfField for Shape {
    fn sdf(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (p - v(center)).norm() - radius,
            Shape::Box { center, half } => {
                let q = (p - v(center)).abs() - v(half);
                q.map(|c| c.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::TwoSpheres { a, ra, b, rb } => ((p - v(a)).norm() - ra).min((p - v(b)).norm() - rb),
        }
    }
}

impl Shape {
    /// Center and radius of a sphere enclosing the shape.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        match *self {
            Shape::Sphere { center, radius } => (v(center), radius),
            Shape::Box { center, half } => (v(center), v(half).norm()),
            Shape::TwoSpheres { a, ra, b, rb } => {
                let c = 0.5 * (v(a) + v(b));
                (c, ((v(a) - c).norm() + ra).max((v(b) - c).norm() + rb))
            }
        }
    }

    /// Outward unit normal from the SDF gradient.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let h = 1e-6;
        let g = Vec3::from_fn(|i, _| {
            let mut d = Vec3::zeros();
            d[i] = h;
            self.sdf(&(p + d)) - self.sdf(&(p - d))
        });
        g.normalize()
    }

    /// First surface hit by sphere tracing, if any.
    pub fn trace(&self, ray: &Ray, t_max: f64) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..512 {
            let d = self.sdf(&ray.at(t));
            if d < 1e-9 {
                return Some(t);
            }
            t += d;
            if t > t_max {
                return None;
            }
        }
        None
    }

    /// Surface area, exact for every variant (overlapping spheres use the
    /// cap formula).
    pub fn area(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Box { half, .. } => 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]),
            Shape::TwoSpheres { a, ra, b, rb } => {
                let d = (v(a) - v(b)).norm();
                let full = 4.0 * PI * (ra * ra + rb * rb);
                if d >= ra + rb {
                    return full;
                }
                // Plane of the intersection circle at distance x from a.
                let x = (d * d + ra * ra - rb * rb) / (2.0 * d);
                let cap_a = 2.0 * PI * ra * (ra - x);
                let cap_b = 2.0 * PI * rb * (rb - (d - x));
                full - cap_a - cap_b
            }
        }
    }

    /// `n` uniformly distributed surface points.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if let Some(p) = self.sample_once(rng) {
                out.push(p);
            }
        }
        out
    }

    fn sample_once(&self, rng: &mut impl Rng) -> Option<Vec3> {
        match *self {
            Shape::Sphere { center, radius } => Some(v(center) + random_unit(rng) * radius),
            Shape::Box { center, half } => {
                let h = v(half);
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if u < *a {
                        axis = i;
                        break;
                    }
                    u -= a;
                }
                let mut p = Vec3::from_fn(|i, _| rng.random_range(-h[i]..=h[i]));
                p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
                Some(v(center) + p)
            }
            Shape::TwoSpheres { a, ra, b, rb } => {
                // Pick a sphere by area, reject points inside the other one.
                let wa = ra * ra / (ra * ra + rb * rb);
                let (c, r, oc, or) = if rng.random::<f64>() < wa { (a, ra, b, rb) } else { (b, rb, a, ra) };
                let p = v(c) + random_unit(rng) * r;
                ((p - v(oc)).norm() >= or).then_some(p)
            }
        }
    }

    /// Procedural albedo so renders carry texture.
    fn albedo(&self, p: &Vec3) -> [f64; 3] {
        let s = (6.0 * p.x).sin() * (6.0 * p.y).sin() * (6.0 * p.z).sin();
        [0.7 + 0.2 * s, 0.5 + 0.15 * s, 0.35 - 0.1 * s]
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let p = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = p.norm();
        if n > 1e-3 && n <= 1.0 {
            return p / n;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub shape: Shape,
    pub n_views: usize,
    pub resolution: u32,
    /// Half-width of the per-channel multiplicative tint, e.g. 0.2 gives
    /// factors in `[0.8, 1.2]`.
    pub tint_strength: f64,
    /// Target fraction of sky pixels per image; sets the focal length.
    pub sky_fraction: f64,
    pub seed: u64,
    pub n_points: usize,
    /// Camera distance from the shape center, as a multiple of the bounding
    /// radius.
    pub distance_factor: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            shape: Shape::Sphere { center: [0.0; 3], radius: 0.5 },
            n_views: 16,
            resolution: 64,
            tint_strength: 0.2,
            sky_fraction: 0.5,
            seed: 0,
            n_points: 3000,
            distance_factor: 4.0,
        }
    }
}

const SKY: [f64; 3] = [0.55, 0.7, 0.9];

fn quantize(c: f64) -> f64 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Views spread over the sphere of directions (Fibonacci lattice).
fn view_dirs(n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * PI * (3.0 - 5f64.sqrt());
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Focal length that makes the bounding sphere's silhouette cover
/// `1 - sky_fraction` of the frame.
pub fn focal_for_sky_fraction(resolution: u32, radius: f64, distance: f64, sky_fraction: f64) -> f64 {
    let disk = resolution as f64 * ((1.0 - sky_fraction) / PI).sqrt();
    disk / (radius / distance).asin().tan()
}

pub struct SynthScene {
    pub scene: Scene,
    pub params: SynthParams,
}

/// Renders the scene in memory. Pixel values are quantized to 8 bits so the
/// result matches what [`write_synth_scene`] stores.
pub fn synthesize(params: &SynthParams) -> Result<SynthScene> {
    if params.n_views < 2 {
        return Err(Error::Config("synth needs at least two views".into()));
    }
    if !(0.0..1.0).contains(&params.sky_fraction) || params.resolution == 0 {
        return Err(Error::Config("sky_fraction must be in [0, 1) and resolution >= 1".into()));
    }
    let shape = params.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (center, radius) = shape.bounding_sphere();
    let dist = params.distance_factor * radius;
    let res = params.resolution;
    let focal = focal_for_sky_fraction(res, radius, dist, params.sky_fraction);
    let light = Vec3::new(0.4, 0.5, 0.75).normalize();

    let mut images = Vec::with_capacity(params.n_views);
    for (i, dir) in view_dirs(params.n_views).into_iter().enumerate() {
        let eye = center + dir * dist;
        let up = if dir.z.abs() > 0.9 { Vec3::y() } else { Vec3::z() };
        let camera = Camera::look_at(eye, center, up, res, res, focal);
        let tint: [f64; 3] = std::array::from_fn(|_| 1.0 + params.tint_strength * rng.random_range(-1.0..=1.0));
        let mut pixels = Vec::with_capacity((res * res) as usize);
        let mut sky = Vec::with_capacity((res * res) as usize);
        for y in 0..res {
            for x in 0..res {
                let ray = camera.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                match shape.trace(&ray, dist + 2.0 * radius) {
                    None => {
                        pixels.push(SKY.map(quantize));
                        sky.push(true);
                    }
                    Some(t) => {
                        let p = ray.at(t);
                        let shade = 0.25 + 0.75 * shape.normal(&p).dot(&light).max(0.0);
                        let a = shape.albedo(&p);
                        pixels.push(std::array::from_fn(|k| quantize(a[k] * shade * tint[k])));
                        sky.push(false);
                    }
                }
            }
        }
        let n = pixels.len();
        images.push(ImageRecord {
            id: i as u32 + 1,
            name: format!("view_{i:03}.png"),
            camera,
            pixels,
            transient: vec![false; n],
            sky,
            appearance: i,
        });
    }

    let cams: Vec<Camera> = images.iter().map(|im| im.camera.clone()).collect();
    let points = shape
        .sample_surface(params.n_points, &mut rng)
        .into_iter()
        .map(|p| {
            let track_length = cams.iter().filter(|c| sees(&shape, c, &p)).count();
            SfmPoint {
                position: p,
                track_length,
                reprojection_error: rng.random_range(0.1..1.0),
                color: shape.albedo(&p),
            }
        })
        .collect();
    Ok(SynthScene { scene: Scene { images, points }, params: params.clone() })
}

/// Unoccluded and inside the frame.
fn sees(shape: &Shape, cam: &Camera, p: &Vec3) -> bool {
    let Some((u, v)) = cam.project(p) else {
        return false;
    };
    if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
        return false;
    }
    let c = cam.center();
    let ray = Ray::new(c, p - c);
    let dist = (p - c).norm();
    shape.trace(&ray, dist + 1.0).is_some_and(|t| (t - dist).abs() < 1e-4)
}

/// Configuration tuned to a synthetic scene: voxel size a fifth of the
/// bounding radius.
pub fn scene_config_for(params: &SynthParams) -> SceneConfig {
    let (_, radius) = params.shape.bounding_sphere();
    SceneConfig { voxel_size: 0.2 * radius, ..SceneConfig::default() }
}

/// Writes `images/`, `masks/`, `sparse/`, `gt.ply`, `shape.json` and
/// `config.json` under `dir`.
pub fn write_synth_scene(dir: &Path, synth: &SynthScene, gt_points: usize) -> Result<()> {
    let scene = &synth.scene;
    for sub in ["images", "masks", "sparse"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for img in &scene.images {
        let (w, h) = (img.width(), img.height());
        save_rgb(&dir.join("images").join(&img.name), w, h, &img.pixels)?;
        let stem = img.name.trim_end_matches(".png");
        save_mask(&dir.join("masks").join(format!("{stem}_sky.png")), w, h, &img.sky)?;
    }
    let metas = scene
        .images
        .iter()
        .map(|im| ImageMeta {
            id: im.id,
            name: im.name.clone(),
            camera_id: im.id,
            camera: im.camera.clone(),
            appearance: im.appearance,
        })
        .collect();
    write_colmap_scene(&dir.join("sparse"), &ColmapScene { images: metas, points: scene.points.clone() })?;

    let mut rng = ChaCha8Rng::seed_from_u64(synth.params.seed ^ 0x6774);
    let shape = synth.params.shape;
    let pts = shape.sample_surface(gt_points, &mut rng);
    let normals = pts.iter().map(|p| shape.normal(p)).collect();
    let mut ply = PlyData::from_points(pts);
    ply.normals = Some(normals);
    save_ply(&dir.join("gt.ply"), &ply, PlyEncoding::BinaryLittleEndian)?;

    let write_json = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write_json("shape.json", serde_json::to_string_pretty(&synth.params)?)?;
    let mut cfg = scene_config_for(&synth.params);
    cfg.scene_dir = Some(dir.to_path_buf());
    write_json("config.json", serde_json::to_string_pretty(&cfg)?)
}
