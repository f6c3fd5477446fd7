//! COLMAP text model (`cameras.txt`, `images.txt`, `points3D.txt`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Camera, SfmPoint};
use crate::geometry::Vec3;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMeta {
    pub id: u32,
    pub name: String,
    pub camera_id: u32,
    pub camera: Camera,
    /// Row of the appearance table, in ascending image-id order.
    pub appearance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapScene {
    pub images: Vec<ImageMeta>,
    pub points: Vec<SfmPoint>,
}

#[derive(Debug)]
struct Intrinsics {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn num<T: std::str::FromStr>(tok: Option<&str>, file: &str, line: usize, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse(file, line, format!("expected {what}")))
}

fn parse_cameras(text: &str) -> Result<BTreeMap<u32, Intrinsics>> {
    const FILE: &str = "cameras.txt";
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let ln = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id: u32 = num(tok.next(), FILE, ln, "camera id")?;
        let model = tok.next().ok_or_else(|| Error::parse(FILE, ln, "expected camera model"))?;
        let width: u32 = num(tok.next(), FILE, ln, "width")?;
        let height: u32 = num(tok.next(), FILE, ln, "height")?;
        let params: Vec<f64> = tok
            .map(|t| t.parse().map_err(|_| Error::parse(FILE, ln, format!("bad parameter `{t}`"))))
            .collect::<Result<_>>()?;
        let (fx, fy, cx, cy) = match (model, params.as_slice()) {
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE" | "PINHOLE", _) => {
                return Err(Error::parse(FILE, ln, format!("wrong parameter count for {model}")))
            }
            (other, _) => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        out.insert(id, Intrinsics { width, height, fx, fy, cx, cy });
    }
    Ok(out)
}

fn parse_images(text: &str, cameras: &BTreeMap<u32, Intrinsics>) -> Result<Vec<ImageMeta>> {
    const FILE: &str = "images.txt";
    let mut images = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim_start().starts_with('#'));
    while let Some((idx, line)) = lines.next() {
        let ln = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id: u32 = num(tok.next(), FILE, ln, "image id")?;
        let mut q = [0.0; 4];
        for (i, name) in ["qw", "qx", "qy", "qz"].iter().enumerate() {
            q[i] = num(tok.next(), FILE, ln, name)?;
        }
        let mut t = Vec3::zeros();
        for (i, name) in ["tx", "ty", "tz"].iter().enumerate() {
            t[i] = num(tok.next(), FILE, ln, name)?;
        }
        let camera_id: u32 = num(tok.next(), FILE, ln, "camera id")?;
        let name = tok.collect::<Vec<_>>().join(" ");
        if name.is_empty() {
            return Err(Error::parse(FILE, ln, "expected image name"));
        }
        // The keypoint line follows and may be blank; it is not needed here.
        lines.next();
        let intr = cameras
            .get(&camera_id)
            .ok_or_else(|| Error::parse(FILE, ln, format!("unknown camera id {camera_id}")))?;
        let camera = Camera {
            width: intr.width,
            height: intr.height,
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            rotation: Camera::rotation_from_quaternion(q[0], q[1], q[2], q[3]),
            translation: t,
        };
        images.push(ImageMeta { id, name, camera_id, camera, appearance: 0 });
    }
    images.sort_by_key(|m| m.id);
    for (i, m) in images.iter_mut().enumerate() {
        m.appearance = i;
    }
    Ok(images)
}

fn parse_points(text: &str) -> Result<Vec<SfmPoint>> {
    const FILE: &str = "points3D.txt";
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let ln = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 8 {
            return Err(Error::parse(FILE, ln, "expected `ID X Y Z R G B ERROR TRACK[]`"));
        }
        let mut position = Vec3::zeros();
        for a in 0..3 {
            position[a] = num(Some(tok[1 + a]), FILE, ln, "coordinate")?;
        }
        let mut color = [0.0; 3];
        for a in 0..3 {
            let c: f64 = num(Some(tok[4 + a]), FILE, ln, "color")?;
            color[a] = c / 255.0;
        }
        let reprojection_error: f64 = num(Some(tok[7]), FILE, ln, "error")?;
        let track = &tok[8..];
        if !track.len().is_multiple_of(2) {
            return Err(Error::parse(FILE, ln, "track must hold (IMAGE_ID, POINT2D_IDX) pairs"));
        }
        points.push(SfmPoint { position, track_length: track.len() / 2, reprojection_error, color });
    }
    Ok(points)
}

/// Reads `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
pub fn load_colmap_scene(dir: &Path) -> Result<ColmapScene> {
    let cameras = parse_cameras(&read(&dir.join("cameras.txt"))?)?;
    let images = parse_images(&read(&dir.join("images.txt"))?, &cameras)?;
    let points = parse_points(&read(&dir.join("points3D.txt"))?)?;
    Ok(ColmapScene { images, points })
}

/// Writes a PINHOLE model. One camera per image; point tracks are synthesized
/// as `(image_id, 0)` pairs cycling over the registered images.
pub fn write_colmap_scene(dir: &Path, scene: &ColmapScene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cams = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    let mut imgs = String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for m in &scene.images {
        let c = &m.camera;
        writeln!(cams, "{} PINHOLE {} {} {} {} {} {}", m.camera_id, c.width, c.height, c.fx, c.fy, c.cx, c.cy).unwrap();
        let q = c.quaternion();
        let t = c.translation;
        writeln!(imgs, "{} {} {} {} {} {} {} {} {} {}", m.id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, m.camera_id, m.name).unwrap();
        imgs.push('\n');
    }
    let mut pts = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for (i, p) in scene.points.iter().enumerate() {
        let rgb = p.color.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8);
        write!(
            pts,
            "{} {} {} {} {} {} {} {}",
            i + 1,
            p.position.x,
            p.position.y,
            p.position.z,
            rgb[0],
            rgb[1],
            rgb[2],
            p.reprojection_error
        )
        .unwrap();
        for k in 0..p.track_length {
            let img = scene.images.get((i + k) % scene.images.len().max(1)).map_or(1, |m| m.id);
            write!(pts, " {img} {k}").unwrap();
        }
        pts.push('\n');
    }
    for (name, body) in [("cameras.txt", cams), ("images.txt", imgs), ("points3D.txt", pts)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
