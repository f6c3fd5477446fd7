use std::path::Path;

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use super::{load_colmap_scene, Camera, ImageMeta, SfmPoint};
use crate::{Error, Result};

/// A posed training photo with its masks. Pixels are row-major.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: u32,
    pub name: String,
    pub camera: Camera,
    pub pixels: Vec<[f64; 3]>,
    /// `true` = dynamic content, never trained on.
    pub transient: Vec<bool>,
    /// `true` = sky, supervised as free space.
    pub sky: Vec<bool>,
    pub appearance: usize,
}

impl ImageRecord {
    pub fn width(&self) -> u32 {
        self.camera.width
    }

    pub fn height(&self) -> u32 {
        self.camera.height
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[(y * self.camera.width + x) as usize]
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub images: Vec<ImageRecord>,
    pub points: Vec<SfmPoint>,
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn load_mask(path: &Path, width: u32, height: u32) -> Result<Vec<bool>> {
    if !path.exists() {
        return Ok(vec![false; (width * height) as usize]);
    }
    let img = open(path)?.into_luma8();
    if img.dimensions() != (width, height) {
        return Err(Error::ShapeMismatch {
            expected: format!("{width}x{height} mask"),
            got: format!("{}x{} in {}", img.width(), img.height(), path.display()),
        });
    }
    Ok(img.pixels().map(|p| p.0[0] != 0).collect())
}

fn stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

/// Loads pixels and masks for every registered image. Missing mask files
/// mean "no pixels flagged".
pub fn load_image_records(scene_dir: &Path, metas: &[ImageMeta]) -> Result<Vec<ImageRecord>> {
    metas
        .iter()
        .map(|m| {
            let path = scene_dir.join("images").join(&m.name);
            let img = open(&path)?.into_rgb8();
            let (w, h) = (m.camera.width, m.camera.height);
            if img.dimensions() != (w, h) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{w}x{h} image"),
                    got: format!("{}x{} in {}", img.width(), img.height(), path.display()),
                });
            }
            let pixels = img
                .pixels()
                .map(|p| p.0.map(|c| c as f64 / 255.0))
                .collect();
            let masks = scene_dir.join("masks");
            let stem = stem(&m.name);
            Ok(ImageRecord {
                id: m.id,
                name: m.name.clone(),
                camera: m.camera.clone(),
                pixels,
                transient: load_mask(&masks.join(format!("{stem}_transient.png")), w, h)?,
                sky: load_mask(&masks.join(format!("{stem}_sky.png")), w, h)?,
                appearance: m.appearance,
            })
        })
        .collect()
}

/// Loads `sparse/*.txt`, `images/` and `masks/` from a scene directory.
pub fn load_scene(scene_dir: &Path) -> Result<Scene> {
    let colmap = load_colmap_scene(&scene_dir.join("sparse"))?;
    for m in &colmap.images {
        m.camera.validate()?;
    }
    let images = load_image_records(scene_dir, &colmap.images)?;
    Ok(Scene { images, points: colmap.points })
}

pub fn save_rgb(path: &Path, width: u32, height: u32, pixels: &[[f64; 3]]) -> Result<()> {
    let img = RgbImage::from_fn(width, height, |x, y| {
        let p = pixels[(y * width + x) as usize];
        Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn save_mask(path: &Path, width: u32, height: u32, mask: &[bool]) -> Result<()> {
    let img = GrayImage::from_fn(width, height, |x, y| Luma([if mask[(y * width + x) as usize] { 255 } else { 0 }]));
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
