use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::field::FieldConfig;
use crate::geometry::Vec3;
use crate::trainer::{LossWeights, TrainSchedule};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    /// Stratified jitter during training; tests and previews use bin centers.
    pub jitter: bool,
    /// Logistic sharpness of the importance pass, in inverse units of the
    /// scene half-extent.
    pub importance_sharpness: f64,
    /// Bounding sphere of the sphere-based baseline. Defaults to the sphere
    /// circumscribing the voxel envelope's bounds.
    pub sphere_center: Option<Vec3>,
    pub sphere_radius: Option<f64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { jitter: true, importance_sharpness: 64.0, sphere_center: None, sphere_radius: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshConfig {
    pub cells_per_voxel: usize,
    /// Surface points per unit area when converting meshes for evaluation.
    pub eval_density: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { cells_per_voxel: 8, eval_density: 1e4 }
    }
}

/// Everything a run needs besides the scene data. Serialized as a single
/// JSON document; missing keys take their defaults and an absent `t_s` is
/// derived from the octree depth and voxel size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Edge `s` of the voxel envelope, in scene units.
    pub voxel_size: f64,
    /// Octree depth `l` of the SDF cache.
    pub octree_depth: u32,
    pub n_v: usize,
    pub n_s: usize,
    /// Half-width of the surface-guided window.
    pub t_s: Option<f64>,
    pub dilation_radius: u32,
    pub min_track_len: usize,
    /// Pixels.
    pub max_reproj: f64,
    pub loss: LossWeights,
    pub schedule: TrainSchedule,
    pub field: FieldConfig,
    pub sampling: SamplingParams,
    pub mesh: MeshConfig,
    pub scene_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            voxel_size: 0.1,
            octree_depth: 6,
            n_v: 8,
            n_s: 8,
            t_s: None,
            dilation_radius: 1,
            min_track_len: 3,
            max_reproj: 1.5,
            loss: LossWeights::default(),
            schedule: TrainSchedule::default(),
            field: FieldConfig::default(),
            sampling: SamplingParams::default(),
            mesh: MeshConfig::default(),
            scene_dir: None,
            out_dir: None,
        }
    }
}

impl SceneConfig {
    /// `t_s`, or `16 / 2^l * s` when not set explicitly.
    pub fn t_s(&self) -> f64 {
        self.t_s.unwrap_or_else(|| 16.0 / 2f64.powi(self.octree_depth as i32) * self.voxel_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad("voxel_size must be positive");
        }
        if self.octree_depth == 0 || self.octree_depth > 20 {
            return bad("octree_depth must be in 1..=20");
        }
        if self.n_v == 0 || self.n_s == 0 {
            return bad("n_v and n_s must be >= 1");
        }
        if !(self.t_s() > 0.0) {
            return bad("t_s must be positive");
        }
        if self.mesh.cells_per_voxel == 0 {
            return bad("cells_per_voxel must be >= 1");
        }
        self.loss.validate()?;
        self.schedule.validate()?;
        self.field.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SceneConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
