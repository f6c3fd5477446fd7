//! Neural scene representation: geometry MLP `d(x)`, color MLP
//! `c_i(x, v, e_i)` and the per-image appearance table.

mod checkpoint;
mod encoding;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use encoding::{encode, EncodingConfig};
pub use mlp::{Activation, Linear, Mlp, MlpGrads, MlpSpec};

pub(crate) use mlp::sigmoid;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::{Error, Result};

/// Anything that can be queried for a signed distance.
pub trait SdfField: Sync {
    fn sdf(&self, p: &Vec3) -> f64;

    fn sdf_batch(&self, points: &[Vec3]) -> Vec<f64> {
        points.iter().map(|p| self.sdf(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub position_encoding: EncodingConfig,
    pub direction_encoding: EncodingConfig,
    /// Output 0 is the SDF, the rest is the feature vector fed to the color
    /// network.
    pub geometry: MlpSpec,
    pub color: MlpSpec,
    pub embedding_dim: usize,
    /// Initial sphere radius as a fraction of the scene half-extent.
    pub init_radius: f64,
}

impl FieldConfig {
    /// Geometry 8x512 with a skip at layer 4, color 4x256.
    pub fn full_scale() -> Self {
        FieldConfig {
            geometry: MlpSpec {
                layers: 8,
                width: 512,
                activation: Activation::Softplus { beta: 100.0 },
                output: 257,
                skip: Some(4),
            },
            color: MlpSpec { layers: 4, width: 256, activation: Activation::Relu, output: 3, skip: None },
            ..FieldConfig::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.geometry.output - 1
    }

    pub fn color_input_dim(&self) -> usize {
        self.position_encoding.dim() + self.direction_encoding.dim() + 3 + self.feature_dim() + self.embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.geometry.output < 1 {
            return Err(Error::Config("geometry network needs at least the SDF output".into()));
        }
        if self.color.output != 3 {
            return Err(Error::Config("color network must output 3 channels".into()));
        }
        for spec in [&self.geometry, &self.color] {
            if spec.layers == 0 || spec.width == 0 {
                return Err(Error::Config("mlp layers and width must be >= 1".into()));
            }
            if let Some(k) = spec.skip {
                if k == 0 || k >= spec.layers {
                    return Err(Error::Config(format!("skip layer {k} out of range")));
                }
            }
        }
        Ok(())
    }
}

impl Default for FieldConfig {
    /// Desk-scale networks: geometry 4x64, color 3x64.
    fn default() -> Self {
        FieldConfig {
            position_encoding: EncodingConfig::new(10, true),
            direction_encoding: EncodingConfig::new(4, true),
            geometry: MlpSpec {
                layers: 4,
                width: 64,
                activation: Activation::Softplus { beta: 100.0 },
                output: 65,
                skip: None,
            },
            color: MlpSpec { layers: 3, width: 64, activation: Activation::Relu, output: 3, skip: None },
            embedding_dim: 48,
            init_radius: 0.5,
        }
    }
}

/// Maps scene coordinates into the network's frame, `(x - center) / scale`.
/// SDF values are reported back in scene units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec3,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization { center: Vec3::zeros(), scale: 1.0 }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) / self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralField {
    pub config: FieldConfig,
    pub frame: Normalization,
    pub geometry: Mlp,
    pub color: Mlp,
    /// One row per training image.
    pub embeddings: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub geometry: MlpGrads,
    pub color: MlpGrads,
    pub embeddings: Array2<f64>,
}

impl FieldGrads {
    pub fn add_assign(&mut self, other: &FieldGrads) {
        self.geometry.add_assign(&other.geometry);
        self.color.add_assign(&other.color);
        self.embeddings += &other.embeddings;
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.geometry.tensors();
        t.extend(self.color.tensors());
        t.push(self.embeddings.as_slice().unwrap());
        t
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0))
    }
}

/// A field evaluation point. Color is computed only when `view` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldQuery {
    pub x: Vec3,
    /// Unit viewing direction and appearance index.
    pub view: Option<(Vec3, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput {
    pub sdf: f64,
    pub grad: Vec3,
    pub color: Option<[f64; 3]>,
}

/// Loss sensitivities for one query's outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldCotangent {
    pub sdf: f64,
    pub grad: Vec3,
    pub color: [f64; 3],
}

/// Recorded batch forward pass.
pub struct FieldTape {
    geometry: mlp::TangentTape,
    color: Option<mlp::Tape>,
    /// `(query index, appearance index)` per color row.
    color_rows: Vec<(usize, usize)>,
    colors: Array2<f64>,
}

impl NeuralField {
    /// Sphere-initialized geometry (when the position encoding includes the
    /// identity), randomly initialized color network, zero embeddings.
    pub fn new(config: FieldConfig, frame: Normalization, num_images: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut geometry = Mlp::new(config.geometry, config.position_encoding.dim());
        if config.position_encoding.include_identity {
            geometry.init_sphere(config.init_radius, &mut rng);
        } else {
            geometry.init_default(&mut rng);
        }
        let mut color = Mlp::new(config.color, config.color_input_dim());
        color.init_default(&mut rng);
        let embeddings = Array2::zeros((num_images, config.embedding_dim));
        Ok(NeuralField { config, frame, geometry, color, embeddings })
    }

    pub fn num_images(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn zero_grads(&self) -> FieldGrads {
        FieldGrads {
            geometry: self.geometry.zero_grads(),
            color: self.color.zero_grads(),
            embeddings: Array2::zeros(self.embeddings.dim()),
        }
    }

    /// Named trainable tensors, in a fixed order matching
    /// [`FieldGrads::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.geometry.tensors_mut();
        t.extend(self.color.tensors_mut());
        t.push(self.embeddings.as_slice_mut().unwrap());
        t
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.geometry.tensors();
        t.extend(self.color.tensors());
        t.push(self.embeddings.as_slice().unwrap());
        t
    }

    pub fn mean_embedding(&self) -> Array1<f64> {
        self.embeddings.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(self.config.embedding_dim))
    }

    /// SDF and its exact gradient with respect to `x`.
    pub fn sdf_and_grad(&self, x: &Vec3) -> (f64, Vec3) {
        let (out, _) = self.forward(&[FieldQuery { x: *x, view: None }]).expect("no color rows");
        (out[0].sdf, out[0].grad)
    }

    pub fn color_at(&self, x: &Vec3, view: &Vec3, image: usize) -> Result<[f64; 3]> {
        let (out, _) = self.forward(&[FieldQuery { x: *x, view: Some((*view, image)) }])?;
        Ok(out[0].color.unwrap())
    }

    fn encode_positions(&self, points: impl ExactSizeIterator<Item = Vec3>) -> Array2<f64> {
        let enc = self.config.position_encoding;
        let mut z = Array2::zeros((points.len(), enc.dim()));
        for (mut row, p) in z.rows_mut().into_iter().zip(points) {
            enc.encode_into(&self.frame.apply(&p), row.as_slice_mut().unwrap());
        }
        z
    }

    pub fn forward(&self, queries: &[FieldQuery]) -> Result<(Vec<FieldOutput>, FieldTape)> {
        let enc = self.config.position_encoding;
        let e = enc.dim();
        let b = queries.len();
        let mut z = Array2::zeros((b, e));
        let mut jz = Array2::zeros((3 * b, e));
        let mut jac = vec![0.0; 3 * e];
        for (i, q) in queries.iter().enumerate() {
            let xn = self.frame.apply(&q.x);
            enc.encode_with_jacobian(&xn, z.row_mut(i).as_slice_mut().unwrap(), &mut jac);
            for c in 0..3 {
                // d(xn)/dx = 1/scale
                jz.row_mut(c * b + i)
                    .iter_mut()
                    .zip(&jac[c * e..(c + 1) * e])
                    .for_each(|(dst, v)| *dst = v / self.frame.scale);
            }
        }
        let geo = self.geometry.forward_tangent(&z, &jz);
        let scale = self.frame.scale;
        let mut outputs: Vec<FieldOutput> = (0..b)
            .map(|i| FieldOutput {
                sdf: scale * geo.output[[i, 0]],
                grad: Vec3::new(
                    scale * geo.output_tangent0[i],
                    scale * geo.output_tangent0[b + i],
                    scale * geo.output_tangent0[2 * b + i],
                ),
                color: None,
            })
            .collect();

        let color_rows: Vec<(usize, usize)> = queries
            .iter()
            .enumerate()
            .filter_map(|(i, q)| q.view.map(|(_, img)| (i, img)))
            .collect();
        let n_img = self.num_images();
        if let Some(&(_, bad)) = color_rows.iter().find(|(_, img)| *img >= n_img) {
            return Err(Error::ImageIndex { index: bad, count: n_img });
        }
        let mut colors = Array2::zeros((color_rows.len(), 3));
        let color_tape = if color_rows.is_empty() {
            None
        } else {
            let venc = self.config.direction_encoding;
            let (ev, f, d) = (venc.dim(), self.config.feature_dim(), self.config.embedding_dim);
            let mut cin = Array2::zeros((color_rows.len(), self.config.color_input_dim()));
            for (r, &(qi, img)) in color_rows.iter().enumerate() {
                let mut row = cin.row_mut(r);
                let row = row.as_slice_mut().unwrap();
                row[..e].copy_from_slice(z.row(qi).as_slice().unwrap());
                let dir = queries[qi].view.unwrap().0;
                venc.encode_into(&dir, &mut row[e..e + ev]);
                let g = outputs[qi].grad;
                row[e + ev..e + ev + 3].copy_from_slice(g.as_slice());
                let o = e + ev + 3;
                for k in 0..f {
                    row[o + k] = geo.output[[qi, 1 + k]];
                }
                row[o + f..o + f + d].copy_from_slice(self.embeddings.row(img).as_slice().unwrap());
            }
            let tape = self.color.forward(&cin);
            for (r, &(qi, _)) in color_rows.iter().enumerate() {
                let c = [0, 1, 2].map(|k| sigmoid(tape.output[[r, k]]));
                colors.row_mut(r).assign(&Array1::from(c.to_vec()));
                outputs[qi].color = Some(c);
            }
            Some(tape)
        };
        Ok((outputs, FieldTape { geometry: geo, color: color_tape, color_rows, colors }))
    }

    /// Gradients of `sum_i <cotangent_i, output_i>` with respect to every
    /// trainable tensor. Embedding rows not referenced by the batch stay zero.
    pub fn backward(&self, tape: &FieldTape, cotangents: &[FieldCotangent]) -> Result<FieldGrads> {
        let b = tape.geometry.output.nrows();
        if cotangents.len() != b {
            return Err(Error::ShapeMismatch {
                expected: format!("{b} cotangents"),
                got: cotangents.len().to_string(),
            });
        }
        let mut grads = self.zero_grads();
        let scale = self.frame.scale;
        let mut d_out = Array2::zeros(tape.geometry.output.dim());
        let mut d_tan = Array1::zeros(3 * b);
        for (i, c) in cotangents.iter().enumerate() {
            d_out[[i, 0]] = scale * c.sdf;
            for a in 0..3 {
                d_tan[a * b + i] = scale * c.grad[a];
            }
        }

        if let Some(ct) = &tape.color {
            let e = self.config.position_encoding.dim();
            let ev = self.config.direction_encoding.dim();
            let (f, d) = (self.config.feature_dim(), self.config.embedding_dim);
            let mut d_logit = Array2::zeros(tape.colors.dim());
            for (r, &(qi, _)) in tape.color_rows.iter().enumerate() {
                for k in 0..3 {
                    let s = tape.colors[[r, k]];
                    d_logit[[r, k]] = cotangents[qi].color[k] * s * (1.0 - s);
                }
            }
            let d_in = self.color.backward(ct, &d_logit, &mut grads.color);
            for (r, &(qi, img)) in tape.color_rows.iter().enumerate() {
                let row = d_in.row(r);
                for a in 0..3 {
                    d_tan[a * b + qi] += scale * row[e + ev + a];
                }
                let o = e + ev + 3;
                for k in 0..f {
                    d_out[[qi, 1 + k]] += row[o + k];
                }
                let mut emb = grads.embeddings.row_mut(img);
                emb += &row.slice(s![o + f..o + f + d]);
            }
        }
        self.geometry.backward_tangent(&tape.geometry, &d_out, &d_tan, &mut grads.geometry);
        Ok(grads)
    }
}

impl SdfField for NeuralField {
    fn sdf(&self, p: &Vec3) -> f64 {
        self.sdf_batch(std::slice::from_ref(p))[0]
    }

    fn sdf_batch(&self, points: &[Vec3]) -> Vec<f64> {
        if points.is_empty() {
            return Vec::new();
        }
        let z = self.encode_positions(points.iter().copied());
        let tape = self.geometry.forward(&z);
        tape.output.column(0).iter().map(|v| v * self.frame.scale).collect()
    }
}
