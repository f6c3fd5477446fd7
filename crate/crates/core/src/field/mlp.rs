//! Fully connected networks over row-major batches (`rows = samples`).
//!
//! Besides the plain forward/backward pair, [`Mlp::forward_tangent`] pushes
//! three input tangents through the network alongside the primal values, and
//! [`Mlp::backward_tangent`] differentiates that combined computation. This is
//! what makes the input gradient of the network (and any loss on it, such as
//! the eikonal term) differentiable with respect to the weights.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `ln(1 + exp(beta x)) / beta`
    Softplus { beta: f64 },
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Softplus { beta } => {
                let z = beta * x;
                (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Softplus { beta } => sigmoid(beta * x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Value, first and second derivative with one exponential.
    #[inline]
    fn eval_with_derivs(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::Softplus { beta } => {
                let z = beta * x;
                let e = (-z.abs()).exp();
                let f = (z.max(0.0) + e.ln_1p()) / beta;
                let s = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                (f, s, beta * s * (1.0 - s))
            }
            _ => (self.eval(x), self.d1(x), 0.0),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Network shape. `layers` counts linear layers; the activation follows every
/// layer but the last.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub output: usize,
    /// Layer whose input is `[hidden, network input] / sqrt(2)`.
    pub skip: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(out: usize, inp: usize) -> Self {
        Linear { weight: Array2::zeros((out, inp)), bias: Array1::zeros(out) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub input_dim: usize,
    pub layers: Vec<Linear>,
}

/// Gradient buffers shaped like an [`Mlp`]'s layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Linear>,
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0))
    }
}

/// Recorded forward pass of [`Mlp::forward`].
pub struct Tape {
    /// Input to every linear layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Recorded forward pass of [`Mlp::forward_tangent`]. Tangent matrices stack
/// the three input directions as row blocks: row `c * batch + b`.
pub struct TangentTape {
    inputs: Vec<Array2<f64>>,
    tangents: Vec<Array2<f64>>,
    /// First and second activation derivatives at the hidden pre-activations.
    d1: Vec<Array2<f64>>,
    d2: Vec<Array2<f64>>,
    pre_tangent: Vec<Array2<f64>>,
    pub output: Array2<f64>,
    /// Tangent of output column 0 (length `3 * batch`).
    pub output_tangent0: Array1<f64>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, input_dim: usize) -> Self {
        assert!(spec.layers >= 1 && spec.width >= 1, "mlp needs at least one layer of width >= 1");
        let layers = (0..spec.layers)
            .map(|k| {
                let (out, inp) = Self::layer_shape(&spec, input_dim, k);
                Linear::zeros(out, inp)
            })
            .collect();
        Mlp { spec, input_dim, layers }
    }

    fn layer_shape(spec: &MlpSpec, input_dim: usize, k: usize) -> (usize, usize) {
        let out = if k + 1 == spec.layers { spec.output } else { spec.width };
        let inp = match k {
            0 => input_dim,
            _ if spec.skip == Some(k) => spec.width + input_dim,
            _ => spec.width,
        };
        (out, inp)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(|l| Linear::zeros(l.weight.nrows(), l.weight.ncols())).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let Linear { weight, bias } = l;
                [weight.as_slice_mut().unwrap(), bias.as_slice_mut().unwrap()]
            })
            .collect()
    }

    /// He-normal hidden layers, `N(0, 1/in)` output layer, zero biases.
    pub fn init_default(&mut self, rng: &mut impl Rng) {
        let n = self.layers.len();
        for (k, l) in self.layers.iter_mut().enumerate() {
            let fan_in = l.weight.ncols() as f64;
            let std = if k + 1 == n { (1.0 / fan_in).sqrt() } else { (2.0 / fan_in).sqrt() };
            let dist = Normal::new(0.0, std).unwrap();
            l.weight.mapv_inplace(|_| dist.sample(rng));
            l.bias.fill(0.0);
        }
    }

    /// Geometric initialization: the first output approximates
    /// `|p| - radius` where `p` are the first three inputs. Weights acting on
    /// the remaining (frequency) inputs start at zero.
    pub fn init_sphere(&mut self, radius: f64, rng: &mut impl Rng) {
        let n = self.layers.len();
        let input_dim = self.input_dim;
        let width = self.spec.width;
        for (k, l) in self.layers.iter_mut().enumerate() {
            let (out, fan_in) = l.weight.dim();
            if k + 1 == n {
                let mean = (std::f64::consts::PI / fan_in as f64).sqrt();
                let dist = Normal::new(mean, 1e-4).unwrap();
                l.weight.mapv_inplace(|_| dist.sample(rng));
                l.bias.fill(0.0);
                l.bias[0] = -radius;
                // feature outputs start small but non-degenerate
                if out > 1 {
                    let feat = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
                    l.weight.slice_mut(s![1.., ..]).mapv_inplace(|_| feat.sample(rng));
                }
                continue;
            }
            let dist = Normal::new(0.0, (2.0 / out as f64).sqrt()).unwrap();
            l.weight.mapv_inplace(|_| dist.sample(rng));
            l.bias.fill(0.0);
            if k == 0 && input_dim > 3 {
                l.weight.slice_mut(s![.., 3..]).fill(0.0);
            } else if self.spec.skip == Some(k) && input_dim > 3 {
                l.weight.slice_mut(s![.., width + 3..]).fill(0.0);
            }
        }
    }

    fn layer_input(&self, k: usize, hidden: &Array2<f64>, input: ArrayView2<f64>) -> Array2<f64> {
        if self.spec.skip == Some(k) && k > 0 {
            let mut cat = ndarray::concatenate(Axis(1), &[hidden.view(), input]).unwrap();
            cat *= std::f64::consts::FRAC_1_SQRT_2;
            cat
        } else {
            hidden.clone()
        }
    }

    fn affine(l: &Linear, u: &Array2<f64>) -> Array2<f64> {
        let mut a = Array2::zeros((u.nrows(), l.weight.nrows()));
        general_mat_mul(1.0, u, &l.weight.t(), 0.0, &mut a);
        a += &l.bias;
        a
    }

    pub fn forward(&self, x: &Array2<f64>) -> Tape {
        debug_assert_eq!(x.ncols(), self.input_dim);
        let act = self.spec.activation;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (k, l) in self.layers.iter().enumerate() {
            let u = if k == 0 { h } else { self.layer_input(k, &h, x.view()) };
            let a = Self::affine(l, &u);
            inputs.push(u);
            if k + 1 == self.layers.len() {
                return Tape { inputs, pre, output: a };
            }
            h = a.mapv(|v| act.eval(v));
            pre.push(a);
        }
        unreachable!("mlp has at least one layer")
    }

    /// Backpropagates `d_out`; accumulates into `grads` and returns the
    /// gradient with respect to the network input.
    pub fn backward(&self, tape: &Tape, d_out: &Array2<f64>, grads: &mut MlpGrads) -> Array2<f64> {
        let act = self.spec.activation;
        let mut d_a = d_out.clone();
        let mut d_input = Array2::zeros((d_out.nrows(), self.input_dim));
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let g = &mut grads.layers[k];
            general_mat_mul(1.0, &d_a.t(), &tape.inputs[k], 1.0, &mut g.weight);
            g.bias += &d_a.sum_axis(Axis(0));
            let mut d_u = Array2::zeros((d_a.nrows(), l.weight.ncols()));
            general_mat_mul(1.0, &d_a, &l.weight, 0.0, &mut d_u);
            if k == 0 {
                d_input += &d_u;
                break;
            }
            let d_h = self.split_skip(k, d_u, &mut d_input);
            let a = &tape.pre[k - 1];
            d_a = d_h;
            Zip::from(&mut d_a).and(a).for_each(|d, &a| *d *= act.d1(a));
        }
        d_input
    }

    /// Separates the skip part of a layer-input gradient.
    fn split_skip(&self, k: usize, d_u: Array2<f64>, d_input: &mut Array2<f64>) -> Array2<f64> {
        if self.spec.skip == Some(k) {
            let w = self.spec.width;
            let scale = std::f64::consts::FRAC_1_SQRT_2;
            d_input.scaled_add(scale, &d_u.slice(s![.., w..]));
            d_u.slice(s![.., ..w]).mapv(|v| v * scale)
        } else {
            d_u
        }
    }

    /// Forward pass with input tangents `dx` (`3 * batch` rows).
    pub fn forward_tangent(&self, x: &Array2<f64>, dx: &Array2<f64>) -> TangentTape {
        let batch = x.nrows();
        debug_assert_eq!(dx.nrows(), 3 * batch);
        let act = self.spec.activation;
        let n = self.layers.len();
        let mut tape = TangentTape {
            inputs: Vec::with_capacity(n),
            tangents: Vec::with_capacity(n),
            d1: Vec::with_capacity(n),
            d2: Vec::with_capacity(n),
            pre_tangent: Vec::with_capacity(n),
            output: Array2::zeros((0, 0)),
            output_tangent0: Array1::zeros(0),
        };
        let mut h = x.clone();
        let mut hd = dx.clone();
        for (k, l) in self.layers.iter().enumerate() {
            let (u, ud) = if k == 0 {
                (h, hd)
            } else {
                (self.layer_input(k, &h, x.view()), self.layer_input(k, &hd, dx.view()))
            };
            let a = Self::affine(l, &u);
            if k + 1 == n {
                tape.output_tangent0 = ud.dot(&l.weight.row(0));
                tape.output = a;
                tape.inputs.push(u);
                tape.tangents.push(ud);
                return tape;
            }
            let mut ad = Array2::zeros((ud.nrows(), l.weight.nrows()));
            general_mat_mul(1.0, &ud, &l.weight.t(), 0.0, &mut ad);
            let mut d1 = Array2::zeros(a.dim());
            let mut d2 = Array2::zeros(a.dim());
            h = a;
            Zip::from(&mut h).and(&mut d1).and(&mut d2).for_each(|v, g1, g2| {
                let (f, a1, a2) = act.eval_with_derivs(*v);
                *v = f;
                *g1 = a1;
                *g2 = a2;
            });
            let mut next_hd = ad.clone();
            for c in 0..3 {
                let mut block = next_hd.slice_mut(s![c * batch..(c + 1) * batch, ..]);
                block *= &d1;
            }
            hd = next_hd;
            tape.inputs.push(u);
            tape.tangents.push(ud);
            tape.d1.push(d1);
            tape.d2.push(d2);
            tape.pre_tangent.push(ad);
        }
        unreachable!("mlp has at least one layer")
    }

    /// Backward pass of [`Mlp::forward_tangent`] given the gradient of the
    /// outputs and of the tangent of output 0. Input gradients are not
    /// produced.
    pub fn backward_tangent(
        &self,
        tape: &TangentTape,
        d_out: &Array2<f64>,
        d_tangent0: &Array1<f64>,
        grads: &mut MlpGrads,
    ) {
        let n = self.layers.len();
        let batch = d_out.nrows();

        // output layer
        let l = &self.layers[n - 1];
        let g = &mut grads.layers[n - 1];
        general_mat_mul(1.0, &d_out.t(), &tape.inputs[n - 1], 1.0, &mut g.weight);
        {
            let mut row0 = g.weight.row_mut(0);
            row0 += &tape.tangents[n - 1].t().dot(d_tangent0);
        }
        g.bias += &d_out.sum_axis(Axis(0));
        if n == 1 {
            return;
        }
        let mut d_u = Array2::zeros((batch, l.weight.ncols()));
        general_mat_mul(1.0, d_out, &l.weight, 0.0, &mut d_u);
        let w0 = l.weight.row(0);
        let mut d_ud = Array2::zeros((3 * batch, l.weight.ncols()));
        Zip::from(d_ud.rows_mut()).and(d_tangent0).for_each(|mut row, &g| row.scaled_add(g, &w0));

        let mut scratch = Array2::zeros((0, 0));
        for k in (0..n - 1).rev() {
            // adjoints of h_k and its tangent
            let d_h = self.split_skip(k + 1, d_u, scratch_like(&mut scratch, batch, self.input_dim));
            let d_hd = self.split_skip(k + 1, d_ud, scratch_like(&mut scratch, 3 * batch, self.input_dim));
            let (d1, d2) = (&tape.d1[k], &tape.d2[k]);
            let ad = &tape.pre_tangent[k];

            let mut d_a = d_h;
            d_a *= d1;
            let mut d_ad = d_hd;
            for c in 0..3 {
                let rows = s![c * batch..(c + 1) * batch, ..];
                let tan = ad.slice(rows);
                let mut adj = d_ad.slice_mut(rows);
                Zip::from(&mut d_a).and(d2).and(&tan).and(&adj).for_each(|d, &g2, &t, &j| *d += g2 * t * j);
                adj *= d1;
            }

            let l = &self.layers[k];
            let g = &mut grads.layers[k];
            general_mat_mul(1.0, &d_a.t(), &tape.inputs[k], 1.0, &mut g.weight);
            general_mat_mul(1.0, &d_ad.t(), &tape.tangents[k], 1.0, &mut g.weight);
            g.bias += &d_a.sum_axis(Axis(0));
            if k == 0 {
                break;
            }
            d_u = Array2::zeros((batch, l.weight.ncols()));
            general_mat_mul(1.0, &d_a, &l.weight, 0.0, &mut d_u);
            d_ud = Array2::zeros((3 * batch, l.weight.ncols()));
            general_mat_mul(1.0, &d_ad, &l.weight, 0.0, &mut d_ud);
        }
    }
}

/// Discard buffer for skip-connection input gradients, which the tangent
/// backward pass does not need.
fn scratch_like(buf: &mut Array2<f64>, rows: usize, cols: usize) -> &mut Array2<f64> {
    if buf.dim() != (rows, cols) {
        *buf = Array2::zeros((rows, cols));
    }
    buf
}
