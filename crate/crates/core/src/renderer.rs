//! SDF-to-opacity conversion and alpha compositing along a ray.
//!
//! A ray carries `n + 1` ascending sample depths with SDF values, which bound
//! `n` sections. Section `k` has opacity
//! `alpha_k = clamp((Phi(d_k) - Phi(d_{k+1})) / Phi(d_k), 0, 1)` where `Phi` is
//! the logistic CDF with inverse standard deviation `inv_std`, and a color
//! evaluated at its midpoint. The ratio is computed in log space so that very
//! sharp densities stay finite.

use std::io::Write;

use serde::{Deserialize, Serialize};

/// `1 / (1 + exp(-inv_std * x))`, stable for any magnitude of the argument.
pub fn logistic_cdf(x: f64, inv_std: f64) -> f64 {
    let z = inv_std * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(z)) = -softplus(-z)`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Trainable sharpness of the SDF-induced density, stored as `ln(inv_std)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticDensity {
    pub log_inv_std: f64,
}

impl LogisticDensity {
    pub fn new(inv_std: f64) -> Self {
        assert!(inv_std > 0.0, "inverse standard deviation must be positive");
        LogisticDensity { log_inv_std: inv_std.ln() }
    }

    /// Starting sharpness of `20 / half_extent`.
    pub fn for_half_extent(half_extent: f64) -> Self {
        Self::new(20.0 / half_extent)
    }

    pub fn inv_std(&self) -> f64 {
        self.log_inv_std.exp()
    }
}

/// Section opacities for SDF values at ascending sample depths.
pub fn alphas_from_sdf(sdf: &[f64], inv_std: f64) -> Vec<f64> {
    sdf.windows(2).map(|w| section_alpha(w[0], w[1], inv_std).0).collect()
}

/// Opacity of one section and the ratio `Phi(d1) / Phi(d0)` it came from.
fn section_alpha(d0: f64, d1: f64, inv_std: f64) -> (f64, f64) {
    let ratio = (log_sigmoid(inv_std * d1) - log_sigmoid(inv_std * d0)).exp();
    let alpha = 1.0 - ratio;
    if alpha.is_nan() {
        (0.0, ratio)
    } else {
        (alpha.clamp(0.0, 1.0), ratio)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// `sum_k w_k * t_k` over section midpoints.
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

/// Front-to-back compositing of section colors.
pub fn composite(alphas: &[f64], colors: &[[f64; 3]], t_mid: &[f64]) -> RenderOutput {
    assert_eq!(alphas.len(), colors.len(), "one color per section");
    assert_eq!(alphas.len(), t_mid.len(), "one midpoint per section");
    let mut transmittance = 1.0;
    let mut out = RenderOutput { color: [0.0; 3], depth: 0.0, opacity: 0.0, weights: Vec::with_capacity(alphas.len()) };
    for ((&a, c), &t) in alphas.iter().zip(colors).zip(t_mid) {
        let w = a * transmittance;
        for (o, ck) in out.color.iter_mut().zip(c) {
            *o += w * ck;
        }
        out.depth += w * t;
        out.opacity += w;
        out.weights.push(w);
        transmittance *= 1.0 - a;
    }
    out
}

/// Midpoints of consecutive sample depths.
pub fn midpoints(t: &[f64]) -> Vec<f64> {
    t.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Full render of one ray: `t` and `sdf` have one entry per sample, `colors`
/// one per section.
pub fn render(t: &[f64], sdf: &[f64], colors: &[[f64; 3]], density: &LogisticDensity) -> RenderOutput {
    assert_eq!(t.len(), sdf.len());
    if t.len() < 2 {
        return RenderOutput { color: [0.0; 3], depth: 0.0, opacity: 0.0, weights: Vec::new() };
    }
    let alphas = alphas_from_sdf(sdf, density.inv_std());
    composite(&alphas, colors, &midpoints(t))
}

/// Loss sensitivities with respect to a [`RenderOutput`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderCotangent {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub sdf: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub log_inv_std: f64,
}

/// Reverse pass of [`render`].
pub fn render_backward(
    t: &[f64],
    sdf: &[f64],
    colors: &[[f64; 3]],
    density: &LogisticDensity,
    cot: &RenderCotangent,
) -> RenderGrads {
    let n = sdf.len().saturating_sub(1);
    let mut grads = RenderGrads { sdf: vec![0.0; sdf.len()], colors: vec![[0.0; 3]; n], log_inv_std: 0.0 };
    if n == 0 {
        return grads;
    }
    let s = density.inv_std();
    let tm = midpoints(t);
    let sections: Vec<(f64, f64)> = sdf.windows(2).map(|w| section_alpha(w[0], w[1], s)).collect();

    // Per-section value g_k = <dL/dcolor, c_k> + dL/ddepth * t_k + dL/dopacity.
    let g: Vec<f64> = (0..n)
        .map(|k| (0..3).map(|c| cot.color[c] * colors[k][c]).sum::<f64>() + cot.depth * tm[k] + cot.opacity)
        .collect();
    let mut trans = Vec::with_capacity(n);
    let mut tr = 1.0;
    for &(a, _) in &sections {
        trans.push(tr);
        tr *= 1.0 - a;
    }
    // Suffix value r_k of everything behind section k, seen from just after it.
    let mut r = 0.0;
    for k in (0..n).rev() {
        let (a, ratio) = sections[k];
        let w = a * trans[k];
        for c in 0..3 {
            grads.colors[k][c] = w * cot.color[c];
        }
        let d_alpha = trans[k] * (g[k] - r);
        r = a * g[k] + (1.0 - a) * r;
        if !(ratio < 1.0) {
            // Clamped at zero opacity.
            continue;
        }
        let (d0, d1) = (sdf[k], sdf[k + 1]);
        // alpha = 1 - exp(ls(s*d1) - ls(s*d0)); ls'(z) = sigmoid(-z).
        let p0 = logistic_cdf(-d0, s);
        let p1 = logistic_cdf(-d1, s);
        grads.sdf[k] += d_alpha * ratio * s * p0;
        grads.sdf[k + 1] -= d_alpha * ratio * s * p1;
        grads.log_inv_std -= d_alpha * ratio * (p1 * d1 - p0 * d0) * s;
    }
    grads
}

/// Writes `ray,t,sdf,alpha,weight` rows for plotting weight profiles. The
/// last sample of each ray has no section, so its alpha and weight are empty.
pub fn write_weight_profile(
    w: &mut impl Write,
    ray: usize,
    t: &[f64],
    sdf: &[f64],
    density: &LogisticDensity,
    header: bool,
) -> std::io::Result<()> {
    let alphas = alphas_from_sdf(sdf, density.inv_std());
    let weights = composite(&alphas, &vec![[0.0; 3]; alphas.len()], &vec![0.0; alphas.len()]).weights;
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        wr.write_record(["ray", "t", "sdf", "alpha", "weight"])?;
    }
    for i in 0..t.len() {
        let (a, wt) = match (alphas.get(i), weights.get(i)) {
            (Some(a), Some(wt)) => (a.to_string(), wt.to_string()),
            _ => (String::new(), String::new()),
        };
        wr.write_record([ray.to_string(), t[i].to_string(), sdf[i].to_string(), a, wt])?;
    }
    wr.flush()
}
