use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Frequency encoding `[p; sin(2^k pi p); cos(2^k pi p)]`, `k = 0..frequencies`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub frequencies: usize,
    pub include_identity: bool,
}

impl EncodingConfig {
    pub const fn new(frequencies: usize, include_identity: bool) -> Self {
        EncodingConfig { frequencies, include_identity }
    }

    pub fn dim(&self) -> usize {
        6 * self.frequencies + if self.include_identity { 3 } else { 0 }
    }

    /// Writes the encoding into `out` (length `dim()`).
    pub fn encode_into(&self, p: &Vec3, out: &mut [f64]) {
        let mut o = 0;
        if self.include_identity {
            out[..3].copy_from_slice(p.as_slice());
            o = 3;
        }
        let mut freq = PI;
        for _ in 0..self.frequencies {
            for a in 0..3 {
                out[o + a] = (freq * p[a]).sin();
                out[o + 3 + a] = (freq * p[a]).cos();
            }
            o += 6;
            freq *= 2.0;
        }
    }

    /// Encoding plus its Jacobian; `jac[c * dim + i]` is the derivative of
    /// output `i` with respect to coordinate `c`.
    pub fn encode_with_jacobian(&self, p: &Vec3, out: &mut [f64], jac: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(jac.len(), 3 * n);
        jac.fill(0.0);
        let mut o = 0;
        if self.include_identity {
            out[..3].copy_from_slice(p.as_slice());
            for a in 0..3 {
                jac[a * n + a] = 1.0;
            }
            o = 3;
        }
        let mut freq = PI;
        for _ in 0..self.frequencies {
            for a in 0..3 {
                let (s, c) = (freq * p[a]).sin_cos();
                out[o + a] = s;
                out[o + 3 + a] = c;
                jac[a * n + o + a] = freq * c;
                jac[a * n + o + 3 + a] = -freq * s;
            }
            o += 6;
            freq *= 2.0;
        }
    }
}

pub fn encode(p: &Vec3, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.dim()];
    cfg.encode_into(p, &mut out);
    out
}
