//! Poincaré-ball geometry on the tape: Möbius addition, geodesic distance,
//! the exponential map at the origin, and the embedding layer that lifts
//! entity logits into the ball.
//!
//! Point batches are `[B x d]` matrices, one point per row.

use alloc::format;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Curvature and the numerical-safety radii derived from it.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BallConfig {
    pub curvature: f64,
    /// Largest admissible Euclidean norm, `(1 - 1e-5) / sqrt(c)`.
    pub max_norm: f64,
    /// Upper clamp for the `artanh` argument in distances.
    pub artanh_clamp: f64,
}

impl BallConfig {
    pub const RADIUS_MARGIN: f64 = 1e-5;
    pub const ARTANH_CLAMP: f64 = 1.0 - 1e-7;

    pub fn new(curvature: f64) -> Result<Self> {
        if !(curvature > 0.0) || !curvature.is_finite() {
            return Err(Error::Validation(format!(
                "curvature must be positive and finite, got {curvature}"
            )));
        }
        Ok(Self {
            curvature,
            max_norm: (1.0 - Self::RADIUS_MARGIN) / libm::sqrt(curvature),
            artanh_clamp: Self::ARTANH_CLAMP,
        })
    }

    pub fn sqrt_c(&self) -> f64 {
        libm::sqrt(self.curvature)
    }
}

/// Fails with a domain error naming the first row with `sqrt(c) * |x| >= 1`.
pub fn check_in_ball(points: &Tensor, curvature: f64) -> Result<()> {
    let sc = libm::sqrt(curvature);
    for i in 0..points.rows() {
        let n = norm(points.row(i)) * sc;
        if !(n < 1.0) {
            return Err(Error::Domain {
                op: "poincare ball",
                index: i,
                value: n,
            });
        }
    }
    Ok(())
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v * v;
    }
    libm::sqrt(s)
}

fn row_dot(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let p = g.mul(x, y)?;
    g.sum_axis(p, 1)
}

/// Multiplies each row of `x` by the matching entry of the `[B]` vector `s`.
pub(crate) fn scale_rows(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    let e = g.expand_cols(s, d)?;
    g.mul(x, e)
}

fn scale_rows_inv(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    let e = g.expand_cols(s, d)?;
    g.div(x, e)
}

/// Rescales rows whose norm reaches `max_norm` back onto that radius. Rows
/// strictly inside are returned bit-for-bit.
pub fn project_to_ball(g: &mut Graph, v: Var, config: &BallConfig) -> Result<Var> {
    let n = g.row_norms(v)?;
    // Any floor below max_norm works; this one keeps the ratio finite for
    // every curvature.
    let tiny = g.constant(Tensor::scalar(config.max_norm * f64::EPSILON))?;
    let safe = g.max(n, tiny)?;
    let radius = g.constant(Tensor::scalar(config.max_norm))?;
    let ratio = g.div(radius, safe)?;
    let one = g.constant(Tensor::scalar(1.0))?;
    let s = g.min(one, ratio)?;
    scale_rows(g, v, s)
}

/// Row-wise Möbius addition `x ⊕_c y`.
pub fn mobius_add(g: &mut Graph, x: Var, y: Var, config: &BallConfig) -> Result<Var> {
    if g.shape(x) != g.shape(y) || g.shape(x).len() != 2 {
        return Err(Error::dim("mobius_add", g.shape(x), g.shape(y)));
    }
    let c = config.curvature;
    check_in_ball(g.value(x), c)?;
    check_in_ball(g.value(y), c)?;

    let xy = row_dot(g, x, y)?;
    let x2 = row_dot(g, x, x)?;
    let y2 = row_dot(g, y, y)?;

    let two_cxy = g.scale(xy, 2.0 * c)?;
    let cy2 = g.scale(y2, c)?;
    let coef_x = g.add(two_cxy, cy2)?;
    let coef_x = g.offset(coef_x, 1.0)?;
    let coef_y = g.scale(x2, -c)?;
    let coef_y = g.offset(coef_y, 1.0)?;
    let x2y2 = g.mul(x2, y2)?;
    let c2x2y2 = g.scale(x2y2, c * c)?;
    let den = g.add(two_cxy, c2x2y2)?;
    let den = g.offset(den, 1.0)?;

    let tx = scale_rows(g, x, coef_x)?;
    let ty = scale_rows(g, y, coef_y)?;
    let num = g.add(tx, ty)?;
    let out = scale_rows_inv(g, num, den)?;
    project_to_ball(g, out, config)
}

/// Row-wise geodesic distance `(2/sqrt(c)) artanh(sqrt(c) |(-x) ⊕_c y|)`,
/// shape `[B]`.
pub fn geodesic_distance(g: &mut Graph, x: Var, y: Var, config: &BallConfig) -> Result<Var> {
    let sc = config.sqrt_c();
    let neg_x = g.neg(x)?;
    let diff = mobius_add(g, neg_x, y, config)?;
    let n = g.row_norms(diff)?;
    let arg = g.scale(n, sc)?;
    let clamp = g.constant(Tensor::scalar(config.artanh_clamp))?;
    let arg = g.min(arg, clamp)?;
    let at = g.artanh(arg)?;
    g.scale(at, 2.0 / sc)
}

/// `exp_0(v) = tanh(sqrt(c)|v|) v / (sqrt(c)|v|)`, with the origin fixed and
/// the `tanh` factor capped so the image stays at most `max_norm` from 0.
pub fn expmap_origin(g: &mut Graph, v: Var, config: &BallConfig) -> Result<Var> {
    let sc = config.sqrt_c();
    let n = g.row_norms(v)?;
    let floor = g.constant(Tensor::scalar(1e-15))?;
    let n = g.max(n, floor)?;
    let sn = g.scale(n, sc)?;
    let t = g.tanh(sn)?;
    let cap = g.constant(Tensor::scalar(config.max_norm * sc))?;
    let t = g.min(t, cap)?;
    let factor = g.div(t, sn)?;
    scale_rows(g, v, factor)
}

/// Single-layer embedding: Euclidean affine map, exponential map at the
/// origin, then the safety projection.
#[derive(Clone, Debug, PartialEq)]
pub struct HnnParams {
    /// `[d_in x d_h]`
    pub weight: Tensor,
    /// `[d_h]`
    pub bias: Tensor,
    pub config: BallConfig,
}

#[derive(Clone, Copy, Debug)]
pub struct HnnVars {
    pub weight: Var,
    pub bias: Var,
}

impl HnnParams {
    /// Fan-in uniform weights, zero bias.
    pub fn init(d_in: usize, d_h: usize, config: BallConfig, rng: &mut Rng) -> Self {
        Self {
            weight: rng.fan_in(d_in, d_h),
            bias: Tensor::zeros(&[d_h]),
            config,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_h(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> Result<HnnVars> {
        Ok(HnnVars {
            weight: g.param(self.weight.clone())?,
            bias: g.param(self.bias.clone())?,
        })
    }

    pub fn bind_constant(&self, g: &mut Graph) -> Result<HnnVars> {
        Ok(HnnVars {
            weight: g.constant(self.weight.clone())?,
            bias: g.constant(self.bias.clone())?,
        })
    }
}

/// `logits · W + b` for a `[B x d_in]` batch.
pub fn hnn_affine(g: &mut Graph, logits: Var, vars: &HnnVars) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let w = g.shape(vars.weight).to_vec();
    if s.len() != 2 || s[1] != w[0] {
        return Err(Error::dim("hnn_embed", &s, &w));
    }
    let z = g.matmul(logits, vars.weight)?;
    let b = g.expand_rows(vars.bias, s[0])?;
    g.add(z, b)
}

/// `project_to_ball(expmap_origin(logits · W + b))`, shape `[B x d_h]`.
pub fn hnn_embed(g: &mut Graph, logits: Var, vars: &HnnVars, config: &BallConfig) -> Result<Var> {
    let z = hnn_affine(g, logits, vars)?;
    let e = expmap_origin(g, z, config)?;
    project_to_ball(g, e, config)
}

/// Untracked Poincaré distance between two points, used by retrieval scans.
pub fn poincare_distance(x: &[f64], y: &[f64], config: &BallConfig) -> f64 {
    let c = config.curvature;
    let (mut xy, mut x2, mut y2) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        xy -= a * b;
        x2 += a * a;
        y2 += b * b;
    }
    // (-x) ⊕ y
    let coef_x = 1.0 + 2.0 * c * xy + c * y2;
    let coef_y = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        let v = (coef_x * -a + coef_y * b) / den;
        s += v * v;
    }
    let n = f64::min(libm::sqrt(s), config.max_norm);
    let arg = f64::min(config.sqrt_c() * n, config.artanh_clamp);
    2.0 / config.sqrt_c() * libm::atanh(arg)
}
