//! Multi-prompt Sinkhorn attention.
//!
//! Query-key scores between `L` spatial positions and `P` prompts are turned
//! into an entropic transport plan by log-domain Sinkhorn iterations, unrolled
//! on the tape. The attention map is the plan scaled by `L`, so under uniform
//! marginals each spatial row sums to one. A row-softmax variant is kept as
//! the plain cross-attention baseline.
//!
//! Each iteration rescales columns first and rows second, which leaves the row
//! marginal exact after the final step; the column marginal carries the
//! remaining residual.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Which normalization turns scores into an attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttentionKind {
    #[default]
    Mpsa,
    Softmax,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Mpsa => "mpsa",
            AttentionKind::Softmax => "softmax",
        }
    }
}

impl core::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpsa" => Ok(AttentionKind::Mpsa),
            "softmax" => Ok(AttentionKind::Softmax),
            _ => Err(Error::Validation(format!("unknown attention {s:?}"))),
        }
    }
}

/// Sinkhorn settings. Marginals default to uniform when unset.
#[derive(Clone, Debug, PartialEq)]
pub struct OtConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub row_marginal: Option<Vec<f64>>,
    pub col_marginal: Option<Vec<f64>>,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            iterations: 10,
            row_marginal: None,
            col_marginal: None,
        }
    }
}

impl OtConfig {
    pub fn new(epsilon: f64, iterations: usize) -> Self {
        Self {
            epsilon,
            iterations,
            ..Self::default()
        }
    }

    fn marginals(&self, l: usize, p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = resolve_marginal(self.row_marginal.as_deref(), l, "row")?;
        let b = resolve_marginal(self.col_marginal.as_deref(), p, "column")?;
        Ok((a, b))
    }
}

fn resolve_marginal(m: Option<&[f64]>, n: usize, which: &str) -> Result<Vec<f64>> {
    match m {
        None => Ok(alloc::vec![1.0 / n as f64; n]),
        Some(m) => {
            if m.len() != n {
                return Err(Error::dim("sinkhorn marginal", &[m.len()], &[n]));
            }
            let total: f64 = m.iter().sum();
            if m.iter().any(|&v| !(v > 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "{which} marginal must be positive and sum to 1 (sum = {total})"
                )));
            }
            Ok(m.to_vec())
        }
    }
}

/// Transport plan with the marginal residuals it achieved.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `[L x P]`
    pub plan: Tensor,
    pub epsilon: f64,
    pub iterations: usize,
    /// Max-abs deviation of row sums from the row marginal.
    pub row_residual: f64,
    /// Max-abs deviation of column sums from the column marginal.
    pub col_residual: f64,
}

fn validate_ot(epsilon: f64, iterations: usize) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Validation(format!("epsilon must be positive, got {epsilon}")));
    }
    if iterations == 0 {
        return Err(Error::Validation("Sinkhorn needs at least one iteration".into()));
    }
    Ok(())
}

/// Log-domain Sinkhorn on the kernel `exp(scores / epsilon)`, recorded on the
/// tape. Returns the `[L x P]` plan.
pub fn sinkhorn_plan(
    g: &mut Graph,
    scores: Var,
    epsilon: f64,
    iterations: usize,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> Result<Var> {
    validate_ot(epsilon, iterations)?;
    let s = g.shape(scores).to_vec();
    if s.len() != 2 || s[0] != row_marginal.len() || s[1] != col_marginal.len() {
        return Err(Error::dim("sinkhorn", &s, &[row_marginal.len(), col_marginal.len()]));
    }
    let (l, p) = (s[0], s[1]);
    let log_a = g.constant(Tensor::vector(row_marginal.iter().map(|v| libm::log(*v)).collect()))?;
    let log_b = g.constant(Tensor::vector(col_marginal.iter().map(|v| libm::log(*v)).collect()))?;
    let kernel = g.scale(scores, 1.0 / epsilon)?;

    let mut f: Option<Var> = None;
    let mut h = None;
    for _ in 0..iterations {
        let shifted = match f {
            Some(f) => {
                let fe = g.expand_cols(f, p)?;
                g.add(kernel, fe)?
            }
            None => kernel,
        };
        let col_lse = g.logsumexp(shifted, 0)?;
        let hv = g.sub(log_b, col_lse)?;
        let he = g.expand_rows(hv, l)?;
        let shifted = g.add(kernel, he)?;
        let row_lse = g.logsumexp(shifted, 1)?;
        f = Some(g.sub(log_a, row_lse)?);
        h = Some(he);
    }
    let (f, he) = (f.expect("iterations >= 1"), h.expect("iterations >= 1"));
    let fe = g.expand_cols(f, p)?;
    let logp = g.add(kernel, fe)?;
    let logp = g.add(logp, he)?;
    g.exp(logp)
}

fn marginal_residuals(plan: &Tensor, a: &[f64], b: &[f64]) -> (f64, f64) {
    let (l, p) = (plan.rows(), plan.cols());
    let mut row_res: f64 = 0.0;
    for i in 0..l {
        let s: f64 = plan.row(i).iter().sum();
        row_res = row_res.max((s - a[i]).abs());
    }
    let mut col_res: f64 = 0.0;
    for j in 0..p {
        let mut s = 0.0;
        for i in 0..l {
            s += plan.at(i, j);
        }
        col_res = col_res.max((s - b[j]).abs());
    }
    (row_res, col_res)
}

/// Untracked Sinkhorn normalization of a score matrix.
pub fn sinkhorn_normalize(
    scores: &Tensor,
    epsilon: f64,
    iterations: usize,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> Result<TransportPlan> {
    if !scores.is_finite() {
        return Err(Error::Numeric("sinkhorn scores must be finite".into()));
    }
    resolve_marginal(Some(row_marginal), scores.rows(), "row")?;
    resolve_marginal(Some(col_marginal), scores.cols(), "column")?;
    let mut g = Graph::new();
    let s = g.constant(scores.clone())?;
    let plan = sinkhorn_plan(&mut g, s, epsilon, iterations, row_marginal, col_marginal)?;
    let plan = g.value(plan).clone();
    let (row_residual, col_residual) = marginal_residuals(&plan, row_marginal, col_marginal);
    Ok(TransportPlan {
        plan,
        epsilon,
        iterations,
        row_residual,
        col_residual,
    })
}

/// Query/key/value projections and the residual fusion weights of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `[d_v x d_a]`
    pub w_q: Tensor,
    /// `[d_t x d_a]`
    pub w_k: Tensor,
    /// `[d_t x d_a]`
    pub w_v: Tensor,
    /// `[d_a x d_v]`, maps attended features back to the visual width.
    pub w_proj: Tensor,
    /// `[d_v x d_v]`, the output projection applied after layer norm.
    pub w_out: Tensor,
    /// `[d_v]`
    pub b_out: Tensor,
    /// `[d_v]`
    pub ln_gain: Tensor,
    /// `[d_v]`
    pub ln_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_proj: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl AttentionParams {
    pub fn init(d_v: usize, d_t: usize, d_a: usize, rng: &mut Rng) -> Self {
        Self {
            w_q: rng.fan_in(d_v, d_a),
            w_k: rng.fan_in(d_t, d_a),
            w_v: rng.fan_in(d_t, d_a),
            w_proj: rng.fan_in(d_a, d_v),
            w_out: rng.fan_in(d_v, d_v),
            b_out: Tensor::zeros(&[d_v]),
            ln_gain: Tensor::ones(&[d_v]),
            ln_bias: Tensor::zeros(&[d_v]),
        }
    }

    pub fn d_a(&self) -> usize {
        self.w_q.shape()[1]
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_proj", &self.w_proj),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_proj", &mut self.w_proj),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
            ("ln_gain", &mut self.ln_gain),
            ("ln_bias", &mut self.ln_bias),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> Result<AttentionVars> {
        Ok(AttentionVars {
            w_q: g.param(self.w_q.clone())?,
            w_k: g.param(self.w_k.clone())?,
            w_v: g.param(self.w_v.clone())?,
            w_proj: g.param(self.w_proj.clone())?,
            w_out: g.param(self.w_out.clone())?,
            b_out: g.param(self.b_out.clone())?,
            ln_gain: g.param(self.ln_gain.clone())?,
            ln_bias: g.param(self.ln_bias.clone())?,
        })
    }
}

impl AttentionVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_proj,
            self.w_out,
            self.b_out,
            self.ln_gain,
            self.ln_bias,
        ]
    }
}

/// Scaled query-key scores `Q K^T / sqrt(d_a)` and the values `V`.
fn scores_and_values(g: &mut Graph, f_v: Var, f_t: Var, vars: &AttentionVars) -> Result<(Var, Var)> {
    let (sv, st) = (g.shape(f_v).to_vec(), g.shape(f_t).to_vec());
    let (wq, wk) = (g.shape(vars.w_q).to_vec(), g.shape(vars.w_k).to_vec());
    if sv.len() != 2 || st.len() != 2 || sv[1] != wq[0] || st[1] != wk[0] {
        return Err(Error::dim("attention", &sv, &st));
    }
    let d_a = wq[1];
    let q = g.matmul(f_v, vars.w_q)?;
    let k = g.matmul(f_t, vars.w_k)?;
    let v = g.matmul(f_t, vars.w_v)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / libm::sqrt(d_a as f64))?;
    Ok((s, v))
}

/// Attention map `[L x P]` from raw scores.
pub fn attention_map(g: &mut Graph, scores: Var, kind: AttentionKind, ot: &OtConfig) -> Result<Var> {
    match kind {
        AttentionKind::Softmax => g.softmax_rows(scores),
        AttentionKind::Mpsa => {
            let s = g.shape(scores).to_vec();
            if s.len() != 2 {
                return Err(Error::dim("attention_map", &s, &[0, 0]));
            }
            let (a, b) = ot.marginals(s[0], s[1])?;
            let plan = sinkhorn_plan(g, scores, ot.epsilon, ot.iterations, &a, &b)?;
            g.scale(plan, s[0] as f64)
        }
    }
}

/// Sinkhorn cross-attention of visual features `[L x d_v]` over prompts
/// `[P x d_t]`. Returns the fused features `[L x d_a]` and the map `[L x P]`.
pub fn mpsa_attention(
    g: &mut Graph,
    f_v: Var,
    f_t: Var,
    vars: &AttentionVars,
    ot: &OtConfig,
) -> Result<(Var, Var)> {
    cross_attention(g, f_v, f_t, vars, AttentionKind::Mpsa, ot)
}

/// The row-softmax baseline with the same projections.
pub fn softmax_cross_attention(g: &mut Graph, f_v: Var, f_t: Var, vars: &AttentionVars) -> Result<(Var, Var)> {
    cross_attention(g, f_v, f_t, vars, AttentionKind::Softmax, &OtConfig::default())
}

pub fn cross_attention(
    g: &mut Graph,
    f_v: Var,
    f_t: Var,
    vars: &AttentionVars,
    kind: AttentionKind,
    ot: &OtConfig,
) -> Result<(Var, Var)> {
    let (scores, v) = scores_and_values(g, f_v, f_t, vars)?;
    let map = attention_map(g, scores, kind, ot)?;
    let fused = g.matmul(map, v)?;
    Ok((fused, map))
}

/// `f_out(LayerNorm(attended · W_proj + F_v))`, width `d_v`.
pub fn fuse_residual(g: &mut Graph, attended: Var, f_v: Var, vars: &AttentionVars) -> Result<Var> {
    let sa = g.shape(attended).to_vec();
    let sv = g.shape(f_v).to_vec();
    if sa.len() != 2 || sv.len() != 2 || sa[0] != sv[0] || sa[1] != g.shape(vars.w_proj)[0] {
        return Err(Error::dim("fuse_residual", &sa, &sv));
    }
    let proj = g.matmul(attended, vars.w_proj)?;
    let res = g.add(proj, f_v)?;
    let ln = g.layer_norm(res, vars.ln_gain, vars.ln_bias, LAYER_NORM_EPS)?;
    let out = g.matmul(ln, vars.w_out)?;
    let b = g.expand_rows(vars.b_out, sv[0])?;
    g.add(out, b)
}

/// Feature-axis concatenation, global block first.
pub fn fuse_concat(g: &mut Graph, global: Var, local: Var) -> Result<Var> {
    g.concat_cols(global, local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_scores_give_uniform_plan() {
        let s = Tensor::zeros(&[4, 4]);
        let u = vec![0.25; 4];
        let tp = sinkhorn_normalize(&s, 0.05, 10, &u, &u).unwrap();
        for &v in tp.plan.data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_settings() {
        let s = Tensor::zeros(&[2, 2]);
        let u = vec![0.5; 2];
        assert!(sinkhorn_normalize(&s, 0.0, 10, &u, &u).is_err());
        assert!(sinkhorn_normalize(&s, 0.1, 0, &u, &u).is_err());
        assert!(sinkhorn_normalize(&s, 0.1, 5, &[0.7, 0.7], &u).is_err());
        let mut bad = s.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(matches!(
            sinkhorn_normalize(&bad, 0.1, 5, &u, &u),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn softmax_and_sinkhorn_diverge_on_dominant_column() {
        let mut g = Graph::new();
        let s = g
            .constant(Tensor::from_rows(&[[3.0, 0.0], [3.0, 0.0], [2.5, 0.0], [3.0, 0.5]]).unwrap())
            .unwrap();
        let soft = attention_map(&mut g, s, AttentionKind::Softmax, &OtConfig::default()).unwrap();
        let ot = attention_map(&mut g, s, AttentionKind::Mpsa, &OtConfig::new(0.05, 10)).unwrap();
        let gap = g.value(soft).max_abs_diff(g.value(ot)).unwrap();
        assert!(gap > 0.01, "gap {gap}");
        // every softmax row picks column 0
        for i in 0..4 {
            assert!(g.value(soft).at(i, 0) > 0.5);
        }
    }
}
