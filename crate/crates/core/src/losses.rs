//! Cross-modal consistency between prompt similarity and attention overlap,
//! the token-level task loss, and the weighted training objective.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub const COSINE_EPS: f64 = 1e-12;
pub const IOU_EPS: f64 = 1e-8;

/// Balancing coefficients of the rank and consistency terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { alpha, beta })
    }
}

/// `S_nm = <g_n, l_m> / (|g_n| |l_m| + eps)`, shape `[N x P]`.
pub fn cosine_similarity_matrix(g: &mut Graph, global: Var, local: Var) -> Result<Var> {
    let (sg, sl) = (g.shape(global).to_vec(), g.shape(local).to_vec());
    if sg.len() != 2 || sl.len() != 2 || sg[1] != sl[1] {
        return Err(Error::dim("cosine_similarity_matrix", &sg, &sl));
    }
    let lt = g.transpose(local)?;
    let dots = g.matmul(global, lt)?;
    let ng = g.row_norms(global)?;
    let ng = g.reshape(ng, &[sg[0], 1])?;
    let nl = g.row_norms(local)?;
    let nl = g.reshape(nl, &[1, sl[0]])?;
    let den = g.matmul(ng, nl)?;
    let den = g.offset(den, COSINE_EPS)?;
    g.div(dots, den)
}

/// Entrywise logistic. On cosine inputs the range is `(σ(-1), σ(1))`.
pub fn sigmoid_normalize(g: &mut Graph, s: Var) -> Result<Var> {
    g.sigmoid(s)
}

/// Soft IoU between every row of `m_g` `[N x L]` and every row of `m_l`
/// `[P x L]`: elementwise min summed over elementwise max.
pub fn iou_matrix(g: &mut Graph, m_g: Var, m_l: Var) -> Result<Var> {
    let (sg, sl) = (g.shape(m_g).to_vec(), g.shape(m_l).to_vec());
    if sg.len() != 2 || sl.len() != 2 || sg[1] != sl[1] {
        return Err(Error::dim("iou_matrix", &sg, &sl));
    }
    for v in [m_g, m_l] {
        if let Some((index, &value)) = g.value(v).data().iter().enumerate().find(|(_, x)| **x < 0.0) {
            return Err(Error::Domain {
                op: "iou_matrix",
                index,
                value,
            });
        }
    }
    let (n, p) = (sg[0], sl[0]);
    let left: Vec<usize> = (0..n * p).map(|k| k / p).collect();
    let right: Vec<usize> = (0..n * p).map(|k| k % p).collect();
    let a = g.select_rows(m_g, &left)?;
    let b = g.select_rows(m_l, &right)?;
    let lo = g.min(a, b)?;
    let hi = g.max(a, b)?;
    let inter = g.sum_axis(lo, 1)?;
    let union = g.sum_axis(hi, 1)?;
    let union = g.offset(union, IOU_EPS)?;
    let o = g.div(inter, union)?;
    g.reshape(o, &[n, p])
}

/// `mean(1 - S ⊙ O)`.
pub fn fcc_loss(g: &mut Graph, s: Var, o: Var) -> Result<Var> {
    if g.shape(s) != g.shape(o) {
        return Err(Error::dim("fcc_loss", g.shape(s), g.shape(o)));
    }
    let so = g.mul(s, o)?;
    let m = g.mean(so)?;
    let neg = g.neg(m)?;
    g.offset(neg, 1.0)
}

/// Mean token cross-entropy over `[T x V]` logits.
pub fn task_loss_tokens(g: &mut Graph, logits: Var, tokens: &[usize]) -> Result<Var> {
    g.cross_entropy_rows(logits, tokens, None)
}

/// `task + alpha * rank + beta * fcc`.
pub fn total_loss(g: &mut Graph, task: Var, rank: Var, fcc: Var, w: LossWeights) -> Result<Var> {
    for v in [task, rank, fcc] {
        if g.value(v).len() != 1 {
            return Err(Error::dim("total_loss", g.shape(v), &[]));
        }
    }
    let r = g.scale(rank, w.alpha)?;
    let f = g.scale(fcc, w.beta)?;
    let t = g.add(task, r)?;
    g.add(t, f)
}

/// Untracked convenience for scalar inputs.
pub fn total_loss_value(task: f64, rank: f64, fcc: f64, w: LossWeights) -> f64 {
    task + w.alpha * rank + w.beta * fcc
}

/// Consistency loss from prompt features and the two branches' maps. Maps are
/// `[L x N]` and `[L x P]` (rows are spatial positions), so each prompt's
/// spatial map is a column.
pub fn fcc_from_branches(
    g: &mut Graph,
    global_prompts: Var,
    local_prompts: Var,
    map_global: Var,
    map_local: Var,
) -> Result<Var> {
    let cos = cosine_similarity_matrix(g, global_prompts, local_prompts)?;
    let s = sigmoid_normalize(g, cos)?;
    let mg = g.transpose(map_global)?;
    let ml = g.transpose(map_local)?;
    let o = iou_matrix(g, mg, ml)?;
    fcc_loss(g, s, o)
}

/// Untracked IoU of two nonnegative maps.
pub fn soft_iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut lo, mut hi) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        lo += f64::min(*x, *y);
        hi += f64::max(*x, *y);
    }
    lo / (hi + IOU_EPS)
}
