//! Finite-difference checks of the three differentiable loss paths at random
//! smooth points: ranking (HNN, pairwise distance, cross-entropy),
//! consistency (cosine, sigmoid, IoU, loss) and the Sinkhorn attention block
//! followed by the residual fusion.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::attention::{cross_attention, fuse_residual, AttentionKind, AttentionParams, AttentionVars, OtConfig};
use crate::error::{Error, Result};
use crate::hyperbolic::{BallConfig, HnnVars};
use crate::losses::fcc_from_branches;
use crate::retrieval::{pairwise_distances, rank_loss, rank_targets, Backend};
use crate::rng::Rng;
use crate::supervision::{encode_status_vector, hamming_matrix, NUM_CATEGORIES};
use crate::tensor::{grad_check, GradCheck, Graph, Tensor, Var};

/// Step used by every check in the suite.
pub const STEP: f64 = 1e-6;
/// Pass bound on the worst relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Entropic regularization for the attention path (the training default).
pub const EPSILON: f64 = 0.05;
/// Visual feature scale for the attention path; keeps the map unsaturated.
const FEATURE_STD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradTarget {
    Rank,
    Fcc,
    Mpsa,
}

impl GradTarget {
    pub const ALL: [GradTarget; 3] = [GradTarget::Rank, GradTarget::Fcc, GradTarget::Mpsa];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Rank => "rank",
            GradTarget::Fcc => "fcc",
            GradTarget::Mpsa => "mpsa",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(GradTarget::Rank),
            "fcc" => Ok(GradTarget::Fcc),
            "mpsa" => Ok(GradTarget::Mpsa),
            _ => Err(Error::Validation(format!("unknown gradient target {s:?}"))),
        }
    }
}

/// Worst error of one path over all sampled points.
#[derive(Clone, Debug, PartialEq)]
pub struct PathReport {
    pub target: GradTarget,
    pub points: usize,
    pub worst: GradCheck,
    /// Which input the worst coordinate belonged to.
    pub worst_input: String,
    /// Draws discarded for having an unresolvably small gradient component.
    pub rejected: usize,
}

impl PathReport {
    pub fn passed(&self) -> bool {
        self.worst.max_rel_err < TOLERANCE
    }
}

/// Smallest analytic gradient magnitude, per unit of `max(1, |f|)`, that a
/// sampled point may have. Forward rounding leaves a few ulp of `|f|` in every
/// evaluation, which a `2 * STEP` difference turns into roughly `1e-9 |f|` of
/// noise; a smaller component cannot be resolved to `TOLERANCE`.
pub const RESOLUTION_FLOOR: f64 = 1e-4;
/// Resampling budget per point.
const MAX_TRIES: usize = 1000;

/// Runs [`grad_check`], or returns `None` when some component of the analytic
/// gradient is below the resolution floor (the point is not checkable).
pub fn check_resolvable<F>(f: F, point: &Tensor) -> Result<Option<GradCheck>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = g.param(point.clone())?;
    let out = f(&mut g, p)?;
    let floor = RESOLUTION_FLOOR * f64::max(1.0, g.item(out)?.abs());
    let grad = g.backward(out)?.wrt(p);
    if grad.data().iter().any(|x| x.abs() < floor) {
        return Ok(None);
    }
    grad_check(f, point, STEP).map(Some)
}

type Checks = Option<Vec<(&'static str, GradCheck)>>;

/// Checks `target` at `points` random points drawn from `seed`.
pub fn check_path(target: GradTarget, seed: u64, points: usize) -> Result<PathReport> {
    let mut rng = Rng::new(seed ^ (target as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut report = PathReport {
        target,
        points,
        worst: GradCheck {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        },
        worst_input: String::new(),
        rejected: 0,
    };
    for _ in 0..points {
        let mut tries = 0;
        let checks = loop {
            let sampled = match target {
                GradTarget::Rank => rank_point(&mut rng)?,
                GradTarget::Fcc => fcc_point(&mut rng)?,
                GradTarget::Mpsa => mpsa_point(&mut rng)?,
            };
            match sampled {
                Some(c) => break c,
                None if tries < MAX_TRIES => {
                    tries += 1;
                    report.rejected += 1;
                }
                None => {
                    return Err(Error::Numeric(format!(
                        "{target}: no resolvable point after {MAX_TRIES} draws"
                    )))
                }
            }
        };
        for (input, c) in checks {
            if c.max_rel_err >= report.worst.max_rel_err {
                report.worst = c;
                report.worst_input = input.into();
            }
        }
    }
    Ok(report)
}

fn rank_point(rng: &mut Rng) -> Result<Checks> {
    const B: usize = 5;
    const M: usize = 6;
    const D: usize = 3;
    let logits = rng.normal_tensor(&[B, M], 1.0);
    let bias = rng.normal_tensor(&[D], 0.1);
    // Points well inside the ball: near the boundary artanh amplifies forward
    // rounding past what a 1e-6 step can resolve.
    let weight = rng.normal_tensor(&[M, D], 0.12);
    let codes = (0..B)
        .map(|_| {
            let s: Vec<u8> = (0..NUM_CATEGORIES).map(|_| rng.below(4) as u8).collect();
            encode_status_vector(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = rank_targets(&hamming_matrix(&codes)?)?;
    let ball = BallConfig::new(rng.uniform_range(0.5, 1.5))?;
    let tau = rng.uniform_range(0.5, 2.0);

    let check = check_resolvable(
        |g, w| {
            let x = g.constant(logits.clone())?;
            let vars = HnnVars {
                weight: w,
                bias: g.constant(bias.clone())?,
            };
            let points = crate::retrieval::embed(g, x, &vars, Backend::Hyperbolic, &ball)?;
            let d = pairwise_distances(g, points, Backend::Hyperbolic, &ball)?;
            rank_loss(g, &d, &targets, tau)
        },
        &weight,
    )?;
    Ok(check.map(|c| alloc::vec![("hnn.weight", c)]))
}

fn fcc_point(rng: &mut Rng) -> Result<Checks> {
    const N: usize = 2;
    const P: usize = 3;
    const D: usize = 4;
    const L: usize = 4;
    let gp = rng.normal_tensor(&[N, D], 1.0);
    let lp = rng.normal_tensor(&[P, D], 1.0);
    let mg = rng.uniform_tensor(&[L, N], 0.05, 1.0);
    let ml = rng.uniform_tensor(&[L, P], 0.05, 1.0);

    let wrt_prompts = check_resolvable(
        |g, p| {
            let l = g.constant(lp.clone())?;
            let a = g.constant(mg.clone())?;
            let b = g.constant(ml.clone())?;
            fcc_from_branches(g, p, l, a, b)
        },
        &gp,
    )?;
    let wrt_local = check_resolvable(
        |g, p| {
            let gv = g.constant(gp.clone())?;
            let a = g.constant(mg.clone())?;
            let b = g.constant(ml.clone())?;
            fcc_from_branches(g, gv, p, a, b)
        },
        &lp,
    )?;
    let wrt_map_g = check_resolvable(
        |g, p| {
            let gv = g.constant(gp.clone())?;
            let l = g.constant(lp.clone())?;
            let b = g.constant(ml.clone())?;
            fcc_from_branches(g, gv, l, p, b)
        },
        &mg,
    )?;
    let wrt_map_l = check_resolvable(
        |g, p| {
            let gv = g.constant(gp.clone())?;
            let l = g.constant(lp.clone())?;
            let a = g.constant(mg.clone())?;
            fcc_from_branches(g, gv, l, a, p)
        },
        &ml,
    )?;
    Ok((|| {
        Some(alloc::vec![
            ("global prompts", wrt_prompts?),
            ("local prompts", wrt_local?),
            ("global map", wrt_map_g?),
            ("local map", wrt_map_l?),
        ])
    })())
}

/// Which input of the attention block is the checked parameter.
#[derive(Clone, Copy)]
enum MpsaInput {
    Query,
    Visual,
    Prompts,
}

fn mpsa_point(rng: &mut Rng) -> Result<Checks> {
    const L: usize = 5;
    const P: usize = 4;
    const D_V: usize = 6;
    const D_T: usize = 5;
    const D_A: usize = 4;
    let mut params = AttentionParams::init(D_V, D_T, D_A, rng);
    params.ln_gain = rng.uniform_tensor(&[D_V], 0.5, 1.5);
    params.ln_bias = rng.normal_tensor(&[D_V], 0.1);
    params.b_out = rng.normal_tensor(&[D_V], 0.1);
    let f_v = rng.normal_tensor(&[L, D_V], FEATURE_STD);
    let f_t = rng.normal_tensor(&[P, D_T], 1.0);
    let readout = rng.normal_tensor(&[L, D_V], 1.0);
    let ot = OtConfig::new(EPSILON, 10);

    let run = |input: MpsaInput, g: &mut Graph, p: Var| -> Result<Var> {
        let bind = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
        let vars = AttentionVars {
            w_q: match input {
                MpsaInput::Query => p,
                _ => bind(g, &params.w_q)?,
            },
            w_k: bind(g, &params.w_k)?,
            w_v: bind(g, &params.w_v)?,
            w_proj: bind(g, &params.w_proj)?,
            w_out: bind(g, &params.w_out)?,
            b_out: bind(g, &params.b_out)?,
            ln_gain: bind(g, &params.ln_gain)?,
            ln_bias: bind(g, &params.ln_bias)?,
        };
        let v = match input {
            MpsaInput::Visual => p,
            _ => bind(g, &f_v)?,
        };
        let t = match input {
            MpsaInput::Prompts => p,
            _ => bind(g, &f_t)?,
        };
        let (attended, _) = cross_attention(g, v, t, &vars, AttentionKind::Mpsa, &ot)?;
        let fused = fuse_residual(g, attended, v, &vars)?;
        let r = g.constant(readout.clone())?;
        let weighted = g.mul(fused, r)?;
        g.sum(weighted)
    };

    let q = check_resolvable(|g, p| run(MpsaInput::Query, g, p), &params.w_q)?;
    let v = check_resolvable(|g, p| run(MpsaInput::Visual, g, p), &f_v)?;
    let t = check_resolvable(|g, p| run(MpsaInput::Prompts, g, p), &f_t)?;
    Ok((|| Some(alloc::vec![("w_q", q?), ("visual features", v?), ("prompts", t?)]))())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_path_passes_on_a_few_points() {
        for target in GradTarget::ALL {
            let r = check_path(target, 3, 3).unwrap();
            assert!(r.passed(), "{target}: {:?} at {}", r.worst, r.worst_input);
            assert_eq!(r.points, 3);
        }
    }

    #[test]
    fn target_names_round_trip() {
        for t in GradTarget::ALL {
            assert_eq!(t.name().parse::<GradTarget>().unwrap(), t);
        }
        assert!("all".parse::<GradTarget>().is_err());
    }
}
