//! Learnable retrieval: batch pairwise distances, the ranking loss against
//! Hamming nearest neighbours, training-time reference selection, and an
//! exact linear-scan index for inference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::hyperbolic::{self, hnn_affine, hnn_embed, BallConfig, HnnParams, HnnVars};
use crate::supervision::HammingMatrix;
use crate::synth::CorpusRecord;
use crate::tensor::{Graph, Tensor, Var};

/// Distance used both for training the ranking loss and for index scans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Backend {
    #[default]
    Hyperbolic,
    Euclidean,
    Cosine,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Hyperbolic, Backend::Euclidean, Backend::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Hyperbolic => "hyperbolic",
            Backend::Euclidean => "euclidean",
            Backend::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperbolic" => Ok(Backend::Hyperbolic),
            "euclidean" => Ok(Backend::Euclidean),
            "cosine" => Ok(Backend::Cosine),
            _ => Err(Error::Validation(format!("unknown backend {s:?}"))),
        }
    }
}

const COSINE_EPS: f64 = 1e-12;

/// `B x B` predicted distances on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DistanceMatrix {
    pub values: Var,
    pub backend: Backend,
    pub diagonal_masked: bool,
}

/// All pairwise distances between the rows of `points`. The diagonal is
/// exactly zero.
pub fn pairwise_distances(
    g: &mut Graph,
    points: Var,
    backend: Backend,
    config: &BallConfig,
) -> Result<DistanceMatrix> {
    let s = g.shape(points).to_vec();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Validation(format!(
            "pairwise_distances needs a [B x d] batch with B >= 2, got {s:?}"
        )));
    }
    let b = s[0];
    if backend == Backend::Hyperbolic {
        hyperbolic::check_in_ball(g.value(points), config.curvature)?;
    }
    let left: Vec<usize> = (0..b * b).map(|p| p / b).collect();
    let right: Vec<usize> = (0..b * b).map(|p| p % b).collect();
    let x = g.select_rows(points, &left)?;
    let y = g.select_rows(points, &right)?;
    let flat = match backend {
        Backend::Hyperbolic => hyperbolic::geodesic_distance(g, x, y, config)?,
        Backend::Euclidean => {
            let diff = g.sub(x, y)?;
            g.row_norms(diff)?
        }
        Backend::Cosine => {
            let prod = g.mul(x, y)?;
            let dot = g.sum_axis(prod, 1)?;
            let nx = g.row_norms(x)?;
            let ny = g.row_norms(y)?;
            let den = g.mul(nx, ny)?;
            let den = g.offset(den, COSINE_EPS)?;
            let cos = g.div(dot, den)?;
            let neg = g.neg(cos)?;
            g.offset(neg, 1.0)?
        }
    };
    let square = g.reshape(flat, &[b, b])?;
    let mut off = Tensor::ones(&[b, b]);
    for i in 0..b {
        off.data_mut()[i * b + i] = 0.0;
    }
    let off = g.constant(off)?;
    let values = g.mul(square, off)?;
    Ok(DistanceMatrix {
        values,
        backend,
        diagonal_masked: false,
    })
}

/// Nearest-neighbour index per row under the ground-truth distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankTargets {
    indices: Vec<usize>,
}

impl RankTargets {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        for (i, &t) in indices.iter().enumerate() {
            if t == i || t >= n {
                return Err(Error::Validation(format!(
                    "rank target {t} invalid for row {i} of {n}"
                )));
            }
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// `pi_i = argmin_{j != i} D_ij`, ties toward the smallest `j`.
pub fn rank_targets(d: &HammingMatrix) -> Result<RankTargets> {
    let n = d.len();
    if n < 2 {
        return Err(Error::Validation("rank_targets needs B >= 2".into()));
    }
    let indices = (0..n)
        .map(|i| {
            let mut best = if i == 0 { 1 } else { 0 };
            for j in 0..n {
                if j != i && d.get(i, j) < d.get(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect();
    RankTargets::new(indices)
}

/// Training-time reference choice: the ground-truth nearest neighbour of `row`.
pub fn select_grp_training(d: &HammingMatrix, row: usize) -> Result<usize> {
    if row >= d.len() {
        return Err(Error::Index {
            op: "select_grp_training",
            index: row,
            bound: d.len(),
        });
    }
    Ok(rank_targets(d)?.indices()[row])
}

/// Cross-entropy over rows of `-D_hat / tau` with the diagonal masked.
pub fn rank_loss(
    g: &mut Graph,
    d_hat: &DistanceMatrix,
    targets: &RankTargets,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Validation(format!("temperature must be positive, got {tau}")));
    }
    let s = g.shape(d_hat.values).to_vec();
    let b = s[0];
    if s.len() != 2 || s[1] != b || targets.indices().len() != b {
        return Err(Error::dim("rank_loss", &s, &[targets.indices().len()]));
    }
    let logits = g.scale(d_hat.values, -1.0 / tau)?;
    let mut mask = vec![false; b * b];
    for i in 0..b {
        mask[i * b + i] = true;
    }
    g.cross_entropy_rows(logits, targets.indices(), Some(&mask))
}

/// Features that the backend measures: ball points for hyperbolic, the
/// affine (pre-exponential-map) features otherwise.
pub fn embed(
    g: &mut Graph,
    logits: Var,
    vars: &HnnVars,
    backend: Backend,
    config: &BallConfig,
) -> Result<Var> {
    match backend {
        Backend::Hyperbolic => hnn_embed(g, logits, vars, config),
        Backend::Euclidean | Backend::Cosine => hnn_affine(g, logits, vars),
    }
}

/// Untracked [`embed`] of a `[N x M]` logit matrix.
pub fn embed_rows(model: &HnnParams, logits: &Tensor, backend: Backend) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = model.bind_constant(&mut g)?;
    let x = g.constant(logits.clone())?;
    let e = embed(&mut g, x, &vars, backend, &model.config)?;
    Ok(g.value(e).clone())
}

/// Untracked distance between two embeddings under `backend`.
pub fn distance(backend: Backend, a: &[f64], b: &[f64], config: &BallConfig) -> f64 {
    match backend {
        Backend::Hyperbolic => hyperbolic::poincare_distance(a, b, config),
        Backend::Euclidean => {
            let mut s = 0.0;
            for (x, y) in a.iter().zip(b) {
                s += (x - y) * (x - y);
            }
            libm::sqrt(s)
        }
        Backend::Cosine => {
            let mut dot = 0.0;
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
            }
            1.0 - dot / (hyperbolic::norm(a) * hyperbolic::norm(b) + COSINE_EPS)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IndexMeta {
    pub model_checksum: String,
    pub created_unix: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: String,
    /// Insertion position in the index.
    pub position: usize,
    pub distance: f64,
}

/// Immutable snapshot of embedded database records.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    embeddings: Tensor,
    ids: Vec<String>,
    backend: Backend,
    model: HnnParams,
    pub meta: IndexMeta,
}

impl RetrievalIndex {
    /// Embeds the `[N x M]` logits with `model` under `backend`.
    pub fn build(ids: Vec<String>, logits: &Tensor, model: &HnnParams, backend: Backend) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Validation("cannot build an index over an empty corpus".into()));
        }
        if logits.rows() != ids.len() || logits.shape().len() != 2 {
            return Err(Error::dim("index_build", logits.shape(), &[ids.len()]));
        }
        let embeddings = embed_rows(model, logits, backend)?;
        Ok(Self {
            embeddings,
            ids,
            backend,
            model: model.clone(),
            meta: IndexMeta::default(),
        })
    }

    /// Reassembles an index from stored parts (deserialization).
    pub fn from_parts(
        embeddings: Tensor,
        ids: Vec<String>,
        backend: Backend,
        model: HnnParams,
        meta: IndexMeta,
    ) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != ids.len() || ids.is_empty() {
            return Err(Error::dim("RetrievalIndex::from_parts", embeddings.shape(), &[ids.len()]));
        }
        if embeddings.cols() != model.d_h() {
            return Err(Error::dim("RetrievalIndex::from_parts", embeddings.shape(), model.weight.shape()));
        }
        Ok(Self {
            embeddings,
            ids,
            backend,
            model,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn model(&self) -> &HnnParams {
        &self.model
    }

    /// Embeds one `[M]` logit vector with the index model.
    pub fn embed_query(&self, query_logits: &[f64]) -> Result<Tensor> {
        let q = Tensor::matrix(1, query_logits.len(), query_logits.to_vec())?;
        embed_rows(&self.model, &q, self.backend)
    }

    /// Distances from an embedded query to every stored record, in insertion order.
    pub fn scan(&self, query_embedding: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| distance(self.backend, query_embedding, self.embeddings.row(i), &self.model.config))
            .collect()
    }

    /// Exact k nearest records, ascending by distance, ties by insertion order.
    pub fn query(&self, query_logits: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        let q = self.embed_query(query_logits)?;
        self.query_embedded(q.data(), k)
    }

    pub fn query_embedded(&self, query_embedding: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 || k > self.len() {
            return Err(Error::Validation(format!(
                "k = {k} must be in 1..={} (index size)",
                self.len()
            )));
        }
        if query_embedding.len() != self.embeddings.cols() {
            return Err(Error::dim("index_query", &[query_embedding.len()], self.embeddings.shape()));
        }
        let dists = self.scan(query_embedding);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| Neighbor {
                id: self.ids[i].clone(),
                position: i,
                distance: dists[i],
            })
            .collect())
    }
}

/// Builds an index over a corpus' logits.
pub fn index_build(records: &[CorpusRecord], model: &HnnParams, backend: Backend) -> Result<RetrievalIndex> {
    if records.is_empty() {
        return Err(Error::Validation("cannot build an index over an empty corpus".into()));
    }
    let m = model.d_in();
    let mut data = Vec::with_capacity(records.len() * m);
    for r in records {
        if r.logits.len() != m {
            return Err(Error::dim("index_build", &[r.logits.len()], &[m]));
        }
        data.extend_from_slice(&r.logits);
    }
    let logits = Tensor::matrix(records.len(), m, data)?;
    let ids = records.iter().map(|r| r.id.clone()).collect();
    RetrievalIndex::build(ids, &logits, model, backend)
}
