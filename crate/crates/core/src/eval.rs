//! Retrieval quality against the brute-force Hamming oracle.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Model, RunConfig};
use crate::retrieval::RetrievalIndex;
use crate::supervision::{hamming_distance, StatusVector, NUM_CATEGORIES};
use crate::synth::{logit_matrix, positive_rates, validate_corpus, CorpusRecord, HEAD_THRESHOLD};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    /// Share of queries whose top-1 attains the database's minimum Hamming
    /// distance to that query.
    pub p_at_1: f64,
    pub mean_retrieved_hamming: f64,
    /// Mean of the per-query oracle minimum; the floor for the line above.
    pub mean_oracle_hamming: f64,
    /// Per class: among test queries positive for the class, the share whose
    /// retrieved record is positive too. `None` when no query is positive.
    pub per_class_hit_rate: Vec<Option<f64>>,
    /// Classes whose positive rate in the database exceeds 10%.
    pub head_classes: Vec<usize>,
    pub tail_classes: Vec<usize>,
    pub head_hit_rate: Option<f64>,
    pub tail_hit_rate: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub config: RunConfig,
    pub n_database: usize,
    pub n_queries: usize,
    /// Seconds; left unset in reports that must be reproducible byte for byte.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub wall_time: Option<f64>,
}

/// Exhaustive minimum Hamming distance from `query` to any database code.
pub fn oracle_min_hamming(query: StatusVector, database: &[StatusVector]) -> Option<u32> {
    database.iter().map(|&d| hamming_distance(query, d)).min()
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Indexes `train`, queries each `test` record for its top-1, and scores it.
pub fn evaluate(
    model: &Model,
    config: &RunConfig,
    train: &[CorpusRecord],
    test: &[CorpusRecord],
    loss_curve: Vec<f64>,
) -> Result<EvalReport> {
    validate_corpus(train)?;
    validate_corpus(test)?;
    if model.hnn.d_in() != train[0].logits.len() {
        return Err(Error::Validation("checkpoint does not match corpus logit width".into()));
    }
    let ids = train.iter().map(|r| r.id.clone()).collect();
    let index = RetrievalIndex::build(ids, &logit_matrix(train)?, &model.hnn, config.backend)?;
    let db: Vec<StatusVector> = train.iter().map(|r| r.status_vector()).collect::<Result<_>>()?;
    let queries = crate::retrieval::embed_rows(&model.hnn, &logit_matrix(test)?, config.backend)?;

    let mut hits = 0usize;
    let (mut retrieved_sum, mut oracle_sum) = (0.0, 0.0);
    let mut class_hits = [0usize; NUM_CATEGORIES];
    let mut class_total = [0usize; NUM_CATEGORIES];
    for (qi, q) in test.iter().enumerate() {
        let top = index.query_embedded(queries.row(qi), 1)?;
        let found = &train[top[0].position];
        let code = q.status_vector()?;
        let got = hamming_distance(code, db[top[0].position]);
        let best = oracle_min_hamming(code, &db).expect("non-empty database");
        if got == best {
            hits += 1;
        }
        retrieved_sum += got as f64;
        oracle_sum += best as f64;
        for k in 0..NUM_CATEGORIES {
            if q.is_positive(k) {
                class_total[k] += 1;
                if found.is_positive(k) {
                    class_hits[k] += 1;
                }
            }
        }
    }
    let n = test.len() as f64;
    let per_class_hit_rate: Vec<Option<f64>> = (0..NUM_CATEGORIES)
        .map(|k| (class_total[k] > 0).then(|| class_hits[k] as f64 / class_total[k] as f64))
        .collect();
    let rates = positive_rates(train);
    let (head_classes, tail_classes): (Vec<usize>, Vec<usize>) =
        (0..NUM_CATEGORIES).partition(|&k| rates[k] > HEAD_THRESHOLD);
    let group = |ks: &[usize]| {
        let v: Vec<f64> = ks.iter().filter_map(|&k| per_class_hit_rate[k]).collect();
        mean_of(&v)
    };
    Ok(EvalReport {
        p_at_1: hits as f64 / n,
        mean_retrieved_hamming: retrieved_sum / n,
        mean_oracle_hamming: oracle_sum / n,
        head_hit_rate: group(&head_classes),
        tail_hit_rate: group(&tail_classes),
        per_class_hit_rate,
        head_classes,
        tail_classes,
        loss_curve,
        config: config.clone(),
        n_database: train.len(),
        n_queries: test.len(),
        wall_time: None,
    })
}
