//! Grid sweeps: one train + evaluate per cell, cells in parallel, results in
//! grid order whatever the scheduling.

use std::fmt::Write as _;
use std::time::Instant;

use hyperalign_core::attention::AttentionKind;
use hyperalign_core::eval::{evaluate, EvalReport};
use hyperalign_core::model::RunConfig;
use hyperalign_core::retrieval::Backend;
use hyperalign_core::synth::CorpusRecord;
use hyperalign_core::train::train;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values to sweep per field. Absent fields keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<Vec<Backend>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<AttentionKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<Vec<f64>>,
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(Error::Invalid(format!("grid field {name:?} has no values"))),
        Some(v) => Ok(v.clone()),
    }
}

impl Grid {
    /// The full backend x attention table.
    pub fn ablation() -> Self {
        Grid {
            backend: Some(vec![Backend::Hyperbolic, Backend::Euclidean, Backend::Cosine]),
            attention: Some(vec![AttentionKind::Mpsa, AttentionKind::Softmax]),
            ..Grid::default()
        }
    }

    /// Cartesian product over the fields, with the later fields varying fastest.
    pub fn cells(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        if *self == Grid::default() {
            return Err(Error::Invalid("grid is empty: give at least one field to sweep".into()));
        }
        let alphas = axis("alpha", &self.alpha, base.alpha)?;
        let betas = axis("beta", &self.beta, base.beta)?;
        let batches = axis("batch_size", &self.batch_size, base.batch_size)?;
        let backends = axis("backend", &self.backend, base.backend)?;
        let kinds = axis("attention", &self.attention, base.attention)?;
        let taus = axis("tau", &self.tau, base.tau)?;
        let mut out = Vec::new();
        for &alpha in &alphas {
            for &beta in &betas {
                for &batch_size in &batches {
                    for &backend in &backends {
                        for &attention in &kinds {
                            for &tau in &taus {
                                out.push(RunConfig {
                                    alpha,
                                    beta,
                                    batch_size,
                                    backend,
                                    attention,
                                    tau,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellResult {
    pub cell: usize,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Exit status the failure would map to on its own (1 or 2).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_code: Option<i32>,
    pub wall_time: f64,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.report.is_some()
    }
}

/// Trains and evaluates one configuration.
pub fn run_cell(config: &RunConfig, train_set: &[CorpusRecord], test_set: &[CorpusRecord]) -> Result<EvalReport> {
    let outcome = train(config, train_set)?;
    Ok(evaluate(&outcome.model, config, train_set, test_set, outcome.totals())?)
}

/// Runs every cell; a failing cell is recorded, not propagated.
pub fn run_sweep(
    base: &RunConfig,
    grid: &Grid,
    train_set: &[CorpusRecord],
    test_set: &[CorpusRecord],
) -> Result<Vec<CellResult>> {
    let cells = grid.cells(base)?;
    Ok(cells
        .into_par_iter()
        .enumerate()
        .map(|(cell, config)| {
            let start = Instant::now();
            let result = run_cell(&config, train_set, test_set);
            let wall_time = start.elapsed().as_secs_f64();
            let (report, error, error_code) = match result {
                Ok(r) => (Some(r), None, None),
                Err(e) => (None, Some(e.to_string()), Some(e.exit_code())),
            };
            CellResult {
                cell,
                config,
                report,
                error,
                error_code,
                wall_time,
            }
        })
        .collect())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    cell: usize,
    status: &'static str,
    backend: &'static str,
    attention: &'static str,
    alpha: f64,
    beta: f64,
    batch_size: usize,
    tau: f64,
    p_at_1: Option<f64>,
    mean_retrieved_hamming: Option<f64>,
    mean_oracle_hamming: Option<f64>,
    head_hit_rate: Option<f64>,
    tail_hit_rate: Option<f64>,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    wall_time: f64,
    error: &'a str,
}

/// Machine-readable table: header row, one cell per line, grid order.
pub fn to_csv(results: &[CellResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        let rep = r.report.as_ref();
        let c = &r.config;
        w.serialize(CsvRow {
            cell: r.cell,
            status: if r.ok() { "ok" } else { "failed" },
            backend: c.backend.name(),
            attention: c.attention.name(),
            alpha: c.alpha,
            beta: c.beta,
            batch_size: c.batch_size,
            tau: c.tau,
            p_at_1: rep.map(|x| x.p_at_1),
            mean_retrieved_hamming: rep.map(|x| x.mean_retrieved_hamming),
            mean_oracle_hamming: rep.map(|x| x.mean_oracle_hamming),
            head_hit_rate: rep.and_then(|x| x.head_hit_rate),
            tail_hit_rate: rep.and_then(|x| x.tail_hit_rate),
            first_loss: rep.and_then(|x| x.loss_curve.first().copied()),
            final_loss: rep.and_then(|x| x.loss_curve.last().copied()),
            wall_time: r.wall_time,
            error: r.error.as_deref().unwrap_or(""),
        })
        .expect("csv row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

/// Human-readable summary, best p@1 first; failed cells last.
pub fn summary(results: &[CellResult]) -> String {
    let mut order: Vec<&CellResult> = results.iter().collect();
    order.sort_by(|a, b| {
        let pa = a.report.as_ref().map(|r| r.p_at_1);
        let pb = b.report.as_ref().map(|r| r.p_at_1);
        match (pa, pb) {
            (Some(x), Some(y)) => y.total_cmp(&x).then(a.cell.cmp(&b.cell)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.cell.cmp(&b.cell),
        }
    });
    let mut out = String::new();
    writeln!(
        out,
        "{:>4}  {:<10} {:<8} {:>5} {:>5} {:>5} {:>5}  {:>6} {:>7} {:>6} {:>6}",
        "cell", "backend", "attn", "alpha", "beta", "batch", "tau", "p@1", "hamming", "head", "tail"
    )
    .unwrap();
    for r in order {
        let c = &r.config;
        let prefix = format!(
            "{:>4}  {:<10} {:<8} {:>5} {:>5} {:>5} {:>5}",
            r.cell,
            c.backend.name(),
            c.attention.name(),
            c.alpha,
            c.beta,
            c.batch_size,
            c.tau
        );
        match (&r.report, &r.error) {
            (Some(rep), _) => writeln!(
                out,
                "{prefix}  {:>6.3} {:>7.3} {:>6} {:>6}",
                rep.p_at_1,
                rep.mean_retrieved_hamming,
                fmt_opt(rep.head_hit_rate),
                fmt_opt(rep.tail_hit_rate)
            ),
            (None, e) => writeln!(out, "{prefix}  FAILED: {}", e.as_deref().unwrap_or("unknown error")),
        }
        .unwrap();
    }
    out
}
