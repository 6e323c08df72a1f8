//! The training loop: per step a random batch, the three loss terms, one
//! backward pass and one AdamW update.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{fcc_from_branches, task_loss_tokens, total_loss};
use crate::model::{forward_study, Model, ModelVars, RunConfig};
use crate::optim::AdamW;
use crate::retrieval::{embed, pairwise_distances, rank_loss, rank_targets};
use crate::rng::Rng;
use crate::supervision::{hamming_matrix, StatusVector};
use crate::synth::{logit_matrix, validate_corpus, CorpusRecord, World};
use crate::tensor::{Graph, Var};

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub total: f64,
    pub task: f64,
    pub rank: f64,
    pub fcc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn totals(&self) -> Vec<f64> {
        self.curve.iter().map(|s| s.total).collect()
    }
}

/// Loss terms of one batch on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub task: Var,
    pub rank: Var,
    pub fcc: Var,
}

/// Checks that the corpus fits the configuration.
pub fn check_corpus(config: &RunConfig, corpus: &[CorpusRecord]) -> Result<()> {
    config.validate()?;
    validate_corpus(corpus)?;
    if corpus.len() < config.batch_size {
        return Err(Error::Validation(format!(
            "corpus has {} records, fewer than batch_size {}",
            corpus.len(),
            config.batch_size
        )));
    }
    let d_t = corpus[0].prompts_local.cols();
    if d_t != config.d_t {
        return Err(Error::Validation(format!(
            "corpus prompts are {d_t} wide, config expects d_t = {}",
            config.d_t
        )));
    }
    Ok(())
}

/// Builds the full objective for `batch`. Training references come from the
/// ground-truth Hamming nearest neighbour inside the batch.
pub fn batch_loss(
    g: &mut Graph,
    vars: &ModelVars,
    model: &Model,
    config: &RunConfig,
    world: &World,
    batch: &[&CorpusRecord],
) -> Result<BatchLoss> {
    let logits = g.constant(logit_matrix(batch.iter().copied())?)?;
    let codes: Vec<StatusVector> = batch.iter().map(|r| r.status_vector()).collect::<Result<_>>()?;
    let targets = rank_targets(&hamming_matrix(&codes)?)?;

    let ball = &model.hnn.config;
    let points = embed(g, logits, &vars.hnn, config.backend, ball)?;
    let d_hat = pairwise_distances(g, points, config.backend, ball)?;
    let rank = rank_loss(g, &d_hat, &targets, config.tau)?;

    let ot = config.ot();
    let b = batch.len() as f64;
    let (mut task, mut fcc): (Option<Var>, Option<Var>) = (None, None);
    for (i, rec) in batch.iter().enumerate() {
        let reference = batch[targets.indices()[i]];
        let gp = g.constant(world.global_prompts(&reference.labels, config.global_prompts))?;
        let lp = g.constant(rec.prompts_local.clone())?;
        let row = g.select_rows(logits, &[i])?;
        let out = forward_study(g, vars, row, gp, lp, config.attention, &ot)?;
        let tokens: Vec<usize> = rec.tokens.iter().map(|&t| t as usize).collect();
        let t = task_loss_tokens(g, out.token_logits, &tokens)?;
        let f = fcc_from_branches(g, gp, lp, out.map_global, out.map_local)?;
        task = Some(match task {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
        fcc = Some(match fcc {
            Some(acc) => g.add(acc, f)?,
            None => f,
        });
    }
    let task = g.scale(task.expect("non-empty batch"), 1.0 / b)?;
    let fcc = g.scale(fcc.expect("non-empty batch"), 1.0 / b)?;
    let total = total_loss(g, task, rank, fcc, config.weights())?;
    Ok(BatchLoss { total, task, rank, fcc })
}

fn describe(g: &Graph, v: Option<Var>) -> String {
    match v {
        Some(v) => format!("{:.6e}", g.value(v).data()[0]),
        None => "n/a".into(),
    }
}

/// One optimization step; returns the logged losses.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    config: &RunConfig,
    world: &World,
    batch: &[&CorpusRecord],
    step: usize,
) -> Result<StepLog> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g)?;
    let loss = batch_loss(&mut g, &vars, model, config, world, batch).map_err(|e| {
        if e.is_numeric() {
            Error::Numeric(format!("step {step}: non-finite value while building the loss ({e})"))
        } else {
            e
        }
    })?;
    let log = StepLog {
        step,
        total: g.item(loss.total)?,
        task: g.item(loss.task)?,
        rank: g.item(loss.rank)?,
        fcc: g.item(loss.fcc)?,
    };
    let grads = g.backward(loss.total).map_err(|e| {
        Error::Numeric(format!(
            "step {step}: backward failed ({e}); task={} rank={} fcc={}",
            describe(&g, Some(loss.task)),
            describe(&g, Some(loss.rank)),
            describe(&g, Some(loss.fcc))
        ))
    })?;
    let gs: Vec<_> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
    opt.step(&mut model.params_mut(), &gs).map_err(|e| {
        Error::Numeric(format!(
            "step {step}: {e}; total={} task={} rank={} fcc={}",
            log.total, log.task, log.rank, log.fcc
        ))
    })?;
    Ok(log)
}

/// Model initialization and the batch stream both come from `config.seed`.
pub fn train(config: &RunConfig, corpus: &[CorpusRecord]) -> Result<TrainOutcome> {
    check_corpus(config, corpus)?;
    let mut rng = Rng::new(config.seed);
    let model = Model::init(config, &mut rng)?;
    train_from(config, corpus, model, &mut rng)
}

/// Continues from an explicit starting model, drawing batches from `rng`.
pub fn train_from(
    config: &RunConfig,
    corpus: &[CorpusRecord],
    mut model: Model,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    check_corpus(config, corpus)?;
    let world = World::new(config.d_t);
    let mut opt = AdamW::new(config.adamw())?;
    let mut curve = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let picks = rng.sample_distinct(corpus.len(), config.batch_size);
        let batch: Vec<&CorpusRecord> = picks.iter().map(|&i| &corpus[i]).collect();
        opt.config.lr = config.lr_schedule.rate(config.lr, step, config.steps);
        curve.push(train_step(&mut model, &mut opt, config, &world, &batch, step)?);
    }
    Ok(TrainOutcome { model, curve })
}

/// The untrained model that [`train`] starts from.
pub fn initial_model(config: &RunConfig) -> Result<Model> {
    Model::init(config, &mut Rng::new(config.seed))
}
