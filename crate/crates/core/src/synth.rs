//! Synthetic long-tailed studies with fully known ground truth.
//!
//! A fixed "world" (drawn once from [`WORLD_SEED`]) maps status vectors to
//! entity logits through a category-to-entity influence matrix, and owns the
//! prototype vectors behind local (entity) and global (sentence) prompts.
//! Corpora drawn with different seeds share the same world, so a model trained
//! on one corpus can be evaluated on another.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::supervision::{encode_status_vector, Status, StatusVector, NUM_CATEGORIES, NUM_STATUSES, STATUS_BITS};
use crate::tensor::Tensor;

pub const NUM_ENTITIES: usize = 75;
pub const DEFAULT_PROMPT_DIM: usize = 32;
pub const DEFAULT_LOCAL_PROMPTS: usize = 12;
pub const DEFAULT_GLOBAL_PROMPTS: usize = 8;
pub const DEFAULT_NOISE: f64 = 0.05;
pub const WORLD_SEED: u64 = 0x5eed_0f_a11_c0de;

/// The share above which a class counts as a head class.
pub const HEAD_THRESHOLD: f64 = 0.10;

pub const CLASS_NAMES: [&str; NUM_CATEGORIES] = [
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Edema",
    "Atelectasis",
    "Pleural Effusion",
    "Support Devices",
    "Lung Lesion",
    "Consolidation",
    "Pneumonia",
    "Pneumothorax",
    "Pleural Other",
    "Fracture",
    "No Finding",
    "Hernia",
    "Emphysema",
    "Fibrosis",
    "Nodule",
];

/// Positive rates per class. The first fourteen follow a published chest
/// X-ray test-split profile; the last four are rare extras that fill the
/// category count.
pub const DEFAULT_PRIORS: [f64; NUM_CATEGORIES] = [
    0.189, 0.329, 0.361, 0.146, 0.218, 0.274, 0.349, 0.052, 0.046, 0.043, 0.019, 0.032, 0.038,
    0.084, 0.010, 0.020, 0.015, 0.030,
];

// Conditional split of the non-positive mass.
const P_BLANK: f64 = 0.85;
const P_NEGATIVE: f64 = 0.10;

/// One synthetic study.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    /// Entity evidence, length [`NUM_ENTITIES`].
    pub logits: Vec<f64>,
    /// Per-category status index in `0..4`.
    pub labels: Vec<u8>,
    /// Task targets; equal to `labels` for generated data.
    pub tokens: Vec<u8>,
    /// `[P x d_t]` local reference prompts.
    pub prompts_local: Tensor,
    pub prompt_global_ref: Option<String>,
}

impl CorpusRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Error::Validation(format!("record {:?}: {what}", self.id));
        if self.logits.len() != NUM_ENTITIES {
            return Err(bad(&format!("expected {NUM_ENTITIES} logits, got {}", self.logits.len())));
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite logit"));
        }
        for (name, v) in [("labels", &self.labels), ("tokens", &self.tokens)] {
            if v.len() != NUM_CATEGORIES || v.iter().any(|&s| s as usize >= NUM_STATUSES) {
                return Err(bad(&format!("{name} must be {NUM_CATEGORIES} values in 0..=3")));
            }
        }
        let s = self.prompts_local.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 || !self.prompts_local.is_finite() {
            return Err(bad("prompts_local must be a finite non-empty matrix"));
        }
        Ok(())
    }

    pub fn status_vector(&self) -> Result<StatusVector> {
        encode_status_vector(&self.labels)
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.labels[class] == Status::Positive as u8
    }
}

/// Checks every record, id uniqueness and consistent prompt shapes.
pub fn validate_corpus(records: &[CorpusRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::Validation("corpus is empty".into()));
    };
    let mut ids: Vec<&str> = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if r.prompts_local.shape() != first.prompts_local.shape() {
            return Err(Error::Validation(format!(
                "record {:?} has prompts_local {:?}, expected {:?}",
                r.id,
                r.prompts_local.shape(),
                first.prompts_local.shape()
            )));
        }
        ids.push(&r.id);
    }
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!("duplicate record id {:?}", w[0])));
    }
    Ok(())
}

/// Logits of a corpus as an `[N x 75]` matrix.
pub fn logit_matrix<'a>(records: impl IntoIterator<Item = &'a CorpusRecord>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for r in records {
        if r.logits.len() != NUM_ENTITIES {
            return Err(Error::dim("logit_matrix", &[r.logits.len()], &[NUM_ENTITIES]));
        }
        data.extend_from_slice(&r.logits);
        rows += 1;
    }
    Tensor::matrix(rows, NUM_ENTITIES, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub priors: [f64; NUM_CATEGORIES],
    pub noise: f64,
    pub prompt_dim: usize,
    pub local_prompts: usize,
}

impl SynthConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            priors: DEFAULT_PRIORS,
            noise: DEFAULT_NOISE,
            prompt_dim: DEFAULT_PROMPT_DIM,
            local_prompts: DEFAULT_LOCAL_PROMPTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Validation(format!("corpus size must be >= 2, got {}", self.n)));
        }
        if let Some((k, p)) = self.priors.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!(
                "prior for class {k} ({}) must lie in [0, 1], got {p}",
                CLASS_NAMES[k]
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Validation(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        if self.prompt_dim == 0 || self.local_prompts == 0 || self.local_prompts > NUM_ENTITIES {
            return Err(Error::Validation("prompt sizes out of range".into()));
        }
        Ok(())
    }
}

/// Fixed generative structure shared by every corpus.
#[derive(Clone, Debug)]
pub struct World {
    /// `[NUM_ENTITIES x STATUS_BITS]`: entity means as a linear map of the
    /// status vector.
    pub influence: Tensor,
    /// `[NUM_ENTITIES x d_t]` local prompt prototypes.
    pub entity_prototypes: Tensor,
    /// `[STATUS_BITS x d_t]` prototypes of the sentence describing each
    /// (category, status) finding.
    pub sentence_prototypes: Tensor,
    /// `[d_t]` sentence used to pad reports with few findings.
    pub normal_sentence: Vec<f64>,
    pub prompt_dim: usize,
}

impl World {
    pub fn new(prompt_dim: usize) -> Self {
        let mut rng = Rng::new(WORLD_SEED);
        // Entity e < 72 reads category e / 4 in status e % 4; a little
        // cross-talk between findings, and three diffuse entities.
        let mut influence = rng.normal_tensor(&[NUM_ENTITIES, STATUS_BITS], 0.1);
        for e in 0..STATUS_BITS {
            influence.data_mut()[e * STATUS_BITS + e] += 1.0;
        }
        for v in &mut influence.data_mut()[STATUS_BITS * STATUS_BITS..] {
            *v *= 3.0;
        }
        let category = rng.normal_tensor(&[NUM_CATEGORIES, prompt_dim], 1.0);
        let status = rng.normal_tensor(&[NUM_STATUSES, prompt_dim], 1.0);
        let extra = rng.normal_tensor(&[NUM_ENTITIES - STATUS_BITS, prompt_dim], 1.0);
        let mut entity = Vec::with_capacity(NUM_ENTITIES * prompt_dim);
        let mut sentence = Vec::with_capacity(STATUS_BITS * prompt_dim);
        for b in 0..STATUS_BITS {
            let (k, s) = (b / NUM_STATUSES, b % NUM_STATUSES);
            let (c, st) = (category.row(k), status.row(s));
            let jitter: Vec<f64> = (0..prompt_dim).map(|_| 0.3 * rng.normal()).collect();
            for j in 0..prompt_dim {
                entity.push(c[j] + 0.5 * st[j]);
            }
            for j in 0..prompt_dim {
                sentence.push(c[j] + 0.5 * st[j] + jitter[j]);
            }
        }
        entity.extend_from_slice(extra.data());
        let normal_sentence = (0..prompt_dim).map(|_| rng.normal()).collect();
        Self {
            influence,
            entity_prototypes: Tensor::matrix(NUM_ENTITIES, prompt_dim, entity).expect("sized"),
            sentence_prototypes: Tensor::matrix(STATUS_BITS, prompt_dim, sentence).expect("sized"),
            normal_sentence,
            prompt_dim,
        }
    }

    /// Noise-free entity logits for a label vector.
    pub fn mean_logits(&self, labels: &[u8]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; NUM_ENTITIES];
        for (e, o) in out.iter_mut().enumerate() {
            let row = self.influence.row(e);
            for (k, &s) in labels.iter().enumerate() {
                *o += row[NUM_STATUSES * k + s as usize];
            }
        }
        out
    }

    /// Global reference prompts `[n x d_t]` for a report with `labels`: one
    /// sentence per mentioned category in category order, padded with the
    /// normal sentence.
    pub fn global_prompts(&self, labels: &[u8], n: usize) -> Tensor {
        let d = self.prompt_dim;
        let mut data = Vec::with_capacity(n * d);
        for (k, &s) in labels.iter().enumerate() {
            if data.len() == n * d {
                break;
            }
            if s != Status::Blank as u8 {
                data.extend_from_slice(self.sentence_prototypes.row(NUM_STATUSES * k + s as usize));
            }
        }
        while data.len() < n * d {
            data.extend_from_slice(&self.normal_sentence);
        }
        Tensor::matrix(n, d, data).expect("sized")
    }

    fn local_prompts(&self, logits: &[f64], p: usize, noise: f64, rng: &mut Rng) -> Tensor {
        let mut order: Vec<usize> = (0..NUM_ENTITIES).collect();
        // sort by logit descending, ties to the lower entity index
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        let d = self.prompt_dim;
        let mut data = Vec::with_capacity(p * d);
        for &e in order.iter().take(p) {
            for &v in self.entity_prototypes.row(e) {
                data.push(v + noise * rng.normal());
            }
        }
        Tensor::matrix(p, d, data).expect("sized")
    }
}

fn sample_status(prior: f64, rng: &mut Rng) -> Status {
    if rng.uniform() < prior {
        return Status::Positive;
    }
    let u = rng.uniform();
    if u < P_BLANK {
        Status::Blank
    } else if u < P_BLANK + P_NEGATIVE {
        Status::Negative
    } else {
        Status::Uncertain
    }
}

/// Draws `config.n` records. Same config, same records.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<CorpusRecord>> {
    config.validate()?;
    let world = World::new(config.prompt_dim);
    let mut rng = Rng::new(config.seed);
    let mut out = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let labels: Vec<u8> = config.priors.iter().map(|&p| sample_status(p, &mut rng) as u8).collect();
        let mut logits = world.mean_logits(&labels);
        for v in &mut logits {
            *v += config.noise * rng.normal();
        }
        let prompts_local = world.local_prompts(&logits, config.local_prompts, config.noise, &mut rng);
        out.push(CorpusRecord {
            id: format!("s{}-{i:05}", config.seed),
            logits,
            tokens: labels.clone(),
            labels,
            prompts_local,
            prompt_global_ref: None,
        });
    }
    Ok(out)
}

/// Empirical positive rate per class.
pub fn positive_rates(records: &[CorpusRecord]) -> [f64; NUM_CATEGORIES] {
    let mut out = [0.0; NUM_CATEGORIES];
    if records.is_empty() {
        return out;
    }
    for r in records {
        for (k, o) in out.iter_mut().enumerate() {
            if r.is_positive(k) {
                *o += 1.0;
            }
        }
    }
    for o in &mut out {
        *o /= records.len() as f64;
    }
    out
}
