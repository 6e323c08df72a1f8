//! File formats, the desk-scale experiment harness and the `hyperalign`
//! command line, on top of `hyperalign-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fsio;
pub mod index;
pub mod sweep;

pub use error::{Error, Result};

use hyperalign_core::synth::{synth_generate, CorpusRecord, SynthConfig};

/// Offset between a run seed and the seed of its held-out query corpus.
pub const TEST_SEED_OFFSET: u64 = 1000;

/// Database and query corpora for a run seed: `n_train` records from `seed`
/// and `n_test` from `seed + TEST_SEED_OFFSET`, sharing every other setting.
pub fn paired_corpora(
    seed: u64,
    n_train: usize,
    n_test: usize,
    base: &SynthConfig,
) -> Result<(Vec<CorpusRecord>, Vec<CorpusRecord>)> {
    let train = synth_generate(&SynthConfig {
        n: n_train,
        seed,
        ..base.clone()
    })?;
    let test = synth_generate(&SynthConfig {
        n: n_test,
        seed: seed.wrapping_add(TEST_SEED_OFFSET),
        ..base.clone()
    })?;
    Ok((train, test))
}
