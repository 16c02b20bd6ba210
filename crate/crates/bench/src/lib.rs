//! Shared fixtures for the criterion benches.

use neuroalign::dataset::{corpus_vocab, Dataset};
use neuroalign::{CohortConfig, Diagnosis, Model, ModelConfig, Result, Split};

/// A desk-scale model and a small training split to feed it.
pub struct Fixture {
    pub model: Model,
    pub data: Dataset,
}

/// Desk grid and model with `per_class` subjects of each diagnosis.
pub fn desk_fixture(per_class: usize, seed: u64) -> Result<Fixture> {
    let mut cohort = CohortConfig::desk(seed);
    cohort.subjects_per_class = [per_class; 3];
    let data = Dataset::generate(&cohort, Split::Train, &Diagnosis::ALL)?;
    let vocab = corpus_vocab(&data)?;
    let model = Model::new(ModelConfig::desk(vocab.len()), vocab, seed)?;
    Ok(Fixture { model, data })
}
