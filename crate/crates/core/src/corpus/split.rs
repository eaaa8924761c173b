//! Leave-one-out domain splits and cross-corpus mixing.

use super::{Dialog, SlotRegistry};
use crate::corpus::TrainingExample;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Partition dialogs for zero-shot evaluation: the train side contains no
/// dialog that touches `held_out_domain`; the eval side contains exactly the
/// dialogs that do.
pub fn leave_one_out_split(
    dialogs: &[Dialog],
    registry: &SlotRegistry,
    held_out_domain: &str,
) -> Result<(Vec<Dialog>, Vec<Dialog>)> {
    if !registry.contains_domain(held_out_domain) {
        return Err(Error::UnknownDomain(held_out_domain.to_string()));
    }
    let (eval, train): (Vec<Dialog>, Vec<Dialog>) = dialogs
        .iter()
        .cloned()
        .partition(|d| d.domains.contains(held_out_domain));
    Ok((train, eval))
}

/// Augment `primary` with exactly `primary.len()` examples sampled from
/// `augmentation` — without replacement when the pool is large enough, with
/// replacement otherwise — and shuffle the result. Deterministic under `seed`.
pub fn mix_datasets(
    primary: &[TrainingExample],
    augmentation: &[TrainingExample],
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    if primary.is_empty() {
        return Err(Error::InvalidInput("primary example list is empty".into()));
    }
    if augmentation.is_empty() {
        return Err(Error::InvalidInput(
            "augmentation example list is empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = primary.len();
    let mut mixed: Vec<TrainingExample> = primary.to_vec();
    if augmentation.len() >= n {
        let mut indices: Vec<usize> = (0..augmentation.len()).collect();
        indices.shuffle(&mut rng);
        mixed.extend(indices[..n].iter().map(|&i| augmentation[i].clone()));
    } else {
        for _ in 0..n {
            let i = rng.random_range(0..augmentation.len());
            mixed.push(augmentation[i].clone());
        }
    }
    mixed.shuffle(&mut rng);
    Ok(mixed)
}
