//! Two-stage 80:20 partition: 20% of all samples are held out for
//! evaluation, then 20% of the remainder becomes the validation set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split};
use crate::error::{Result, SimicError};

pub const MIN_SPLIT_SIZE: usize = 5;

/// `(train, val, eval)` sizes for `n` samples. The evaluation share is
/// floored; the validation share of the remainder is rounded to nearest.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < MIN_SPLIT_SIZE {
        return Err(SimicError::InvalidArgument(format!(
            "need at least {MIN_SPLIT_SIZE} samples to split, got {n}"
        )));
    }
    let eval = n / 5;
    let rest = n - eval;
    // rest/5 never has fractional part .5, so this rounding is unambiguous.
    let val = (rest + 2) / 5;
    Ok((rest - val, val, eval))
}

/// Assigns each of `n` positions to a split via a seeded shuffle. The result
/// is aligned with the input order.
pub fn split_indices(n: usize, seed: u64) -> Result<Vec<Split>> {
    let (_, val, eval) = split_sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < eval {
            Split::Eval
        } else if rank < eval + val {
            Split::Val
        } else {
            Split::Train
        };
    }
    Ok(out)
}

pub fn split<S: AsRef<str>>(ids: &[S], seed: u64) -> Result<Vec<(String, Split)>> {
    let assignment = split_indices(ids.len(), seed)?;
    Ok(ids
        .iter()
        .map(|s| s.as_ref().to_string())
        .zip(assignment)
        .collect())
}

/// Overwrites the split column of every record.
pub fn assign_splits(manifest: &mut DatasetManifest, seed: u64) -> Result<()> {
    let assignment = split_indices(manifest.len(), seed)?;
    for (r, s) in manifest.records.iter_mut().zip(assignment) {
        r.split = s;
    }
    manifest.set_meta("split_seed", seed.to_string());
    Ok(())
}
