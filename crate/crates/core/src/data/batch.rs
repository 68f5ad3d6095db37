use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffle `0..n` with `seed` and cut it into batches of `batch_size`
/// indices. With `drop_last` a short final batch is discarded.
pub fn make_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2 for in-batch negatives, got {batch_size}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
