use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffles `0..n` with `seed` and cuts it into batches of `batch_size`;
/// the last batch may be short.
pub fn split_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_partition() {
        let b = split_batches(10, 4, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_batches(10, 4, 1).unwrap(), b);
        assert_ne!(split_batches(10, 4, 2).unwrap(), b);
        assert!(split_batches(3, 0, 0).is_err());
        assert!(split_batches(0, 3, 0).unwrap().is_empty());
    }
}
