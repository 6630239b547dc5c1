//! Ratio-based split sizing and assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::Split;
use crate::error::{Error, Result};

/// Splits `n` items by integer `ratios` using largest remainders; ties go
/// to the earlier split.
pub fn split_counts(n: usize, ratios: &[usize]) -> Result<Vec<usize>> {
    let total: usize = ratios.iter().sum();
    if total == 0 {
        return Err(Error::invalid("split ratios must not all be zero"));
    }
    let mut counts: Vec<usize> = ratios.iter().map(|&r| n * r / total).collect();
    let mut rest: Vec<(usize, usize)> = ratios.iter().enumerate().map(|(i, &r)| (n * r % total, i)).collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = n - counts.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Seeded assignment of `n` items to train/val/test at `ratio`.
pub fn assign_splits(n: usize, ratio: [usize; 3], seed: u64) -> Result<Vec<Split>> {
    let counts = split_counts(n, &ratio)?;
    let mut out: Vec<Split> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .zip(&counts)
        .flat_map(|(&s, &c)| std::iter::repeat_n(s, c))
        .collect();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}
