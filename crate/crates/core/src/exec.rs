//! Block fan-out with results gathered in block order.

use alloc::vec::Vec;
use core::ops::Range;

/// Paths per simulation block.
pub const DEFAULT_BLOCK: usize = 512;

/// Splits `0..n` into consecutive blocks of `block` items and maps each one.
/// The output is in block order regardless of how blocks were scheduled.
#[cfg(not(feature = "parallel"))]
pub fn map_blocks<T, F>(n: usize, block: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, Range<usize>) -> T + Sync + Send,
{
    let block = block.max(1);
    (0..n.div_ceil(block)).map(|b| f(b, b * block..((b + 1) * block).min(n))).collect()
}

#[cfg(feature = "parallel")]
pub fn map_blocks<T, F>(n: usize, block: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, Range<usize>) -> T + Sync + Send,
{
    use rayon::prelude::*;
    let block = block.max(1);
    (0..n.div_ceil(block))
        .into_par_iter()
        .map(|b| f(b, b * block..((b + 1) * block).min(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_range_in_order() {
        let parts = map_blocks(10, 4, |b, r| (b, r));
        assert_eq!(parts, alloc::vec![(0, 0..4), (1, 4..8), (2, 8..10)]);
        assert!(map_blocks(0, 4, |_, r| r).is_empty());
    }
}
