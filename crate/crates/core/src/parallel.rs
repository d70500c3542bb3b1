//! Row-parallel execution helpers.
//!
//! Parallelism here is restricted to order-preserving per-row maps: each
//! output row is produced by an independent closure whose internal float
//! operations run in a fixed sequential order. Reductions across rows are
//! never parallelised, so results are bit-identical regardless of thread
//! count and regardless of whether the `parallel` feature is enabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum rows per task; single rows are too little work to pay for a
/// rayon split at desk-scale dimensions.
#[cfg(feature = "parallel")]
const MIN_ROWS_PER_TASK: usize = 8;

/// Apply `f` to every `cols`-wide row of `data`, passing the row index.
pub(crate) fn for_each_row<F>(data: &mut [f32], cols: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    debug_assert!(cols > 0 && data.len().is_multiple_of(cols));
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(cols)
            .with_min_len(MIN_ROWS_PER_TASK)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in data.chunks_mut(cols).enumerate() {
            f(i, row);
        }
    }
}
