//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool; without it the same closures run in a plain loop. Work is
//! always split on fixed chunk boundaries, so results do not depend on the
//! number of threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the sequential loop wins.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 1 << 15;

#[inline]
#[allow(unused_variables)]
fn worth_splitting(work: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        work >= PARALLEL_THRESHOLD && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `out`.
/// `work` is a rough cost estimate for the whole call.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    if worth_splitting(work) {
        #[cfg(feature = "parallel")]
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// `(0..n).map(f).collect()`, in parallel when worthwhile.
pub(crate) fn map_indices<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if worth_splitting(work) {
        #[cfg(feature = "parallel")]
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
