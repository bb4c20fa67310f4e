//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers run on the rayon pool.
//! Without it, or after `set_parallel(false)`, they run in order on the
//! calling thread. Every helper produces its outputs independently per item
//! and in a fixed order, so both paths give bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables the parallel path at runtime.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// True when work is dispatched to the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Runs `f` with the parallel path forced on or off, restoring the
/// previous setting afterwards.
pub fn with_parallel<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = PARALLEL.swap(enabled, Ordering::Relaxed);
    let out = f();
    PARALLEL.store(prev, Ordering::Relaxed);
    out
}

/// `(0..n).map(f).collect()`.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] over two equally chunked buffers.
pub fn for_each_chunk_mut2<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && a.len() > a_len {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = with_parallel(true, || map_indexed(1000, f));
        let b = with_parallel(false, || map_indexed(1000, f));
        assert_eq!(a, b);

        let mut x = vec![0u64; 64];
        let mut y = vec![0u64; 64];
        with_parallel(true, || for_each_chunk_mut(&mut x, 8, |i, c| c.fill(i as u64)));
        with_parallel(false, || for_each_chunk_mut(&mut y, 8, |i, c| c.fill(i as u64)));
        assert_eq!(x, y);
        assert_eq!(x[63], 7);
    }
}
