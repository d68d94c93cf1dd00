//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan out over rayon; without it, or
//! when parallelism is switched off at runtime, they run in order on the calling
//! thread. Every helper returns results in index order, so reductions performed
//! by callers are identical in both modes.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

thread_local! {
    static FORCED_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Enables or disables parallel execution at runtime.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst) && !FORCED_SEQUENTIAL.with(|f| f.get())
}

/// Runs `f` with parallelism disabled on the calling thread only.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCED_SEQUENTIAL.with(|c| c.replace(true));
    let r = f();
    FORCED_SEQUENTIAL.with(|c| c.set(prev));
    r
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk)` for each consecutive `chunk`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if enabled() && data.len() > chunk {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 37];
        for_each_chunk(&mut v, 5, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v[36], 7);
        assert_eq!(v[0], 0);
    }
}
