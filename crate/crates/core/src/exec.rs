//! Order-preserving parallel map used for rollouts and evaluation.
//!
//! Results are always returned in input order, and callers derive every
//! random stream from the item index, so output does not depend on the
//! worker count. Without the `parallel` feature, or with one worker, the map
//! runs on the calling thread.

#[cfg(feature = "parallel")]
use std::collections::HashMap;
#[cfg(feature = "parallel")]
use std::sync::{Arc, Mutex, OnceLock};

#[cfg(feature = "parallel")]
fn pool(workers: usize) -> Arc<rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().expect("pool registry poisoned");
    pools
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool"))
        })
        .clone()
}

/// Maps `f(index, item)` over `items`. `workers == 0` means one per core.
pub fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        let workers = if workers == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { workers };
        if workers > 1 && items.len() > 1 {
            use rayon::prelude::*;
            return pool(workers).install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect());
        }
    }
    let _ = workers;
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Whether this build can run work on more than one thread.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
