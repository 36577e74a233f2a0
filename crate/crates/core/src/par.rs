//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it they run sequentially on the calling thread with identical
//! results and ordering.

use std::ops::ControlFlow;

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Runs `work` over `items` on at most `threads` workers and feeds every
/// result to `sink` on the calling thread as it completes. Completion order is
/// unspecified; the index identifies the item. Once `sink` breaks, no new items
/// are started and results already in flight are still delivered.
pub fn for_each_bounded<T, R, W, S>(items: &[T], threads: usize, work: W, mut sink: S)
where
    T: Sync,
    R: Send,
    W: Fn(usize, &T) -> R + Sync + Send,
    S: FnMut(usize, R) -> ControlFlow<()>,
{
    #[cfg(feature = "parallel")]
    if threads > 1 && items.len() > 1 {
        use rayon::prelude::*;
        use std::sync::atomic::{AtomicBool, Ordering};
        use std::sync::mpsc;

        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, R)>();
        std::thread::scope(|scope| {
            let stop = &stop;
            let work = &work;
            scope.spawn(move || {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("worker pool");
                pool.install(|| {
                    items.par_iter().enumerate().for_each_with(tx, |tx, (i, item)| {
                        if stop.load(Ordering::Relaxed) {
                            return;
                        }
                        let _ = tx.send((i, work(i, item)));
                    });
                });
            });
            for (i, r) in rx {
                if sink(i, r).is_break() {
                    stop.store(true, Ordering::Relaxed);
                }
            }
        });
        return;
    }

    let _ = threads;
    for (i, item) in items.iter().enumerate() {
        if sink(i, work(i, item)).is_break() {
            break;
        }
    }
}
