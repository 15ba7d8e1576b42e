//! Dense tensors, reverse-mode differentiation, optimizer, gradient
//! checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Precision, Var};
pub use params::{AdamW, Grads, ParamId, ParameterStore, Tag};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

/// Worker threads for [`par_map`]: `BEVI_THREADS` if set, else the number
/// of available cores.
pub fn worker_threads() -> usize {
    std::env::var("BEVI_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Order-preserving map over contiguous chunks on scoped threads. Results
/// do not depend on the thread count.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = worker_threads().min(items.len());
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
