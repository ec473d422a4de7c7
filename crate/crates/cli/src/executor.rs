//! Multi-threaded chunk executor for the Monte Carlo density estimate.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use minattn::density::{ChunkTally, SampleExecutor};

/// Runs chunks on `workers` scoped threads pulling from a shared counter.
/// Results are returned in chunk order, so the merged field does not
/// depend on scheduling.
#[derive(Debug, Clone, Copy)]
pub struct Threads {
    workers: usize,
}

impl Threads {
    pub fn new(workers: usize) -> Self {
        Self {
            workers: workers.max(1),
        }
    }

    pub fn available() -> Self {
        Self::new(std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn workers(&self) -> usize {
        self.workers
    }
}

impl SampleExecutor for Threads {
    fn run(
        &self,
        chunks: usize,
        job: &(dyn Fn(usize) -> minattn::Result<ChunkTally> + Sync),
    ) -> Vec<minattn::Result<ChunkTally>> {
        if self.workers == 1 || chunks <= 1 {
            return (0..chunks).map(job).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<minattn::Result<ChunkTally>>>> = (0..chunks).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(chunks) {
                scope.spawn(|| loop {
                    let c = next.fetch_add(1, Ordering::Relaxed);
                    if c >= chunks {
                        break;
                    }
                    let result = job(c);
                    *slots[c].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every chunk runs"))
            .collect()
    }
}
