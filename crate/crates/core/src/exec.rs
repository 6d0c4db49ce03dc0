//! Data-parallel map used for candidate evaluation, critique fan-out and
//! corpus runs. Results always come back in input order.
//!
//! With the `parallel` feature disabled every executor runs serially.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone)]
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Executor {
    pub fn serial() -> Self {
        Self {
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// An executor with `threads` workers; `threads <= 1` is serial.
    pub fn new(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if threads > 1 {
                match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                    Ok(pool) => return Self { pool: Some(Arc::new(pool)) },
                    Err(e) => tracing::warn!("falling back to serial execution: {e}"),
                }
            }
        }
        let _ = threads;
        Self::serial()
    }

    pub fn threads(&self) -> usize {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.current_num_threads();
        }
        1
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("threads", &self.threads()).finish()
    }
}
