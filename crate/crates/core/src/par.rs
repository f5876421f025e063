//! Execution strategy for the data-parallel loops (Monte-Carlo samples and
//! experiment seeds).
//!
//! Every parallel loop maps an index to an independent RNG stream and merges
//! results in index order, so the output is the same for both strategies.
//! Without the `parallel` feature, [`Exec::Parallel`] runs sequentially.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Monte-Carlo samples handled by one RNG stream.
pub const MC_BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

/// RNG for `(seed, stream)`; distinct streams are independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `(0..n).map(f)` in index order.
pub fn map_indexed<T, F>(n: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Splits `n` samples into blocks of [`MC_BLOCK`]; block `i` gets stream `i`.
/// `f(rng, count)` returns a per-block accumulator, returned in block order.
pub fn mc_blocks<T, F>(n: usize, seed: u64, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync + Send,
{
    let blocks = n.div_ceil(MC_BLOCK);
    map_indexed(blocks, exec, |b| {
        let count = MC_BLOCK.min(n - b * MC_BLOCK);
        let mut rng = stream_rng(seed, b as u64);
        f(&mut rng, count)
    })
}

/// Runs `f` on a pool of `workers` threads (global pool when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            return pool.install(f);
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn block_results_do_not_depend_on_strategy() {
        let run = |exec| {
            mc_blocks(1000, 42, exec, |rng, k| {
                (0..k).map(|_| rng.random::<f64>()).sum::<f64>()
            })
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }

    #[test]
    fn blocks_cover_every_sample() {
        let counts = mc_blocks(300, 1, Exec::Sequential, |_, k| k);
        assert_eq!(counts.iter().sum::<usize>(), 300);
    }
}
