//! Execution policy for the data-parallel kernels.
//!
//! Every hot loop in the crate (agent stepping, grid KDE, operator assembly,
//! sparse-times-dense products, sweep sub-runs) takes an [`Exec`]. With the
//! `parallel` feature disabled, [`Exec::Parallel`] silently runs sequentially,
//! so callers never need `cfg` guards of their own.
//!
//! All parallel paths split work so that each output element is produced by
//! exactly one closure call with a fixed reduction order. Results are therefore
//! bit-identical across thread counts.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Worker count the parallel path will use; 1 when sequential.
    pub fn threads(self) -> usize {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return rayon::current_num_threads();
        }
        1
    }

    pub(crate) fn faer_par(self) -> faer::Par {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return faer::Par::rayon(0);
        }
        faer::Par::Seq
    }

    /// `out[i] = f(i)` for every index.
    pub fn map_indexed<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
        (0..len).map(f).collect()
    }

    /// Calls `f(chunk_index, chunk)` on consecutive `chunk`-sized pieces of `data`.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        assert!(chunk > 0, "chunk size must be positive");
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Calls `f(i, &mut a[i], &mut b[i])` for every index of two equal-length slices.
    pub fn for_each_zip_mut<A, B, F>(self, a: &mut [A], b: &mut [B], f: F)
    where
        A: Send,
        B: Send,
        F: Fn(usize, &mut A, &mut B) + Sync + Send,
    {
        assert_eq!(a.len(), b.len(), "zipped slices must have equal length");
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            a.par_iter_mut()
                .zip(b.par_iter_mut())
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y));
            return;
        }
        a.iter_mut()
            .zip(b.iter_mut())
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }

    /// Calls `f(i, &mut item)` on every element.
    pub fn for_each_mut<T, F>(self, data: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        self.for_each_chunk_mut(data, 1, |i, c| f(i, &mut c[0]));
    }
}
