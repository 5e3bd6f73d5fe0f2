//! Sequential / data-parallel execution switch.
//!
//! Every hot loop in the crate goes through these helpers. With the
//! `parallel` feature disabled, [`Exec::Parallel`] silently runs sequentially,
//! so results never depend on the mode: all parallel work is split into
//! independent chunks whose outputs are written in a fixed order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution mode for data-parallel loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `buf`.
pub fn for_each_row<T, F>(exec: Exec, buf: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        buf.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    buf.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let a = map(Exec::Sequential, &items, |x| x * x + 1);
        let b = map(Exec::Parallel, &items, |x| x * x + 1);
        assert_eq!(a, b);

        let mut s = vec![0u32; 64 * 9];
        let mut p = s.clone();
        for_each_row(Exec::Sequential, &mut s, 64, |r, row| {
            row.iter_mut().enumerate().for_each(|(i, v)| *v = (r * 64 + i) as u32)
        });
        for_each_row(Exec::Parallel, &mut p, 64, |r, row| {
            row.iter_mut().enumerate().for_each(|(i, v)| *v = (r * 64 + i) as u32)
        });
        assert_eq!(s, p);
        assert_eq!(map_range(Exec::Parallel, 5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}
