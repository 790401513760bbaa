//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel site in the crate partitions work by index and reduces in
//! index order, so outputs are bit-identical whether the `parallel` feature
//! is on or off. The `*_seq` variants stay available under either feature so
//! benchmarks can compare both paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

/// Sequential reference path for [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Run a fallible mutation over every element, in parallel when available.
pub fn try_for_each_mut<T, F>(items: &mut [T], f: F) -> crate::error::Result<()>
where
    T: Send,
    F: Fn(usize, &mut T) -> crate::error::Result<()> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_iter_mut()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect::<crate::error::Result<Vec<()>>>()?;
        Ok(())
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, t) in items.iter_mut().enumerate() {
            f(i, t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_matches_seq() {
        let f = |i: usize| (i as f64).sqrt() * 3.0 + i as f64;
        assert_eq!(map_indexed(257, f), map_indexed_seq(257, f));
    }
}
