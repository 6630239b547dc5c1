//! Data-parallel map over independent work items (batch samples, evaluation
//! images, augmentation draws).
//!
//! With the `parallel` feature the map runs on the rayon pool; without it,
//! or through [`map_sequential`], it runs on the calling thread. Results are
//! always returned in input order, so reductions over them are deterministic
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Like [`map`] for fallible work; the first error in input order wins.
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `None`. Ignored in sequential builds.
pub fn with_workers<R, F>(workers: Option<usize>, f: F) -> Result<R, String>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match workers {
        Some(0) => Err("--workers must be at least 1".to_string()),
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| e.to_string()),
        _ => Ok(f()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<usize> = (0..257).collect();
        let out = map(&items, |i, &v| (i, v * 2));
        assert!(out.iter().enumerate().all(|(i, &(j, v))| i == j && v == 2 * i));
        assert_eq!(out, map_sequential(&items, |i, &v| (i, v * 2)));
    }

    #[test]
    fn try_map_reports_first_error() {
        let items = [1, 2, 3, 4];
        let r: Result<Vec<i32>, i32> = try_map(&items, |_, &v| if v >= 3 { Err(v) } else { Ok(v) });
        assert_eq!(r, Err(3));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let items: Vec<u64> = (0..100).collect();
        let run = |w| with_workers(w, || map(&items, |_, &v| v * v)).unwrap();
        assert_eq!(run(Some(1)), run(Some(3)));
        assert_eq!(run(None), run(Some(2)));
        assert!(with_workers(Some(0), || ()).is_err());
    }
}
