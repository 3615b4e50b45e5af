//! Order-preserving parallel map over an index range.

/// Computes `f(0..n)` on up to `threads` scoped workers. Results are in
/// index order, so output never depends on the worker count as long as `f`
/// derives its randomness from the index.
pub fn par_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let lo = (w * chunk).min(n);
                let hi = ((w + 1) * chunk).min(n);
                s.spawn(move || (lo..hi).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_sequential_for_any_worker_count() {
        let seq: Vec<u64> = (0..37).map(|i| (i as u64).pow(3)).collect();
        for t in [1, 2, 3, 8, 64] {
            assert_eq!(par_map(37, t, |i| (i as u64).pow(3)), seq);
        }
        assert!(par_map(0, 4, |i| i).is_empty());
    }
}
