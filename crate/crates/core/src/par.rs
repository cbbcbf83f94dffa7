//! Independent runs, one thread each when asked.

/// Apply `f` to every item, in order. With `parallel` each item gets its own
/// scoped thread; results are identical either way since runs share nothing.
pub fn map_runs<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if !parallel || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|x| s.spawn(|| f(x))).collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    })
}
