//! Order-preserving map over independent jobs: scoped threads natively,
//! sequential on wasm32 where threads are unavailable.

pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    #[cfg(target_arch = "wasm32")]
    {
        items.iter().map(f).collect()
    }
    #[cfg(not(target_arch = "wasm32"))]
    {
        let f = &f;
        std::thread::scope(|scope| {
            let handles: Vec<_> = items.iter().map(|x| scope.spawn(move || f(x))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}
