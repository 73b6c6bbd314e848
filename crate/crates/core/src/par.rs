//! Thin fan-out helpers: rayon when the `parallel` feature is on,
//! plain iteration otherwise. Output order matches input order in both
//! builds, so results are identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_slice<'a, I, T, F>(items: &'a [I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&'a I) -> T + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<'a, I, T, F>(items: &'a [I], f: F) -> Vec<T>
where
    F: Fn(&'a I) -> T,
{
    items.iter().map(f).collect()
}

/// Caps the global thread pool. 0 leaves the backend default (all cores).
/// Must run before the first fan-out; later calls are ignored, which is
/// fine for a once-per-process CLI flag.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) {}

/// Label for report/bench output so runs of the two builds can be told apart.
pub fn backend_name() -> &'static str {
    if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "serial"
    }
}
