use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::CliError;

pub const THREADS_VAR: &str = "DA_DETECT_THREADS";

/// Concurrent job cap from `DA_DETECT_THREADS`; 1 when unset.
pub fn job_threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Runs `f(0..n)` on up to `threads` worker threads. Results come back in
/// job order whatever the scheduling, and each job owns its state, so
/// outputs do not depend on the thread count.
pub fn run_jobs<T, F>(n: usize, threads: usize, f: F) -> Vec<Result<T, CliError>>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, CliError>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("job slot lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("job slot lock").into_iter().map(|r| r.expect("every job ran")).collect()
}
