//! Deterministic fan-out over independent items.
//!
//! Results are collected in item order, so the outcome is identical for any
//! thread count. `IPA_THREADS` caps parallelism (default: available cores).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::Result;

/// Derive an independent stream seed from a root seed and two indices
/// (splitmix64 finalizer over the packed stream id).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ (a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        ^ (b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("IPA_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Apply `f` to every item, in parallel, preserving item order in the output.
pub fn try_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    let threads = thread_cap().min(items.len().max(1));
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<U>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("slot lock").get_mut(i).map(|s| *s = Some(r));
            });
        }
    });
    let collected = slots.into_inner().expect("slot lock");
    collected
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = try_map(&items, |i, &v| {
            assert_eq!(i, v);
            Ok(v * 2)
        })
        .unwrap();
        assert_eq!(out, (0..100).map(|v| v * 2).collect::<Vec<_>>());
    }

    #[test]
    fn propagates_errors() {
        let items = vec![1, 2, 3];
        let res: Result<Vec<i32>> = try_map(&items, |_, &v| {
            if v == 2 {
                Err(crate::error::Error::State("boom".into()))
            } else {
                Ok(v)
            }
        });
        assert!(res.is_err());
    }
}
