//! Live/peak byte accounting for tensor buffers.
//!
//! Every [`Tensor`](super::Tensor) buffer registers its byte size with a
//! thread-local counter on creation and deregisters on drop. Counters are
//! per thread, matching the rule that a tape never leaves its thread.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

fn register(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Thread-local view of tracked tensor memory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocationTracker {
    pub live_bytes: usize,
    pub peak_bytes: usize,
}

impl AllocationTracker {
    /// Current counters for this thread.
    pub fn snapshot() -> Self {
        AllocationTracker {
            live_bytes: LIVE.with(Cell::get),
            peak_bytes: PEAK.with(Cell::get),
        }
    }

    pub fn live_bytes() -> usize {
        LIVE.with(Cell::get)
    }

    pub fn peak_bytes() -> usize {
        PEAK.with(Cell::get)
    }

    /// Lowers the peak watermark to the current live count.
    pub fn reset_peak() {
        let live = LIVE.with(Cell::get);
        PEAK.with(|p| p.set(live));
    }
}

/// A measurement scope. Peak is reported relative to the live bytes at the
/// moment the scope was opened.
#[derive(Debug)]
pub struct MemoryScope {
    base_live: usize,
}

impl MemoryScope {
    pub fn begin() -> Self {
        AllocationTracker::reset_peak();
        MemoryScope {
            base_live: AllocationTracker::live_bytes(),
        }
    }

    pub fn base_live_bytes(&self) -> usize {
        self.base_live
    }

    /// Bytes allocated on top of the scope baseline at the high-water mark.
    pub fn peak_bytes(&self) -> usize {
        AllocationTracker::peak_bytes().saturating_sub(self.base_live)
    }

    /// Bytes currently live on top of the scope baseline.
    pub fn live_bytes(&self) -> usize {
        AllocationTracker::live_bytes().saturating_sub(self.base_live)
    }
}

/// A `Vec` whose length in bytes is accounted for by the tracker.
#[derive(Debug, PartialEq)]
pub(crate) struct Buffer<T> {
    data: Vec<T>,
}

impl<T> Buffer<T> {
    pub(crate) fn new(data: Vec<T>) -> Self {
        register(std::mem::size_of_val(data.as_slice()));
        Buffer { data }
    }

    pub(crate) fn into_vec(mut self) -> Vec<T> {
        let data = std::mem::take(&mut self.data);
        release(std::mem::size_of_val(data.as_slice()));
        data
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::new(self.data.clone())
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        release(std::mem::size_of_val(self.data.as_slice()));
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_returns_to_baseline() {
        let scope = MemoryScope::begin();
        {
            let a = Buffer::new(vec![0f32; 256]);
            let b = a.clone();
            assert_eq!(scope.live_bytes(), 2 * 1024);
            drop(a);
            assert_eq!(scope.live_bytes(), 1024);
            let _c = Buffer::new(vec![0f64; 16]);
            drop(b);
        }
        assert_eq!(scope.live_bytes(), 0);
        assert_eq!(scope.peak_bytes(), 2048);
    }

    #[test]
    fn peak_never_below_live() {
        let _scope = MemoryScope::begin();
        let mut held = Vec::new();
        for i in 0..20 {
            held.push(Buffer::new(vec![0u8; i * 7]));
            if i % 3 == 0 {
                held.remove(0);
            }
            let snap = AllocationTracker::snapshot();
            assert!(snap.peak_bytes >= snap.live_bytes);
        }
    }

    #[test]
    fn into_vec_releases() {
        let scope = MemoryScope::begin();
        let v = Buffer::new(vec![1u32; 10]).into_vec();
        assert_eq!(v.len(), 10);
        assert_eq!(scope.live_bytes(), 0);
    }
}
