//! Byte-counting global allocator for scratch-memory contracts.
//!
//! Binaries and test targets that need allocation measurements install
//! [`CountingAllocator`] as their `#[global_allocator]`; the counters are
//! thread-local so a measurement on one thread is not polluted by others.
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: psidiff::alloc_track::CountingAllocator =
//!     psidiff::alloc_track::CountingAllocator;
//! ```

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static LIVE_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
    static TOTAL_BYTES: Cell<usize> = const { Cell::new(0) };
}

/// System allocator wrapper that tracks live/peak/total bytes per thread.
pub struct CountingAllocator;

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let ptr = unsafe { System.alloc(layout) };
        if !ptr.is_null() {
            record_alloc(layout.size());
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        record_dealloc(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let new_ptr = unsafe { System.realloc(ptr, layout, new_size) };
        if !new_ptr.is_null() {
            record_dealloc(layout.size());
            record_alloc(new_size);
        }
        new_ptr
    }
}

fn record_alloc(size: usize) {
    LIVE_BYTES.with(|c| {
        let live = c.get() + size;
        c.set(live);
        PEAK_BYTES.with(|p| {
            if live > p.get() {
                p.set(live);
            }
        });
    });
    TOTAL_BYTES.with(|t| t.set(t.get().saturating_add(size)));
}

fn record_dealloc(size: usize) {
    LIVE_BYTES.with(|c| c.set(c.get().saturating_sub(size)));
}

/// True once the counting allocator has served at least one allocation,
/// i.e. it is actually installed in this binary.
pub fn is_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Reset this thread's peak/total counters (live bytes are left alone so
/// pre-existing allocations do not skew the accounting).
pub fn reset_thread_counters() {
    LIVE_BYTES.with(|c| {
        let live = c.get();
        PEAK_BYTES.with(|p| p.set(live));
    });
    TOTAL_BYTES.with(|t| t.set(0));
}

/// Peak live bytes on this thread since the last reset.
pub fn thread_peak_bytes() -> usize {
    let base = LIVE_BYTES.with(Cell::get);
    let peak = PEAK_BYTES.with(Cell::get);
    peak.saturating_sub(base.min(peak))
}

/// Total bytes allocated on this thread since the last reset.
pub fn thread_total_bytes() -> usize {
    TOTAL_BYTES.with(Cell::get)
}

/// Run `f` and report `(result, peak_delta_bytes, total_bytes)` for its
/// allocations on the current thread. Returns zeros when the counting
/// allocator is not installed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, usize, usize) {
    reset_thread_counters();
    let live_before = LIVE_BYTES.with(Cell::get);
    let out = f();
    let peak = PEAK_BYTES.with(Cell::get).saturating_sub(live_before);
    let total = TOTAL_BYTES.with(Cell::get);
    (out, peak, total)
}
