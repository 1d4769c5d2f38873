//! Peak heap while bulk scoring must not grow with the number of comments.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use commentwatch::ensemble::classify_corpus;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

fn peak_while_scoring(n: usize) -> usize {
    let spec = common::tiny_ensemble(11);
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let summary = classify_corpus(&spec, (0..n).map(|i| Ok(common::comment(i))), std::io::sink()).unwrap();
    assert_eq!(summary.total, n);
    PEAK.load(Ordering::Relaxed) - base
}

#[test]
fn scoring_memory_is_bounded_by_chunk_not_corpus() {
    let small = peak_while_scoring(20_000);
    let large = peak_while_scoring(160_000);
    assert!(
        (large as f64) < 1.5 * small as f64,
        "peak heap grew from {small} to {large} bytes for 8x the comments"
    );
}
