//! Heap traffic of shared-memory publishing, measured by a counting allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

use rio::clock;
use rio::middleware::{open_backend, BackendKind};
use rio_core::schema::payload;
use rio_core::schema::infer_schema;
use rio_core::{TimedSample, Value};

struct Counting;

static BYTES: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
}

// SAFETY: forwards to the system allocator and only adds bookkeeping.
unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if ACTIVE.with(Cell::get) {
            BYTES.fetch_add(layout.size(), Ordering::Relaxed);
        }
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if ACTIVE.with(Cell::get) {
            BYTES.fetch_add(new_size, Ordering::Relaxed);
        }
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Bytes allocated on this thread by `n` publishes of `size`-byte samples,
/// after a warm-up.
fn publish_bytes(size: usize, n: usize) -> usize {
    let ns = format!("alloc-{}-{size}", std::process::id());
    let b = open_backend(&BackendKind::Shm { namespace: ns }).unwrap();
    let example = payload([("blob", Value::u8_array(&[size], vec![0; size]))]);
    let schema = infer_schema(&example).unwrap();
    let mut publisher = b.publisher("alloc/blob", &schema, 8).unwrap();
    let warmup = 16;
    let samples: Vec<TimedSample> = (0..warmup + n)
        .map(|i| TimedSample::new(clock::now(), payload([("blob", Value::u8_array(&[size], vec![i as u8; size]))])))
        .collect();
    for s in &samples[..warmup] {
        publisher.publish(s).unwrap();
    }
    BYTES.store(0, Ordering::SeqCst);
    ACTIVE.with(|a| a.set(true));
    for s in &samples[warmup..] {
        publisher.publish(s).unwrap();
    }
    ACTIVE.with(|a| a.set(false));
    let used = BYTES.load(Ordering::SeqCst);
    b.close();
    used
}

#[test]
fn shm_publish_allocation_does_not_scale_with_payload() {
    let n = 200;
    let small = publish_bytes(256, n);
    let large = publish_bytes(64 * 1024, n);
    println!("allocated over {n} publishes: 256 B -> {small} bytes, 64 KiB -> {large} bytes");
    // a copy per publish would be at least n * 64 KiB
    assert!(large < n * 64 * 1024 / 100, "{large} bytes allocated");
    assert!(large <= small + 4096, "small {small}, large {large}");
}
