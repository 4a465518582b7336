//! Heap use of tiled stepping against the plan. Kept in its own binary so
//! the counting allocator only sees this test.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use m3dnca::inference::{memory_plan_with_steps, step_tiled};
use m3dnca::nca::ModelConfig;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

#[test]
fn tiled_step_stays_within_the_plan() {
    let cfg = ModelConfig::standard();
    let model = common::randomized_model(&cfg, 1);
    let ext = [64, 64, 64];
    let c = cfg.channels;
    let cur: Vec<f32> = (0..c * 64 * 64 * 64).map(|i| (i % 97) as f32 / 97.0).collect();
    let mut next = vec![0.0f32; cur.len()];
    for budget in [600_000, 1_500_000, 6_000_000] {
        let plan = memory_plan_with_steps(ext, &cfg, budget, &[8, 8]).unwrap();
        let level = &plan.levels[1];
        let base = CURRENT.load(Ordering::SeqCst);
        PEAK.store(base, Ordering::SeqCst);
        step_tiled(&cur, &mut next, level.extents, &model.levels[1], plan.tile, 1, 0, 3, 0.5).unwrap();
        let used = PEAK.load(Ordering::SeqCst) - base;
        eprintln!("budget {budget}: tile {:?} estimate {} measured {used}", plan.tile, level.buffer_bytes);
        assert!(used <= level.buffer_bytes, "measured {used} over estimate {}", level.buffer_bytes);
        assert!(
            level.buffer_bytes as f64 <= 1.5 * used as f64,
            "estimate {} is loose against {used}",
            level.buffer_bytes
        );
        assert!(plan.estimated_peak_bytes <= budget);
    }
}
