//! Acceptance gate: one verdict line per criterion, nonzero exit on failure.

use std::time::Instant;

use il_lab::verify::{criterion, CRITERIA};

fn main() {
    let started = Instant::now();
    // Criteria are independent; run them side by side and report in order.
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = CRITERIA
            .iter()
            .map(|(id, _)| {
                s.spawn(move || {
                    let t = Instant::now();
                    (criterion(*id), t.elapsed())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("criterion thread"))
            .collect()
    });
    let mut failed = 0;
    for (result, took) in &results {
        println!("{result} ({:.1}s)", took.as_secs_f64());
        failed += usize::from(!result.passed);
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
