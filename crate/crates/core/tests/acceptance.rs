//! Runs every acceptance criterion, prints one line per criterion and fails
//! if any of them fails.

mod common;

use std::panic::{self, AssertUnwindSafe};

use common::Check;

type Criterion = (&'static str, fn() -> Check);

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("retrieval matches brute force", common::criterion_retrieval),
        ("golden prompts", common::criterion_goldens),
        ("aligner sentences", common::criterion_aligners),
        ("macro-F1 values", common::criterion_macro_f1),
        ("deterministic grid outputs", common::criterion_determinism),
        ("semantic beats random", common::criterion_separation),
        ("uniform label space candidates", common::criterion_uniform_audit),
        ("token budget", common::criterion_budget),
        ("offline replay", common::criterion_replay),
    ];
    let mut failed = Vec::new();
    for (n, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|payload| {
            let message = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {message}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", n + 1),
            Err(detail) => {
                println!("criterion {}: FAIL {name}: {detail}", n + 1);
                failed.push(n + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
