mod common;

use std::time::Instant;

use common::gradsuite::{run, suite, INSTANCES};

#[test]
fn every_operation_passes_finite_differences() {
    let mut failures = Vec::new();
    for (name, check) in suite() {
        let t = Instant::now();
        let worst = run(check);
        println!("{name:<28} worst {worst:.2e} over {INSTANCES} cases ({:.2?})", t.elapsed());
        if !(worst < 1e-3) {
            failures.push(format!("{name}: {worst:e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
