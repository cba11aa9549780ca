use std::io::Write;
use std::path::PathBuf;

use romassim::harness::validate::{run_suite, Suite, TITLES};

// Writes through the raw handle so the report survives libtest output capture.
fn report(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

#[test]
fn acceptance_criteria() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let work = tempfile::tempdir().unwrap();
    let outcomes = run_suite(Suite::Full, &root.join("benchmarks"), work.path(), |o| report(&o.to_string()));
    assert_eq!(outcomes.len(), TITLES.len());
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    report(&format!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
