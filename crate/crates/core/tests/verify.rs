use std::time::{Duration, Instant};

use locogan::verify::{verify_fresh, Status, VerifyOptions};

#[test]
fn fresh_reference_model_passes_within_budget() {
    let start = Instant::now();
    let report = verify_fresh(&VerifyOptions::default()).unwrap();
    let elapsed = start.elapsed();
    assert!(report.passed(), "{report}");
    assert!(elapsed < Duration::from_secs(300), "verify took {elapsed:?}");
    for name in ["shape_law", "footprint", "equivariance", "stitching", "periodicity", "spectral", "determinism"] {
        let check = report.check(name).unwrap_or_else(|| panic!("no {name} check"));
        assert_eq!(check.status, Status::Pass, "{check}");
        assert!(check.value <= check.tolerance, "{check}");
    }
    let text = report.to_string();
    assert_eq!(text.lines().filter(|l| l.starts_with("check=")).count(), 7);
    assert_eq!(text.lines().last(), Some("result=pass failures=none"));
}
