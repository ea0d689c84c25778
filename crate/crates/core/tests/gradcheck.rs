use nowcast::gradcheck::{run_suite, DEFAULT_INSTANCES, TOLERANCE};

#[test]
fn full_suite_passes_in_double_precision() {
    let results = run_suite(DEFAULT_INSTANCES, 2024).unwrap();
    for r in &results {
        println!("{:<24} {:>3} instances  max rel err {:.3e}", r.name, r.instances, r.max_rel_err);
    }
    for r in &results {
        assert!(r.max_rel_err < TOLERANCE, "{} failed: {:e}", r.name, r.max_rel_err);
        assert!(r.instances >= 20);
    }
}
