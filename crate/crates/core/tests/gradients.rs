use esm_stereo::gradsuite::run_grad_suite;

#[test]
fn twenty_seeds_per_case() {
    let reports = run_grad_suite(20, None, |r| println!("{:<22} max rel err {:.2e} {:.2}s", r.name, r.max_rel_err, r.seconds));
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| (r.name, r.failures.clone())).collect();
    assert!(failed.is_empty(), "{failed:?}");
}
