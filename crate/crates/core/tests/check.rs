use ascan_core::check::{all_passed, grad_suite, render, rope_suite, schedule_suite};

#[test]
fn gradient_suite_passes() {
    let rows = grad_suite().unwrap();
    println!("{}", render(&rows));
    assert!(rows.len() > 50);
    assert!(all_passed(&rows), "{}", render(&rows));
}

#[test]
fn schedule_suite_passes() {
    let rows = schedule_suite().unwrap();
    assert!(all_passed(&rows), "{}", render(&rows));
}

#[test]
fn rope_suite_passes() {
    let rows = rope_suite().unwrap();
    assert!(all_passed(&rows), "{}", render(&rows));
}

#[test]
fn suites_are_deterministic() {
    assert_eq!(render(&rope_suite().unwrap()), render(&rope_suite().unwrap()));
}
