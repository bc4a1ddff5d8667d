use chainboost::verify::{parse_selector, run_suite, Suite};

fn assert_suite(s: Suite) {
    let r = run_suite(s).unwrap();
    for c in &r.checks {
        eprintln!("[{}] {} {}: {}", s, if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
    }
    eprintln!("{s}: {:.1}s", r.seconds);
    assert!(r.passed());
}

#[test]
fn grad_suite_passes() {
    assert_suite(Suite::Grad);
}

#[test]
fn remainder_suite_passes() {
    assert_suite(Suite::Remainder);
}

#[test]
fn mse_suite_passes() {
    assert_suite(Suite::Mse);
}

#[test]
fn sched_suite_passes() {
    assert_suite(Suite::Sched);
}

#[test]
fn descent_suite_passes() {
    assert_suite(Suite::Descent);
}

#[test]
fn selector_parsing() {
    assert_eq!(parse_selector("all").unwrap().len(), 5);
    assert_eq!(parse_selector("mse").unwrap(), vec![Suite::Mse]);
    assert!(parse_selector("bogus").is_err());
    assert_eq!("sched".parse::<Suite>().unwrap(), Suite::Sched);
    assert!("all".parse::<Suite>().is_err());
}
