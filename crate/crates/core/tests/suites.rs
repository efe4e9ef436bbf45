use transmamba_core::verify::Suite;

fn run(suite: Suite) {
    let checks = suite.run(7).unwrap();
    for c in &checks {
        println!("{:<60} dev={:.3e} tol={:.0e} {}", c.name, c.max_dev, c.tol, if c.pass { "ok" } else { "FAIL" });
    }
    assert!(checks.iter().all(|c| c.pass), "{} suite failed", suite.name());
}

#[test]
fn duality_suite() {
    run(Suite::Duality);
}

#[test]
fn converter_suite() {
    run(Suite::Converter);
}

#[test]
fn gradients_suite() {
    run(Suite::Gradients);
}

#[test]
fn degeneracy_suite() {
    run(Suite::Degeneracy);
}

#[test]
fn cache_suite() {
    run(Suite::Cache);
}
