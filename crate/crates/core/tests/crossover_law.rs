//! Parent selection frequencies against the closed-form softmax.

mod checks;

#[test]
fn ten_thousand_draws_follow_softmax() {
    let v = checks::crossover::run();
    println!("{v}");
    assert!(v.pass, "{v:?}");
}
