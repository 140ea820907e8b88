//! The genetic search reaches the exhaustive optimum on small pools.

mod checks;

#[test]
fn matches_exhaustive_search_in_19_of_20_runs() {
    let v = checks::bruteforce::run();
    println!("{v}");
    assert!(v.pass, "{v:?}");
}
