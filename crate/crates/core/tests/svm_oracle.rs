//! SMO against an independent accelerated projected-gradient dual solver.

mod checks;

use evasion_core::svmcore::{train_svm, SvmConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn smo_matches_projected_gradient_oracle() {
    let v = checks::svm::run();
    println!("{v}");
    assert!(v.pass, "{v:?}");
}

#[test]
fn wider_margin_with_smaller_c() {
    // Shrinking C can only loosen the margin: ||w|| is non-increasing.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (x, y) = checks::svm::dataset(&mut rng);
        let mut prev = f64::INFINITY;
        for c in [10.0, 3.0, 1.0, 0.3, 0.1] {
            let m = train_svm(
                &x,
                &y,
                &SvmConfig {
                    c,
                    ..SvmConfig::default()
                },
            )
            .unwrap();
            let norm = checks::svm::dot(&m.w, &m.w).sqrt();
            assert!(norm <= prev + 1e-4, "C={c}: {norm} > {prev}");
            prev = norm;
        }
    }
}
