use hympc::registry;
use hympc::solver::kkt_residual;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn references_are_stationary_on_random_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for name in registry::NAMES {
        let ex = registry::get(name).unwrap();
        let Some(reference) = ex.reference else {
            continue;
        };
        let (lo, hi) = ex.domain;
        for _ in 0..20 {
            let x: f64 = rng.gen_range(lo..hi);
            let z = reference(x);
            let r = kkt_residual(&ex.problem, &z, &DVector::from_element(1, x)).unwrap();
            assert!(r <= 1e-9, "{name} at x = {x}: residual {r:e}");
        }
        checked += 1;
    }
    assert!(checked >= 5);
}

#[test]
fn registry_lookup() {
    for name in registry::NAMES {
        let ex = registry::get(name).unwrap();
        assert_eq!(ex.name, name);
        assert!(ex.domain.0 < ex.domain.1);
    }
    assert!(registry::get("missing").is_none());
}
