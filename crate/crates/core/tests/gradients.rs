use mcw2v_core::gradcheck::{check_module, relative_error, MODULES, TOLERANCE};

#[test]
fn every_module_matches_finite_differences() {
    for seed in [0, 1] {
        for name in MODULES {
            let r = check_module(name, seed).unwrap();
            println!("{name:<18} seed {seed}: max rel err {:.3e} over {} coords", r.max_rel_err, r.coordinates);
            assert!(r.coordinates > 0);
            assert!(r.max_rel_err <= TOLERANCE, "{name}: {}", r.max_rel_err);
        }
    }
}

#[test]
fn relative_error_is_symmetric() {
    assert_eq!(relative_error(2.0, 3.0), relative_error(3.0, 2.0));
}
