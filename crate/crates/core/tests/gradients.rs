use compground::config::{LossConfig, Toggles};
use compground::diagnostics::{gradient_table, model_gradient_check, random_instance, sam_gradient_check, InstanceShape};
use compground::tensor::gradcheck::FdOptions;

#[test]
fn tiny_model_matches_finite_differences() {
    let opts = FdOptions::default();
    for seed in 0..3 {
        let inst = random_instance(InstanceShape::tiny(), Toggles::default(), seed, 0.5).unwrap();
        let rep = model_gradient_check(&inst, &LossConfig::default(), &opts).unwrap();
        assert!(rep.passed(1e-3), "seed {seed}: max rel err {}", rep.max_rel_err());
        assert!(rep.checked() > 1000);
    }
}

#[test]
fn ablated_models_match_finite_differences() {
    let opts = FdOptions::default();
    let base = Toggles::default();
    let variants = [
        Toggles { vcc: false, ..base },
        Toggles { scl: false, hsa: false, ..base },
        Toggles { vcl: false, sc: false, ..base },
    ];
    for (i, t) in variants.into_iter().enumerate() {
        let inst = random_instance(InstanceShape::tiny(), t, 40 + i as u64, 0.5).unwrap();
        let rep = model_gradient_check(&inst, &LossConfig::default(), &opts).unwrap();
        assert!(rep.passed(1e-3), "variant {i}: {}", rep.max_rel_err());
    }
}

#[test]
fn margin_loss_matches_finite_differences() {
    for seed in 0..5 {
        let rep = sam_gradient_check(seed, 4, 6, &FdOptions::default()).unwrap();
        assert!(rep.passed(1e-3), "seed {seed}: {}", rep.max_rel_err());
    }
}

#[test]
fn table_covers_all_rows() {
    let rows = gradient_table(&[11], &FdOptions::default()).unwrap();
    assert!(rows.iter().any(|r| r.name == "model"));
    assert!(rows.iter().any(|r| r.name == "matmul"));
    for r in &rows {
        assert!(r.max_rel_err <= 1e-3, "{}: {}", r.name, r.max_rel_err);
    }
}
