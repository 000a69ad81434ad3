use compground_tensor::gradcheck::{finite_difference_check, primitive_suite, FdOptions};

#[test]
fn every_primitive_matches_central_differences_over_ten_seeds() {
    let opts = FdOptions::default();
    for seed in 0..10 {
        for case in primitive_suite(seed) {
            let rep = finite_difference_check(&case.f, &case.inputs, &opts)
                .unwrap_or_else(|e| panic!("{} (seed {seed}): {e}", case.name));
            assert!(
                rep.passed(opts.rel_tol),
                "{} (seed {seed}): max rel err {:.3e}",
                case.name,
                rep.max_rel_err()
            );
            assert!(rep.checked() > 0, "{} (seed {seed}) checked nothing", case.name);
        }
    }
}

#[test]
fn suite_covers_the_catalog() {
    let names: Vec<_> = primitive_suite(0).iter().map(|c| c.name).collect();
    for required in [
        "matmul",
        "add",
        "hadamard",
        "scale",
        "concat",
        "sigmoid",
        "row_softmax",
        "avg_pool",
        "max_pool",
        "transpose",
        "slice_rows",
        "broadcast_add",
        "smooth_l1",
        "kl_rows",
    ] {
        assert!(names.contains(&required), "missing {required}");
    }
}
