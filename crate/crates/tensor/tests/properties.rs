use compground_tensor::{adam_step, kl_rows, softmax_rows, AdamConfig, AdamState, ParamStore, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..5, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c, -80.0, 80.0))) {
        let y = softmax_rows(&x).unwrap();
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_f32(x in (1usize..4, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c, -30.0, 30.0))) {
        let y = softmax_rows(&x.cast::<f32>()).unwrap();
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn kl_is_nonnegative(a in matrix(4, 6, -4.0, 4.0), b in matrix(4, 6, -4.0, 4.0)) {
        let p = softmax_rows(&a).unwrap();
        let q = softmax_rows(&b).unwrap();
        prop_assert!(kl_rows(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_rows(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn adam_is_pure(p in prop::collection::vec(-1.0f64..1.0, 4), g in prop::collection::vec(-3.0f64..3.0, 4)) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::<f32>::row_vector(&p));
        let grads = vec![Tensor::<f32>::row_vector(&g)];
        let state = AdamState::new(&store);
        let run = || {
            let mut s = store.clone();
            let mut st = state.clone();
            adam_step(&mut s, &grads, &mut st, &AdamConfig::default()).unwrap();
            adam_step(&mut s, &grads, &mut st, &AdamConfig::default()).unwrap();
            (s.at(0).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), st)
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn kl_nonnegative_over_a_thousand_random_rows() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut rows_p = Vec::new();
    let mut rows_q = Vec::new();
    for _ in 0..1000 {
        for _ in 0..5 {
            rows_p.push(rng.random_range(-3.0..3.0));
            rows_q.push(rng.random_range(-3.0..3.0));
        }
    }
    let p = softmax_rows(&Tensor::from_vec(1000, 5, rows_p).unwrap()).unwrap();
    let q = softmax_rows(&Tensor::from_vec(1000, 5, rows_q).unwrap()).unwrap();
    for r in 0..1000 {
        let pr = Tensor::<f64>::from_vec(1, 5, p.row(r).to_vec()).unwrap();
        let qr = Tensor::<f64>::from_vec(1, 5, q.row(r).to_vec()).unwrap();
        assert!(kl_rows(&pr, &qr).unwrap() >= 0.0);
    }
}

#[test]
fn f32_json_round_trip_is_exact() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let vals: Vec<f32> = (0..20000)
        .map(|_| {
            let m: f32 = rng.random_range(-1.0..1.0);
            m * 10f32.powi(rng.random_range(-8..4))
        })
        .collect();
    let t = Tensor::<f32>::from_vec(1, vals.len(), vals).unwrap();
    let back: Tensor<f32> = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&t));
}
