use super::*;
use proptest::prelude::*;
use rand::Rng;

fn input(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..NUM_AUS).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Independent forward pass with plain loops.
fn naive_forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = m.weights().len() - 1;
    for (l, (w, b)) in m.weights().iter().zip(m.biases()).enumerate() {
        let mut z = vec![0.0; w.nrows()];
        for r in 0..w.nrows() {
            z[r] = b[r] + (0..w.ncols()).map(|c| w[(r, c)] * a[c]).sum::<f64>();
        }
        a = if l < last {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z
        };
    }
    a
}

fn toy_pairs(n: usize, seed: u64) -> Vec<DatasetPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| DatasetPair {
            aus: (0..NUM_AUS).map(|_| rng.gen_range(0.0..1.0)).collect(),
            activations: (0..NUM_OUTPUTS).map(|_| rng.gen_range(0.0..1.0)).collect(),
        })
        .collect()
}

#[test]
fn parameter_counts() {
    let m = init_mlp(1);
    assert_eq!(m.weight_count(), 37_300);
    assert_eq!(m.bias_count(), 456);
    assert_eq!(17 * 100 + 3 * 100 * 100 + 100 * 56, NUM_WEIGHTS);
}

#[test]
fn initialization_is_seeded() {
    assert_eq!(init_mlp(3), init_mlp(3));
    assert_ne!(init_mlp(3).weights(), init_mlp(4).weights());
}

#[test]
fn zero_network_outputs_zero() {
    let m = init_mlp(1).zeroed();
    assert!(m.forward(&input(0)).unwrap().iter().all(|&y| y == 0.0));
}

#[test]
fn forward_matches_naive_loops() {
    for seed in 0..20 {
        let m = init_mlp(seed);
        let x = input(seed + 100);
        let a = m.forward(&x).unwrap();
        let b = naive_forward(&m, &x);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }
    }
}

#[test]
fn deeper_negative_preactivation_stays_off() {
    let mut m = init_mlp(5);
    let x = input(9);
    let z = m.weights()[0].clone() * DVector::from_column_slice(&x) + m.biases()[0].clone();
    let k = z.iter().position(|v| *v < 0.0).expect("some unit is off");
    let before = m.forward(&x).unwrap();
    m.biases[0][k] -= 10.0;
    assert_eq!(m.forward(&x).unwrap(), before);
}

#[test]
fn wrong_input_size_is_rejected() {
    assert!(matches!(init_mlp(1).forward(&[0.0; 3]), Err(Error::Dimension { .. })));
}

#[test]
fn batch_prediction_equals_rows() {
    let m = init_mlp(2);
    let xs: Vec<Vec<f64>> = (0..5).map(input).collect();
    let batch = m.predict_batch(&xs).unwrap();
    for (x, y) in xs.iter().zip(&batch) {
        assert_eq!(&m.predict(x).unwrap(), y);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let m = init_mlp(11);
    let x = DMatrix::from_fn(NUM_AUS, 3, |r, c| ((r * 7 + c * 3) % 10) as f64 / 10.0 + 0.013);
    let t = DMatrix::from_fn(NUM_OUTPUTS, 3, |r, c| ((r + c) % 5) as f64 / 5.0);
    assert!(m.min_hidden_margin(&x) > 1e-4);
    let (_, g) = m.loss_and_gradient(&x, &t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for layer in 0..5 {
        for bias in [false, true] {
            let w = &m.weights()[layer];
            let p = ParamRef {
                layer,
                bias,
                row: rng.gen_range(0..w.nrows()),
                col: rng.gen_range(0..w.ncols()),
            };
            let num = m.numeric_derivative(&x, &t, p, 1e-5).unwrap();
            let ana = g.get(p);
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(rel < 1e-4, "{p:?}: {ana} vs {num}");
        }
    }
}

#[test]
fn toy_set_is_overfit() {
    let data = toy_pairs(10, 1);
    let x = DMatrix::from_fn(NUM_AUS, 10, |i, j| data[j].aus[i]);
    let t = DMatrix::from_fn(NUM_OUTPUTS, 10, |i, j| data[j].activations[i]);
    let mut m = init_mlp(1);
    let before = m.loss(&x, &t).unwrap();
    let c = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let after = m.train(&data, &c).unwrap().final_loss();
    assert!(after * 100.0 <= before, "{before} -> {after}");
}

#[test]
fn training_is_reproducible() {
    let data = toy_pairs(40, 2);
    let c = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let (mut a, mut b) = (init_mlp(3), init_mlp(3));
    assert_eq!(a.train(&data, &c).unwrap(), b.train(&data, &c).unwrap());
    assert_eq!(a, b);
}

#[test]
fn divergence_is_reported() {
    let mut data = toy_pairs(4, 3);
    data[0].aus[0] = 1e300;
    let err = init_mlp(1).train(&data, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(init_mlp(1).train(&[], &TrainConfig::default()).is_err());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let mut m = init_mlp(8);
    let mut table = NormalizationTable::raw_scale();
    table.min[3] = 0.25;
    m.normalization = Some(table.clone());
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.normalization, Some(table));
    assert_eq!(back.seed(), 8);
    let x = input(1);
    assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn corrupted_files_are_rejected() {
    let bytes = init_mlp(1).to_bytes();
    let mut header = bytes.clone();
    header[0] = b'X';
    assert!(Mlp::from_bytes(&header).is_err());
    let mut body = bytes.clone();
    body[100] ^= 1;
    assert!(Mlp::from_bytes(&body).is_err());
    assert!(Mlp::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn non_standard_dims_fail_to_load_as_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.bin");
    save_model(&Mlp::new(&[17, 4, 56], 0).unwrap(), &path).unwrap();
    assert!(load_model(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn predictions_are_clamped(xs in prop::collection::vec(-50.0f64..50.0, NUM_AUS), seed in 0u64..1000) {
        let y = init_mlp(seed).predict(&xs).unwrap();
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
