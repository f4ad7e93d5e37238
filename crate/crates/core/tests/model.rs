use glab::checkpoint::{self, Record};
use glab::data::synth_dataset;
use glab::error::Error;
use glab::model::{build_mlp, build_small_cnn, small_cnn, Activation, Batch, Model};
use glab_autodiff::Tensor;
use proptest::prelude::*;

fn batch_for(model: &Model, n: usize, seed: u64) -> Batch {
    let shape = model.input_shape();
    let len: usize = shape.iter().product();
    let x: Vec<f64> = (0..n * len).map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 1000.0).collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let labels = (0..n).map(|i| (i + seed as usize) % model.num_outputs()).collect();
    Batch::new(Tensor::new(x, &full).unwrap(), labels).unwrap()
}

/// Max relative error between the analytic parameter gradient and central
/// differences of the loss.
fn fd_error(model: &Model, batch: &Batch) -> f64 {
    let (_, g) = model.gradient(batch).unwrap();
    let theta = model.param_vector();
    let flat = theta.flatten();
    let analytic = g.flatten();
    let h = 1e-5;
    let loss_at = |v: &[f64]| {
        let mut m = model.clone();
        m.set_param_vector(&glab_autodiff::GradientVector::from_flat(v, &theta).unwrap()).unwrap();
        m.loss(batch).unwrap().item().unwrap()
    };
    let mut worst = 0.0f64;
    let stride = (flat.len() / 150).max(1);
    for i in (0..flat.len()).step_by(stride) {
        let mut p = flat.clone();
        p[i] += h;
        let up = loss_at(&p);
        p[i] -= 2.0 * h;
        let down = loss_at(&p);
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / (fd.abs().max(analytic[i].abs()).max(1e-6));
        worst = worst.max(err);
    }
    worst
}

#[test]
fn small_cnn_gradients_match_finite_differences() {
    for act in [Activation::Sigmoid, Activation::Relu] {
        let m = build_small_cnn([3, 8, 8], 4, 1, act, 3).unwrap();
        let err = fd_error(&m, &batch_for(&m, 2, 1));
        assert!(err < 1e-4, "{act:?}: {err}");
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let m = build_mlp(&[12, 7, 5, 3], Activation::Sigmoid, 8).unwrap();
    let err = fd_error(&m, &batch_for(&m, 3, 2));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn wide_cnn_has_scaled_channels() {
    let m = build_small_cnn([3, 16, 16], 10, 2, Activation::Relu, 0).unwrap();
    assert_eq!(m.layers()[0].weight_shape, vec![12, 3, 5, 5]);
    assert_eq!(m.layers()[1].weight_shape, vec![32, 12, 5, 5]);
    assert_eq!(m.layers()[2].weight_shape, vec![32 * 4 * 4, 10]);
    assert!(build_small_cnn([3, 16, 16], 10, 0, Activation::Relu, 0).is_err());
}

#[test]
fn init_is_bounded_by_gain_over_root_fan_in() {
    for gain in [1.0, 4.0] {
        let m = small_cnn([3, 16, 16], 10, 1, Activation::Sigmoid).unwrap().init_gain(gain).build(5).unwrap();
        for l in m.layers() {
            let fan_in: usize = l.weight_shape.iter().product::<usize>() / l.bias.len();
            let bound = gain / (fan_in as f64).sqrt();
            assert!(l.weight.iter().chain(&l.bias).all(|v| v.abs() <= bound));
            // U(-b, b) has variance b²/3.
            let var = l.weight.iter().map(|v| v * v).sum::<f64>() / l.weight.len() as f64;
            assert!((var / (bound * bound / 3.0) - 1.0).abs() < 0.25, "variance ratio {}", var / (bound * bound / 3.0));
        }
    }
    assert!(small_cnn([3, 16, 16], 10, 1, Activation::Sigmoid).unwrap().init_gain(0.0).build(0).is_err());
}

#[test]
fn init_is_seeded() {
    let a = build_small_cnn([3, 16, 16], 10, 1, Activation::Relu, 1).unwrap();
    let b = build_small_cnn([3, 16, 16], 10, 1, Activation::Relu, 1).unwrap();
    let c = build_small_cnn([3, 16, 16], 10, 1, Activation::Relu, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bad_input_shape_names_layer_one() {
    let m = build_small_cnn([3, 16, 16], 10, 1, Activation::Relu, 0).unwrap();
    let x = Tensor::zeros(&[1, 1, 16, 16]);
    assert!(matches!(m.forward(&x), Err(Error::Shape { layer: 1, .. })));
}

#[test]
fn accuracy_counts_argmax_hits() {
    let m = build_mlp(&[2, 2], Activation::None, 0).unwrap();
    let mut m = m;
    m.layers_mut()[0].weight = vec![1.0, 0.0, 0.0, 1.0];
    m.layers_mut()[0].bias = vec![0.0, 0.0];
    let x = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0], &[3, 2]).unwrap();
    assert_eq!(m.predict(&x).unwrap(), vec![0, 1, 0]);
    assert!((m.accuracy(&x, &[0, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let m = build_small_cnn([3, 16, 16], 10, 1, Activation::Sigmoid, 4).unwrap();
    let dir = std::env::temp_dir().join(format!("glab-model-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.glab");
    checkpoint::save_model(&path, &m).unwrap();
    let back = checkpoint::load_model(&path).unwrap();
    assert_eq!(back, m);
    let ds = synth_dataset(10, 1, 16, 16, 0).unwrap();
    let x = ds.all().inputs;
    let (a, b) = (m.forward(&x).unwrap(), back.forward(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn checkpoint_header_layout() {
    let m = build_mlp(&[2, 1], Activation::None, 0).unwrap();
    let bytes = checkpoint::encode(&checkpoint::model_records(&m));
    assert_eq!(&bytes[..4], b"GLAB");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), checkpoint::VERSION);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    let records = checkpoint::decode(&bytes).unwrap();
    assert!(matches!(&records[0], Record::Raw(t) if t.data == vec![2.0]));
}

#[test]
fn unknown_version_is_rejected() {
    let m = build_mlp(&[2, 1], Activation::None, 0).unwrap();
    let mut bytes = checkpoint::encode(&checkpoint::model_records(&m));
    bytes[4] = 99;
    assert!(checkpoint::decode(&bytes).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Softmax cross-entropy gives `p − onehot(y)` for the output bias, so a
    /// single sample has exactly one negative entry and it sits at `y`.
    #[test]
    fn single_sample_bias_gradient_has_one_negative_entry(seed in 0u64..10_000, y in 0usize..10) {
        let m = build_small_cnn([3, 8, 8], 10, 1, Activation::Sigmoid, seed).unwrap();
        let mut b = batch_for(&m, 1, seed);
        b.labels = vec![y];
        let (_, g) = m.gradient(&b).unwrap();
        let (_, bias) = m.split_slot(&g, m.num_layers() - 1);
        let neg: Vec<usize> = (0..bias.len()).filter(|&i| bias[i] < 0.0).collect();
        prop_assert_eq!(neg, vec![y]);
    }

    #[test]
    fn encode_decode_round_trips(seed in 0u64..10_000, hidden in 1usize..6) {
        let m = build_mlp(&[3, hidden, 2], Activation::Relu, seed).unwrap();
        let back = checkpoint::model_from_records(checkpoint::decode(&checkpoint::encode(&checkpoint::model_records(&m))).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}
