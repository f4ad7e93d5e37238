use glab::data::synth_dataset;
use glab::defenses::{
    apply_defense, clip_global, dp_perturb, gq_quantize, layer_noise, prune_with_theta, soteria_defense, soteria_scores, DefenseConfig,
    DefenseKind, PruneStrategy,
};
use glab::model::{build_mlp, build_small_cnn, Activation};
use glab_autodiff::GradientVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gv(seed: u64, sizes: &[usize]) -> GradientVector {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    GradientVector::new(
        sizes
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                    })
                    .collect()
            })
            .collect(),
    )
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

#[test]
fn gaussian_noise_has_requested_std() {
    let g = GradientVector::new(vec![vec![0.0; 20_000], vec![0.0; 20_000]]);
    let out = dp_perturb(&g, DefenseKind::DpGaussian, 0.3, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (mean, var) = moments(&out.flatten());
    assert!(mean.abs() < 0.01);
    assert!((var.sqrt() - 0.3).abs() < 0.005, "std {}", var.sqrt());
}

#[test]
fn laplace_noise_has_twice_scale_squared_variance() {
    let g = GradientVector::new(vec![vec![0.0; 40_000]]);
    let out = dp_perturb(&g, DefenseKind::DpLaplace, 0.2, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (mean, var) = moments(&out.flatten());
    assert!(mean.abs() < 0.01);
    assert!((var - 2.0 * 0.04).abs() < 0.004, "variance {var}");
    // Median of |X| for Laplace(b) is b·ln 2.
    let mut abs: Vec<f64> = out.flatten().iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    assert!((abs[abs.len() / 2] - 0.2 * 2f64.ln()).abs() < 0.005);
}

#[test]
fn dp_rejects_nonpositive_magnitude() {
    let g = gv(0, &[4]);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert!(dp_perturb(&g, DefenseKind::DpGaussian, 0.0, 1.0, &mut r).is_err());
    assert!(dp_perturb(&g, DefenseKind::DpGaussian, 0.1, 0.0, &mut r).is_err());
    assert!(dp_perturb(&g, DefenseKind::Gq, 0.1, 1.0, &mut r).is_err());
}

#[test]
fn one_bit_quantization_keeps_sign_and_layer_max() {
    let g = GradientVector::new(vec![vec![0.3, -0.1, 0.05, -0.4], vec![0.0, 0.0]]);
    let q = gq_quantize(&g, 1).unwrap();
    assert_eq!(q.layers()[0], vec![0.4, -0.4, 0.4, -0.4]);
    assert_eq!(q.layers()[1], vec![0.0, 0.0]);
    assert!(gq_quantize(&g, 0).is_err());
    assert!(gq_quantize(&g, 29).is_err());
}

#[test]
fn soteria_touches_only_final_layer_rows() {
    let ds = synth_dataset(10, 1, 16, 16, 0).unwrap();
    let m = build_small_cnn([3, 16, 16], 10, 1, Activation::Relu, 2).unwrap();
    let b = ds.batch(&[0, 3]);
    let (_, g) = m.gradient(&b).unwrap();
    let out = soteria_defense(&m, &b, &g, 0.25).unwrap();
    assert_eq!(out.layers()[..2], g.layers()[..2]);
    let last = m.num_layers() - 1;
    let (w, _) = m.split_slot(&out, last);
    let (w0, _) = m.split_slot(&g, last);
    let features = m.final_fan_in();
    let scores = soteria_scores(&m, &b).unwrap();
    let mut order: Vec<usize> = (0..features).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let pruned = &order[..features / 4];
    for f in 0..features {
        let row = &w[f * 10..(f + 1) * 10];
        if pruned.contains(&f) {
            assert!(row.iter().all(|v| *v == 0.0));
        } else {
            assert_eq!(row, &w0[f * 10..(f + 1) * 10]);
        }
    }
    let (_, bias) = m.split_slot(&out, last);
    assert_eq!(bias, m.split_slot(&g, last).1);
}

#[test]
fn soteria_scores_with_dense_representation() {
    // With a dense representation layer a feature's score is computed from
    // one weight column; compare with an explicit finite-difference score.
    let m = build_mlp(&[6, 4, 3], Activation::Sigmoid, 5).unwrap();
    let x = glab_autodiff::Tensor::new((0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect(), &[2, 6]).unwrap();
    let batch = glab::model::Batch::new(x.clone(), vec![0, 2]).unwrap();
    let scores = soteria_scores(&m, &batch).unwrap();
    assert_eq!(scores.len(), 4);
    let l = &m.layers()[0];
    let rep = |xs: &[f64], f: usize| -> f64 {
        xs.chunks(6)
            .map(|row| {
                let z: f64 = row.iter().enumerate().map(|(i, v)| v * l.weight[i * 4 + f]).sum::<f64>() + l.bias[f];
                1.0 / (1.0 + (-z).exp())
            })
            .collect::<Vec<_>>()
            .iter()
            .sum()
    };
    for (f, &score) in scores.iter().enumerate() {
        let base = x.to_vec();
        let mut sens = 0.0;
        for i in 0..base.len() {
            let (mut up, mut dn) = (base.clone(), base.clone());
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let d = (rep(&up, f) - rep(&dn, f)) / 2e-6;
            sens += d * d;
        }
        let mag: f64 = base
            .chunks(6)
            .map(|row| {
                let z: f64 = row.iter().enumerate().map(|(i, v)| v * l.weight[i * 4 + f]).sum::<f64>() + l.bias[f];
                (1.0 / (1.0 + (-z).exp())).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        let want = sens.sqrt() / mag;
        assert!((score - want).abs() < 1e-6 * want.max(1.0), "feature {f}: {score} vs {want}");
    }
}

#[test]
fn layer_noise_changes_one_layer_within_bounds() {
    let g = gv(3, &[50, 40, 30]);
    let out = layer_noise(&g, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.layers()[0], g.layers()[0]);
    assert_eq!(out.layers()[2], g.layers()[2]);
    assert!(out.layers()[1].iter().zip(&g.layers()[1]).all(|(a, b)| (a - b).abs() <= 0.1 && a != b));
    assert!(layer_noise(&g, 0, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(layer_noise(&g, 4, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert_eq!(layer_noise(&g, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), g);
}

#[test]
fn defense_names_parse_and_print() {
    for s in ["none", "refiner", "dp_gaussian", "dp_laplace", "gq", "prune", "prune_grad", "prune_weight", "soteria", "layer_noise:3"] {
        let k: DefenseKind = s.parse().unwrap();
        assert_eq!(k.to_string(), s);
    }
    assert_eq!("dp".parse::<DefenseKind>().unwrap(), DefenseKind::DpGaussian);
    assert!("layer_noise:0".parse::<DefenseKind>().is_err());
    assert!("fancy".parse::<DefenseKind>().is_err());
}

#[test]
fn strengths_are_validated_per_kind() {
    let bad = [
        (DefenseKind::Gq, 2.5),
        (DefenseKind::Gq, 0.0),
        (DefenseKind::Prune(PruneStrategy::Grad), 1.0),
        (DefenseKind::Soteria, 0.0),
        (DefenseKind::DpGaussian, -1.0),
        (DefenseKind::Refiner, 0.0),
        (DefenseKind::LayerNoise(1), f64::INFINITY),
    ];
    for (k, s) in bad {
        assert!(DefenseConfig::new(k, s).validate().is_err(), "{k} {s}");
    }
    assert!(DefenseConfig::new(DefenseKind::Gq, 8.0).validate().is_ok());
}

#[test]
fn defenses_are_pure_functions_of_seed() {
    let ds = synth_dataset(10, 1, 16, 16, 0).unwrap();
    let m = build_small_cnn([3, 16, 16], 10, 1, Activation::Sigmoid, 0).unwrap();
    let b = ds.batch(&[1]);
    let (_, g) = m.gradient(&b).unwrap();
    for (kind, s) in [
        (DefenseKind::DpGaussian, 0.01),
        (DefenseKind::DpLaplace, 0.01),
        (DefenseKind::Gq, 4.0),
        (DefenseKind::Prune(PruneStrategy::WeightGradProduct), 0.5),
        (DefenseKind::Soteria, 0.5),
        (DefenseKind::LayerNoise(1), 0.1),
    ] {
        let cfg = DefenseConfig { seed: 7, ..DefenseConfig::new(kind, s) };
        let a = apply_defense(&cfg, &m, None, &b, &g, &[1, 2]).unwrap().upload;
        let again = apply_defense(&cfg, &m, None, &b, &g, &[1, 2]).unwrap().upload;
        assert!(a.iter().zip(again.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{kind}");
    }
    let cfg = DefenseConfig::new(DefenseKind::Refiner, 0.1);
    assert!(apply_defense(&cfg, &m, None, &b, &g, &[]).is_err());
}

proptest! {
    #[test]
    fn pruning_zeroes_lowest_scores_and_keeps_the_rest(seed in 0u64..10_000, ratio in 0.0f64..0.99, strat in 0usize..3) {
        let strategy = [PruneStrategy::Grad, PruneStrategy::Weight, PruneStrategy::WeightGradProduct][strat];
        let g = gv(seed, &[13, 7, 20]);
        let theta = gv(seed + 1, &[13, 7, 20]);
        let out = prune_with_theta(&g, &theta, ratio, strategy).unwrap();
        let (fg, ft, fo) = (g.flatten(), theta.flatten(), out.flatten());
        let score = |i: usize| match strategy {
            PruneStrategy::Grad => fg[i].abs(),
            PruneStrategy::Weight => ft[i].abs(),
            PruneStrategy::WeightGradProduct => (fg[i] * ft[i]).abs(),
        };
        let k = (ratio * fg.len() as f64).floor() as usize;
        // Brute force: index i is pruned iff fewer than k indices rank below it.
        for i in 0..fg.len() {
            let rank = (0..fg.len()).filter(|&j| score(j) < score(i) || (score(j) == score(i) && j < i)).count();
            if rank < k {
                prop_assert_eq!(fo[i], 0.0);
            } else {
                prop_assert_eq!(fo[i].to_bits(), fg[i].to_bits());
            }
        }
    }

    #[test]
    fn quantized_values_are_levels_within_half_step(seed in 0u64..10_000, bits in 1u32..12) {
        let g = gv(seed, &[17, 9]);
        let q = gq_quantize(&g, bits).unwrap();
        for (orig, quant) in g.layers().iter().zip(q.layers()) {
            let m = orig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let step = 2.0 * m / ((1u64 << bits) as f64 - 1.0);
            for (a, b) in orig.iter().zip(quant) {
                let level = (b + m) / step;
                prop_assert!((level - level.round()).abs() < 1e-9);
                prop_assert!((a - b).abs() <= step / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn clipping_bounds_the_norm(seed in 0u64..10_000, c in 0.01f64..10.0) {
        let g = gv(seed, &[30, 5]).scale(3.0);
        let out = clip_global(&g, c);
        prop_assert!(out.norm() <= c * (1.0 + 1e-12));
        if g.norm() <= c {
            prop_assert_eq!(out, g);
        }
    }
}
