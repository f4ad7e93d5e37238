use glab::attacks::{gradient_match_attack, gradient_match_attack_from, infer_labels, matching_loss, tv_penalty, AttackConfig, MatchLoss};
use glab::data::synth_dataset;
use glab::metrics::psnr;
use glab::model::{build_mlp, build_small_cnn, Activation, Batch, Model};
use glab_autodiff::{grad, GradientVector, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn diff_grads(model: &Model, x: &Tensor, labels: &[usize]) -> Vec<Tensor> {
    let params = model.param_tensors(true);
    let loss = model.loss_with(&params, x, labels).unwrap();
    grad(&loss, &params, true).unwrap()
}

#[test]
fn tv_matches_brute_force_absolute_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (n, c, h, w) = (2, 3, 5, 4);
    let v: Vec<f64> = (0..n * c * h * w).map(|_| r.random::<f64>()).collect();
    let at = |b: usize, ch: usize, y: usize, x: usize| v[((b * c + ch) * h + y) * w + x];
    let mut want = 0.0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if y + 1 < h {
                        want += (at(b, ch, y + 1, x) - at(b, ch, y, x)).abs();
                    }
                    if x + 1 < w {
                        want += (at(b, ch, y, x + 1) - at(b, ch, y, x)).abs();
                    }
                }
            }
        }
    }
    let got = tv_penalty(&Tensor::new(v, &[n, c, h, w]).unwrap()).unwrap().item().unwrap();
    // The smoothed absolute value differs from |d| by less than ε per term.
    assert!((got - want).abs() < 1e-8 * (n * c * h * w) as f64 * 2.0, "{got} vs {want}");
    assert!(tv_penalty(&Tensor::zeros(&[2, 3])).is_err());
}

#[test]
fn matching_losses_vanish_at_the_true_input() {
    let ds = synth_dataset(10, 1, 16, 16, 0).unwrap();
    let m = build_small_cnn([3, 16, 16], 10, 1, Activation::Sigmoid, 1).unwrap();
    let b = ds.batch(&[2]);
    let (_, g) = m.gradient(&b).unwrap();
    let grads = diff_grads(&m, &b.inputs, &b.labels);
    assert!(matching_loss(MatchLoss::Euclidean, &m, &grads, &g).unwrap().item().unwrap() < 1e-24);
    assert!(matching_loss(MatchLoss::Cosine, &m, &grads, &g).unwrap().item().unwrap().abs() < 1e-12);
    let flipped = g.scale(-1.0);
    assert!((matching_loss(MatchLoss::Cosine, &m, &grads, &flipped).unwrap().item().unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn presets_and_validation() {
    for name in ["igla", "inverting_grad", "grad_inversion"] {
        let p = AttackConfig::preset(name).unwrap();
        assert_eq!(p.name, name);
        assert!(p.validate().is_ok());
    }
    assert!(AttackConfig::preset("dlg2").is_err());
    assert!(AttackConfig { restarts: 0, ..AttackConfig::igla() }.validate().is_err());
    assert!(AttackConfig { tv_weight: -1.0, ..AttackConfig::igla() }.validate().is_err());
}

#[test]
fn igla_recovers_a_small_mlp_input() {
    let m = build_mlp(&[12, 8, 4], Activation::Sigmoid, 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new((0..12).map(|_| r.random::<f64>()).collect(), &[1, 12]).unwrap();
    let (_, g) = m.gradient(&Batch::new(x.clone(), vec![1]).unwrap()).unwrap();
    let cfg = AttackConfig { restarts: 2, iterations: 200, ..AttackConfig::igla() };
    let m4 = {
        // The attack takes (n, c, h, w); view the MLP input as 1×3×4.
        let mut layers = m.layers().to_vec();
        layers[0].weight_shape = vec![12, 8];
        Model::new(vec![1, 3, 4], layers).unwrap()
    };
    let res = gradient_match_attack(&m4, &g, &cfg, [1, 1, 3, 4]).unwrap();
    assert_eq!(res.labels, vec![1]);
    assert!(!res.label_fallback);
    let p = psnr(res.x_hat.data(), x.data()).unwrap().value();
    assert!(p > 40.0, "psnr {p}");
    assert_eq!(res.restart_losses.len(), 2);
}

#[test]
fn attack_is_deterministic_and_stays_in_unit_range() {
    let ds = synth_dataset(10, 1, 16, 16, 0).unwrap();
    let m = build_small_cnn([3, 16, 16], 10, 1, Activation::Sigmoid, 2).unwrap();
    let (_, g) = m.gradient(&ds.batch(&[4])).unwrap();
    let cfg = AttackConfig { iterations: 15, restarts: 2, seed: 3, ..AttackConfig::igla() };
    let a = gradient_match_attack(&m, &g, &cfg, [1, 3, 16, 16]).unwrap();
    let b = gradient_match_attack(&m, &g, &cfg, [1, 3, 16, 16]).unwrap();
    assert_eq!(a.x_hat.data(), b.x_hat.data());
    assert!(a.x_hat.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let adam = AttackConfig { iterations: 10, ..AttackConfig::inverting_grad() };
    let c = gradient_match_attack_from(&m, &g, &adam, &ds.batch(&[5]).inputs).unwrap();
    assert_eq!(c.trace.len(), 11);
    assert!(gradient_match_attack(&m, &g, &cfg, [1, 1, 16, 16]).is_err());
}

#[test]
fn label_fallback_when_no_negative_entry() {
    let m = build_mlp(&[3, 2], Activation::None, 0).unwrap();
    let g = GradientVector::new(vec![vec![0.1; 8]]);
    let inf = infer_labels(&m, &g, 1).unwrap();
    assert!(inf.fallback && inf.labels.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_are_in_range(seed in 0u64..10_000) {
        let m = build_mlp(&[5, 4, 3], Activation::Sigmoid, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::variable((0..10).map(|_| r.random::<f64>()).collect(), &[2, 5]).unwrap();
        let grads = diff_grads(&m, &x, &[0, 2]);
        let target = GradientVector::new(m.param_vector().layers().iter().map(|l| l.iter().map(|_| r.random::<f64>() - 0.5).collect()).collect());
        let cos = matching_loss(MatchLoss::Cosine, &m, &grads, &target).unwrap().item().unwrap();
        let euc = matching_loss(MatchLoss::Euclidean, &m, &grads, &target).unwrap().item().unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&cos));
        prop_assert!(euc >= 0.0);
    }
}
