use glab::data::synth_dataset;
use glab::evalnet::EvalNet;
use glab::model::{build_mlp, build_small_cnn, Activation, Batch, Model};
use glab::refiner::{
    layer_weight, noise_blend_init, project_gradients, q_function_derivative, refine, ultimate_weights, utility_metric, RefinerConfig,
};
use glab_autodiff::{GradientVector, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (Model, EvalNet, Batch) {
    let ds = synth_dataset(10, 1, 16, 16, seed).unwrap();
    let m = build_small_cnn([3, 16, 16], 10, 1, Activation::Sigmoid, seed).unwrap();
    let net = EvalNet::build([3, 16, 16], [4, 8, 8], seed).unwrap();
    (m, net, ds.batch(&[0, 5]))
}

fn random_gv(r: &mut impl Rng, sizes: &[usize], scale: f64) -> GradientVector {
    GradientVector::new(sizes.iter().map(|&n| (0..n).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect()).collect())
}

#[test]
fn ultimate_weights_match_brute_force() {
    let (m, _, b) = setup(1);
    let (_, g) = m.gradient(&b).unwrap();
    let w = ultimate_weights(&g, &m, 0.9).unwrap();
    let theta = m.param_vector();
    for i in 0..g.num_layers() {
        for j in 0..g.layers()[i].len() {
            let want = (g.layers()[i][j] * theta.layers()[i][j]).abs() * 0.9f64.powi(i as i32 + 1);
            assert_eq!(w.layers()[i][j], want);
        }
    }
    assert_eq!(layer_weight(0.5, 3), 0.125);
}

#[test]
fn utility_metric_matches_explicit_weighted_distance() {
    let (m, _, b) = setup(2);
    let (_, g) = m.gradient(&b).unwrap();
    let w = ultimate_weights(&g, &m, 0.95).unwrap();
    let x_star = noise_blend_init(&b.inputs, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let um = utility_metric(&m, &x_star, &b.labels, &g, &w).unwrap().item().unwrap();
    let (_, g_star) = m.gradient(&Batch::new(x_star.clone(), b.labels.clone()).unwrap()).unwrap();
    let want: f64 = g_star.iter().zip(g.iter()).zip(w.iter()).map(|((a, t), w)| (w * (a - t)).powi(2)).sum();
    assert!((um - want).abs() <= 1e-12 * want.max(1e-30), "{um} vs {want}");
    assert!(want > 0.0);
    assert_eq!(utility_metric(&m, &b.inputs, &b.labels, &g, &w).unwrap().item().unwrap(), 0.0);
}

#[test]
fn q_function_derivative_matches_finite_difference() {
    let (m, _, b) = setup(3);
    let q = |u: f64| m.scaled(u).loss(&b).unwrap().item().unwrap();
    let h = 1e-5;
    let fd = (q(1.0 + h) - q(1.0 - h)) / (2.0 * h);
    let an = q_function_derivative(&m, &b).unwrap();
    assert!((an - fd).abs() / fd.abs().max(1e-8) < 1e-6, "{an} vs {fd}");
}

#[test]
fn degenerate_config_is_the_identity_defense() {
    let (m, net, b) = setup(4);
    let (_, g) = m.gradient(&b).unwrap();
    let cfg = RefinerConfig { alpha: 0.0, beta: 0.0, epsilon: 1e12, ..RefinerConfig::default() };
    let res = refine(&m, &net, &b, Some(&g), &cfg).unwrap();
    assert!(res.uploaded.distance(&g).unwrap() < 1e-9);
    assert_eq!(res.x_star.data(), b.inputs.data());
}

#[test]
fn refine_respects_ball_and_unit_range_and_is_deterministic() {
    let (m, net, b) = setup(5);
    let (_, g) = m.gradient(&b).unwrap();
    for eps in [1e-4, 0.01, 0.1] {
        let cfg = RefinerConfig { epsilon: eps, seed: 9, ..RefinerConfig::default() };
        let a = refine(&m, &net, &b, Some(&g), &cfg).unwrap();
        assert!(a.uploaded.distance(&g).unwrap() <= eps + 1e-12);
        assert!(a.x_star.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.objective_trace.len(), cfg.iterations + 1);
        let again = refine(&m, &net, &b, None, &cfg).unwrap();
        assert_eq!(a.x_star.data(), again.x_star.data());
        assert_eq!(a.uploaded, again.uploaded);
    }
}

#[test]
fn refinement_lowers_the_objective() {
    let (m, net, b) = setup(6);
    let cfg = RefinerConfig { step_size: 0.1, ..RefinerConfig::default() };
    let res = refine(&m, &net, &b, None, &cfg).unwrap();
    let t = &res.objective_trace;
    assert!(t.last().unwrap() < &t[0], "{t:?}");
}

#[test]
fn blend_endpoints() {
    let x = Tensor::new(vec![0.2, 0.7, 1.0], &[1, 3]).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(noise_blend_init(&x, 0.0, &mut r).unwrap().data(), x.data());
    let v = noise_blend_init(&x, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let noise = glab::data::uniform_noise(&[1, 3], &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(v.data(), noise.data());
    assert!(noise_blend_init(&x, 1.5, &mut r).is_err());
}

#[test]
fn config_validation() {
    let ok = RefinerConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        RefinerConfig { alpha: -0.1, ..ok.clone() },
        RefinerConfig { tau: 0.0, ..ok.clone() },
        RefinerConfig { epsilon: 0.0, ..ok.clone() },
        RefinerConfig { iterations: 0, ..ok.clone() },
        RefinerConfig { beta: f64::NAN, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_the_closest_point_in_the_ball(seed in 0u64..u64::MAX, eps in 1e-6f64..2.0, spread in 1e-3f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gv(&mut r, &[6, 3], 1.0);
        let g_star = g.add(&random_gv(&mut r, &[6, 3], spread)).unwrap();
        let p = project_gradients(&g_star, &g, eps).unwrap();
        prop_assert!(p.distance(&g).unwrap() <= eps + 1e-12);
        let best = p.distance(&g_star).unwrap();
        // No sampled point of the ball is closer to g* than the projection.
        for _ in 0..50 {
            let d = random_gv(&mut r, &[6, 3], 1.0);
            let q = g.add(&d.scale(eps * r.random::<f64>() / d.norm())).unwrap();
            prop_assert!(q.distance(&g_star).unwrap() >= best - 1e-12);
        }
    }

    #[test]
    fn utility_metric_is_nonnegative(seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let m = build_mlp(&[6, 5, 3], Activation::Sigmoid, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new((0..12).map(|_| r.random::<f64>()).collect(), &[2, 6]).unwrap();
        let b = Batch::new(x, vec![0, 2]).unwrap();
        let (_, g) = m.gradient(&b).unwrap();
        let w = ultimate_weights(&g, &m, 0.95).unwrap();
        let xs = noise_blend_init(&b.inputs, alpha, &mut r).unwrap();
        prop_assert!(utility_metric(&m, &xs, &b.labels, &g, &w).unwrap().item().unwrap() >= 0.0);
    }
}
