mod common;

use common::{check_gradients, no_skip, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twostream_autograd::{Graph, Tensor};
use twostream_core::losses::{
    adversarial_losses, gram_matrix, perceptual_loss, pyramid_loss, style_loss, total_losses, FeatureExtractor,
    LossComponents, LossWeights,
};
use twostream_core::params::ParamStore;

fn value(g: &Graph<f64>, v: twostream_autograd::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn identical_inputs_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ext = FeatureExtractor::<f64>::random_with_widths(2, &[4, 6, 8]);
    let x = random_tensor(&mut rng, [2, 3, 8, 8]);
    let mut g = Graph::<f64>::new();
    let (a, b) = (g.constant(x.clone()), g.constant(x.clone()));
    let per = perceptual_loss(&mut g, &ext, a, b).unwrap();
    let sty = style_loss(&mut g, &ext, a, b).unwrap();
    let small = g.constant(random_tensor(&mut rng, [2, 3, 4, 4]));
    let py = pyramid_loss(&mut g, &[a, small], &[a, small], &[b, small], &[b, small]).unwrap();
    assert_eq!((value(&g, per), value(&g, sty), value(&g, py)), (0.0, 0.0, 0.0));
}

#[test]
fn gram_of_identical_channels_is_rank_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plane = random_tensor(&mut rng, [1, 1, 3, 5]);
    let f = Tensor::from_fn([1, 2, 3, 5], |[_, _, y, x]| plane.get([0, 0, y, x]));
    let mut g = Graph::<f64>::new();
    let fv = g.constant(f);
    let gram = gram_matrix(&mut g, fv).unwrap();
    let v = g.value(gram);
    let e = v.data();
    assert_eq!(e.len(), 4);
    assert!(e.iter().all(|&x| x == e[0]));
    assert!(e[0] > 0.0);
    assert_eq!(e[0] * e[3] - e[1] * e[2], 0.0);
}

#[test]
fn zero_scores_are_a_symmetric_fixed_point() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros([3, 1, 2, 2]));
    let (l_g, l_d) = adversarial_losses(&mut g, z, z).unwrap();
    assert_eq!((value(&g, l_g), value(&g, l_d)), (2.0, 2.0));
}

#[test]
fn generator_adversarial_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let real = random_tensor(&mut rng, [2, 1, 3, 3]);
    let fake = random_tensor(&mut rng, [2, 1, 3, 3]);
    let errs = check_gradients(&ParamStore::<f64>::new(), &[fake], 5, no_skip, |g, _, x| {
        let r = g.constant(real.clone());
        adversarial_losses(g, r, x[0]).unwrap().0
    });
    assert!(errs[0].rel_error < 1e-6, "{errs:?}");
}

#[test]
fn identity_extractor_perceptual_is_mean_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, b) = (random_tensor(&mut rng, [1, 3, 5, 4]), random_tensor(&mut rng, [1, 3, 5, 4]));
    let want = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64;
    let mut g = Graph::<f64>::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let l = perceptual_loss(&mut g, &FeatureExtractor::identity(), av, bv).unwrap();
    assert!((value(&g, l) - want).abs() < 1e-15);
}

#[test]
fn weighted_totals() {
    let c = LossComponents {
        l_py: 1.0,
        l_per_ms: 2.0,
        l_per_ss: 5.0,
        l_sty: 3.0,
        l_adv_g: 4.0,
        l_adv_d: 6.0,
    };
    let zero = LossWeights {
        w_py: 0.0,
        w_per: 0.0,
        w_sty: 0.0,
        w_adv: 0.0,
    };
    assert_eq!(total_losses(&zero, &c).unwrap().total_g, 0.0);
    let unit = LossWeights {
        w_py: 1.0,
        w_per: 1.0,
        w_sty: 1.0,
        w_adv: 1.0,
    };
    let r = total_losses(&unit, &c).unwrap();
    assert_eq!((r.total_g, r.total_d), (15.0, 6.0));
    // 1 + 0.1 * 7 + 250 * 3 + 0.1 * 4
    let d = total_losses(&LossWeights::default(), &c).unwrap();
    assert!((d.total_g - 752.1).abs() < 1e-12, "{}", d.total_g);
}

#[test]
fn nan_components_abort() {
    let c = LossComponents {
        l_py: f64::NAN,
        ..LossComponents::default()
    };
    assert!(matches!(total_losses(&LossWeights::default(), &c), Err(twostream_core::Error::Training(_))));
}
