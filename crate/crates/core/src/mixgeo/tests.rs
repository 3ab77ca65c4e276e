use proptest::prelude::*;

use super::*;
use crate::augment::{make_views, AugPolicy, Strategy};
use crate::rng;
use crate::testutil::{random_images, toy_learner, unit_rows};

fn tau() -> Temperature {
    Temperature::new(0.2).unwrap()
}

struct Inputs {
    q1: Array2<f64>,
    q2: Array2<f64>,
    k: Array2<f64>,
    negs: Array2<f64>,
}

fn inputs(seed: u64) -> Inputs {
    Inputs {
        q1: unit_rows(5, 6, seed),
        q2: unit_rows(5, 6, seed + 1),
        k: unit_rows(5, 6, seed + 2),
        negs: unit_rows(11, 6, seed + 3),
    }
}

fn lq(q: &Array2<f64>, x: &Inputs) -> f64 {
    info_nce_batch(q.view(), x.k.view(), x.negs.view(), tau()).unwrap().0
}

#[test]
fn geo_loss_boundaries_and_default_weight() {
    let x = inputs(1);
    let geo = |g| geo_loss(x.q1.view(), x.q2.view(), x.k.view(), x.negs.view(), g, tau()).unwrap().loss;
    assert_eq!(geo(1.0), lq(&x.q1, &x));
    assert_eq!(geo(0.0), lq(&x.q2, &x));
    let (a, b) = (lq(&x.q1, &x), lq(&x.q2, &x));
    assert!((geo(0.9) - (0.9 * a + 0.1 * b)).abs() < 1e-12);
    assert!(geo_loss(x.q1.view(), x.q2.view(), x.k.view(), x.negs.view(), 1.5, tau()).is_err());
}

#[test]
fn mixture_loss_boundaries() {
    let x = inputs(5);
    let mix = |l| mixture_loss(x.q1.view(), x.q2.view(), x.k.view(), x.negs.view(), l, tau()).unwrap().loss;
    assert_eq!(mix(1.0), lq(&x.q1, &x));
    assert!((mix(0.5) - 0.5 * (lq(&x.q1, &x) + lq(&x.q2, &x))).abs() < 1e-12);
    assert!(mixture_loss(x.q1.view(), x.q2.view(), x.k.view(), x.negs.view(), -0.1, tau()).is_err());
}

#[test]
fn mix_image_examples() {
    let a = Image::filled(2, 2, 0.0);
    let b = Image::filled(2, 2, 200.0);
    assert_eq!(mix_images(&a, &b, 1.0).unwrap(), a);
    assert_eq!(mix_images(&a, &b, 0.0).unwrap(), b);
    assert!(mix_images(&a, &b, 0.5).unwrap().data().iter().all(|&v| v == 100.0));
    assert!(mix_images(&a, &Image::zeros(3, 2), 0.5).is_err());
}

#[test]
fn mixture_boundaries() {
    let imgs = random_images(3, 4, 9);
    let (i, i1, i2) = (&imgs[0], &imgs[1], &imgs[2]);
    let (m, mp) = make_mixtures(i, i1, i2, 1.0).unwrap();
    assert_eq!((&m, &mp), (i2, i2));
    let (m, mp) = make_mixtures(i, i1, i2, 0.0).unwrap();
    assert_eq!((&m, &mp), (i, i1));
}

proptest! {
    #[test]
    fn mixture_pixels_stay_in_source_envelope(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let imgs = random_images(3, 3, seed);
        let (m, mp) = make_mixtures(&imgs[0], &imgs[1], &imgs[2], lambda).unwrap();
        for (out, other) in [(&m, &imgs[0]), (&mp, &imgs[1])] {
            for ((&v, &a), &b) in out.data().iter().zip(imgs[2].data()).zip(other.data()) {
                prop_assert!(v >= a.min(b) - 1e-3 && v <= a.max(b) + 1e-3);
            }
        }
    }
}

#[test]
fn draw_frequencies() {
    let config = MixConfig::default();
    let mut r = rng::stream(0, &[]);
    let n = 10_000;
    let draws: Vec<MixDraw> = (0..n).map(|_| draw_mix(&config, &mut r).unwrap()).collect();
    let mixed = draws.iter().filter(|d| d.apply_mix).count() as f64 / n as f64;
    assert!((mixed - 0.3).abs() <= 0.01, "{mixed}");
    assert!(draws.iter().all(|d| d.apply_mix == d.lambda.is_some()));
    // λ ~ Beta(1, 1): mean within three standard errors of 0.5
    let mut r = rng::stream(18, &[]);
    let always = MixConfig { p: 1.0, ..config };
    let lambdas: Vec<f64> = (0..n).map(|_| draw_mix(&always, &mut r).unwrap().lambda.unwrap()).collect();
    let mean = lambdas.iter().sum::<f64>() / n as f64;
    let se = (1.0f64 / 12.0 / n as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se, "{mean}");
    let never = MixConfig { p: 0.0, ..config };
    assert!((0..1000).all(|_| !draw_mix(&never, &mut r).unwrap().apply_mix));
}

fn step_params() -> StepParams {
    StepParams {
        lr: 0.05,
        momentum: 0.99,
        tau: tau(),
    }
}

fn bundles(n: usize) -> Vec<ViewBundle> {
    let imgs = random_images(n, 6, 21);
    let policy = AugPolicy::with_crop(4);
    imgs.iter()
        .enumerate()
        .map(|(i, im)| make_views(im, Strategy::MixCo, &policy, &mut rng::stream(i as u64, &[])).unwrap())
        .collect()
}

#[test]
fn zero_probability_never_mixes() {
    let batch = bundles(4);
    let mut learner = toy_learner(4, 10, 6, 16, 1);
    let config = MixConfig { p: 0.0, ..MixConfig::default() };
    let mut r = rng::stream(0, &[]);
    for _ in 0..5 {
        let loss = mixco_step(&mut learner, &batch, &config, step_params(), &mut r).unwrap();
        assert_eq!(loss.mixed, Some(false));
    }
}

#[test]
fn full_mixture_at_unit_lambda_is_rotation_branch_loss() {
    let batch = bundles(4);
    let learner = toy_learner(4, 10, 6, 16, 2);
    let views = |f: fn(&ViewBundle) -> &Image| batch.iter().map(f).collect::<Vec<&Image>>();
    let (base, color, rot) = (
        views(|b| b.i.as_ref().unwrap()),
        views(|b| b.i1.as_ref().unwrap()),
        views(|b| b.i2.as_ref().unwrap()),
    );
    let mut a = learner.clone();
    let mut b = learner.clone();
    let mixed = mixture_step(&mut a, (&base, &color, &rot), 1.0, step_params()).unwrap();
    let geo = geo_step(&mut b, (&color, &rot, &base), 0.0, step_params()).unwrap();
    assert!((mixed.total - geo.total).abs() < 1e-12);
    assert_eq!(a.state.query, b.state.query);
}

#[test]
fn missing_base_view_is_an_error() {
    let mut batch = bundles(2);
    batch[1].i = None;
    let mut learner = toy_learner(4, 10, 6, 16, 3);
    let err = mixco_step(&mut learner, &batch, &MixConfig::default(), step_params(), &mut rng::stream(0, &[]));
    assert!(err.is_err());
}

