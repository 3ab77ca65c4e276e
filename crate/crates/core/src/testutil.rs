use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::contrastive::{FeatureQueue, Learner};
use crate::encoder::{EncoderSpec, EncoderState, InputNorm};
use crate::image::{Image, CHANNELS};
use crate::optim::{Sgd, SgdConfig};
use crate::rng;

pub fn unit_rows(n: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, &[99]);
    let mut a = Array2::from_shape_fn((n, m), |_| r.sample::<f64, _>(StandardNormal));
    for mut row in a.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    a
}

pub fn random_images(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut r = rng::stream(seed, &[98]);
    (0..n)
        .map(|_| {
            let data = (0..CHANNELS * side * side).map(|_| r.random_range(0.0..255.0f32)).collect();
            Image::from_planar(side, side, data).unwrap()
        })
        .collect()
}

/// Two-layer MLP learner on flattened `side`×`side` images.
pub fn toy_learner(side: usize, hidden: usize, proj: usize, queue: usize, seed: u64) -> Learner<f64> {
    let spec = EncoderSpec::mlp(CHANNELS * side * side, hidden, proj);
    let state = EncoderState::<f64>::new(spec, seed).unwrap();
    let n = state.encoder.param_count();
    Learner::new(
        state,
        FeatureQueue::new(queue, proj).unwrap(),
        Sgd::new(SgdConfig::default(), n),
        InputNorm::default(),
    )
}
