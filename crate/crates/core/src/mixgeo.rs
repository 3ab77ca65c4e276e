//! Geometric branch weighting and view-mixture training.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::augment::ViewBundle;
use crate::contrastive::{info_nce_batch, Learner, StepLoss, StepParams, Temperature};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::Scalar;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    /// Weight of the color branch in the geometric loss.
    pub gamma: f64,
    /// Probability of replacing the geometric loss by the mixture loss.
    pub p: f64,
    /// Beta(α, α) parameter for the mixing weight.
    pub alpha: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            gamma: 0.9,
            p: 0.3,
            alpha: 1.0,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        unit_interval("gamma", self.gamma)?;
        unit_interval("mixture probability", self.p)?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("beta parameter must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixDraw {
    pub apply_mix: bool,
    /// Mixing weight; only drawn when mixing.
    pub lambda: Option<f64>,
}

/// Decide whether this batch mixes, drawing λ ~ Beta(α, α) only if it does.
pub fn draw_mix(config: &MixConfig, rng: &mut Rng) -> Result<MixDraw> {
    let prob: f64 = rng.random();
    if prob < config.p {
        let beta = Beta::new(config.alpha, config.alpha).map_err(|e| invalid(format!("beta distribution: {e}")))?;
        Ok(MixDraw {
            apply_mix: true,
            lambda: Some(beta.sample(rng)),
        })
    } else {
        Ok(MixDraw {
            apply_mix: false,
            lambda: None,
        })
    }
}

/// Loss and query gradients of a two-branch affine combination.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub loss: f64,
    pub first: f64,
    pub second: f64,
    pub d_first: Array2<f64>,
    pub d_second: Array2<f64>,
}

fn weighted_pair(
    qa: ArrayView2<f64>,
    qb: ArrayView2<f64>,
    k_plus: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    w: f64,
    tau: Temperature,
) -> Result<PairLoss> {
    let (la, da) = info_nce_batch(qa, k_plus, negatives, tau)?;
    let (lb, db) = info_nce_batch(qb, k_plus, negatives, tau)?;
    Ok(PairLoss {
        loss: w * la + (1.0 - w) * lb,
        first: la,
        second: lb,
        d_first: da * w,
        d_second: db * (1.0 - w),
    })
}

/// `γ·Lq(q1, k⁺) + (1−γ)·Lq(q2, k⁺)` with q1 from the color branch and q2
/// from the rotation branch.
pub fn geo_loss(
    q1: ArrayView2<f64>,
    q2: ArrayView2<f64>,
    k_plus: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    gamma: f64,
    tau: Temperature,
) -> Result<PairLoss> {
    unit_interval("gamma", gamma)?;
    weighted_pair(q1, q2, k_plus, negatives, gamma, tau)
}

/// `λ·Lq(q_M, k⁺) + (1−λ)·Lq(q_M′, k⁺)`.
pub fn mixture_loss(
    q_m: ArrayView2<f64>,
    q_m_prime: ArrayView2<f64>,
    k_plus: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    lambda: f64,
    tau: Temperature,
) -> Result<PairLoss> {
    unit_interval("lambda", lambda)?;
    weighted_pair(q_m, q_m_prime, k_plus, negatives, lambda, tau)
}

/// Pixelwise `λ·a + (1−λ)·b`.
pub fn mix_images(a: &Image, b: &Image, lambda: f64) -> Result<Image> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "cannot mix {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let l = lambda as f32;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| l * x + (1.0 - l) * y).collect();
    Image::from_planar(a.height(), a.width(), data)
}

/// Geo-geo mixture `λ·I2 + (1−λ)·I` and geo-color mixture `λ·I2 + (1−λ)·I1`.
pub fn make_mixtures(i: &Image, i1: &Image, i2: &Image, lambda: f64) -> Result<(Image, Image)> {
    Ok((mix_images(i2, i, lambda)?, mix_images(i2, i1, lambda)?))
}

/// One MoCo step with the geometric loss: color queries I1 and rotation
/// queries I2 against keys from `k_views`.
pub fn geo_step<T: Scalar>(
    learner: &mut Learner<T>,
    views: (&[&Image], &[&Image], &[&Image]),
    gamma: f64,
    params: StepParams,
) -> Result<StepLoss> {
    let (v1, v2, vk) = views;
    let keys = learner.keys(vk)?;
    let b1 = learner.queries(v1, false)?;
    let b2 = learner.queries(v2, false)?;
    let loss = geo_loss(
        b1.inst.unit.view(),
        b2.inst.unit.view(),
        keys.unit.view(),
        learner.queue.negatives(),
        gamma,
        params.tau,
    )?;
    learner.ensure_finite(loss.loss, "geometric")?;
    let mut grads = learner.zero_grads();
    learner.accumulate(&b1, Some(&loss.d_first), None, &mut grads);
    learner.accumulate(&b2, Some(&loss.d_second), None, &mut grads);
    learner.finish(&grads, params.lr, params.momentum, &keys)?;
    Ok(StepLoss {
        total: loss.loss,
        instance: loss.loss,
        mixed: Some(false),
        ..StepLoss::default()
    })
}

/// One mixture-strategy step: with probability p the mixture loss on
/// (geo-geo, geo-color) mixtures, otherwise the geometric loss. Keys come
/// from the unmixed base view I.
pub fn mixco_step<T: Scalar>(
    learner: &mut Learner<T>,
    batch: &[ViewBundle],
    config: &MixConfig,
    params: StepParams,
    rng: &mut Rng,
) -> Result<StepLoss> {
    let mut base = Vec::with_capacity(batch.len());
    let mut color = Vec::with_capacity(batch.len());
    let mut rot = Vec::with_capacity(batch.len());
    for (n, b) in batch.iter().enumerate() {
        let i = b.i.as_ref().ok_or_else(|| invalid(format!("bundle {n} has no base view I")))?;
        let i1 = b.i1.as_ref().ok_or_else(|| invalid(format!("bundle {n} has no color view I1")))?;
        let i2 = b.i2.as_ref().ok_or_else(|| invalid(format!("bundle {n} has no rotation view I2")))?;
        base.push(i);
        color.push(i1);
        rot.push(i2);
    }
    let draw = draw_mix(config, rng)?;
    match draw.lambda {
        Some(lambda) => mixture_step(learner, (&base, &color, &rot), lambda, params),
        None => geo_step(learner, (&color, &rot, &base), config.gamma, params),
    }
}

/// The mixture branch of a MixCo step for a fixed λ: queries from the two
/// mixtures, keys from the base views.
pub fn mixture_step<T: Scalar>(
    learner: &mut Learner<T>,
    views: (&[&Image], &[&Image], &[&Image]),
    lambda: f64,
    params: StepParams,
) -> Result<StepLoss> {
    let (base, color, rot) = views;
    let mut ggm = Vec::with_capacity(base.len());
    let mut gcm = Vec::with_capacity(base.len());
    for n in 0..base.len() {
        let (a, b) = make_mixtures(base[n], color[n], rot[n], lambda)?;
        ggm.push(a);
        gcm.push(b);
    }
    let keys = learner.keys(base)?;
    let bm = learner.queries(&ggm.iter().collect::<Vec<_>>(), false)?;
    let bmp = learner.queries(&gcm.iter().collect::<Vec<_>>(), false)?;
    let loss = mixture_loss(
        bm.inst.unit.view(),
        bmp.inst.unit.view(),
        keys.unit.view(),
        learner.queue.negatives(),
        lambda,
        params.tau,
    )?;
    learner.ensure_finite(loss.loss, "mixture")?;
    let mut grads = learner.zero_grads();
    learner.accumulate(&bm, Some(&loss.d_first), None, &mut grads);
    learner.accumulate(&bmp, Some(&loss.d_second), None, &mut grads);
    learner.finish(&grads, params.lr, params.momentum, &keys)?;
    Ok(StepLoss {
        total: loss.loss,
        instance: loss.loss,
        mixed: Some(true),
        mix_lambda: Some(lambda),
        ..StepLoss::default()
    })
}

#[cfg(test)]
mod tests;
