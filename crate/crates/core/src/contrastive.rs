//! Momentum contrast: cosine scores, InfoNCE, the momentum key encoder and
//! the FIFO dictionary of negative keys.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderState, Encoded, InputNorm, Projection};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::Scalar;
use crate::optim::Sgd;

/// Tolerance on the norm of vectors that must be unit length.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(invalid(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what} has dimension {got}, expected {want}")))
    }
}

/// Dot products of `q` against each row of `keys`.
pub fn cosine_scores(q: ArrayView1<f64>, keys: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_dim("key matrix", keys.ncols(), q.len())?;
    Ok(keys.dot(&q))
}

/// Cross-entropy with target index 0 over `logits`; returns the loss and
/// the softmax probabilities.
pub(crate) fn softmax_xent0(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = max + z.ln() - logits[0];
    (loss, exps.into_iter().map(|e| e / z).collect())
}

/// Loss and gradients of one InfoNCE term.
#[derive(Clone, Debug)]
pub struct NceTerm {
    pub loss: f64,
    pub d_q: Array1<f64>,
    pub d_k_pos: Array1<f64>,
}

/// `-log softmax_0([q·k⁺, q·k⁻₁, …] / τ)`.
pub fn info_nce(q: ArrayView1<f64>, k_pos: ArrayView1<f64>, negatives: ArrayView2<f64>, tau: Temperature) -> Result<f64> {
    Ok(info_nce_grad(q, k_pos, negatives, tau)?.loss)
}

pub fn info_nce_grad(
    q: ArrayView1<f64>,
    k_pos: ArrayView1<f64>,
    negatives: ArrayView2<f64>,
    tau: Temperature,
) -> Result<NceTerm> {
    check_dim("positive key", k_pos.len(), q.len())?;
    let t = tau.get();
    let mut logits = Vec::with_capacity(negatives.nrows() + 1);
    logits.push(q.dot(&k_pos) / t);
    if negatives.nrows() > 0 {
        logits.extend(cosine_scores(q, negatives)?.iter().map(|v| v / t));
    }
    let (loss, p) = softmax_xent0(&logits);
    let mut d_q = &k_pos * ((p[0] - 1.0) / t);
    for (row, pj) in negatives.rows().into_iter().zip(&p[1..]) {
        d_q.scaled_add(pj / t, &row);
    }
    let d_k_pos = &q * ((p[0] - 1.0) / t);
    Ok(NceTerm { loss, d_q, d_k_pos })
}

/// Mean InfoNCE over a batch of queries with row-matched positive keys and
/// shared negatives. Returns the loss and its gradient w.r.t. each query row.
pub fn info_nce_batch(
    q: ArrayView2<f64>,
    k_pos: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    tau: Temperature,
) -> Result<(f64, Array2<f64>)> {
    if q.dim() != k_pos.dim() {
        return Err(Error::Shape(format!("queries {:?} vs keys {:?}", q.dim(), k_pos.dim())));
    }
    if negatives.nrows() > 0 {
        check_dim("negatives", negatives.ncols(), q.ncols())?;
    }
    let n = q.nrows();
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let t = tau.get();
    let neg = q.dot(&negatives.t());
    let mut grad = Array2::zeros(q.dim());
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(negatives.nrows() + 1);
    for i in 0..n {
        logits.clear();
        logits.push(q.row(i).dot(&k_pos.row(i)) / t);
        logits.extend(neg.row(i).iter().map(|v| v / t));
        let (loss, p) = softmax_xent0(&logits);
        total += loss;
        let mut g = grad.row_mut(i);
        g.scaled_add((p[0] - 1.0) / (t * n as f64), &k_pos.row(i));
        let coeff = Array1::from_iter(p[1..].iter().map(|pj| pj / (t * n as f64)));
        g += &negatives.t().dot(&coeff);
    }
    Ok((total / n as f64, grad))
}

/// `θk ← m·θk + (1−m)·θq`.
pub fn momentum_update<T: Scalar>(query: &[T], key: &mut [T], m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(invalid(format!("momentum must lie in [0, 1), got {m}")));
    }
    if query.len() != key.len() {
        return Err(Error::Shape(format!("{} query vs {} key parameters", query.len(), key.len())));
    }
    let (mt, rest) = (T::of(m), T::of(1.0 - m));
    for (k, &q) in key.iter_mut().zip(query) {
        *k = mt * *k + rest * q;
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit-norm keys.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    storage: Array2<f64>,
    write_ptr: usize,
    len: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("queue feature dimension must be positive"));
        }
        Ok(FeatureQueue {
            storage: Array2::zeros((capacity, dim)),
            write_ptr: 0,
            len: 0,
        })
    }

    pub fn from_parts(storage: Array2<f64>, write_ptr: usize, len: usize) -> Result<Self> {
        let cap = storage.nrows();
        if len > cap || (cap > 0 && write_ptr >= cap) || (len < cap && write_ptr != len) {
            return Err(invalid(format!("inconsistent queue state: ptr {write_ptr}, len {len}, capacity {cap}")));
        }
        Ok(FeatureQueue {
            storage,
            write_ptr,
            len,
        })
    }

    pub fn capacity(&self) -> usize {
        self.storage.nrows()
    }

    pub fn dim(&self) -> usize {
        self.storage.ncols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity()
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    pub fn storage(&self) -> ArrayView2<'_, f64> {
        self.storage.view()
    }

    /// Stored keys in slot order; before the queue is full only the filled slots.
    pub fn negatives(&self) -> ArrayView2<'_, f64> {
        self.storage.slice(s![..self.len, ..])
    }

    /// Stored keys, oldest first.
    pub fn ordered(&self) -> Array2<f64> {
        if !self.is_full() {
            return self.negatives().to_owned();
        }
        let head = self.storage.slice(s![self.write_ptr.., ..]);
        let tail = self.storage.slice(s![..self.write_ptr, ..]);
        ndarray::concatenate(Axis(0), &[head, tail]).expect("same column count")
    }

    /// Replace the oldest entries with `keys`, in row order.
    pub fn push(&mut self, keys: ArrayView2<f64>) -> Result<()> {
        let cap = self.capacity();
        if keys.nrows() > cap {
            return Err(invalid(format!("cannot push {} keys into a queue of {cap}", keys.nrows())));
        }
        check_dim("pushed keys", keys.ncols(), self.dim())?;
        for (i, row) in keys.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(invalid(format!("key {i} has norm {norm}, expected unit length")));
            }
        }
        for row in keys.rows() {
            self.storage.row_mut(self.write_ptr).assign(&row);
            self.write_ptr = (self.write_ptr + 1) % cap;
            self.len = (self.len + 1).min(cap);
        }
        Ok(())
    }
}

/// Forward pass of a batch of query views, kept for the backward pass.
pub struct QueryBatch<T> {
    encoded: Vec<Encoded<T>>,
    pub inst: Projection,
    pub group: Option<Projection>,
}

/// The mutable training state: both encoders, the queue and the optimizer.
#[derive(Clone, Debug)]
pub struct Learner<T> {
    pub state: EncoderState<T>,
    pub queue: FeatureQueue,
    pub opt: Sgd<T>,
    pub norm: InputNorm,
    /// Completed optimizer steps.
    pub steps: u64,
}

impl<T: Scalar> Learner<T> {
    pub fn new(state: EncoderState<T>, queue: FeatureQueue, opt: Sgd<T>, norm: InputNorm) -> Self {
        Learner {
            state,
            queue,
            opt,
            norm,
            steps: 0,
        }
    }

    /// Refuse to apply an update computed from a non-finite loss.
    pub fn ensure_finite(&self, loss: f64, what: &str) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                step: self.steps,
                detail: format!("{what} loss is {loss}"),
            })
        }
    }

    pub fn inputs(&self, views: &[&Image]) -> Vec<Vec<T>> {
        views.iter().map(|v| self.norm.apply(v)).collect()
    }

    /// Unit-norm instance embeddings from the key encoder.
    pub fn keys(&self, views: &[&Image]) -> Result<Projection> {
        let enc = &self.state.encoder;
        let out = enc.encode_batch(&self.state.key, &self.inputs(views), false, false);
        Projection::from_rows(out.iter().map(|e| &e.inst), enc.proj_dim())
    }

    pub fn queries(&self, views: &[&Image], with_group: bool) -> Result<QueryBatch<T>> {
        let enc = &self.state.encoder;
        let encoded = enc.encode_batch(&self.state.query, &self.inputs(views), with_group, true);
        let inst = Projection::from_rows(encoded.iter().map(|e| &e.inst), enc.proj_dim())?;
        let group = if with_group {
            Some(Projection::from_rows(
                encoded.iter().map(|e| e.group.as_ref().expect("group head requested")),
                enc.proj_dim(),
            )?)
        } else {
            None
        };
        Ok(QueryBatch { encoded, inst, group })
    }

    /// Add the parameter gradient implied by gradients on the unit embeddings.
    pub fn accumulate(
        &self,
        batch: &QueryBatch<T>,
        d_inst: Option<&Array2<f64>>,
        d_group: Option<&Array2<f64>>,
        grads: &mut [T],
    ) {
        let di = d_inst.map(|d| batch.inst.backward::<T>(d));
        let dg = d_group.map(|d| {
            batch
                .group
                .as_ref()
                .expect("group gradient without group embeddings")
                .backward::<T>(d)
        });
        self.state
            .encoder
            .backward_batch(&self.state.query, &batch.encoded, di.as_deref(), dg.as_deref(), grads);
    }

    /// Optimizer step on the query encoder, momentum update of the key
    /// encoder, then enqueue this step's keys.
    pub fn finish(&mut self, grads: &[T], lr: f64, momentum: f64, keys: &Projection) -> Result<()> {
        self.opt.step(&mut self.state.query, grads, lr);
        momentum_update(&self.state.query, &mut self.state.key, momentum)?;
        self.queue.push(keys.unit.view())?;
        self.steps += 1;
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<T> {
        vec![T::zero(); self.state.encoder.param_count()]
    }
}

/// Hyperparameters shared by every step function.
#[derive(Clone, Copy, Debug)]
pub struct StepParams {
    pub lr: f64,
    pub momentum: f64,
    pub tau: Temperature,
}

/// Loss of one training step, split into the terms that made it up.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub instance: f64,
    pub group: Option<f64>,
    /// Whether the mixture loss replaced the geometric loss this step.
    pub mixed: Option<bool>,
    pub mix_lambda: Option<f64>,
    pub occupied_clusters: Option<(usize, usize)>,
}

/// One MoCo step: queries from I1, positive keys from I+, negatives from the queue.
pub fn moco_step<T: Scalar>(
    learner: &mut Learner<T>,
    q_views: &[&Image],
    k_views: &[&Image],
    params: StepParams,
) -> Result<StepLoss> {
    let keys = learner.keys(k_views)?;
    let batch = learner.queries(q_views, false)?;
    let (loss, d_q) = info_nce_batch(batch.inst.unit.view(), keys.unit.view(), learner.queue.negatives(), params.tau)?;
    learner.ensure_finite(loss, "instance")?;
    let mut grads = learner.zero_grads();
    learner.accumulate(&batch, Some(&d_q), None, &mut grads);
    learner.finish(&grads, params.lr, params.momentum, &keys)?;
    Ok(StepLoss {
        total: loss,
        instance: loss,
        ..StepLoss::default()
    })
}
