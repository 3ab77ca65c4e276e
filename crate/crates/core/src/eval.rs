//! Downstream evaluation: frozen-feature linear probe, end-to-end
//! fine-tuning, foreground precision/recall and the result files.

use std::collections::HashMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::hflip_in_place;
use crate::encoder::{Encoder, InputNorm};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::Scalar;
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::rng::{self, tag};
use crate::tiling::{DatasetManifest, Label, SourceFrame, Split};

pub const CLASSES: usize = 2;
const FOREGROUND: usize = 1;
const GRAD_CHUNK: usize = 8;

/// Labelled patches of one split, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    /// Class indices: background 0, foreground 1.
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn from_manifest(manifest: &DatasetManifest, frames: &[SourceFrame], split: Split) -> Result<Self> {
        let by_id: HashMap<&str, &SourceFrame> = frames.iter().map(|f| (f.frame_id.as_str(), f)).collect();
        let mut out = LabeledSet::default();
        for rec in manifest.records_in(split) {
            let label = rec.label.class_index().ok_or_else(|| {
                Error::Dataset(format!("split `{split}` holds unlabeled record `{}`", rec.patch_id))
            })?;
            let frame = by_id
                .get(rec.frame_id.as_str())
                .ok_or_else(|| Error::Dataset(format!("unknown frame `{}`", rec.frame_id)))?;
            out.ids.push(rec.patch_id.clone());
            out.images.push(rec.crop(frame)?);
            out.labels.push(label);
        }
        if out.images.is_empty() {
            return Err(Error::Dataset(format!("split `{split}` has no labelled records")));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Center crop to the encoder input size (larger background patches are
/// cropped, not resized, so both classes share one pixel scale).
pub fn eval_view(img: &Image, size: usize) -> Result<Image> {
    if img.height() == size && img.width() == size {
        Ok(img.clone())
    } else {
        img.center_crop(size)
    }
}

/// Random crop plus horizontal flip for supervised training.
pub fn train_view(img: &Image, size: usize, rng: &mut rng::Rng) -> Result<Image> {
    if img.height() < size || img.width() < size {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: size,
        });
    }
    let x = rng.random_range(0..=img.width() - size);
    let y = rng.random_range(0..=img.height() - size);
    let mut out = img.crop(x, y, size, size)?;
    if rng.random_bool(0.5) {
        hflip_in_place(&mut out);
    }
    Ok(out)
}

/// Pooled backbone features (no heads), one row per image.
pub fn extract_features<T: Scalar>(
    encoder: &Encoder,
    params: &[T],
    norm: &InputNorm,
    images: &[Image],
) -> Result<Array2<f64>> {
    let size = encoder.spec().input.h;
    let inputs: Vec<Vec<T>> = images
        .par_iter()
        .map(|img| eval_view(img, size).map(|v| norm.apply::<T>(&v)))
        .collect::<Result<_>>()?;
    let feats = encoder.features_batch(params, &inputs);
    let d = encoder.feature_dim();
    let flat: Vec<f64> = feats.iter().flat_map(|f| f.iter().map(|v| v.f64())).collect();
    Array2::from_shape_vec((images.len(), d), flat).map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Frozen,
    EndToEnd,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::EndToEnd => "end_to_end",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Mode::Frozen),
            "end_to_end" => Ok(Mode::EndToEnd),
            other => Err(invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Top-1 accuracy and foreground precision/recall, all in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub precision_fg: f64,
    pub recall_fg: f64,
    /// No sample was predicted foreground; precision is reported as 0.
    pub no_predicted_fg: bool,
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(invalid("no samples to score"));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        correct += usize::from(p == l);
        match (p == FOREGROUND, l == FOREGROUND) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    Ok(Metrics {
        top1: pct(correct, labels.len()),
        precision_fg: pct(tp, tp + fp),
        recall_fg: pct(tp, tp + fneg),
        no_predicted_fg: tp + fp == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mode: Mode,
    pub label_fraction: f64,
    pub metrics: Metrics,
    pub config: serde_json::Value,
}

/// Linear classifier on top of frozen or trainable features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    /// Weights N(0, 0.01²), zero bias.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[tag::PROBE, u64::MAX]);
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        LinearHead {
            weight: Array2::from_shape_simple_fn((CLASSES, dim), || normal.sample(&mut r)),
            bias: Array1::zeros(CLASSES),
        }
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        x.outer_iter().map(|row| argmax(self.logits(row).view())).collect()
    }
}

fn argmax(v: ArrayView1<f64>) -> usize {
    // ties go to the lower class index
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Softmax cross-entropy of one sample and its gradient w.r.t. the logits.
fn xent(logits: ArrayView1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    let mut p = exp / sum;
    let loss = -(p[label].max(f64::MIN_POSITIVE)).ln();
    p[label] -= 1.0;
    (loss, p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Z-score features with train-set statistics before the linear layer.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 256,
            lr: 30.0,
            momentum: 0.9,
            weight_decay: 0.0,
            standardize: false,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("probe batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid(format!("probe lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(invalid("probe momentum must be in [0, 1) and weight_decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub result: ProbeResult,
    pub head: LinearHead,
    pub predictions: Vec<usize>,
    pub final_train_loss: f64,
}

fn check_classes(labels: &[usize]) -> Result<()> {
    if labels.iter().any(|&l| l >= CLASSES) {
        return Err(invalid("labels must be 0 (background) or 1 (foreground)"));
    }
    let present = (0..CLASSES).filter(|c| labels.contains(c)).count();
    if present < CLASSES {
        return Err(Error::Dataset("training labels hold a single class".into()));
    }
    Ok(())
}

fn standardizer(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

/// Train a linear softmax classifier on fixed features; report on `val`.
pub fn linear_probe(
    train: (ArrayView2<f64>, &[usize]),
    val: (ArrayView2<f64>, &[usize]),
    label_fraction: f64,
    config: &ProbeConfig,
) -> Result<ProbeOutcome> {
    config.validate()?;
    let (x, y) = train;
    if x.nrows() != y.len() || val.0.nrows() != val.1.len() || x.ncols() != val.0.ncols() {
        return Err(Error::Shape("feature and label counts disagree".into()));
    }
    check_classes(y)?;
    let (x, xv) = if config.standardize {
        let (mean, std) = standardizer(x);
        ((&x - &mean) / &std, (&val.0 - &mean) / &std)
    } else {
        (x.to_owned(), val.0.to_owned())
    };
    let n = x.nrows();
    let d = x.ncols();
    let mut head = LinearHead::init(d, config.seed);
    let mut vw = Array2::<f64>::zeros((CLASSES, d));
    let mut vb = Array1::<f64>::zeros(CLASSES);
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let lr = cosine_lr(config.lr, step, total);
            let mut gw = Array2::<f64>::zeros((CLASSES, d));
            let mut gb = Array1::<f64>::zeros(CLASSES);
            for &i in chunk {
                let (loss, dz) = xent(head.logits(x.row(i)).view(), y[i]);
                epoch_loss += loss;
                for c in 0..CLASSES {
                    gw.row_mut(c).scaled_add(dz[c], &x.row(i));
                }
                gb += &dz;
            }
            let scale = 1.0 / chunk.len() as f64;
            gw *= scale;
            gb *= scale;
            gw.scaled_add(config.weight_decay, &head.weight);
            vw = vw * config.momentum + &gw;
            vb = vb * config.momentum + &gb;
            head.weight.scaled_add(-lr, &vw);
            head.bias.scaled_add(-lr, &vb);
            step += 1;
        }
        last_loss = epoch_loss / n as f64;
        if !last_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as u64,
                detail: format!("linear probe loss {last_loss} in epoch {epoch}"),
            });
        }
    }
    let predictions = head.predict(xv.view());
    let metrics = compute_metrics(&predictions, val.1)?;
    Ok(ProbeOutcome {
        result: ProbeResult {
            mode: Mode::Frozen,
            label_fraction,
            metrics,
            config: serde_json::to_value(config)?,
        },
        head,
        predictions,
        final_train_loss: last_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 200,
            batch_size: 256,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("finetune batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid(format!("finetune lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(invalid("finetune momentum must be in [0, 1) and weight_decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub result: ProbeResult,
    /// Backbone parameters after training (the head-less prefix of the encoder buffer).
    pub backbone: Vec<T>,
    pub head: LinearHead,
    pub predictions: Vec<usize>,
}

/// Train backbone and linear head together by softmax loss; report on `val`.
/// `params` is a full encoder buffer; only its backbone part is used.
pub fn finetune_end_to_end<T: Scalar>(
    encoder: &Encoder,
    params: &[T],
    norm: &InputNorm,
    train: &LabeledSet,
    val: &LabeledSet,
    label_fraction: f64,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    config.validate()?;
    check_classes(&train.labels)?;
    let size = encoder.spec().input.h;
    let nb = encoder.backbone_param_count();
    let mut theta: Vec<T> = encoder.backbone_params(params).to_vec();
    let d = encoder.feature_dim();
    let mut head = LinearHead::init(d, config.seed);
    let mut opt = Sgd::<T>::new(
        SgdConfig {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        },
        nb,
    );
    let mut vw = Array2::<f64>::zeros((CLASSES, d));
    let mut vb = Array1::<f64>::zeros(CLASSES);
    let n = train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let lr = cosine_lr(config.lr, step, total);
            let inputs: Vec<(Vec<T>, usize)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut r = rng::stream(config.seed, &[tag::AUGMENT, epoch as u64, i as u64]);
                    train_view(&train.images[i], size, &mut r).map(|v| (norm.apply::<T>(&v), train.labels[i]))
                })
                .collect::<Result<_>>()?;
            let theta_ref = &theta;
            let head_ref = &head;
            let partials: Vec<(Vec<T>, Array2<f64>, Array1<f64>, f64)> = inputs
                .par_chunks(GRAD_CHUNK)
                .map(|part| {
                    let mut g = vec![T::zero(); nb];
                    let mut gw = Array2::<f64>::zeros((CLASSES, d));
                    let mut gb = Array1::<f64>::zeros(CLASSES);
                    let mut loss = 0.0;
                    for (x, label) in part {
                        let (pooled, tape) = encoder.backbone_forward(theta_ref, x);
                        let feat = Array1::from_iter(pooled.iter().map(|v| v.f64()));
                        let (l, dz) = xent(head_ref.logits(feat.view()).view(), *label);
                        loss += l;
                        for c in 0..CLASSES {
                            gw.row_mut(c).scaled_add(dz[c], &feat);
                        }
                        gb += &dz;
                        let d_pooled: Vec<T> = head_ref.weight.t().dot(&dz).iter().map(|&v| T::of(v)).collect();
                        encoder.backbone_backward(theta_ref, &tape, &d_pooled, &mut g);
                    }
                    (g, gw, gb, loss)
                })
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            let mut g = vec![T::zero(); nb];
            let mut gw = Array2::<f64>::zeros((CLASSES, d));
            let mut gb = Array1::<f64>::zeros(CLASSES);
            let mut loss = 0.0;
            for (pg, pw, pb, pl) in partials {
                g.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b);
                gw += &pw;
                gb += &pb;
                loss += pl;
            }
            let loss = loss * scale;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as u64,
                    detail: format!("fine-tuning loss {loss} in epoch {epoch}"),
                });
            }
            let ts = T::of(scale);
            g.iter_mut().for_each(|v| *v = *v * ts);
            gw *= scale;
            gb *= scale;
            opt.step(&mut theta, &g, lr);
            gw.scaled_add(config.weight_decay, &head.weight);
            vw = vw * config.momentum + &gw;
            vb = vb * config.momentum + &gb;
            head.weight.scaled_add(-lr, &vw);
            head.bias.scaled_add(-lr, &vb);
            step += 1;
        }
    }
    let feats = extract_features(encoder, &theta, norm, &val.images)?;
    let predictions = head.predict(feats.view());
    let metrics = compute_metrics(&predictions, &val.labels)?;
    Ok(FinetuneOutcome {
        result: ProbeResult {
            mode: Mode::EndToEnd,
            label_fraction,
            metrics,
            config: serde_json::to_value(config)?,
        },
        backbone: theta,
        head,
        predictions,
    })
}

/// The rows `keep` of a labelled set, in the given order.
pub fn subset(set: &LabeledSet, keep: &[usize]) -> LabeledSet {
    LabeledSet {
        ids: keep.iter().map(|&i| set.ids[i].clone()).collect(),
        images: keep.iter().map(|&i| set.images[i].clone()).collect(),
        labels: keep.iter().map(|&i| set.labels[i]).collect(),
    }
}

pub fn select_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub mode: Mode,
    pub fraction: f64,
    pub top1: f64,
    pub prec_fg: f64,
    pub rec_fg: f64,
}

impl ResultRow {
    pub fn new(run_id: impl Into<String>, result: &ProbeResult) -> Self {
        ResultRow {
            run_id: run_id.into(),
            mode: result.mode,
            fraction: result.label_fraction,
            top1: result.metrics.top1,
            prec_fg: result.metrics.precision_fg,
            rec_fg: result.metrics.recall_fg,
        }
    }
}

/// Append one row to `results.csv`, writing the header when the file is new.
pub fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patch_id: String,
    pub label: Label,
    pub prediction: Label,
}

fn class_label(c: usize) -> Label {
    if c == FOREGROUND {
        Label::Foreground
    } else {
        Label::Background
    }
}

/// Per-sample predictions, `preds_<run>.csv`.
pub fn write_predictions(path: &Path, ids: &[String], labels: &[usize], predictions: &[usize]) -> Result<()> {
    if ids.len() != labels.len() || labels.len() != predictions.len() {
        return Err(Error::Shape("ids, labels and predictions differ in length".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    for ((id, &l), &p) in ids.iter().zip(labels).zip(predictions) {
        w.serialize(PredictionRow {
            patch_id: id.clone(),
            label: class_label(l),
            prediction: class_label(p),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Recompute metrics from a stored predictions file.
pub fn metrics_from_predictions(rows: &[PredictionRow]) -> Result<Metrics> {
    let idx = |l: Label| l.class_index().ok_or_else(|| Error::Dataset("unlabeled prediction row".into()));
    let preds = rows.iter().map(|r| idx(r.prediction)).collect::<Result<Vec<_>>>()?;
    let labels = rows.iter().map(|r| idx(r.label)).collect::<Result<Vec<_>>>()?;
    compute_metrics(&preds, &labels)
}

/// Write an exported feature matrix with labels, for offline embedding plots.
pub fn write_features(path: &Path, features: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (row, label) in features.outer_iter().zip(labels) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{label},{}", cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

/// Checksum of a parameter slice, used to assert frozen backbones stay frozen.
pub fn checksum<T: Scalar>(params: &[T]) -> u64 {
    params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.f64().to_bits()).wrapping_mul(0x0100_0000_01b3)
    })
}
