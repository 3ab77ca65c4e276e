//! Pretraining runs: configuration and presets, the step loop over all five
//! strategies, metric logging, checkpoints with resume, and the kNN monitor.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::{ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugPolicy, Strategy, ViewBundle};
use crate::checkpoint;
use crate::cld::{cld_step, CldConfig};
use crate::contrastive::{moco_step, FeatureQueue, Learner, StepLoss, StepParams, Temperature};
use crate::encoder::{BackboneId, EncoderSpec, EncoderState, InputNorm};
use crate::error::{invalid, Error, Result};
use crate::eval::{extract_features, LabeledSet};
use crate::image::Image;
use crate::mixgeo::{geo_step, mixco_step, MixConfig};
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::rng::{self, tag};

/// Parameter precision used for pretraining.
pub type Param = f32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub augment: u64,
    pub init: u64,
    pub kmeans: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 0,
            augment: 1,
            init: 2,
            kmeans: 3,
        }
    }
}

impl Seeds {
    /// Four consecutive seeds `4·seed .. 4·seed + 3`; base 0 gives the defaults.
    /// Streams hash their seeds, so neighbouring values are independent.
    pub fn from_base(seed: u64) -> Self {
        let b = seed.wrapping_mul(4);
        Seeds {
            data: b,
            augment: b.wrapping_add(1),
            init: b.wrapping_add(2),
            kmeans: b.wrapping_add(3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub t: f64,
    /// Evaluate every this many epochs; 0 disables the monitor.
    pub every_epochs: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 20,
            t: 0.02,
            every_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub backbone: BackboneId,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; `0.03 · batch_size / 256` when absent.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub tau_q: f64,
    /// Key-encoder momentum m.
    pub momentum: f64,
    pub queue_size: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub cld: CldConfig,
    pub mix: MixConfig,
    pub aug: AugPolicy,
    pub seeds: Seeds,
    /// Save `ckpt_<step>.bin` every this many steps; 0 saves only the final state.
    pub checkpoint_every: u64,
    pub knn: KnnConfig,
    /// Log zero wall time so that metric files of equal runs are byte-identical.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategy: Strategy::MocoV2,
            backbone: BackboneId::Resnet50,
            epochs: 200,
            batch_size: 64,
            lr: None,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            tau_q: 0.2,
            momentum: 0.999,
            queue_size: 4096,
            hidden_dim: 2048,
            proj_dim: 128,
            cld: CldConfig::default(),
            mix: MixConfig::default(),
            aug: AugPolicy::default(),
            seeds: Seeds::default(),
            checkpoint_every: 0,
            knn: KnnConfig::default(),
            deterministic: true,
        }
    }
}

impl RunConfig {
    /// Full-scale defaults for one model variant.
    pub fn preset(strategy: Strategy) -> Self {
        RunConfig {
            strategy,
            ..RunConfig::default()
        }
    }

    /// Desk-scale variant: small backbone, 32 px crops, short schedule.
    pub fn desk(strategy: Strategy) -> Self {
        let mut aug = AugPolicy::with_crop(32);
        aug.base.blur_sigma = [0.1, 0.6];
        aug.base.blur_kernel = 5;
        RunConfig {
            strategy,
            backbone: BackboneId::DeskCnn,
            epochs: 20,
            batch_size: 64,
            lr: Some(0.06),
            momentum: 0.99,
            queue_size: 512,
            hidden_dim: 256,
            proj_dim: 128,
            aug,
            ..RunConfig::default()
        }
    }

    pub fn lr0(&self) -> f64 {
        self.lr.unwrap_or(0.03 * self.batch_size as f64 / 256.0)
    }

    pub fn crop_size(&self) -> usize {
        self.aug.base.crop_size
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec::for_backbone(self.backbone, self.crop_size(), self.hidden_dim, self.proj_dim)
    }

    /// Validate every field, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        check(self.epochs > 0, "epochs must be positive".into());
        check(self.batch_size > 1, format!("batch_size must be at least 2, got {}", self.batch_size));
        check(
            self.lr0().is_finite() && self.lr0() > 0.0,
            format!("lr must be positive, got {}", self.lr0()),
        );
        check(self.weight_decay >= 0.0, "weight_decay must be non-negative".into());
        check((0.0..1.0).contains(&self.sgd_momentum), "sgd_momentum must be in [0, 1)".into());
        check(Temperature::new(self.tau_q).is_ok(), format!("tau_q must be positive, got {}", self.tau_q));
        check((0.0..1.0).contains(&self.momentum), format!("momentum m must be in [0, 1), got {}", self.momentum));
        check(
            self.queue_size >= self.batch_size,
            format!("queue_size {} must hold at least one batch of {}", self.queue_size, self.batch_size),
        );
        check(self.hidden_dim > 0 && self.proj_dim > 0, "head dimensions must be positive".into());
        check(self.knn.k > 0 && self.knn.t > 0.0, "knn k and t must be positive".into());
        for (name, r) in [
            ("cld", self.cld.validate()),
            ("mix", self.mix.validate()),
            ("aug", self.aug.validate(usize::MAX)),
        ] {
            if let Err(e) = r {
                problems.push(format!("{name}: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }

    fn step_params(&self, lr: f64) -> Result<StepParams> {
        Ok(StepParams {
            lr,
            momentum: self.momentum,
            tau: Temperature::new(self.tau_q)?,
        })
    }

    fn cld_config(&self) -> CldConfig {
        CldConfig {
            kmeans_seed: self.seeds.kmeans,
            ..self.cld.clone()
        }
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Completed steps after this one, starting at 1.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_inst: f64,
    pub loss_group: Option<f64>,
    pub mixed: Option<bool>,
    /// Weighted kNN top-1 in percent, on epochs where the monitor ran.
    pub knn_acc: Option<f64>,
    pub wall_time: f64,
}

/// `metrics.csv` columns for a strategy. Loss terms a strategy does not
/// have get no column.
pub fn metric_columns(strategy: Strategy) -> Vec<&'static str> {
    let mut cols = vec!["step", "epoch", "lr", "loss", "loss_inst"];
    if strategy.uses_cld() {
        cols.push("loss_group");
    }
    if strategy.uses_mix() {
        cols.push("mixed");
    }
    cols.extend(["knn_acc", "wall_time"]);
    cols
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn format_row(strategy: Strategy, row: &MetricRow) -> String {
    let mut cells = vec![
        row.step.to_string(),
        row.epoch.to_string(),
        row.lr.to_string(),
        row.loss.to_string(),
        row.loss_inst.to_string(),
    ];
    if strategy.uses_cld() {
        cells.push(opt(row.loss_group));
    }
    if strategy.uses_mix() {
        cells.push(opt(row.mixed.map(u8::from)));
    }
    cells.push(opt(row.knn_acc));
    cells.push(row.wall_time.to_string());
    cells.join(",")
}

/// Parse a `metrics.csv` of any strategy.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Dataset(format!("{}: missing column `{name}`", path.display())))
    };
    let (c_step, c_epoch, c_lr, c_loss, c_inst, c_wall) =
        (need("step")?, need("epoch")?, need("lr")?, need("loss")?, need("loss_inst")?, need("wall_time")?);
    let (c_group, c_mixed, c_knn) = (col("loss_group"), col("mixed"), col("knn_acc"));
    let bad = |what: &str, line: usize| Error::Dataset(format!("{}: bad {what} on row {line}", path.display()));
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |c: usize, what: &str| -> Result<f64> { rec[c].parse().map_err(|_| bad(what, i + 1)) };
        let optional = |c: Option<usize>, what: &str| -> Result<Option<f64>> {
            match c.map(|c| &rec[c]) {
                None | Some("") => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|_| bad(what, i + 1)),
            }
        };
        rows.push(MetricRow {
            step: rec[c_step].parse().map_err(|_| bad("step", i + 1))?,
            epoch: rec[c_epoch].parse().map_err(|_| bad("epoch", i + 1))?,
            lr: num(c_lr, "lr")?,
            loss: num(c_loss, "loss")?,
            loss_inst: num(c_inst, "loss_inst")?,
            loss_group: optional(c_group, "loss_group")?,
            mixed: optional(c_mixed, "mixed")?.map(|v| v != 0.0),
            knn_acc: optional(c_knn, "knn_acc")?,
            wall_time: num(c_wall, "wall_time")?,
        });
    }
    Ok(rows)
}

/// Weighted kNN top-1 accuracy in percent: each of the `k` most
/// cosine-similar train points votes for its label with weight `exp(sim/t)`.
/// Inputs must be unit-norm rows.
pub fn knn_monitor(
    train: ArrayView2<f64>,
    train_labels: &[usize],
    eval: ArrayView2<f64>,
    eval_labels: &[usize],
    k: usize,
    t: f64,
) -> Result<f64> {
    let preds = knn_predict(train, train_labels, eval, k, t)?;
    if preds.len() != eval_labels.len() {
        return Err(Error::Shape(format!("{} eval rows, {} labels", preds.len(), eval_labels.len())));
    }
    if preds.is_empty() {
        return Err(invalid("kNN monitor needs at least one eval point"));
    }
    let hits = preds.iter().zip(eval_labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

fn check_unit(x: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in x.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("{what} row {i} has norm {norm}, expected unit norm")));
        }
    }
    Ok(())
}

pub fn knn_predict(
    train: ArrayView2<f64>,
    train_labels: &[usize],
    eval: ArrayView2<f64>,
    k: usize,
    t: f64,
) -> Result<Vec<usize>> {
    if train.nrows() != train_labels.len() {
        return Err(Error::Shape(format!("{} train rows, {} labels", train.nrows(), train_labels.len())));
    }
    if k == 0 || k > train.nrows() {
        return Err(invalid(format!("k = {k} must be in 1..={}", train.nrows())));
    }
    if !(t > 0.0) {
        return Err(invalid(format!("kNN temperature must be positive, got {t}")));
    }
    if train.ncols() != eval.ncols() {
        return Err(Error::Shape("train and eval feature dimensions differ".into()));
    }
    check_unit(train, "train")?;
    check_unit(eval, "eval")?;
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let predict = |e: ArrayView1<f64>| {
        let sims = train.dot(&e);
        let mut idx: Vec<usize> = (0..sims.len()).collect();
        // descending similarity, ties broken by train index
        idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        let mut votes = vec![0.0f64; classes];
        for &i in &idx[..k] {
            votes[train_labels[i]] += ((sims[i] - 1.0) / t).exp();
        }
        votes
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b })
            .0
    };
    Ok(eval.outer_iter().map(predict).collect())
}

/// Labelled patches for the kNN monitor.
#[derive(Clone, Debug)]
pub struct Monitor {
    pub train: LabeledSet,
    pub eval: LabeledSet,
}

fn unit_rows(mut x: ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    for mut row in x.outer_iter_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
    }
    x
}

/// kNN accuracy of the current query backbone on the monitor sets.
pub fn monitor_accuracy(learner: &Learner<Param>, monitor: &Monitor, knn: &KnnConfig) -> Result<f64> {
    let enc = &learner.state.encoder;
    let train = unit_rows(extract_features(enc, &learner.state.query, &learner.norm, &monitor.train.images)?);
    let eval = unit_rows(extract_features(enc, &learner.state.query, &learner.norm, &monitor.eval.images)?);
    let k = knn.k.min(train.nrows());
    knn_monitor(train.view(), &monitor.train.labels, eval.view(), &monitor.eval.labels, k, knn.t)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    rows: Vec<MetricRow>,
    wall_time: f64,
}

/// A pretraining run in progress.
pub struct Trainer<'a> {
    config: RunConfig,
    data: &'a [Image],
    monitor: Option<&'a Monitor>,
    learner: Learner<Param>,
    rows: Vec<MetricRow>,
    out: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
    order: Option<(usize, Vec<usize>)>,
    started: Instant,
    wall_offset: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, data: &'a [Image], monitor: Option<&'a Monitor>) -> Result<Self> {
        config.validate()?;
        check_data(&config, data)?;
        let spec = config.encoder_spec();
        let state = EncoderState::<Param>::new(spec, config.seeds.init)?;
        let n = state.encoder.param_count();
        let queue = FeatureQueue::new(config.queue_size, config.proj_dim)?;
        let opt = Sgd::new(
            SgdConfig {
                momentum: config.sgd_momentum,
                weight_decay: config.weight_decay,
            },
            n,
        );
        let norm = InputNorm::estimate(data.iter())?;
        let learner = Learner::new(state, queue, opt, norm);
        Ok(Trainer {
            config,
            data,
            monitor,
            learner,
            rows: Vec::new(),
            out: None,
            metrics: None,
            order: None,
            started: Instant::now(),
            wall_offset: 0.0,
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::run`].
    pub fn resume(path: &Path, data: &'a [Image], monitor: Option<&'a Monitor>) -> Result<Self> {
        let (learner, extra) = checkpoint::load::<Param>(path)?;
        let meta: CheckpointMeta = serde_json::from_value(extra).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("not a pretraining checkpoint: {e}"),
        })?;
        check_data(&meta.config, data)?;
        if meta.rows.len() as u64 != learner.steps {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("{} metric rows for {} steps", meta.rows.len(), learner.steps),
            });
        }
        Ok(Trainer {
            config: meta.config,
            data,
            monitor,
            learner,
            rows: meta.rows,
            out: None,
            metrics: None,
            order: None,
            started: Instant::now(),
            wall_offset: meta.wall_time,
        })
    }

    /// Write `metrics.csv` and checkpoints into `dir`. Rows already logged
    /// (after a resume) are written first.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        writeln!(w, "{}", metric_columns(self.config.strategy).join(",")).map_err(io)?;
        for row in &self.rows {
            writeln!(w, "{}", format_row(self.config.strategy, row)).map_err(io)?;
        }
        w.flush().map_err(io)?;
        self.metrics = Some(w);
        self.out = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn learner(&self) -> &Learner<Param> {
        &self.learner
    }

    pub fn into_learner(self) -> Learner<Param> {
        self.learner
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.len() / self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.shuffle(&mut rng::stream(self.config.seeds.data, &[tag::SHUFFLE, epoch as u64]));
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("order set").1
    }

    /// Dataset indices of the batch for a step (drop-last batching).
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as usize;
        let b = (step % spe) as usize;
        let bs = self.config.batch_size;
        self.epoch_order(epoch)[b * bs..(b + 1) * bs].to_vec()
    }

    /// Augmented views of the batch for a step. Each sample's views depend
    /// only on the augment seed, the epoch and the sample index.
    pub fn batch_views(&mut self, step: u64) -> Result<Vec<ViewBundle>> {
        let epoch = step / self.steps_per_epoch();
        let idx = self.batch_indices(step);
        let (data, strategy, aug, seed) = (self.data, self.config.strategy, &self.config.aug, self.config.seeds.augment);
        idx.par_iter()
            .map(|&i| {
                let mut r = rng::stream(seed, &[tag::AUGMENT, epoch, i as u64]);
                make_views(&data[i], strategy, aug, &mut r)
            })
            .collect()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        cosine_lr(self.config.lr0(), step as usize, self.total_steps() as usize)
    }

    fn step_once(&mut self) -> Result<StepLoss> {
        let step = self.learner.steps;
        let bundles = self.batch_views(step)?;
        let params = self.config.step_params(self.lr_at(step))?;
        let views = |f: fn(&ViewBundle) -> Option<&Image>| -> Result<Vec<&Image>> {
            bundles
                .iter()
                .map(|b| f(b).ok_or_else(|| invalid("strategy produced an incomplete view bundle")))
                .collect()
        };
        let plus = views(|b| Some(&b.i_plus))?;
        let learner = &mut self.learner;
        match self.config.strategy {
            Strategy::MocoV2 => moco_step(learner, &views(|b| b.i1.as_ref())?, &plus, params),
            Strategy::MocoCld | Strategy::GeoCld => {
                let (v1, v2) = (views(|b| b.i1.as_ref())?, views(|b| b.i2.as_ref())?);
                cld_step(learner, (&v1, &v2, &plus), &self.config.cld_config(), params, step)
            }
            Strategy::MocoGeo => {
                let (v1, v2) = (views(|b| b.i1.as_ref())?, views(|b| b.i2.as_ref())?);
                geo_step(learner, (&v1, &v2, &plus), self.config.mix.gamma, params)
            }
            Strategy::MixCo => {
                let mut r = rng::stream(self.config.seeds.augment, &[tag::MIX, step]);
                mixco_step(learner, &bundles, &self.config.mix, params, &mut r)
            }
        }
    }

    fn wall_time(&self) -> f64 {
        if self.config.deterministic {
            0.0
        } else {
            self.wall_offset + self.started.elapsed().as_secs_f64()
        }
    }

    /// Train to the end of the schedule.
    pub fn run(&mut self) -> Result<()> {
        let total = self.total_steps();
        self.run_until(total)
    }

    /// Train until `stop` steps are complete (capped at the schedule length).
    /// A checkpoint is always written at the stopping point when an output
    /// directory is set.
    pub fn run_until(&mut self, stop: u64) -> Result<()> {
        let stop = stop.min(self.total_steps());
        let spe = self.steps_per_epoch();
        while self.learner.steps < stop {
            let step = self.learner.steps;
            let epoch = (step / spe) as usize;
            let lr = self.lr_at(step);
            let loss = self.step_once()?;
            let done = self.learner.steps;
            let mut row = MetricRow {
                step: done,
                epoch,
                lr,
                loss: loss.total,
                loss_inst: loss.instance,
                loss_group: loss.group.filter(|_| self.config.strategy.uses_cld()),
                mixed: loss.mixed.filter(|_| self.config.strategy.uses_mix()),
                knn_acc: None,
                wall_time: 0.0,
            };
            let epoch_end = done % spe == 0;
            let every = self.config.knn.every_epochs;
            if let (Some(monitor), true) = (self.monitor, epoch_end && every > 0) {
                if (epoch + 1) % every == 0 || done == self.total_steps() {
                    row.knn_acc = Some(monitor_accuracy(&self.learner, monitor, &self.config.knn)?);
                }
            }
            row.wall_time = self.wall_time();
            if epoch_end {
                info!(
                    "epoch {epoch} step {done}: loss {:.4}{}",
                    row.loss,
                    row.knn_acc.map(|a| format!(" knn {a:.1}%")).unwrap_or_default()
                );
            }
            self.log(row)?;
            let every = self.config.checkpoint_every;
            if every > 0 && done % every == 0 && done < stop {
                self.save_checkpoint()?;
            }
        }
        if self.out.is_some() {
            self.save_checkpoint()?;
        }
        Ok(())
    }

    fn log(&mut self, row: MetricRow) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.metrics.as_mut(), self.out.as_ref()) {
            let path = dir.join("metrics.csv");
            writeln!(w, "{}", format_row(self.config.strategy, &row)).map_err(|e| Error::io(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    /// Path of the checkpoint for a step count inside `dir`.
    pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("ckpt_{step}.bin"))
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .as_ref()
            .ok_or_else(|| invalid("no output directory for checkpoints"))?;
        let path = Self::checkpoint_path(dir, self.learner.steps);
        let meta = CheckpointMeta {
            config: self.config.clone(),
            rows: self.rows.clone(),
            wall_time: self.wall_time(),
        };
        checkpoint::save(&path, &self.learner, &serde_json::to_value(&meta)?)?;
        Ok(path)
    }
}

fn check_data(config: &RunConfig, data: &[Image]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("pretraining set is empty".into()));
    }
    if data.len() < config.batch_size {
        return Err(Error::Dataset(format!(
            "pretraining set of {} patches is smaller than one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    let min_side = data.iter().map(|i| i.height().min(i.width())).min().expect("non-empty");
    config.aug.validate(min_side)
}

/// Read the run configuration stored in a pretraining checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    let (_, extra) = checkpoint::load::<Param>(path)?;
    let meta: CheckpointMeta = serde_json::from_value(extra).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("not a pretraining checkpoint: {e}"),
    })?;
    Ok(meta.config)
}

/// Build a query/key encoder pair by backbone name with the run's head sizes.
pub fn build_encoder(backbone_id: &str, config: &RunConfig) -> Result<EncoderState<Param>> {
    let id: BackboneId = backbone_id.parse()?;
    EncoderState::new(
        EncoderSpec::for_backbone(id, config.crop_size(), config.hidden_dim, config.proj_dim),
        config.seeds.init,
    )
}
