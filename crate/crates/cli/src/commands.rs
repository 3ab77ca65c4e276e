use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use wildssl::checkpoint;
use wildssl::desk::DeskProtocol;
use wildssl::eval::{
    append_result, extract_features, finetune_end_to_end, linear_probe, write_predictions, LabeledSet, Mode,
    ProbeResult, ResultRow,
};
use wildssl::image::Image;
use wildssl::tiling::synth::{synth_generate, SynthConfig};
use wildssl::tiling::{
    build_downstream_set, build_pretrain_set, load_frames, read_manifest, save_frames, subsample_labels,
    write_manifest, write_patches, DatasetManifest, DownstreamRecipe, Label, PretrainRecipe, SourceFrame, Split,
};
use wildssl::trainer::{monitor_accuracy, KnnConfig, Monitor, Param, Seeds, Trainer};

use crate::config::ConfigFile;
use crate::{report, Cli, Command, DataArgs, DownstreamArgs, EvalArgs, FinetuneArgs, KnnArgs, PretrainArgs, SynthArgs, TileArgs};

pub const MANIFEST: &str = "manifest.csv";
pub const CONFIG_ECHO: &str = "config.toml";
pub const RESULTS: &str = "results.csv";

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Tile(a) => tile(cli, a),
        Command::BuildDownstream(a) => build_downstream(cli, a),
        Command::Pretrain(a) => pretrain(cli, a),
        Command::Probe(a) => probe(cli, a),
        Command::Finetune(a) => finetune(cli, a),
        Command::Knn(a) => knn(cli, a),
        Command::Report(a) => report::run(require_out(cli, "report")?, a),
    }
}

fn require_out<'a>(cli: &'a Cli, cmd: &str) -> Result<&'a Path> {
    cli.out
        .as_deref()
        .with_context(|| format!("`{cmd}` needs --out"))
}

fn load_config(cli: &Cli) -> Result<Option<ConfigFile>> {
    cli.config.as_deref().map(|p| ConfigFile::load(p, cli.desk)).transpose()
}

/// A fresh directory; run outputs are never written over.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("output directory {} already exists and is not empty", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let out = require_out(cli, "synth")?;
    let mut config = SynthConfig {
        width: a.width,
        height: a.height,
        ..SynthConfig::default()
    };
    if let Some(n) = a.animals {
        config.animals_per_frame = n;
    }
    let frames = synth_generate(&config, a.frames, cli.seed.unwrap_or(0))?;
    fresh_dir(out)?;
    save_frames(&frames, out)?;
    let animals: usize = frames.iter().map(|f| f.annotations.len()).sum();
    println!("wrote {} frames with {animals} animals to {}", frames.len(), out.display());
    Ok(())
}

fn tile(cli: &Cli, a: &TileArgs) -> Result<()> {
    let out = require_out(cli, "tile")?;
    let frames = load_frames(&a.input)?;
    let desk = DeskProtocol::default();
    let recipe = PretrainRecipe {
        patches_per_frame: a.per_frame,
        size: a.size.unwrap_or(if cli.desk { desk.pretrain.size } else { PretrainRecipe::default().size }),
        overlap_on_animal_frames: a.overlap.is_some(),
        overlap_fraction: a.overlap.unwrap_or(0.5),
    };
    let manifest = build_pretrain_set(&frames, &recipe, cli.seed.unwrap_or(0))?;
    fresh_dir(out)?;
    write_manifest(&manifest, &out.join(MANIFEST))?;
    if a.write_patches {
        write_patches(&manifest, &frames, &out.join("patches"))?;
    }
    let random = frames.len() * a.per_frame;
    println!(
        "{} patches ({random} random, {} grid) from {} frames",
        manifest.records.len(),
        manifest.records.len() - random,
        frames.len()
    );
    Ok(())
}

fn build_downstream(cli: &Cli, a: &DownstreamArgs) -> Result<()> {
    let out = require_out(cli, "build-downstream")?;
    let frames = load_frames(&a.input)?;
    let desk = DeskProtocol::default().downstream;
    let full = DownstreamRecipe::default();
    let pick = |v: Option<usize>, d: usize, f: usize| v.unwrap_or(if cli.desk { d } else { f });
    let recipe = DownstreamRecipe {
        fg_size: pick(a.fg_size, desk.fg_size, full.fg_size),
        bg_size: pick(a.bg_size, desk.bg_size, full.bg_size),
        bg_per_fg: a.ratio,
        ..full
    };
    let build = build_downstream_set(&frames, &recipe, cli.seed.unwrap_or(0))?;
    fresh_dir(out)?;
    write_manifest(&build.manifest, &out.join(MANIFEST))?;
    if a.write_patches {
        write_patches(&build.manifest, &frames, &out.join("patches"))?;
    }
    for s in &build.skipped {
        println!("skipped box {:?} in {}: {}", s.bbox, s.frame_id, s.reason);
    }
    for split in Split::LABELED {
        let fg = build.manifest.count(split, Label::Foreground);
        let bg = build.manifest.count(split, Label::Background);
        println!("{split}: {fg} foreground, {bg} background");
    }
    let fg = build.manifest.count(Split::Train, Label::Foreground);
    let bg = build.manifest.count(Split::Train, Label::Background);
    if fg > 0 {
        println!("train ratio 1/{:.2}", bg as f64 / fg as f64);
    }
    Ok(())
}

fn crop_all(manifest: &DatasetManifest, frames: &[SourceFrame], split: Split) -> Result<Vec<Image>> {
    let by_id: std::collections::HashMap<&str, &SourceFrame> =
        frames.iter().map(|f| (f.frame_id.as_str(), f)).collect();
    manifest
        .records_in(split)
        .map(|r| {
            let f = by_id
                .get(r.frame_id.as_str())
                .with_context(|| format!("manifest names unknown frame `{}`", r.frame_id))?;
            Ok(r.crop(f)?)
        })
        .collect()
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let out = require_out(cli, "pretrain")?;
    let mut cfg = load_config(cli)?.context("`pretrain` needs --config")?;
    if let Some(ckpt) = &a.resume {
        let saved = wildssl::trainer::checkpoint_config(ckpt)?;
        cfg.preset = saved.strategy;
        cfg.run = saved;
    }
    if let Some(seed) = cli.seed {
        cfg.run.seeds = Seeds::from_base(seed);
    }
    if let Some(g) = a.gamma {
        cfg.run.mix.gamma = g;
    }
    if let Some(p) = a.mix_p {
        cfg.run.mix.p = p;
    }
    if let Some(b) = a.beta {
        cfg.run.mix.alpha = b;
    }
    cfg.validate()?;
    fresh_dir(out)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    if a.dry_run {
        println!("config written to {}", out.join(CONFIG_ECHO).display());
        return Ok(());
    }

    let frames_dir = cfg.frames.as_deref().context("config needs `frames`")?;
    let manifest_path = cfg.pretrain_manifest.as_deref().context("config needs `pretrain_manifest`")?;
    let frames = load_frames(frames_dir)?;
    let data = crop_all(&read_manifest(manifest_path)?, &frames, Split::Pretrain)?;
    let monitor = match &cfg.downstream_manifest {
        Some(p) if cfg.run.knn.every_epochs > 0 => {
            let m = read_manifest(p)?;
            Some(Monitor {
                train: LabeledSet::from_manifest(&m, &frames, Split::Train)?,
                eval: LabeledSet::from_manifest(&m, &frames, Split::Val)?,
            })
        }
        _ => None,
    };
    let trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, &data, monitor.as_ref())?,
        None => Trainer::new(cfg.run.clone(), &data, monitor.as_ref())?,
    };
    let mut trainer = trainer.with_output(out)?;
    info!(
        "{} on {} patches, {} steps",
        cfg.preset,
        data.len(),
        trainer.total_steps()
    );
    trainer.run()?;
    let last = trainer.rows().last().context("no training steps ran")?;
    println!("{}: {} steps, final loss {:.4}", out.display(), trainer.learner().steps, last.loss);
    if let Some(acc) = trainer.rows().iter().rev().find_map(|r| r.knn_acc) {
        println!("last kNN accuracy {acc:.2}");
    }
    Ok(())
}

struct EvalData {
    frames: Vec<SourceFrame>,
    manifest: DatasetManifest,
    split: Split,
    eval: LabeledSet,
}

fn eval_data(cli: &Cli, d: &DataArgs) -> Result<(Option<ConfigFile>, EvalData)> {
    if !d.checkpoint.exists() {
        bail!("checkpoint {} not found", d.checkpoint.display());
    }
    let cfg = load_config(cli)?;
    let frames_dir = d
        .input
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.frames.clone()))
        .context("give --input or a config with `frames`")?;
    let manifest_path = d
        .manifest
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.downstream_manifest.clone()))
        .context("give --manifest or a config with `downstream_manifest`")?;
    let split: Split = d.split.parse()?;
    if split == Split::Train || split == Split::Pretrain {
        bail!("report split must be val or test, got {split}");
    }
    let frames = load_frames(&frames_dir)?;
    let manifest = read_manifest(&manifest_path)?;
    let eval = LabeledSet::from_manifest(&manifest, &frames, split)?;
    Ok((
        cfg,
        EvalData {
            frames,
            manifest,
            split,
            eval,
        },
    ))
}

fn default_run_id(ckpt: &Path, mode: Mode, fraction: f64) -> String {
    let run = ckpt
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or("run");
    format!("{run}_{}_{fraction}", mode.as_str())
}

fn record(cli: &Cli, a: &EvalArgs, data: &EvalData, result: &ProbeResult, predictions: &[usize]) -> Result<()> {
    let out = require_out(cli, "evaluation")?;
    fs::create_dir_all(out)?;
    let run_id = a
        .run_id
        .clone()
        .unwrap_or_else(|| default_run_id(&a.data.checkpoint, result.mode, result.label_fraction));
    append_result(&out.join(RESULTS), &ResultRow::new(run_id.clone(), result))?;
    let preds = out.join(format!("preds_{run_id}.csv"));
    write_predictions(&preds, &data.eval.ids, &data.eval.labels, predictions)?;
    let m = &result.metrics;
    println!(
        "{run_id} ({} on {}): top1 {:.2}, precision_fg {:.2}, recall_fg {:.2}",
        result.mode.as_str(),
        data.split,
        m.top1,
        m.precision_fg,
        m.recall_fg
    );
    if m.no_predicted_fg {
        println!("warning: no foreground predictions, precision reported as 0");
    }
    Ok(())
}

fn labeled_train(data: &EvalData, fraction: f64, seed: u64) -> Result<LabeledSet> {
    let sub = subsample_labels(&data.manifest, fraction, seed)?;
    Ok(LabeledSet::from_manifest(&sub, &data.frames, Split::Train)?)
}

fn probe(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (cfg, data) = eval_data(cli, &a.data)?;
    let mut pc = cfg.map(|c| c.probe).unwrap_or_default();
    if let Some(s) = cli.seed {
        pc.seed = s;
    }
    let (learner, _) = checkpoint::load::<Param>(&a.data.checkpoint)?;
    let train = labeled_train(&data, a.fraction, pc.seed)?;
    let enc = &learner.state.encoder;
    let xt = extract_features(enc, &learner.state.query, &learner.norm, &train.images)?;
    let xe = extract_features(enc, &learner.state.query, &learner.norm, &data.eval.images)?;
    let outcome = linear_probe((xt.view(), &train.labels), (xe.view(), &data.eval.labels), a.fraction, &pc)?;
    record(cli, a, &data, &outcome.result, &outcome.predictions)
}

fn finetune(cli: &Cli, a: &FinetuneArgs) -> Result<()> {
    let (cfg, data) = eval_data(cli, &a.eval.data)?;
    let mut fc = cfg.map(|c| c.finetune).unwrap_or_default();
    if let Some(s) = cli.seed {
        fc.seed = s;
    }
    if let Some(e) = a.epochs {
        fc.epochs = e;
    }
    if let Some(lr) = a.lr {
        fc.lr = lr;
    }
    if let Some(b) = a.batch_size {
        fc.batch_size = b;
    }
    let (learner, _) = checkpoint::load::<Param>(&a.eval.data.checkpoint)?;
    let train = labeled_train(&data, a.eval.fraction, fc.seed)?;
    let outcome = finetune_end_to_end(
        &learner.state.encoder,
        &learner.state.query,
        &learner.norm,
        &train,
        &data.eval,
        a.eval.fraction,
        &fc,
    )?;
    record(cli, &a.eval, &data, &outcome.result, &outcome.predictions)
}

fn knn(cli: &Cli, a: &KnnArgs) -> Result<()> {
    let (_, data) = eval_data(cli, &a.data)?;
    let (learner, _) = checkpoint::load::<Param>(&a.data.checkpoint)?;
    let monitor = Monitor {
        train: LabeledSet::from_manifest(&data.manifest, &data.frames, Split::Train)?,
        eval: data.eval,
    };
    let cfg = KnnConfig {
        k: a.k,
        t: a.t,
        every_epochs: 1,
    };
    let acc = monitor_accuracy(&learner, &monitor, &cfg)?;
    println!("kNN top-1 on {} (k={}, t={}): {acc:.2}", data.split, a.k, a.t);
    Ok(())
}
