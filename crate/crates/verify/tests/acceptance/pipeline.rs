//! Criteria 7-10: desk-scale learning signal and strategy ordering,
//! determinism and resume, dataset invariants.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::time::Instant;

use wildssl::augment::Strategy;
use wildssl::desk::{DeskData, DeskProtocol};
use wildssl::tiling::{read_manifest, write_manifest, DatasetManifest, Label, Split};
use wildssl::trainer::{Monitor, RunConfig, Trainer};

use crate::{ensure, Outcome};

const SEEDS: [u64; 3] = [0, 1, 2];
const MIN_GAIN: f64 = 15.0;
/// 30 minutes on 8 cores, scaled to the cores available.
fn budget_secs() -> f64 {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()) as f64;
    30.0 * 60.0 * (8.0 / cores).max(1.0)
}

pub struct DeskResults {
    /// Probe top-1 per strategy, one entry per seed.
    top1: Result<HashMap<Strategy, Vec<f64>>, String>,
    baseline: Vec<f64>,
    secs: f64,
    /// Invariant check of the desk build itself.
    pub build: Result<String, String>,
}

impl DeskResults {
    pub fn collect() -> Self {
        let start = Instant::now();
        let protocol = DeskProtocol::default();
        let mut baseline = Vec::new();
        let mut build = Err("desk data was not built".to_string());
        let top1 = (|| -> Result<HashMap<Strategy, Vec<f64>>, String> {
            let data = protocol.build_data().map_err(|e| e.to_string())?;
            build = check_build("desk build", &data.downstream, &data.pretrain_manifest);
            let mut out: HashMap<Strategy, Vec<f64>> = HashMap::new();
            for seed in SEEDS {
                let base = protocol
                    .baseline(&data, &RunConfig::desk(Strategy::MocoV2), seed)
                    .map_err(|e| e.to_string())?;
                baseline.push(base.result.metrics.top1);
                eprintln!("  seed {seed} random init: {:.1}", base.result.metrics.top1);
                for s in Strategy::ALL {
                    let run = protocol
                        .pretrain_and_probe(&data, &RunConfig::desk(s), seed)
                        .map_err(|e| format!("{} seed {seed}: {e}", s.as_str()))?;
                    let acc = run.outcome.result.metrics.top1;
                    eprintln!("  seed {seed} {}: {acc:.1}", s.as_str());
                    out.entry(s).or_default().push(acc);
                }
            }
            Ok(out)
        })();
        DeskResults {
            top1,
            baseline,
            secs: start.elapsed().as_secs_f64(),
            build,
        }
    }

    fn means(&self) -> Result<(f64, Vec<(Strategy, f64)>), String> {
        let top1 = self.top1.as_ref().map_err(Clone::clone)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok((
            mean(&self.baseline),
            Strategy::ALL.iter().map(|s| (*s, mean(&top1[s]))).collect(),
        ))
    }

    pub fn learning_signal(&self) -> Outcome {
        let (base, means) = self.means()?;
        let gains: Vec<String> = means.iter().map(|(s, m)| format!("{} {:+.1}", s.as_str(), m - base)).collect();
        let budget = budget_secs();
        let detail = format!(
            "random init {base:.1}%, gains {}; {:.0} s of {budget:.0} s budget",
            gains.join(", "),
            self.secs
        );
        ensure!(self.secs < budget, "{detail}; over budget");
        let short: Vec<&str> = means.iter().filter(|(_, m)| m - base < MIN_GAIN).map(|(s, _)| s.as_str()).collect();
        ensure!(short.is_empty(), "{detail}; below +{MIN_GAIN}: {}", short.join(", "));
        Ok(detail)
    }

    pub fn trend(&self) -> Outcome {
        let (_, means) = self.means()?;
        let get = |s: Strategy| means.iter().find(|(x, _)| *x == s).map(|(_, m)| *m).expect("all strategies");
        let moco = get(Strategy::MocoV2);
        let mut behind = Vec::new();
        for s in [Strategy::MixCo, Strategy::GeoCld] {
            if get(s) < moco - 2.0 {
                behind.push(format!("{} {:.1} < moco_v2 {moco:.1}", s.as_str(), get(s)));
            }
        }
        let detail = format!(
            "moco_v2 {moco:.1}, mixco {:.1}, geocld {:.1}",
            get(Strategy::MixCo),
            get(Strategy::GeoCld)
        );
        ensure!(behind.is_empty(), "{}", behind.join("; "));
        Ok(detail)
    }
}

fn small_data(frame_seed: u64) -> Result<DeskData, String> {
    DeskProtocol {
        frames: 12,
        frame_seed,
        ..DeskProtocol::default()
    }
    .build_data()
    .map_err(|e| e.to_string())
}

fn small_config(s: Strategy) -> RunConfig {
    let mut c = RunConfig::desk(s);
    c.epochs = 2;
    c.batch_size = 16;
    c.queue_size = 32;
    c.hidden_dim = 32;
    c.cld.k = 4;
    c.knn.k = 5;
    c.knn.every_epochs = 1;
    c
}

pub fn determinism() -> Outcome {
    let data = small_data(3)?;
    let monitor = Monitor {
        train: data.train.clone(),
        eval: data.val.clone(),
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let err = |e: wildssl::Error| e.to_string();
    for s in Strategy::ALL {
        let config = small_config(s);
        let dir = |name: &str| tmp.path().join(format!("{}_{name}", s.as_str()));
        let run = |name: &str| -> Result<Vec<u8>, String> {
            let mut t = Trainer::new(config.clone(), &data.pretrain, Some(&monitor))
                .map_err(err)?
                .with_output(&dir(name))
                .map_err(err)?;
            t.run().map_err(err)?;
            fs::read(dir(name).join("metrics.csv")).map_err(|e| e.to_string())
        };
        let a = run("a")?;
        let b = run("b")?;
        ensure!(a == b, "{}: metrics.csv differs between identical runs", s.as_str());

        let (half, total) = {
            let mut t = Trainer::new(config.clone(), &data.pretrain, Some(&monitor))
                .map_err(err)?
                .with_output(&dir("half"))
                .map_err(err)?;
            let total = t.total_steps();
            t.run_until(total / 2).map_err(err)?;
            (total / 2, total)
        };
        let ckpt = Trainer::checkpoint_path(&dir("half"), half);
        let mut resumed = Trainer::resume(&ckpt, &data.pretrain, Some(&monitor))
            .map_err(err)?
            .with_output(&dir("resumed"))
            .map_err(err)?;
        resumed.run().map_err(err)?;
        let r = fs::read(dir("resumed").join("metrics.csv")).map_err(|e| e.to_string())?;
        ensure!(r == a, "{}: resumed metrics.csv differs", s.as_str());
        let end = |name: &str| fs::read(Trainer::checkpoint_path(&dir(name), total)).map_err(|e| e.to_string());
        ensure!(end("resumed")? == end("a")?, "{}: final checkpoint differs after resume", s.as_str());
    }
    Ok("5 strategies: byte-identical metrics.csv; resume at half matches uninterrupted run".into())
}

fn check_build(what: &str, downstream: &DatasetManifest, pretrain: &DatasetManifest) -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let down_path = tmp.path().join("downstream.csv");
    let pre_path = tmp.path().join("pretrain.csv");
    write_manifest(downstream, &down_path).map_err(|e| e.to_string())?;
    write_manifest(pretrain, &pre_path).map_err(|e| e.to_string())?;
    let down = read_manifest(&down_path).map_err(|e| e.to_string())?;

    let mut frames: HashMap<Split, HashSet<&str>> = HashMap::new();
    for r in &down.records {
        frames.entry(r.split).or_default().insert(r.frame_id.as_str());
    }
    let empty = HashSet::new();
    let get = |s: Split| frames.get(&s).unwrap_or(&empty);
    for (a, b) in [(Split::Train, Split::Val), (Split::Train, Split::Test), (Split::Val, Split::Test)] {
        let shared = get(a).intersection(get(b)).count();
        ensure!(shared == 0, "{what}: {shared} frames in both {a} and {b}");
    }
    let ids: HashSet<&str> = down.records.iter().map(|r| r.patch_id.as_str()).collect();
    ensure!(ids.len() == down.records.len(), "{what}: duplicate patch ids");

    let fg = down.count(Split::Train, Label::Foreground);
    let bg = down.count(Split::Train, Label::Background);
    ensure!(fg > 0, "{what}: no foreground patches in train");
    ensure!(bg == 18 * fg, "{what}: train has {bg} background for {fg} foreground");

    let text = fs::read_to_string(&pre_path).map_err(|e| e.to_string())?;
    for word in ["foreground", "background"] {
        ensure!(!text.contains(word), "{what}: pretraining manifest mentions `{word}`");
    }
    ensure!(
        pretrain.records.iter().all(|r| r.label == Label::Unlabeled && r.split == Split::Pretrain),
        "{what}: labelled record in the pretraining set"
    );
    Ok(format!("{fg}:{bg}"))
}

pub fn dataset_invariants(desk_build: &Result<String, String>) -> Outcome {
    let mut ratios = Vec::new();
    for frame_seed in 1..=4 {
        let protocol = DeskProtocol {
            frames: 60,
            frame_seed,
            ..DeskProtocol::default()
        };
        let data = protocol.build_data().map_err(|e| e.to_string())?;
        ratios.push(check_build(&format!("build {frame_seed}"), &data.downstream, &data.pretrain_manifest)?);
    }
    ratios.push(desk_build.clone()?);
    let small = small_data(3)?;
    ratios.push(check_build("determinism build", &small.downstream, &small.pretrain_manifest)?);
    Ok(format!(
        "{} builds: disjoint splits, no label strings in pretraining manifests, train fg:bg {}",
        ratios.len(),
        ratios.join(" ")
    ))
}
