//! Config files: a `preset`, dataset paths, overrides of any run field, and
//! `[probe]` / `[finetune]` tables. Environment variables `WILDSSL_<KEY>`
//! (nested keys joined by `__`) override the file.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use toml::{Table, Value};
use wildssl::augment::Strategy;
use wildssl::eval::{FinetuneConfig, ProbeConfig};
use wildssl::trainer::RunConfig;

pub const ENV_PREFIX: &str = "WILDSSL_";

const PATH_KEYS: [&str; 3] = ["frames", "pretrain_manifest", "downstream_manifest"];

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub preset: Strategy,
    pub desk: bool,
    pub frames: Option<PathBuf>,
    pub pretrain_manifest: Option<PathBuf>,
    pub downstream_manifest: Option<PathBuf>,
    pub run: RunConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
}

impl ConfigFile {
    /// Read `path`, apply environment overrides, and force desk scale when `desk` is set.
    pub fn load(path: &Path, desk: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, std::env::vars(), desk).with_context(|| format!("config {}", path.display()))
    }

    /// Relative dataset paths resolve against `base_dir`.
    pub fn parse(
        text: &str,
        base_dir: &Path,
        env: impl IntoIterator<Item = (String, String)>,
        force_desk: bool,
    ) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e| anyhow!("{e}"))?;
        apply_env(&mut table, env)?;

        let preset = match table.remove("preset") {
            None => Strategy::MocoV2,
            Some(Value::String(s)) => s.parse().map_err(|e| anyhow!("preset: {e}"))?,
            Some(v) => bail!("preset must be a string, got {v}"),
        };
        let desk = match table.remove("desk") {
            None => false,
            Some(Value::Boolean(b)) => b,
            Some(v) => bail!("desk must be a boolean, got {v}"),
        } || force_desk;
        let mut paths = [None, None, None];
        for (slot, key) in paths.iter_mut().zip(PATH_KEYS) {
            match table.remove(key) {
                None => {}
                Some(Value::String(s)) => *slot = Some(base_dir.join(s)),
                Some(v) => bail!("{key} must be a path string, got {v}"),
            }
        }
        let probe_t = take_table(&mut table, "probe")?;
        let finetune_t = take_table(&mut table, "finetune")?;

        let run_base = base_run(preset, desk);
        let mut unknown = Vec::new();
        let mut run_known = to_table(&RunConfig {
            lr: Some(0.0),
            ..run_base.clone()
        })?;
        run_known.remove("strategy");
        unknown_keys(&table, &run_known, "", &mut unknown);
        unknown_keys(&probe_t, &to_table(&ProbeConfig::default())?, "probe.", &mut unknown);
        unknown_keys(&finetune_t, &to_table(&FinetuneConfig::default())?, "finetune.", &mut unknown);
        if !unknown.is_empty() {
            let list: Vec<String> = unknown.iter().map(|k| format!("`{k}`")).collect();
            bail!("unknown config key{} {}", if unknown.len() > 1 { "s" } else { "" }, list.join(", "));
        }

        let mut merged = to_table(&run_base)?;
        merge(&mut merged, table);
        let run: RunConfig = Value::Table(merged).try_into().map_err(|e| anyhow!("{e}"))?;
        let probe: ProbeConfig = Value::Table(probe_t).try_into().map_err(|e| anyhow!("probe: {e}"))?;
        let finetune: FinetuneConfig = Value::Table(finetune_t).try_into().map_err(|e| anyhow!("finetune: {e}"))?;
        let [frames, pretrain_manifest, downstream_manifest] = paths;
        let cfg = ConfigFile {
            preset,
            desk,
            frames,
            pretrain_manifest,
            downstream_manifest,
            run,
            probe,
            finetune,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for r in [self.run.validate(), self.probe.validate(), self.finetune.validate()] {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("{}", problems.join("; "))
        }
    }

    /// The effective configuration as a file that loads back to `self`.
    pub fn to_toml(&self) -> Result<String> {
        let mut t = Table::new();
        t.insert("preset".into(), Value::String(self.preset.as_str().into()));
        t.insert("desk".into(), Value::Boolean(self.desk));
        let paths = [&self.frames, &self.pretrain_manifest, &self.downstream_manifest];
        for (key, p) in PATH_KEYS.iter().zip(paths) {
            if let Some(p) = p {
                let abs = std::path::absolute(p).unwrap_or_else(|_| p.clone());
                t.insert((*key).into(), Value::String(abs.display().to_string()));
            }
        }
        let mut run = to_table(&self.run)?;
        run.remove("strategy");
        t.extend(run);
        t.insert("probe".into(), Value::Table(to_table(&self.probe)?));
        t.insert("finetune".into(), Value::Table(to_table(&self.finetune)?));
        toml::to_string(&t).map_err(|e| anyhow!("{e}"))
    }
}

fn base_run(preset: Strategy, desk: bool) -> RunConfig {
    if desk {
        RunConfig::desk(preset)
    } else {
        RunConfig::preset(preset)
    }
}

fn to_table<T: serde::Serialize>(v: &T) -> Result<Table> {
    match Value::try_from(v).map_err(|e| anyhow!("{e}"))? {
        Value::Table(t) => Ok(t),
        other => bail!("expected a table, got {other}"),
    }
}

fn take_table(t: &mut Table, key: &str) -> Result<Table> {
    match t.remove(key) {
        None => Ok(Table::new()),
        Some(Value::Table(inner)) => Ok(inner),
        Some(v) => bail!("{key} must be a table, got {v}"),
    }
}

fn unknown_keys(user: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        match (known.get(k), v) {
            (None, _) => out.push(format!("{prefix}{k}")),
            (Some(Value::Table(kt)), Value::Table(ut)) => unknown_keys(ut, kt, &format!("{prefix}{k}."), out),
            _ => {}
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(bt)), Value::Table(ot)) => merge(bt, ot),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `WILDSSL_CLD__K=8` sets `cld.k = 8`. Values parse as TOML, else as strings.
fn apply_env(table: &mut Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            bail!("malformed override variable {key}");
        }
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(Value::String(raw));
        let mut node = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = node.entry(part.clone()).or_insert_with(|| Value::Table(Table::new()));
            node = match entry {
                Value::Table(t) => t,
                _ => bail!("{key}: `{part}` is not a table"),
            };
        }
        node.insert(path[path.len() - 1].clone(), value);
    }
    Ok(())
}
