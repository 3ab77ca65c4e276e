use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::{BoundingBox, DatasetManifest, PatchRecord, SourceFrame};
use crate::error::{Error, Result};

const ANNOTATIONS: &str = "annotations.csv";

/// Write `manifest.csv`: `# key=value` metadata lines, then the record table.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut meta = format!("# seed={}\n", manifest.seed);
    if let Some(r) = manifest.split_ratios {
        meta += &format!("# split_ratios={}:{}:{}\n", r[0], r[1], r[2]);
    }
    if let Some(r) = manifest.train_bg_per_fg {
        meta += &format!("# train_bg_per_fg={r}\n");
    }
    file.write_all(meta.as_bytes()).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    for r in &manifest.records {
        writer.serialize(r)?;
    }
    if manifest.records.is_empty() {
        writer.write_record(["patch_id", "frame_id", "off_x", "off_y", "w", "h", "label", "split"])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = DatasetManifest {
        records: Vec::new(),
        split_ratios: None,
        train_bg_per_fg: None,
        seed: 0,
    };
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let Some((key, value)) = line.trim_start_matches('#').trim().split_once('=') else {
            continue;
        };
        let bad = || Error::Dataset(format!("{}: bad metadata line `{line}`", path.display()));
        match key {
            "seed" => manifest.seed = value.parse().map_err(|_| bad())?,
            "split_ratios" => {
                let parts: Vec<f64> = value
                    .split(':')
                    .map(|p| p.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                let ratios: [f64; 3] = parts.try_into().map_err(|_| bad())?;
                manifest.split_ratios = Some(ratios);
            }
            "train_bg_per_fg" => manifest.train_bg_per_fg = Some(value.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    for rec in reader.deserialize() {
        let rec: PatchRecord = rec?;
        manifest.records.push(rec);
    }
    Ok(manifest)
}

/// Save every record as `<patch_id>.png` under `dir`.
pub fn write_patches(manifest: &DatasetManifest, frames: &[SourceFrame], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let by_id: std::collections::HashMap<&str, &SourceFrame> =
        frames.iter().map(|f| (f.frame_id.as_str(), f)).collect();
    for rec in &manifest.records {
        let frame = by_id
            .get(rec.frame_id.as_str())
            .ok_or_else(|| Error::Dataset(format!("unknown frame `{}`", rec.frame_id)))?;
        rec.crop(frame)?.save_png(&dir.join(format!("{}.png", rec.patch_id)))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct AnnotationRow {
    frame_id: String,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

/// Load `*.png` frames from `dir` (sorted by name) plus optional `annotations.csv`.
pub fn load_frames(dir: &Path) -> Result<Vec<SourceFrame>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut frames = Vec::with_capacity(paths.len());
    for p in paths {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("bad frame file name {}", p.display())))?
            .to_string();
        frames.push(SourceFrame::new(id, image::open(&p)?.to_rgb8()));
    }
    let ann_path = dir.join(ANNOTATIONS);
    if ann_path.exists() {
        let mut reader = csv::Reader::from_path(&ann_path)?;
        for row in reader.deserialize() {
            let row: AnnotationRow = row?;
            let frame = frames
                .iter_mut()
                .find(|f| f.frame_id == row.frame_id)
                .ok_or_else(|| Error::Dataset(format!("annotation for unknown frame `{}`", row.frame_id)))?;
            let bbox = BoundingBox::new(row.x, row.y, row.w, row.h);
            if !bbox.fits_in(frame.width(), frame.height()) {
                return Err(Error::Dataset(format!(
                    "box {bbox:?} outside frame `{}`",
                    row.frame_id
                )));
            }
            frame.annotations.push(bbox);
        }
    }
    Ok(frames)
}

pub fn save_frames(frames: &[SourceFrame], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut writer = csv::Writer::from_path(dir.join(ANNOTATIONS))?;
    writer.write_record(["frame_id", "x", "y", "w", "h"])?;
    for f in frames {
        f.pixels.save(dir.join(format!("{}.png", f.frame_id)))?;
        for b in &f.annotations {
            writer.write_record([
                f.frame_id.clone(),
                b.x.to_string(),
                b.y.to_string(),
                b.w.to_string(),
                b.h.to_string(),
            ])?;
        }
    }
    writer.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}
