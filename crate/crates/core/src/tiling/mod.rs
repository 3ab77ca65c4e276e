//! Frame tiling: pretraining patch sets and image-level labelled downstream
//! sets with frame-disjoint splits.

mod io;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::{self, tag, Rng};

pub use io::{load_frames, read_manifest, save_frames, write_manifest, write_patches};

/// Axis-aligned box in frame pixel coordinates, half-open on the right and bottom edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// One raw aerial frame with optional animal annotations.
#[derive(Clone, Debug)]
pub struct SourceFrame {
    pub frame_id: String,
    pub pixels: RgbImage,
    pub annotations: Vec<BoundingBox>,
}

impl SourceFrame {
    pub fn new(frame_id: impl Into<String>, pixels: RgbImage) -> Self {
        SourceFrame {
            frame_id: frame_id.into(),
            pixels,
            annotations: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }

    pub fn has_animals(&self) -> bool {
        !self.annotations.is_empty()
    }

    fn check_patch_size(&self, size: usize) -> Result<()> {
        if size == 0 || size > self.width() || size > self.height() {
            return Err(Error::PatchTooLarge {
                frame_id: self.frame_id.clone(),
                width: self.width(),
                height: self.height(),
                size,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Foreground,
    Background,
    Unlabeled,
}

impl Label {
    /// Class index used by classifiers: background 0, foreground 1.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Background => Some(0),
            Label::Foreground => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Foreground => "foreground",
            Label::Background => "background",
            Label::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" => Ok(Label::Foreground),
            "background" => Ok(Label::Background),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(Error::Dataset(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Pretrain,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Pretrain => "pretrain",
        }
    }

    pub const LABELED: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "pretrain" => Ok(Split::Pretrain),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// One cropped patch and where it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub frame_id: String,
    pub off_x: usize,
    pub off_y: usize,
    pub w: usize,
    pub h: usize,
    pub label: Label,
    pub split: Split,
}

impl PatchRecord {
    pub fn rect(&self) -> BoundingBox {
        BoundingBox::new(self.off_x, self.off_y, self.w, self.h)
    }

    /// Cut this patch out of its source frame.
    pub fn crop(&self, frame: &SourceFrame) -> Result<Image> {
        if frame.frame_id != self.frame_id {
            return Err(invalid(format!(
                "patch `{}` belongs to frame `{}`, not `{}`",
                self.patch_id, self.frame_id, frame.frame_id
            )));
        }
        Image::from_rgb_region(&frame.pixels, self.off_x, self.off_y, self.w, self.h)
    }
}

/// A set of patch records plus the recipe parameters that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<PatchRecord>,
    /// train:val:test frame ratios; absent for pretraining sets.
    pub split_ratios: Option<[f64; 3]>,
    /// Background patches per foreground patch in the train split.
    pub train_bg_per_fg: Option<f64>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.records_in(split).filter(|r| r.label == label).count()
    }

    pub fn is_labeled(&self, split: Split) -> bool {
        let mut any = false;
        for r in self.records_in(split) {
            if r.label == Label::Unlabeled {
                return false;
            }
            any = true;
        }
        any
    }
}

/// Place `n` patches of `size`×`size` uniformly at random inside the frame.
pub fn random_crop_patches(frame: &SourceFrame, n: usize, size: usize, rng: &mut Rng) -> Result<Vec<PatchRecord>> {
    frame.check_patch_size(size)?;
    if n == 0 {
        return Err(invalid("random_crop_patches needs n >= 1"));
    }
    let max_x = frame.width() - size;
    let max_y = frame.height() - size;
    Ok((0..n)
        .map(|i| PatchRecord {
            patch_id: format!("{}_r{i:03}", frame.frame_id),
            frame_id: frame.frame_id.clone(),
            off_x: rng.random_range(0..=max_x),
            off_y: rng.random_range(0..=max_y),
            w: size,
            h: size,
            label: Label::Unlabeled,
            split: Split::Pretrain,
        })
        .collect())
}

/// Grid offsets along one axis: `0, stride, 2·stride, …` while the patch stays inside.
pub fn grid_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    if size > extent || stride == 0 {
        return Vec::new();
    }
    (0..=(extent - size) / stride).map(|i| i * stride).collect()
}

pub fn overlap_stride(size: usize, overlap_fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(invalid(format!("overlap fraction {overlap_fraction} not in [0, 1)")));
    }
    let stride = (size as f64 * (1.0 - overlap_fraction)).floor() as usize;
    if stride == 0 {
        return Err(invalid(format!(
            "overlap {overlap_fraction} on {size}px patches gives a zero stride"
        )));
    }
    Ok(stride)
}

/// Row-major overlapping grid, left to right and top to bottom. Partial
/// patches at the right/bottom edge are dropped.
pub fn overlap_crop_patches(frame: &SourceFrame, size: usize, overlap_fraction: f64) -> Result<Vec<PatchRecord>> {
    frame.check_patch_size(size)?;
    let stride = overlap_stride(size, overlap_fraction)?;
    let xs = grid_offsets(frame.width(), size, stride);
    let ys = grid_offsets(frame.height(), size, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            out.push(PatchRecord {
                patch_id: format!("{}_g{row:03}_{col:03}", frame.frame_id),
                frame_id: frame.frame_id.clone(),
                off_x: x,
                off_y: y,
                w: size,
                h: size,
                label: Label::Unlabeled,
                split: Split::Pretrain,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecipe {
    pub patches_per_frame: usize,
    pub size: usize,
    pub overlap_on_animal_frames: bool,
    pub overlap_fraction: f64,
}

impl Default for PretrainRecipe {
    fn default() -> Self {
        PretrainRecipe {
            patches_per_frame: 4,
            size: 256,
            overlap_on_animal_frames: true,
            overlap_fraction: 0.5,
        }
    }
}

/// Unlabelled pretraining patches. Annotations only decide whether a frame
/// also gets an overlapping grid; nothing about them is kept in the output.
pub fn build_pretrain_set(frames: &[SourceFrame], recipe: &PretrainRecipe, seed: u64) -> Result<DatasetManifest> {
    if frames.is_empty() {
        return Err(invalid("build_pretrain_set needs at least one frame"));
    }
    let mut records = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let mut rng = rng::stream(seed, &[tag::CROP, i as u64]);
        records.extend(random_crop_patches(frame, recipe.patches_per_frame, recipe.size, &mut rng)?);
        if recipe.overlap_on_animal_frames && frame.has_animals() {
            records.extend(overlap_crop_patches(frame, recipe.size, recipe.overlap_fraction)?);
        }
    }
    Ok(DatasetManifest {
        records,
        split_ratios: None,
        train_bg_per_fg: None,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamRecipe {
    pub fg_size: usize,
    pub bg_size: usize,
    /// Background patches per foreground patch in the train split (18 gives 1/18).
    pub bg_per_fg: f64,
    /// train:val:test ratios over source frames.
    pub split_ratios: [f64; 3],
    /// Cropping seeds for train, val and test.
    pub split_seeds: [u64; 3],
    /// Rejection-sampling budget per requested background patch.
    pub max_bg_attempts: usize,
}

impl Default for DownstreamRecipe {
    fn default() -> Self {
        DownstreamRecipe {
            fg_size: 224,
            bg_size: 512,
            bg_per_fg: 18.0,
            split_ratios: [8.0, 1.0, 1.0],
            split_seeds: [11, 22, 33],
            max_bg_attempts: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedBox {
    pub frame_id: String,
    pub bbox: BoundingBox,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct DownstreamBuild {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkippedBox>,
}

/// Assign whole frames to train/val/test by a seeded shuffle.
pub fn split_frames(n_frames: usize, ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(invalid(format!("bad split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let n_train = (n_frames as f64 * ratios[0] / total).round() as usize;
    let n_val = ((n_frames as f64 * ratios[1] / total).round() as usize).min(n_frames - n_train.min(n_frames));
    let mut order: Vec<usize> = (0..n_frames).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let mut out = vec![Split::Test; n_frames];
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Uniform offset for a crop of `size` that fully contains `bbox` and stays in the frame.
fn foreground_offset(frame: &SourceFrame, bbox: &BoundingBox, size: usize, rng: &mut Rng) -> Option<(usize, usize)> {
    let axis = |lo: usize, len: usize, extent: usize, rng: &mut Rng| -> Option<usize> {
        if len > size || size > extent {
            return None;
        }
        let min = (lo + len).saturating_sub(size);
        let max = lo.min(extent - size);
        (min <= max).then(|| rng.random_range(min..=max))
    };
    let x = axis(bbox.x, bbox.w, frame.width(), rng)?;
    let y = axis(bbox.y, bbox.h, frame.height(), rng)?;
    Some((x, y))
}

/// Image-level labelled long-tail set: foreground crops around every box,
/// background crops verified against every box of their frame.
pub fn build_downstream_set(frames: &[SourceFrame], recipe: &DownstreamRecipe, seed: u64) -> Result<DownstreamBuild> {
    if recipe.fg_size == 0 || recipe.bg_size == 0 {
        return Err(invalid("patch sizes must be positive"));
    }
    if !(recipe.bg_per_fg.is_finite() && recipe.bg_per_fg > 0.0) {
        return Err(invalid(format!("bg_per_fg must be positive, got {}", recipe.bg_per_fg)));
    }
    let assignment = split_frames(frames.len(), recipe.split_ratios, seed)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();

    for (si, &split) in Split::LABELED.iter().enumerate() {
        let members: Vec<&SourceFrame> = frames
            .iter()
            .zip(&assignment)
            .filter(|(_, s)| **s == split)
            .map(|(f, _)| f)
            .collect();
        if !members.iter().any(|f| f.has_animals()) {
            return Err(Error::Dataset(format!("split `{split}` has no annotated frame")));
        }
        let mut rng = rng::stream(recipe.split_seeds[si], &[tag::CROP, si as u64]);

        let mut n_fg = 0usize;
        for frame in &members {
            for bbox in &frame.annotations {
                match foreground_offset(frame, bbox, recipe.fg_size, &mut rng) {
                    Some((x, y)) => {
                        records.push(PatchRecord {
                            patch_id: format!("{split}_fg_{n_fg:05}"),
                            frame_id: frame.frame_id.clone(),
                            off_x: x,
                            off_y: y,
                            w: recipe.fg_size,
                            h: recipe.fg_size,
                            label: Label::Foreground,
                            split,
                        });
                        n_fg += 1;
                    }
                    None => {
                        let reason = format!(
                            "box {}x{} does not fit a {}px crop in a {}x{} frame",
                            bbox.w,
                            bbox.h,
                            recipe.fg_size,
                            frame.width(),
                            frame.height()
                        );
                        warn!("skipping box in frame `{}`: {reason}", frame.frame_id);
                        skipped.push(SkippedBox {
                            frame_id: frame.frame_id.clone(),
                            bbox: *bbox,
                            reason,
                        });
                    }
                }
            }
        }

        let n_bg = if split == Split::Train {
            (n_fg as f64 * recipe.bg_per_fg).round() as usize
        } else {
            n_fg
        };
        let hosts: Vec<&SourceFrame> = members
            .iter()
            .copied()
            .filter(|f| f.width() >= recipe.bg_size && f.height() >= recipe.bg_size)
            .collect();
        if n_bg > 0 && hosts.is_empty() {
            return Err(Error::InsufficientBackground {
                split: split.to_string(),
                reason: format!("no frame is at least {0}x{0}", recipe.bg_size),
            });
        }
        let budget = n_bg.saturating_mul(recipe.max_bg_attempts.max(1));
        let mut attempts = 0usize;
        let mut placed = 0usize;
        while placed < n_bg {
            if attempts >= budget {
                return Err(Error::InsufficientBackground {
                    split: split.to_string(),
                    reason: format!("placed {placed} of {n_bg} animal-free crops in {attempts} attempts"),
                });
            }
            attempts += 1;
            let frame = hosts[rng.random_range(0..hosts.len())];
            let x = rng.random_range(0..=frame.width() - recipe.bg_size);
            let y = rng.random_range(0..=frame.height() - recipe.bg_size);
            let rect = BoundingBox::new(x, y, recipe.bg_size, recipe.bg_size);
            if frame.annotations.iter().any(|b| b.intersects(&rect)) {
                continue;
            }
            records.push(PatchRecord {
                patch_id: format!("{split}_bg_{placed:05}"),
                frame_id: frame.frame_id.clone(),
                off_x: x,
                off_y: y,
                w: recipe.bg_size,
                h: recipe.bg_size,
                label: Label::Background,
                split,
            });
            placed += 1;
        }
    }

    Ok(DownstreamBuild {
        manifest: DatasetManifest {
            records,
            split_ratios: Some(recipe.split_ratios),
            train_bg_per_fg: Some(recipe.bg_per_fg),
            seed,
        },
        skipped,
    })
}

/// Keep `ceil(fraction · n)` train records of each class; val and test are untouched.
pub fn subsample_labels(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("label fraction {fraction} not in (0, 1]")));
    }
    if !manifest.is_labeled(Split::Train) {
        return Err(Error::Dataset("manifest has no labelled train split".into()));
    }
    let mut keep = vec![true; manifest.records.len()];
    let mut kept_fg = 0;
    for (ci, label) in [Label::Background, Label::Foreground].into_iter().enumerate() {
        let mut idx: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train && r.label == label)
            .map(|(i, _)| i)
            .collect();
        let target = (fraction * idx.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        let target = target.min(idx.len());
        idx.shuffle(&mut rng::stream(seed, &[tag::PROBE, ci as u64]));
        for &i in &idx[target..] {
            keep[i] = false;
        }
        if label == Label::Foreground {
            kept_fg = target;
        }
    }
    if kept_fg == 0 {
        return Err(Error::Dataset(format!(
            "label fraction {fraction} leaves no foreground train record"
        )));
    }
    Ok(DatasetManifest {
        records: manifest
            .records
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(r, _)| r.clone())
            .collect(),
        ..manifest.clone()
    })
}
