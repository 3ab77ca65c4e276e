//! Stochastic view generation: base crops, color jitter, lossless rotations,
//! and the per-strategy view bundles fed to the contrastive objectives.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::Rng;

/// Pretraining strategy; selects the view bundle and the active loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MocoV2,
    MocoCld,
    MocoGeo,
    #[serde(rename = "geocld")]
    GeoCld,
    #[serde(rename = "mixco")]
    MixCo,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::MocoV2,
        Strategy::MocoCld,
        Strategy::MocoGeo,
        Strategy::GeoCld,
        Strategy::MixCo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::MocoV2 => "moco_v2",
            Strategy::MocoCld => "moco_cld",
            Strategy::MocoGeo => "moco_geo",
            Strategy::GeoCld => "geocld",
            Strategy::MixCo => "mixco",
        }
    }

    /// Group (clustering) branch active.
    pub fn uses_cld(self) -> bool {
        matches!(self, Strategy::MocoCld | Strategy::GeoCld)
    }

    /// Rotation branch active.
    pub fn uses_geo(self) -> bool {
        matches!(self, Strategy::MocoGeo | Strategy::GeoCld | Strategy::MixCo)
    }

    pub fn uses_mix(self) -> bool {
        self == Strategy::MixCo
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "moco_v2" | "mocov2" => Strategy::MocoV2,
            "moco_cld" | "cld" => Strategy::MocoCld,
            "moco_geo" | "geo" => Strategy::MocoGeo,
            "geocld" | "geo_cld" => Strategy::GeoCld,
            "mixco" => Strategy::MixCo,
            other => {
                return Err(invalid(format!(
                    "unknown strategy `{other}` (expected moco_v2, moco_cld, moco_geo, geocld or mixco)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasePolicy {
    pub crop_size: usize,
    pub hflip_p: f64,
    pub blur_sigma: [f64; 2],
    pub blur_p: f64,
    pub blur_kernel: usize,
}

impl Default for BasePolicy {
    fn default() -> Self {
        BasePolicy {
            crop_size: 224,
            hflip_p: 0.5,
            blur_sigma: [0.1, 2.0],
            blur_p: 0.5,
            blur_kernel: 23,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorPolicy {
    /// brightness, contrast, saturation, hue
    pub jitter: [f64; 4],
    pub jitter_p: f64,
    pub grayscale_p: f64,
}

impl Default for ColorPolicy {
    fn default() -> Self {
        ColorPolicy {
            jitter: [0.4, 0.4, 0.4, 0.1],
            jitter_p: 1.0,
            grayscale_p: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub base: BasePolicy,
    pub color: ColorPolicy,
    /// Rotation angles in degrees; each a nonzero multiple of 90.
    pub rotations: Rotations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotations(pub Vec<u32>);

impl Default for Rotations {
    fn default() -> Self {
        Rotations(vec![90, 180, 270])
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in [0, 1], got {p}")))
    }
}

impl AugPolicy {
    pub fn with_crop(crop_size: usize) -> Self {
        let mut p = AugPolicy::default();
        p.base.crop_size = crop_size;
        p
    }

    /// Check the policy against the size of the patches it will be applied to.
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let b = &self.base;
        if b.crop_size == 0 || b.crop_size > patch_size {
            return Err(invalid(format!(
                "crop size {} must be positive and at most the patch size {patch_size}",
                b.crop_size
            )));
        }
        let [lo, hi] = b.blur_sigma;
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid(format!("blur sigma range [{lo}, {hi}] must be positive and ordered")));
        }
        if b.blur_kernel % 2 == 0 {
            return Err(invalid(format!("blur kernel {} must be odd", b.blur_kernel)));
        }
        check_prob("hflip_p", b.hflip_p)?;
        check_prob("blur_p", b.blur_p)?;
        check_prob("jitter_p", self.color.jitter_p)?;
        check_prob("grayscale_p", self.color.grayscale_p)?;
        let [br, co, sa, hu] = self.color.jitter;
        if br < 0.0 || co < 0.0 || sa < 0.0 || !(0.0..=0.5).contains(&hu) {
            return Err(invalid("jitter strengths must be non-negative with hue at most 0.5"));
        }
        if self.rotations.0.is_empty() || self.rotations.0.iter().any(|&a| a == 0 || a % 90 != 0 || a >= 360) {
            return Err(invalid(format!(
                "rotation angles {:?} must be drawn from 90, 180, 270",
                self.rotations.0
            )));
        }
        Ok(())
    }
}

/// Sampled base-augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub crop_x: usize,
    pub crop_y: usize,
    pub flip: bool,
    pub blur_sigma: Option<f64>,
}

/// Sampled color-augmentation parameters. `order` lists the jitter ops applied,
/// 0 brightness, 1 contrast, 2 saturation, 3 hue.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    pub jitter: Option<[f64; 4]>,
    pub order: [u8; 4],
    pub grayscale: bool,
}

impl ColorParams {
    pub const IDENTITY: ColorParams = ColorParams {
        jitter: Some([1.0, 1.0, 1.0, 0.0]),
        order: [0, 1, 2, 3],
        grayscale: false,
    };
}

/// Everything sampled to produce one view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewTrace {
    pub base: Option<BaseParams>,
    pub color: Option<ColorParams>,
    pub rotation: Option<u32>,
}

pub fn sample_base(policy: &BasePolicy, height: usize, width: usize, rng: &mut Rng) -> Result<BaseParams> {
    let s = policy.crop_size;
    if height < s || width < s {
        return Err(Error::ImageTooSmall {
            width,
            height,
            min: s,
        });
    }
    let crop_x = rng.random_range(0..=width - s);
    let crop_y = rng.random_range(0..=height - s);
    let flip = rng.random_bool(policy.hflip_p);
    let blur_sigma = rng
        .random_bool(policy.blur_p)
        .then(|| rng.random_range(policy.blur_sigma[0]..=policy.blur_sigma[1]));
    Ok(BaseParams {
        crop_x,
        crop_y,
        flip,
        blur_sigma,
    })
}

pub fn apply_base(img: &Image, policy: &BasePolicy, p: &BaseParams) -> Result<Image> {
    let s = policy.crop_size;
    let mut out = img.crop(p.crop_x, p.crop_y, s, s)?;
    if p.flip {
        hflip_in_place(&mut out);
    }
    if let Some(sigma) = p.blur_sigma {
        out = gaussian_blur(&out, sigma, policy.blur_kernel);
    }
    Ok(out)
}

/// Random crop without resizing, horizontal flip, Gaussian blur.
pub fn base_aug(img: &Image, policy: &BasePolicy, rng: &mut Rng) -> Result<(Image, BaseParams)> {
    let p = sample_base(policy, img.height(), img.width(), rng)?;
    Ok((apply_base(img, policy, &p)?, p))
}

pub fn hflip_in_place(img: &mut Image) {
    let w = img.width();
    for c in 0..CHANNELS {
        for row in img.plane_mut(c).chunks_mut(w) {
            row.reverse();
        }
    }
}

fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f32> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| (v / total) as f32).collect()
}

// reflect without repeating the edge sample: -1 -> 1, n -> n-2
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable truncated Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64, kernel: usize) -> Image {
    let k = gaussian_kernel(sigma, kernel);
    let r = (kernel / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..CHANNELS {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * src[y * w + reflect(x as isize + j as isize - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

pub fn sample_color(policy: &ColorPolicy, rng: &mut Rng) -> ColorParams {
    let [b, c, s, h] = policy.jitter;
    let jitter = rng.random_bool(policy.jitter_p).then(|| {
        let factor = |rng: &mut Rng, x: f64| if x > 0.0 { rng.random_range((1.0 - x).max(0.0)..=1.0 + x) } else { 1.0 };
        let bf = factor(rng, b);
        let cf = factor(rng, c);
        let sf = factor(rng, s);
        let hf = if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
        [bf, cf, sf, hf]
    });
    let mut order = [0u8, 1, 2, 3];
    if jitter.is_some() {
        order.shuffle(rng);
    }
    let grayscale = rng.random_bool(policy.grayscale_p);
    ColorParams {
        jitter,
        order,
        grayscale,
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clamp(v: f32) -> f32 {
    v.clamp(0.0, 255.0)
}

fn to_grayscale(img: &mut Image) {
    let n = img.height() * img.width();
    let data = img.data_mut();
    for i in 0..n {
        let l = luma(data[i], data[n + i], data[2 * n + i]);
        data[i] = l;
        data[n + i] = l;
        data[2 * n + i] = l;
    }
}

fn blend_scalar(img: &mut Image, other: f32, factor: f32) {
    for v in img.data_mut() {
        *v = clamp(factor * *v + (1.0 - factor) * other);
    }
}

fn adjust_saturation(img: &mut Image, factor: f32) {
    let n = img.height() * img.width();
    let data = img.data_mut();
    for i in 0..n {
        let l = luma(data[i], data[n + i], data[2 * n + i]);
        for c in 0..CHANNELS {
            let v = &mut data[c * n + i];
            *v = clamp(factor * *v + (1.0 - factor) * l);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(img: &mut Image, shift: f32) {
    if shift == 0.0 {
        return;
    }
    let n = img.height() * img.width();
    let data = img.data_mut();
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(data[i] / 255.0, data[n + i] / 255.0, data[2 * n + i] / 255.0);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        data[i] = clamp(r * 255.0);
        data[n + i] = clamp(g * 255.0);
        data[2 * n + i] = clamp(b * 255.0);
    }
}

pub fn apply_color(img: &Image, p: &ColorParams) -> Image {
    let mut out = img.clone();
    if let Some(j) = p.jitter {
        for &op in &p.order {
            let f = j[op as usize] as f32;
            match op {
                0 if f != 1.0 => blend_scalar(&mut out, 0.0, f),
                1 if f != 1.0 => {
                    let n = out.height() * out.width();
                    let d = out.data();
                    let mean = (0..n).map(|i| luma(d[i], d[n + i], d[2 * n + i]) as f64).sum::<f64>() / n as f64;
                    blend_scalar(&mut out, mean as f32, f);
                }
                2 if f != 1.0 => adjust_saturation(&mut out, f),
                3 => adjust_hue(&mut out, f),
                _ => {}
            }
        }
    }
    if p.grayscale {
        to_grayscale(&mut out);
    }
    out
}

/// Color jitter in random order, then random grayscale.
pub fn color_aug(img: &Image, policy: &ColorPolicy, rng: &mut Rng) -> (Image, ColorParams) {
    let p = sample_color(policy, rng);
    (apply_color(img, &p), p)
}

/// Counter-clockwise rotation by a multiple of 90 degrees, as an index permutation.
pub fn rotate(img: &Image, degrees: u32) -> Result<Image> {
    if degrees % 90 != 0 {
        return Err(invalid(format!("rotation of {degrees} degrees is not a multiple of 90")));
    }
    if !img.is_square() {
        return Err(Error::Shape(format!(
            "cannot rotate a non-square {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let n = img.width();
    let turns = (degrees / 90) % 4;
    let mut out = Image::zeros(n, n);
    for c in 0..CHANNELS {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = match turns {
                    0 => (y, x),
                    1 => (x, n - 1 - y),
                    2 => (n - 1 - y, n - 1 - x),
                    _ => (n - 1 - x, y),
                };
                dst[y * n + x] = src[sy * n + sx];
            }
        }
    }
    Ok(out)
}

pub fn sample_rotation(rotations: &Rotations, rng: &mut Rng) -> u32 {
    *rotations.0.choose(rng).expect("rotation set is validated non-empty")
}

pub fn rot_aug(img: &Image, rotations: &Rotations, rng: &mut Rng) -> Result<(Image, u32)> {
    let a = sample_rotation(rotations, rng);
    Ok((rotate(img, a)?, a))
}

/// Views of one patch, keyed by role. Which roles are present depends on the strategy.
#[derive(Clone, Debug)]
pub struct ViewBundle {
    /// base-only reference view
    pub i: Option<Image>,
    /// color branch
    pub i1: Option<Image>,
    /// rotation branch
    pub i2: Option<Image>,
    /// key view
    pub i_plus: Image,
    pub trace: BundleTrace,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleTrace {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i: Option<ViewTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i1: Option<ViewTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i2: Option<ViewTrace>,
    pub i_plus: ViewTrace,
}

impl BundleTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

struct Builder<'a> {
    patch: &'a Image,
    policy: &'a AugPolicy,
}

impl Builder<'_> {
    fn view(&self, color: Option<&ColorParams>, rotation: Option<u32>, rng: &mut Rng) -> Result<(Image, ViewTrace)> {
        let (mut img, base) = base_aug(self.patch, &self.policy.base, rng)?;
        if let Some(c) = color {
            img = apply_color(&img, c);
        }
        if let Some(a) = rotation {
            img = rotate(&img, a)?;
        }
        Ok((
            img,
            ViewTrace {
                base: Some(base),
                color: color.copied(),
                rotation,
            },
        ))
    }

    fn color_view(&self, rng: &mut Rng) -> Result<(Image, ViewTrace)> {
        let c = sample_color(&self.policy.color, rng);
        self.view(Some(&c), None, rng)
    }

    fn rot_view(&self, rng: &mut Rng) -> Result<(Image, ViewTrace)> {
        let a = sample_rotation(&self.policy.rotations, rng);
        self.view(None, Some(a), rng)
    }
}

/// Build the views a strategy consumes from one patch.
///
/// * `moco_v2`: I1 and I+ are independent base+color views.
/// * `moco_geo`: I1 base+color, I2 base+rotation, I+ base+color, all independent.
/// * `moco_cld`: I1, I2, I+ independent base+color views.
/// * `geocld`: I1 base+color, I2 base+rotation, and I+ carries I1's color
///   parameters together with I2's rotation angle.
/// * `mixco`: I = base, I1 = color(I), I2 = rotation(I), and I+ = I.
pub fn make_views(patch: &Image, strategy: Strategy, policy: &AugPolicy, rng: &mut Rng) -> Result<ViewBundle> {
    let b = Builder { patch, policy };
    let mut trace = BundleTrace::default();
    let bundle = match strategy {
        Strategy::MocoV2 => {
            let (i1, t1) = b.color_view(rng)?;
            let (ip, tp) = b.color_view(rng)?;
            trace.i1 = Some(t1);
            trace.i_plus = tp;
            ViewBundle {
                i: None,
                i1: Some(i1),
                i2: None,
                i_plus: ip,
                trace,
            }
        }
        Strategy::MocoCld | Strategy::MocoGeo => {
            let (i1, t1) = b.color_view(rng)?;
            let (i2, t2) = if strategy == Strategy::MocoCld {
                b.color_view(rng)?
            } else {
                b.rot_view(rng)?
            };
            let (ip, tp) = b.color_view(rng)?;
            trace.i1 = Some(t1);
            trace.i2 = Some(t2);
            trace.i_plus = tp;
            ViewBundle {
                i: None,
                i1: Some(i1),
                i2: Some(i2),
                i_plus: ip,
                trace,
            }
        }
        Strategy::GeoCld => {
            let color = sample_color(&policy.color, rng);
            let angle = sample_rotation(&policy.rotations, rng);
            let (i1, t1) = b.view(Some(&color), None, rng)?;
            let (i2, t2) = b.view(None, Some(angle), rng)?;
            let (ip, tp) = b.view(Some(&color), Some(angle), rng)?;
            trace.i1 = Some(t1);
            trace.i2 = Some(t2);
            trace.i_plus = tp;
            ViewBundle {
                i: None,
                i1: Some(i1),
                i2: Some(i2),
                i_plus: ip,
                trace,
            }
        }
        Strategy::MixCo => {
            let (base, tb) = b.view(None, None, rng)?;
            let (i1, c) = color_aug(&base, &policy.color, rng);
            let (i2, a) = rot_aug(&base, &policy.rotations, rng)?;
            trace.i = Some(tb.clone());
            trace.i1 = Some(ViewTrace {
                color: Some(c),
                ..tb.clone()
            });
            trace.i2 = Some(ViewTrace {
                rotation: Some(a),
                ..tb.clone()
            });
            trace.i_plus = tb;
            ViewBundle {
                i_plus: base.clone(),
                i: Some(base),
                i1: Some(i1),
                i2: Some(i2),
                trace,
            }
        }
    };
    Ok(bundle)
}
