//! Synthetic aerial frames: low-frequency ground and grass texture, tree
//! crowns with shadows, vehicle tracks, and rare small ellipses standing in
//! for animals, annotated with tight boxes.

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, SourceFrame};
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Expected animals per frame (Poisson mean).
    pub animals_per_frame: f64,
    /// Range of ellipse semi-axes in pixels.
    pub animal_radius: (f64, f64),
    /// Characteristic size of the ground noise, in pixels.
    pub ground_scale: f64,
    /// Fraction of the frame covered by grass.
    pub grass_cover: f64,
    /// Expected tree crowns per frame.
    pub trees_per_frame: f64,
    pub tree_radius: (f64, f64),
    /// Expected vehicle tracks per frame.
    pub tracks_per_frame: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 512,
            height: 512,
            animals_per_frame: 2.0,
            animal_radius: (2.0, 4.0),
            ground_scale: 64.0,
            grass_cover: 0.35,
            trees_per_frame: 12.0,
            tree_radius: (5.0, 14.0),
            tracks_per_frame: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.animal_radius;
        if self.width == 0 || self.height == 0 {
            return Err(invalid("frame size must be positive"));
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid(format!("bad animal radius range ({lo}, {hi})")));
        }
        let span = 2.0 * hi.ceil() + 1.0;
        if span > self.width as f64 || span > self.height as f64 {
            return Err(invalid(format!(
                "animal of radius {hi} does not fit a {}x{} frame",
                self.width, self.height
            )));
        }
        if self.animals_per_frame < 0.0 || self.trees_per_frame < 0.0 || self.tracks_per_frame < 0.0 {
            return Err(invalid("densities must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.grass_cover) {
            return Err(invalid("grass_cover must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One placed animal: a rotated ellipse and its tight box.
#[derive(Clone, Debug, PartialEq)]
pub struct Animal {
    pub cx: f64,
    pub cy: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
    pub color: [f32; 3],
    pub bbox: BoundingBox,
}

impl Animal {
    /// Pixels whose centres fall inside the ellipse.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        ellipse_pixels(self.cx, self.cy, self.semi_major, self.semi_minor, self.angle)
    }
}

fn ellipse_pixels(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Vec<(usize, usize)> {
    let (s, c) = angle.sin_cos();
    let r = a.max(b).ceil() as i64 + 1;
    let mut out = Vec::new();
    for y in (cy.floor() as i64 - r)..=(cy.floor() as i64 + r) {
        for x in (cx.floor() as i64 - r)..=(cx.floor() as i64 + r) {
            if x < 0 || y < 0 {
                continue;
            }
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * c + dy * s) / a;
            let v = (-dx * s + dy * c) / b;
            if u * u + v * v <= 1.0 {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

fn tight_box(pixels: &[(usize, usize)]) -> Option<BoundingBox> {
    let x0 = pixels.iter().map(|p| p.0).min()?;
    let x1 = pixels.iter().map(|p| p.0).max()?;
    let y0 = pixels.iter().map(|p| p.1).min()?;
    let y1 = pixels.iter().map(|p| p.1).max()?;
    Some(BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

fn poisson(mean: f64, rng: &mut Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

/// Sample the animal layout of one frame. Centres keep the whole ellipse inside the frame.
pub fn sample_animals(config: &SynthConfig, rng: &mut Rng) -> Vec<Animal> {
    let n = poisson(config.animals_per_frame, rng);
    let (lo, hi) = config.animal_radius;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range(lo..=a).max(lo * 0.6);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let margin = a.ceil() + 1.0;
        let cx = rng.random_range(margin..config.width as f64 - margin);
        let cy = rng.random_range(margin..config.height as f64 - margin);
        let px = ellipse_pixels(cx, cy, a, b, angle);
        let Some(bbox) = tight_box(&px) else { continue };
        // Coats range from dark brown to pale, always far from the local ground.
        let color = if rng.random_bool(0.5) {
            [rng.random_range(55.0..85.0), rng.random_range(40.0..60.0), rng.random_range(30.0..45.0)]
        } else {
            [rng.random_range(225.0..250.0), rng.random_range(215.0..240.0), rng.random_range(195.0..220.0)]
        };
        out.push(Animal {
            cx,
            cy,
            semi_major: a,
            semi_minor: b,
            angle,
            color,
            bbox,
        });
    }
    out
}

/// Smooth value noise in [0, 1] with lattice spacing `scale`.
fn value_noise(width: usize, height: usize, scale: f64, rng: &mut Rng) -> Vec<f32> {
    let gw = (width as f64 / scale).ceil() as usize + 2;
    let gh = (height as f64 / scale).ceil() as usize + 2;
    let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        let fy = y as f64 / scale;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()) as f32);
        for x in 0..width {
            let fx = x as f64 / scale;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()) as f32);
            let l = |gx: usize, gy: usize| lattice[gy * gw + gx];
            let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
            let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
            out[y * width + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], alpha: f32) {
        if x >= self.width || y >= self.height {
            return;
        }
        let px = &mut self.rgb[y * self.width + x];
        for c in 0..3 {
            px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn into_image(self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.rgb.into_iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            img.put_pixel(x, y, Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
        img
    }
}

fn render_frame(frame_id: String, config: &SynthConfig, rng: &mut Rng) -> SourceFrame {
    let (w, h) = (config.width, config.height);
    let animals = sample_animals(config, rng);

    let ground = value_noise(w, h, config.ground_scale, rng);
    let detail = value_noise(w, h, config.ground_scale / 8.0, rng);
    let grass_field = value_noise(w, h, config.ground_scale * 0.75, rng);
    let grass_fine = value_noise(w, h, 2.0, rng);
    // Grass where the smooth field exceeds the quantile that yields the requested cover.
    let threshold = {
        let mut sorted = grass_field.clone();
        sorted.sort_by(f32::total_cmp);
        let idx = ((1.0 - config.grass_cover) * (sorted.len() - 1) as f64).round() as usize;
        if config.grass_cover <= 0.0 { f32::INFINITY } else { sorted[idx] }
    };

    let mut canvas = Canvas {
        width: w,
        height: h,
        rgb: Vec::with_capacity(w * h),
    };
    for i in 0..w * h {
        let tone = 0.8 + 0.35 * ground[i] + 0.12 * (detail[i] - 0.5);
        let mut px = [188.0 * tone, 168.0 * tone, 134.0 * tone];
        let g = grass_field[i];
        if g > threshold {
            let a = ((g - threshold) * 12.0).min(1.0);
            let blade = 0.75 + 0.5 * grass_fine[i];
            let grass = [150.0 * blade, 150.0 * blade, 92.0 * blade];
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + grass[c] * a;
            }
        }
        canvas.rgb.push(px);
    }

    for _ in 0..poisson(config.tracks_per_frame, rng) {
        let horizontal = rng.random_bool(0.5);
        let (extent, across) = if horizontal { (w, h) } else { (h, w) };
        let start = rng.random_range(0.0..across as f64);
        let slope = rng.random_range(-0.3..0.3);
        let gauge = rng.random_range(5.0..8.0);
        for t in 0..extent {
            for rut in [0.0, gauge] {
                let pos = start + rut + slope * t as f64;
                if pos < 0.0 {
                    continue;
                }
                let (x, y) = if horizontal { (t, pos as usize) } else { (pos as usize, t) };
                canvas.blend(x, y, [120.0, 105.0, 85.0], 0.55);
            }
        }
    }

    for _ in 0..poisson(config.trees_per_frame, rng) {
        let (lo, hi) = config.tree_radius;
        let r = rng.random_range(lo..=hi);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let shade = rng.random_range(0.8..1.15) as f32;
        for (x, y) in ellipse_pixels(cx + 0.6 * r, cy + 0.6 * r, r, r * 0.8, 0.0) {
            canvas.blend(x, y, [70.0, 62.0, 50.0], 0.5);
        }
        for (x, y) in ellipse_pixels(cx, cy, r, r * rng.random_range(0.8..1.0), rng.random_range(0.0..3.0)) {
            let n = detail[(y.min(h - 1)) * w + x.min(w - 1)];
            let c = [60.0 * shade, (82.0 + 30.0 * n) * shade, 45.0 * shade];
            canvas.blend(x, y, c, 0.9);
        }
    }

    let mut annotations = Vec::with_capacity(animals.len());
    for animal in &animals {
        // short shadow on the lower right
        let shadow = ellipse_pixels(animal.cx + 1.5, animal.cy + 1.5, animal.semi_major, animal.semi_minor, animal.angle);
        for (x, y) in shadow {
            canvas.blend(x, y, [60.0, 52.0, 42.0], 0.45);
        }
        for (x, y) in animal.pixels() {
            canvas.blend(x, y, animal.color, 1.0);
        }
        annotations.push(animal.bbox);
    }

    SourceFrame {
        frame_id,
        pixels: canvas.into_image(),
        annotations,
    }
}

/// Generate `n` frames named `frame_00000`, `frame_00001`, ….
pub fn synth_generate(config: &SynthConfig, n: usize, seed: u64) -> Result<Vec<SourceFrame>> {
    config.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, &[i as u64]);
            render_frame(format!("frame_{i:05}"), config, &mut rng)
        })
        .collect())
}
