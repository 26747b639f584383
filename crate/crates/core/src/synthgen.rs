//! Synthetic camera-trap sequences with exact optical flow.
//!
//! Each sequence shows one class-specific sprite translating at a constant
//! integer velocity over a static, location-specific background. Night
//! sequences are converted to channel-identical IR frames. Because the motion
//! is a pure translation, the flow anchored at frame 2 is known exactly:
//! `-v` (past) and `+v` (future) on the sprite's frame-2 footprint, zero
//! elsewhere.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{DatasetManifest, Domain, SequenceSample, Split};
use crate::error::{Error, Result};
use crate::flow::{FlowField, FlowPair};
use crate::imaging::{make_night, save_png};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
    /// Explicit `[day, night]` sequence counts per class. Overrides the
    /// long-tail generator when present.
    pub counts: Option<Vec<[usize; 2]>>,
    /// Sequences of class 0 under the generator `round(head * exp(-decay * c))`.
    pub head_count: usize,
    /// Lower bound on any class's sequence count.
    pub tail_count: usize,
    pub decay: f64,
    /// Per-class day:night ratio, cycled when shorter than `num_classes`.
    pub domain_ratio: Vec<f64>,
    /// Inclusive bounds on the per-axis speed in pixels/frame.
    pub min_speed: i32,
    pub max_speed: i32,
    /// Inclusive bounds on the sprite half-extent in pixels.
    pub min_radius: usize,
    pub max_radius: usize,
    pub day_brightness: [f64; 2],
    pub night_brightness: [f64; 2],
    pub num_locations: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            width: 64,
            height: 64,
            counts: None,
            head_count: 60,
            tail_count: 20,
            decay: 0.35,
            domain_ratio: vec![1.0, 6.0, 1.0 / 6.0, 1.0, 5.0, 0.2],
            min_speed: 1,
            max_speed: 4,
            min_radius: 7,
            max_radius: 10,
            day_brightness: [0.8, 1.1],
            night_brightness: [0.5, 1.0],
            num_locations: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::config("synthetic spec needs at least one class and a non-empty image"));
        }
        if let Some(counts) = &self.counts {
            if counts.len() != self.num_classes {
                return Err(Error::config(format!(
                    "counts table has {} rows for {} classes",
                    counts.len(),
                    self.num_classes
                )));
            }
        }
        if self.decay < 0.0 || !self.decay.is_finite() {
            return Err(Error::config("decay must be a finite non-negative number"));
        }
        if self.domain_ratio.is_empty() || self.domain_ratio.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::config("domain_ratio must hold positive finite ratios"));
        }
        if self.min_speed < 0 || self.min_speed > self.max_speed {
            return Err(Error::config("speed bounds must satisfy 0 <= min_speed <= max_speed"));
        }
        let limit = self.width.min(self.height) as f64 / 4.0;
        let max_mag = (2.0f64).sqrt() * self.max_speed as f64;
        if max_mag >= limit {
            return Err(Error::config(format!(
                "velocity magnitude up to {max_mag:.2} px/frame must stay below min(H, W)/4 = {limit}"
            )));
        }
        if self.min_radius == 0 || self.min_radius > self.max_radius {
            return Err(Error::config("radius bounds must satisfy 1 <= min_radius <= max_radius"));
        }
        let span = 2 * (self.max_radius + self.max_speed as usize) + 1;
        if span > self.width.min(self.height) {
            return Err(Error::config(format!(
                "a radius-{} sprite moving {} px/frame does not fit in {}x{}",
                self.max_radius, self.max_speed, self.width, self.height
            )));
        }
        for range in [self.day_brightness, self.night_brightness] {
            if !(range[0] > 0.0 && range[0] <= range[1]) {
                return Err(Error::config("brightness ranges must satisfy 0 < lo <= hi"));
            }
        }
        if self.num_locations == 0 {
            return Err(Error::config("num_locations must be at least 1"));
        }
        Ok(())
    }

    /// Per-class `[day, night]` sequence counts.
    pub fn class_counts(&self) -> Vec<[usize; 2]> {
        if let Some(counts) = &self.counts {
            return counts.clone();
        }
        (0..self.num_classes)
            .map(|c| {
                let total = ((self.head_count as f64) * (-self.decay * c as f64).exp())
                    .round()
                    .max(self.tail_count as f64) as usize;
                let r = self.domain_ratio[c % self.domain_ratio.len()];
                let day = ((total as f64) * r / (1.0 + r)).round() as usize;
                [day, total - day]
            })
            .collect()
    }
}

/// splitmix64 finaliser; derives independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let s = parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p));
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Ellipse,
    Rectangle,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

const SHAPES: [Shape; 6] = [
    Shape::Ellipse,
    Shape::Rectangle,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
];

/// The class-conditional appearance: a shape mask and a two-tone striped texture.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    radius: usize,
    mask: Vec<bool>,
    texture: Vec<[u8; 3]>,
}

impl Sprite {
    /// Appearance of `class`, deterministic in `(class, seed)`.
    pub fn for_class(class: usize, spec: &SynthSpec) -> Self {
        let mut rng = stream(spec.seed, &[0x5917e, class as u64]);
        let radius = rng.random_range(spec.min_radius..=spec.max_radius);
        let shape = SHAPES[class % SHAPES.len()];
        let aspect: f64 = rng.random_range(0.6..1.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let period: f64 = 2.0 + (class / SHAPES.len()) as f64 * 1.5 + rng.random_range(0.0..2.0);
        // Two tones far apart in luminance so the texture survives IR conversion.
        let bright = [0, 1, 2].map(|_| rng.random_range(150u8..=250));
        let dark = [0, 1, 2].map(|_| rng.random_range(10u8..=90));
        let side = 2 * radius + 1;
        let r = radius as f64;
        let mut mask = Vec::with_capacity(side * side);
        let mut texture = Vec::with_capacity(side * side);
        for j in 0..side {
            for i in 0..side {
                let x = (i as f64 - r) / r;
                let y = (j as f64 - r) / r;
                let inside = match shape {
                    Shape::Ellipse => x * x + (y / aspect).powi(2) <= 1.0,
                    Shape::Rectangle => x.abs() <= 1.0 && y.abs() <= aspect,
                    Shape::Triangle => y >= -1.0 && y <= 1.0 && x.abs() <= (y + 1.0) / 2.0,
                    Shape::Diamond => x.abs() + (y / aspect).abs() <= 1.0,
                    Shape::Cross => (x.abs() <= 0.35 && y.abs() <= 1.0) || (y.abs() <= 0.35 && x.abs() <= 1.0),
                    Shape::Ring => {
                        let d = (x * x + y * y).sqrt();
                        (0.45..=1.0).contains(&d)
                    }
                };
                mask.push(inside);
                let t = (i as f64 * angle.cos() + j as f64 * angle.sin()) / period;
                texture.push(if t.floor() as i64 % 2 == 0 { bright } else { dark });
            }
        }
        Self {
            radius,
            mask,
            texture,
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Full-frame footprint with the sprite centred at `centre`.
    pub fn footprint(&self, width: usize, height: usize, centre: [i64; 2]) -> Vec<bool> {
        let mut out = vec![false; width * height];
        self.for_each_pixel(width, height, centre, |x, y, _| out[y * width + x] = true);
        out
    }

    fn for_each_pixel(
        &self,
        width: usize,
        height: usize,
        centre: [i64; 2],
        mut f: impl FnMut(usize, usize, [u8; 3]),
    ) {
        let side = self.side();
        let r = self.radius as i64;
        for j in 0..side {
            for i in 0..side {
                let k = j * side + i;
                if !self.mask[k] {
                    continue;
                }
                let x = centre[0] - r + i as i64;
                let y = centre[1] - r + j as i64;
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    f(x as usize, y as usize, self.texture[k]);
                }
            }
        }
    }

    pub fn draw(&self, canvas: &mut RgbImage, centre: [i64; 2]) {
        let (w, h) = (canvas.width() as usize, canvas.height() as usize);
        self.for_each_pixel(w, h, centre, |x, y, c| canvas.put_pixel(x as u32, y as u32, Rgb(c)));
    }
}

/// Static background of a camera location: smooth colour noise plus fixed grain.
pub fn location_background(location: usize, spec: &SynthSpec) -> RgbImage {
    let mut rng = stream(spec.seed, &[0xb6, location as u64]);
    const GRID: usize = 5;
    let knots: Vec<[f64; 3]> = (0..GRID * GRID)
        .map(|_| {
            let base: f64 = rng.random_range(60.0..170.0);
            [0, 1, 2].map(|_| base + rng.random_range(-45.0..45.0))
        })
        .collect();
    let (w, h) = (spec.width, spec.height);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        let gy = y as f64 / (h.max(2) - 1) as f64 * (GRID - 1) as f64;
        let y0 = (gy.floor() as usize).min(GRID - 2);
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / (w.max(2) - 1) as f64 * (GRID - 1) as f64;
            let x0 = (gx.floor() as usize).min(GRID - 2);
            let fx = gx - x0 as f64;
            let grain: f64 = rng.random_range(-6.0..6.0);
            let px = [0, 1, 2].map(|c| {
                let k = |yy: usize, xx: usize| knots[yy * GRID + xx][c];
                let top = k(y0, x0) * (1.0 - fx) + k(y0, x0 + 1) * fx;
                let bot = k(y0 + 1, x0) * (1.0 - fx) + k(y0 + 1, x0 + 1) * fx;
                (top * (1.0 - fy) + bot * fy + grain).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Exact flow for a sprite translating by `velocity` per frame, anchored at
/// frame 2: `-v` (past) and `+v` (future) on the frame-2 footprint.
pub fn analytic_flow(mask: &[bool], width: usize, height: usize, velocity: [i32; 2]) -> FlowPair {
    let [vx, vy] = velocity.map(|c| c as f32);
    let field = |sign: f32| {
        FlowField::from_fn(width, height, |x, y| {
            if mask[y * width + x] {
                [sign * vx, sign * vy]
            } else {
                [0.0, 0.0]
            }
        })
    };
    FlowPair {
        past: field(-1.0),
        future: field(1.0),
    }
}

/// One rendered sequence before it is written to disk.
#[derive(Clone, Debug)]
pub struct RenderedSequence {
    pub frames: [RgbImage; 3],
    pub flows: FlowPair,
    pub velocity: [i32; 2],
    pub centre: [i64; 2],
    pub location: usize,
}

/// Renders sequence `index` of `(class, domain)`.
pub fn render_sequence(
    spec: &SynthSpec,
    sprite: &Sprite,
    backgrounds: &[RgbImage],
    class: usize,
    domain: Domain,
    index: usize,
) -> RenderedSequence {
    let mut rng = stream(spec.seed, &[0x5e9, class as u64, domain.index() as u64, index as u64]);
    let location = rng.random_range(0..spec.num_locations);
    let mut axis = || {
        let s = rng.random_range(spec.min_speed..=spec.max_speed);
        if rng.random_bool(0.5) {
            -s
        } else {
            s
        }
    };
    let velocity = [axis(), axis()];
    let r = sprite.radius() as i64;
    // Centre range that keeps the sprite fully in frame at all three positions.
    let lo = |v: i32| r + v.unsigned_abs() as i64;
    let hi = |v: i32, len: usize| len as i64 - 1 - r - v.unsigned_abs() as i64;
    let cx = rng.random_range(lo(velocity[0])..=hi(velocity[0], spec.width));
    let cy = rng.random_range(lo(velocity[1])..=hi(velocity[1], spec.height));
    let brightness = match domain {
        Domain::Day => rng.random_range(spec.day_brightness[0]..=spec.day_brightness[1]),
        Domain::Night => rng.random_range(spec.night_brightness[0]..=spec.night_brightness[1]),
    };
    let frames = [-1i64, 0, 1].map(|step| {
        let mut canvas = backgrounds[location].clone();
        let centre = [cx + step * velocity[0] as i64, cy + step * velocity[1] as i64];
        sprite.draw(&mut canvas, centre);
        match domain {
            Domain::Night => make_night(&canvas, brightness),
            Domain::Day => {
                for p in canvas.pixels_mut() {
                    p.0 = p.0.map(|c| (c as f64 * brightness).round().clamp(0.0, 255.0) as u8);
                }
                canvas
            }
        }
    });
    let mask = sprite.footprint(spec.width, spec.height, [cx, cy]);
    RenderedSequence {
        frames,
        flows: analytic_flow(&mask, spec.width, spec.height, velocity),
        velocity,
        centre: [cx, cy],
        location,
    }
}

pub fn class_name(class: usize) -> String {
    format!("species_{class:02}")
}

pub fn sequence_id(class: usize, domain: Domain, index: usize) -> String {
    format!("c{class:02}_{domain}_{index:04}")
}

/// Renders every requested sequence into `output_dir` (`frames/*.png`,
/// `flow/*.flo`) and returns the unsplit manifest.
pub fn generate_dataset(spec: &SynthSpec, output_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let frames_dir = output_dir.join("frames");
    let flow_dir = output_dir.join("flow");
    for dir in [&frames_dir, &flow_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let backgrounds: Vec<RgbImage> = (0..spec.num_locations)
        .map(|l| location_background(l, spec))
        .collect();
    let counts = spec.class_counts();
    let mut samples = Vec::new();
    for (class, row) in counts.iter().enumerate() {
        let sprite = Sprite::for_class(class, spec);
        for domain in Domain::ALL {
            for index in 0..row[domain.index()] {
                let id = sequence_id(class, domain, index);
                let seq = render_sequence(spec, &sprite, &backgrounds, class, domain, index);
                let frames = [1, 2, 3].map(|j| format!("frames/{id}_{j}.png"));
                for (img, rel) in seq.frames.iter().zip(&frames) {
                    save_png(img, output_dir.join(rel))?;
                }
                let sample = SequenceSample {
                    id,
                    frames,
                    class_label: class,
                    domain,
                    location: format!("loc{:02}", seq.location),
                    split: Split::Unassigned,
                };
                seq.flows.past.write_flo(output_dir.join(sample.past_flow_path()))?;
                seq.flows.future.write_flo(output_dir.join(sample.future_flow_path()))?;
                samples.push(sample);
            }
        }
    }
    Ok(DatasetManifest {
        classes: (0..spec.num_classes).map(class_name).collect(),
        samples,
    })
}
