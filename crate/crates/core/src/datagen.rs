//! Deterministic synthetic multi-domain segmentation scenes.
//!
//! A scene is a background plus 2-6 geometric objects (rectangles, ellipses,
//! bands), each tagged with a known class and rendered with that class's
//! colour and texture. Domains differ by a global appearance shift (hue
//! rotation, brightness offset, sensor noise) and by how often an object of
//! the reserved out-of-distribution family is pasted on top.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::seed;

/// Label of pixels excluded from supervision (out-of-distribution objects).
pub const IGNORE: u8 = u8::MAX;

/// Appearance of one known class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAppearance {
    pub color: [f64; 3],
    pub texture: f64,
}

/// Global appearance shift applied to every pixel of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainShift {
    /// Rotation about the grey axis of RGB space, radians.
    pub hue: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain_id: String,
    pub num_classes: usize,
    pub palette: Vec<ClassAppearance>,
    pub shift: DomainShift,
    pub ood_rate: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

/// Row-major `height x width x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * 3;
        &self.data[o..o + 3]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * 3;
        &mut self.data[o..o + 3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    /// Per-pixel class index, or [`IGNORE`].
    pub labels: Vec<u8>,
    pub ood_mask: Vec<bool>,
}

/// Reserved appearance for out-of-distribution objects.
const OOD_COLOR: [f64; 3] = [0.55, 0.55, 0.55];
const OOD_TEXTURE: f64 = 1.0;
const TEXTURE_GAIN: f64 = 0.22;

/// Named domain shifts shipped with the crate, ordered by distance from the
/// source domain.
pub const PRESETS: [(&str, DomainShift, f64); 3] = [
    (
        "source",
        DomainShift {
            hue: 0.0,
            brightness: 0.0,
            noise_sigma: 0.02,
        },
        0.0,
    ),
    (
        "near",
        DomainShift {
            hue: 0.3,
            brightness: 0.08,
            noise_sigma: 0.05,
        },
        0.2,
    ),
    (
        "far",
        DomainShift {
            hue: 0.6,
            brightness: -0.15,
            noise_sigma: 0.1,
        },
        0.5,
    ),
];

/// Default palette: colours spread evenly around the hue circle.
pub fn default_palette(num_classes: usize) -> Vec<ClassAppearance> {
    (0..num_classes)
        .map(|k| {
            let hue = std::f64::consts::TAU * k as f64 / num_classes as f64;
            ClassAppearance {
                color: hsv_to_rgb(hue, 0.55, 0.72),
                texture: if k == 0 { 0.3 } else { 0.8 },
            }
        })
        .collect()
}

fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(std::f64::consts::TAU) / (std::f64::consts::PI / 3.0);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl DomainSpec {
    /// Builds one of the named [`PRESETS`] with the default palette.
    pub fn preset(name: &str, num_classes: usize, seed: u64) -> Result<Self> {
        let (_, shift, ood_rate) = PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| Error::config("domain_id", format!("unknown preset `{name}`")))?;
        Ok(DomainSpec {
            domain_id: name.to_string(),
            num_classes,
            palette: default_palette(num_classes),
            shift: *shift,
            ood_rate: *ood_rate,
            seed,
            height: 64,
            width: 64,
            patch_size: 8,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.num_classes >= IGNORE as usize {
            return Err(Error::config("num_classes", "must be below 255"));
        }
        if self.palette.len() != self.num_classes {
            return Err(Error::config(
                "palette",
                format!(
                    "{} entries for {} classes",
                    self.palette.len(),
                    self.num_classes
                ),
            ));
        }
        for (k, a) in self.palette.iter().enumerate() {
            if a.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::config("palette", format!("class {k} colour outside [0,1]")));
            }
            if !(0.0..=1.0).contains(&a.texture) {
                return Err(Error::config("palette", format!("class {k} texture outside [0,1]")));
            }
        }
        if !self.shift.hue.is_finite() {
            return Err(Error::config("shift.hue", "must be finite"));
        }
        if !(-0.5..=0.5).contains(&self.shift.brightness) {
            return Err(Error::config("shift.brightness", "must lie in [-0.5, 0.5]"));
        }
        if !(0.0..=0.3).contains(&self.shift.noise_sigma) {
            return Err(Error::config("shift.noise_sigma", "must lie in [0, 0.3]"));
        }
        if !(0.0..=1.0).contains(&self.ood_rate) {
            return Err(Error::config("ood_rate", "must lie in [0, 1]"));
        }
        if self.patch_size == 0 {
            return Err(Error::config("patch_size", "must be positive"));
        }
        for (field, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % self.patch_size != 0 {
                return Err(Error::config(
                    field,
                    format!("{v} is not a positive multiple of patch size {}", self.patch_size),
                ));
            }
        }
        Ok(())
    }
}

/// Weighted Euclidean distance between the shift parameters of two domains.
pub fn shift_distance(a: &DomainSpec, b: &DomainSpec) -> f64 {
    const W_HUE: f64 = 1.0;
    const W_BRIGHTNESS: f64 = 2.0;
    const W_NOISE: f64 = 4.0;
    const W_OOD: f64 = 1.0;
    let d = [
        W_HUE * (a.shift.hue - b.shift.hue).powi(2),
        W_BRIGHTNESS * (a.shift.brightness - b.shift.brightness).powi(2),
        W_NOISE * (a.shift.noise_sigma - b.shift.noise_sigma).powi(2),
        W_OOD * (a.ood_rate - b.ood_rate).powi(2),
    ];
    d.iter().sum::<f64>().sqrt()
}

pub fn generate_domain(spec: &DomainSpec, count: usize) -> Result<Vec<LabeledSample>> {
    generate_domain_with(par::Execution::default(), spec, count)
}

pub fn generate_domain_with(
    exec: par::Execution,
    spec: &DomainSpec,
    count: usize,
) -> Result<Vec<LabeledSample>> {
    if count == 0 {
        return Err(Error::config("count", "must be at least 1"));
    }
    spec.validate()?;
    Ok(par::map_with(exec, count, |i| render_sample(spec, i as u64)))
}

/// Generates sample `index` of a domain; a pure function of `(spec, index)`.
pub fn generate_sample(spec: &DomainSpec, index: u64) -> Result<LabeledSample> {
    spec.validate()?;
    Ok(render_sample(spec, index))
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Band { horizontal: bool, lo: f64, hi: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Band { horizontal, lo, hi } => {
                let v = if horizontal { y } else { x };
                v >= lo && v < hi
            }
        }
    }
}

/// Texture family `k` evaluated at pixel `(y, x)`, in `[-1, 1]`.
fn texture_pattern(family: usize, y: f64, x: f64) -> f64 {
    use std::f64::consts::PI;
    let scale = 1.0 + (family / 6) as f64 * 0.5;
    match family % 6 {
        0 => (y * PI / 16.0 * scale).sin() * (x * PI / 16.0 * scale).cos(),
        1 => (y * PI / (2.0 * scale)).sin().signum(),
        2 => (x * PI / (2.0 * scale)).sin().signum(),
        3 => ((y * PI / 3.0 * scale).sin() * (x * PI / 3.0 * scale).sin()).signum(),
        4 => ((y + x) * PI / (3.0 * scale)).sin(),
        _ => {
            let dy = (y / 4.0 * scale).fract() - 0.5;
            let dx = (x / 4.0 * scale).fract() - 0.5;
            if dy * dy + dx * dx < 0.09 {
                1.0
            } else {
                -0.5
            }
        }
    }
}

fn ood_pattern(y: f64, x: f64) -> f64 {
    // Fine checkerboard; no known class uses period-2 texture.
    if ((y as i64) + (x as i64)) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Rotation about the grey axis `(1,1,1)/sqrt(3)` by `angle` radians.
pub(crate) fn hue_rotation(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let k = 1.0 / 3.0_f64.sqrt();
    let t = 1.0 - c;
    let a = t / 3.0 + c;
    let b = t / 3.0 - k * s;
    let d = t / 3.0 + k * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn random_shape(rng: &mut seed::Rng, h: f64, w: f64, ood: bool) -> Shape {
    let side = h.min(w);
    let kind = if ood { rng.random_range(0..2) } else { rng.random_range(0..3) };
    match kind {
        0 => {
            let (lo, hi) = if ood { (side / 6.0, side / 3.0) } else { (side / 6.0, side / 2.0) };
            let sh = rng.random_range(lo..hi);
            let sw = rng.random_range(lo..hi);
            let y0 = rng.random_range(0.0..(h - sh));
            let x0 = rng.random_range(0.0..(w - sw));
            Shape::Rect {
                y0,
                x0,
                y1: y0 + sh,
                x1: x0 + sw,
            }
        }
        1 => {
            let (lo, hi) = if ood { (side / 10.0, side / 6.0) } else { (side / 10.0, side / 4.0) };
            let ry = rng.random_range(lo..hi);
            let rx = rng.random_range(lo..hi);
            Shape::Ellipse {
                cy: rng.random_range(ry..(h - ry)),
                cx: rng.random_range(rx..(w - rx)),
                ry,
                rx,
            }
        }
        _ => {
            let horizontal = rng.random_bool(0.5);
            let extent = if horizontal { h } else { w };
            let thick = rng.random_range((side / 10.0)..(side / 5.0));
            let lo = rng.random_range(0.0..(extent - thick));
            Shape::Band {
                horizontal,
                lo,
                hi: lo + thick,
            }
        }
    }
}

fn render_sample(spec: &DomainSpec, index: u64) -> LabeledSample {
    let (h, w) = (spec.height, spec.width);
    let mut rng = seed::rng(spec.seed ^ seed::mix64(index));
    let k = spec.num_classes;

    let n_objects = rng.random_range(2..=6);
    let objects: Vec<(Shape, usize, f64, f64)> = (0..n_objects)
        .map(|_| {
            let shape = random_shape(&mut rng, h as f64, w as f64, false);
            let class = rng.random_range(1..k);
            (shape, class, rng.random_range(0.0..8.0), rng.random_range(0.0..8.0))
        })
        .collect();
    let ood = if rng.random_bool(spec.ood_rate) {
        Some(random_shape(&mut rng, h as f64, w as f64, true))
    } else {
        None
    };

    let rot = hue_rotation(spec.shift.hue);
    let noise = Normal::new(0.0, spec.shift.noise_sigma.max(0.0)).expect("sigma validated");

    let mut image = Image::zeros(h, w);
    let mut labels = vec![0u8; h * w];
    let mut ood_mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let i = y * w + x;
            let mut class = 0usize;
            let (mut oy, mut ox) = (0.0, 0.0);
            for &(shape, c, dy, dx) in &objects {
                if shape.contains(py, px) {
                    class = c;
                    oy = dy;
                    ox = dx;
                }
            }
            let (base, tex) = match ood {
                Some(shape) if shape.contains(py, px) => {
                    ood_mask[i] = true;
                    labels[i] = IGNORE;
                    (OOD_COLOR, OOD_TEXTURE * ood_pattern(y as f64, x as f64))
                }
                _ => {
                    labels[i] = class as u8;
                    let a = &spec.palette[class];
                    (a.color, a.texture * texture_pattern(class, y as f64 + oy, x as f64 + ox))
                }
            };
            let m = TEXTURE_GAIN * tex;
            let rgb = [base[0] + m, base[1] + m, base[2] + m];
            let out = image.pixel_mut(y, x);
            for c in 0..3 {
                let rotated = rot[c][0] * rgb[0] + rot[c][1] * rgb[1] + rot[c][2] * rgb[2];
                let mut v = rotated + spec.shift.brightness;
                if spec.shift.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                // Stored values are f32-exact so on-disk records round-trip.
                out[c] = v.clamp(0.0, 1.0) as f32 as f64;
            }
        }
    }
    LabeledSample {
        image,
        labels,
        ood_mask,
    }
}
