//! Input views used for consistency training: Bernoulli patch masking and the
//! crop-and-resize (C&R) comparison augmentation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{hue_rotation, Image};
use crate::error::{Error, Result};
use crate::nnet::TokenGrid;
use crate::seed;

pub const DEFAULT_P_MASK: f64 = 0.5;

/// Keep/drop indicator over the patch grid. `p_mask` is the probability that
/// a patch is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub grid_height: usize,
    pub grid_width: usize,
    pub keep: Vec<bool>,
    pub p_mask: f64,
    pub seed: u64,
}

impl PatchMask {
    pub fn all_keep(grid_height: usize, grid_width: usize) -> Self {
        PatchMask {
            grid_height,
            grid_width,
            keep: vec![true; grid_height * grid_width],
            p_mask: 0.0,
            seed: 0,
        }
    }

    pub fn dropped_fraction(&self) -> f64 {
        self.keep.iter().filter(|k| !**k).count() as f64 / self.keep.len() as f64
    }
}

/// Drops each patch independently with probability `p_mask`.
///
/// Patch `i` is dropped iff its uniform draw `u_i < p_mask`, so masks sampled
/// with the same seed at a larger `p_mask` drop a superset of patches.
pub fn sample_mask(grid_height: usize, grid_width: usize, p_mask: f64, seed: u64) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(Error::config("p_mask", format!("{p_mask} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed);
    let keep = (0..grid_height * grid_width)
        .map(|_| rng.random::<f64>() >= p_mask)
        .collect();
    Ok(PatchMask {
        grid_height,
        grid_width,
        keep,
        p_mask,
        seed,
    })
}

/// Multiplies content tokens by the keep mask; dropped patches become zero.
pub fn apply_mask(tokens: &TokenGrid, mask: &PatchMask) -> Result<TokenGrid> {
    if tokens.grid_height != mask.grid_height || tokens.grid_width != mask.grid_width {
        return Err(Error::Shape(format!(
            "mask grid {}x{} vs token grid {}x{}",
            mask.grid_height, mask.grid_width, tokens.grid_height, tokens.grid_width
        )));
    }
    let mut out = tokens.clone();
    for (row, &keep) in out.data.chunks_exact_mut(tokens.dim).zip(&mask.keep) {
        if !keep {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Square crop window snapped to patch boundaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub scale: f64,
    pub top: usize,
    pub left: usize,
    pub side_h: usize,
    pub side_w: usize,
}

impl CropSpec {
    /// Snaps `scale` and the top-left corner to multiples of `patch`.
    pub fn new(scale: f64, top: usize, left: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::config("crop.scale", format!("{scale} outside (0, 1]")));
        }
        let snap = |extent: usize| -> usize {
            let cells = ((scale * extent as f64) / patch as f64).round() as usize;
            cells.clamp(1, extent / patch) * patch
        };
        let spec = CropSpec {
            scale,
            top: top / patch * patch,
            left: left / patch * patch,
            side_h: snap(height),
            side_w: snap(width),
        };
        if spec.top + spec.side_h > height || spec.left + spec.side_w > width {
            return Err(Error::config(
                "crop.top_left",
                format!(
                    "window {}x{} at ({}, {}) leaves the {}x{} image",
                    spec.side_h, spec.side_w, spec.top, spec.left, height, width
                ),
            ));
        }
        Ok(spec)
    }

    /// Random window with scale drawn uniformly from `[scale_min, scale_max]`.
    pub fn sample(
        rng: &mut seed::Rng,
        scale_min: f64,
        scale_max: f64,
        height: usize,
        width: usize,
        patch: usize,
    ) -> Result<Self> {
        if !(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0) {
            return Err(Error::config("crop.scale_range", format!("[{scale_min}, {scale_max}] is not a sub-range of (0, 1]")));
        }
        let scale = if scale_min == scale_max {
            scale_min
        } else {
            rng.random_range(scale_min..=scale_max)
        };
        let probe = CropSpec::new(scale, 0, 0, height, width, patch)?;
        let top = rng.random_range(0..=(height - probe.side_h) / patch) * patch;
        let left = rng.random_range(0..=(width - probe.side_w) / patch) * patch;
        CropSpec::new(scale, top, left, height, width, patch)
    }
}

/// Maps every pixel of an augmented view back to a pixel of the original.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub height: usize,
    pub width: usize,
    /// `source[aug_pixel] = original_pixel`, both flat `y * width + x`.
    pub source: Vec<usize>,
}

/// Crops `spec`'s window and resizes it back to full size by nearest-neighbour
/// sampling.
pub fn crop_resize_pair(image: &Image, spec: &CropSpec) -> Result<(Image, Correspondence)> {
    let (h, w) = (image.height, image.width);
    if spec.side_h == 0 || spec.side_w == 0 || spec.top + spec.side_h > h || spec.left + spec.side_w > w {
        return Err(Error::config("crop.top_left", "crop window out of bounds"));
    }
    let mut out = Image::zeros(h, w);
    let mut source = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = spec.top + y * spec.side_h / h;
        for x in 0..w {
            let sx = spec.left + x * spec.side_w / w;
            out.pixel_mut(y, x).copy_from_slice(image.pixel(sy, sx));
            source.push(sy * w + sx);
        }
    }
    Ok((
        out,
        Correspondence {
            height: h,
            width: w,
            source,
        },
    ))
}

impl Correspondence {
    /// One augmented pixel that maps onto original pixel `(y, x)`, if the
    /// pixel lies inside the crop window.
    pub fn inverse(&self, spec: &CropSpec, y: usize, x: usize) -> Option<usize> {
        if y < spec.top || y >= spec.top + spec.side_h || x < spec.left || x >= spec.left + spec.side_w {
            return None;
        }
        let ay = ((y - spec.top) * self.height).div_ceil(spec.side_h);
        let ax = ((x - spec.left) * self.width).div_ceil(spec.side_w);
        Some(ay * self.width + ax)
    }
}

/// Per-image colour jitter: uniform hue rotation in `[-hue, hue]` and
/// brightness offset in `[-brightness, brightness]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub hue: f64,
    pub brightness: f64,
}

impl ColorJitter {
    pub const FULL: ColorJitter = ColorJitter {
        hue: 0.6,
        brightness: 0.15,
    };
    pub const LIGHT: ColorJitter = ColorJitter {
        hue: 0.15,
        brightness: 0.04,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::FULL),
            "light" => Ok(Self::LIGHT),
            other => Err(Error::config("jitter", format!("unknown preset `{other}`"))),
        }
    }

    pub fn apply(&self, image: &Image, rng: &mut seed::Rng) -> Image {
        let hue = if self.hue > 0.0 { rng.random_range(-self.hue..=self.hue) } else { 0.0 };
        let bright = if self.brightness > 0.0 {
            rng.random_range(-self.brightness..=self.brightness)
        } else {
            0.0
        };
        let rot = hue_rotation(hue);
        let mut out = image.clone();
        for px in out.data.chunks_exact_mut(3) {
            let rgb = [px[0], px[1], px[2]];
            for c in 0..3 {
                let v = rot[c][0] * rgb[0] + rot[c][1] * rgb[1] + rot[c][2] * rgb[2] + bright;
                px[c] = v.clamp(0.0, 1.0);
            }
        }
        out
    }
}
