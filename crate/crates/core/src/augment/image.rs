//! Geometric and photometric image augmentation with bounding-box remapping.
//!
//! Coordinates are continuous: pixel `(col, row)` covers `[col, col+1) × [row, row+1)`.
//! Positive rotation angles turn the picture counter-clockwise as displayed.

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, ImageRecord};
use crate::{Error, Result};

/// Boxes smaller than this (px²) after remapping are dropped.
pub const MIN_BOX_AREA: f64 = 4.0;
/// Boundary samples per box edge when remapping through a distortion.
const EDGE_SAMPLES: usize = 8;
pub const DEFAULT_IMAGE_AUGMENTATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Rotate { degrees: f64 },
    Hflip,
    Vflip,
    Blur { radius: f64 },
    OpticalDistort { k: f64 },
    GridDistort { steps: u32, magnitude: f64 },
}

impl Transform {
    pub fn tag(&self) -> &'static str {
        match self {
            Transform::Rotate { .. } => "rotate",
            Transform::Hflip => "hflip",
            Transform::Vflip => "vflip",
            Transform::Blur { .. } => "blur",
            Transform::OpticalDistort { .. } => "optical_distort",
            Transform::GridDistort { .. } => "grid_distort",
        }
    }

    pub fn validate(&self, limits: &TransformLimits) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        match *self {
            Transform::Rotate { degrees } if !(-180.0..=180.0).contains(&degrees) => {
                bad(format!("rotation {degrees} outside [-180, 180]"))
            }
            Transform::Blur { radius } if !(0.0..=limits.max_blur).contains(&radius) => {
                bad(format!("blur radius {radius} outside [0, {}]", limits.max_blur))
            }
            Transform::OpticalDistort { k } if k.is_nan() || k.abs() > limits.max_optical => {
                bad(format!("optical distortion {k} exceeds ±{}", limits.max_optical))
            }
            Transform::GridDistort { steps, magnitude } => {
                if steps == 0 || steps > limits.max_grid_steps {
                    bad(format!("grid steps {steps} outside [1, {}]", limits.max_grid_steps))
                } else if !(0.0..=limits.max_grid_magnitude).contains(&magnitude) {
                    bad(format!("grid magnitude {magnitude} outside [0, {}]", limits.max_grid_magnitude))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Hard bounds accepted by [`apply_transform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformLimits {
    pub max_blur: f64,
    pub max_optical: f64,
    pub max_grid_steps: u32,
    /// Must stay below 1 so grid cells keep positive width.
    pub max_grid_magnitude: f64,
}

impl Default for TransformLimits {
    fn default() -> Self {
        TransformLimits {
            max_blur: 10.0,
            max_optical: 0.3,
            max_grid_steps: 32,
            max_grid_magnitude: 0.5,
        }
    }
}

/// Ranges used when sampling random transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageAugmentConfig {
    pub max_rotation: f64,
    pub blur_range: (f64, f64),
    pub max_optical: f64,
    pub grid_steps: (u32, u32),
    pub max_grid_magnitude: f64,
}

impl Default for ImageAugmentConfig {
    fn default() -> Self {
        ImageAugmentConfig {
            max_rotation: 30.0,
            blur_range: (0.5, 2.0),
            max_optical: 0.3,
            grid_steps: (3, 6),
            max_grid_magnitude: 0.3,
        }
    }
}

/// A point mapping between source and output image coordinates.
trait Warp {
    fn out_dims(&self) -> (u32, u32);
    /// Output point → source point (used to resample pixels).
    fn inverse(&self, x: f64, y: f64) -> (f64, f64);
    /// Source point → output point (used to remap boxes).
    fn forward(&self, x: f64, y: f64) -> (f64, f64);
}

struct Rotation {
    cos: f64,
    sin: f64,
    src_c: (f64, f64),
    out_c: (f64, f64),
    out: (u32, u32),
}

impl Rotation {
    fn new(degrees: f64, w: u32, h: u32) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let (wf, hf) = (w as f64, h as f64);
        // Tolerance keeps exact fits (e.g. 45° on a square) from growing a pixel.
        let fit = |v: f64| ((v - 1e-9).ceil() as u32).max(1);
        let ow = fit(wf * cos.abs() + hf * sin.abs());
        let oh = fit(wf * sin.abs() + hf * cos.abs());
        Rotation {
            cos,
            sin,
            src_c: (wf / 2.0, hf / 2.0),
            out_c: (ow as f64 / 2.0, oh as f64 / 2.0),
            out: (ow, oh),
        }
    }
}

impl Warp for Rotation {
    fn out_dims(&self) -> (u32, u32) {
        self.out
    }

    fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.src_c.0, y - self.src_c.1);
        (
            self.out_c.0 + dx * self.cos + dy * self.sin,
            self.out_c.1 - dx * self.sin + dy * self.cos,
        )
    }

    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.out_c.0, y - self.out_c.1);
        (
            self.src_c.0 + dx * self.cos - dy * self.sin,
            self.src_c.1 + dx * self.sin + dy * self.cos,
        )
    }
}

/// Radial model `src = c + (p − c)(1 + k r²)`, r normalized by the half-diagonal.
struct Optical {
    k: f64,
    c: (f64, f64),
    norm: f64,
    dims: (u32, u32),
}

impl Optical {
    fn new(k: f64, w: u32, h: u32) -> Self {
        let (wf, hf) = (w as f64, h as f64);
        Optical {
            k,
            c: (wf / 2.0, hf / 2.0),
            norm: (wf * wf + hf * hf).sqrt() / 2.0,
            dims: (w, h),
        }
    }

    fn radial(&self, s: f64) -> f64 {
        s * (1.0 + self.k * s * s)
    }
}

impl Warp for Optical {
    fn out_dims(&self) -> (u32, u32) {
        self.dims
    }

    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.c.0) / self.norm, (y - self.c.1) / self.norm);
        let f = 1.0 + self.k * (dx * dx + dy * dy);
        (self.c.0 + dx * f * self.norm, self.c.1 + dy * f * self.norm)
    }

    fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.c.0) / self.norm, (y - self.c.1) / self.norm);
        let r = (dx * dx + dy * dy).sqrt();
        if r == 0.0 {
            return (x, y);
        }
        // radial() is increasing on [0, hi]; for k < 0 it peaks at 1/sqrt(-3k).
        let hi = if self.k < 0.0 { (-1.0 / (3.0 * self.k)).sqrt() } else { r };
        let s = if self.radial(hi) < r {
            // No output point shows this source point; push it outward so it clips.
            hi * r / self.radial(hi)
        } else {
            let (mut lo, mut up) = (0.0, hi);
            for _ in 0..80 {
                let mid = 0.5 * (lo + up);
                if self.radial(mid) < r {
                    lo = mid;
                } else {
                    up = mid;
                }
            }
            0.5 * (lo + up)
        };
        let scale = s / r;
        (self.c.0 + dx * scale * self.norm, self.c.1 + dy * scale * self.norm)
    }
}

/// Separable piecewise-linear warp: output knots evenly spaced, source knots
/// displaced by randomly rescaled cell widths (endpoints fixed).
struct Grid {
    xs: (Vec<f64>, Vec<f64>),
    ys: (Vec<f64>, Vec<f64>),
    dims: (u32, u32),
}

fn grid_axis(len: f64, steps: u32, magnitude: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = steps as usize;
    let out: Vec<f64> = (0..=n).map(|i| len * i as f64 / n as f64).collect();
    let widths: Vec<f64> = (0..n).map(|_| 1.0 + rng.gen_range(-magnitude..=magnitude)).collect();
    let total: f64 = widths.iter().sum();
    let mut src = vec![0.0; n + 1];
    for i in 0..n {
        src[i + 1] = src[i] + widths[i] / total * len;
    }
    src[n] = len;
    (out, src)
}

fn piecewise(from: &[f64], to: &[f64], v: f64) -> f64 {
    let n = from.len() - 1;
    let i = match from.iter().position(|&k| k > v) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => n - 1,
    };
    let t = (v - from[i]) / (from[i + 1] - from[i]);
    to[i] + t * (to[i + 1] - to[i])
}

impl Grid {
    fn new(steps: u32, magnitude: f64, w: u32, h: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = grid_axis(w as f64, steps, magnitude, &mut rng);
        let ys = grid_axis(h as f64, steps, magnitude, &mut rng);
        Grid { xs, ys, dims: (w, h) }
    }
}

impl Warp for Grid {
    fn out_dims(&self) -> (u32, u32) {
        self.dims
    }

    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        (piecewise(&self.xs.0, &self.xs.1, x), piecewise(&self.ys.0, &self.ys.1, y))
    }

    fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        (piecewise(&self.xs.1, &self.xs.0, x), piecewise(&self.ys.1, &self.ys.0, y))
    }
}

fn warp_pixels(src: &RgbImage, warp: &dyn Warp) -> RgbImage {
    let (ow, oh) = warp.out_dims();
    let (w, h) = src.dimensions();
    RgbImage::from_fn(ow, oh, |col, row| {
        let (u, v) = warp.inverse(col as f64 + 0.5, row as f64 + 0.5);
        if !(0.0..=w as f64).contains(&u) || !(0.0..=h as f64).contains(&v) {
            return Rgb([0, 0, 0]);
        }
        let x = (u - 0.5).clamp(0.0, (w - 1) as f64) as f32;
        let y = (v - 0.5).clamp(0.0, (h - 1) as f64) as f32;
        imageops::interpolate_bilinear(src, x, y).unwrap_or(Rgb([0, 0, 0]))
    })
}

/// Hull of the mapped points, clipped; `None` if the remainder is too small.
fn hull_box(points: impl Iterator<Item = (f64, f64)>, w: u32, h: u32, label: &Option<String>) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (x0, y0) = (x0.max(0.0), y0.max(0.0));
    let (x1, y1) = (x1.min(w as f64), y1.min(h as f64));
    let (bw, bh) = (x1 - x0, y1 - y0);
    if !(bw > 0.0 && bh > 0.0) || bw * bh < MIN_BOX_AREA {
        return None;
    }
    Some(BBox {
        x: x0,
        y: y0,
        w: bw,
        h: bh,
        label: label.clone(),
    })
}

fn boundary_points(b: &BBox, per_edge: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(4 * per_edge);
    for i in 0..per_edge {
        let t = i as f64 / per_edge as f64;
        pts.push((b.x + t * b.w, b.y));
        pts.push((b.right(), b.y + t * b.h));
        pts.push((b.right() - t * b.w, b.bottom()));
        pts.push((b.x, b.bottom() - t * b.h));
    }
    pts
}

/// Exact relabeling for flips and quarter turns (no resampling).
fn exact(img: &RgbImage, boxes: &[BBox], t: &Transform) -> Option<(RgbImage, Vec<BBox>)> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let quarter = match *t {
        Transform::Hflip => {
            let bx = boxes.iter().map(|b| BBox { x: w - b.x - b.w, ..b.clone() }).collect();
            return Some((imageops::flip_horizontal(img), bx));
        }
        Transform::Vflip => {
            let bx = boxes.iter().map(|b| BBox { y: h - b.y - b.h, ..b.clone() }).collect();
            return Some((imageops::flip_vertical(img), bx));
        }
        Transform::Rotate { degrees } if degrees.rem_euclid(90.0) == 0.0 => (degrees / 90.0).rem_euclid(4.0) as u32,
        _ => return None,
    };
    let out = match quarter {
        0 => img.clone(),
        // imageops rotates clockwise.
        1 => imageops::rotate270(img),
        2 => imageops::rotate180(img),
        _ => imageops::rotate90(img),
    };
    let bx = boxes
        .iter()
        .map(|b| {
            let (x, y, bw, bh) = match quarter {
                0 => (b.x, b.y, b.w, b.h),
                1 => (b.y, w - b.x - b.w, b.h, b.w),
                2 => (w - b.x - b.w, h - b.y - b.h, b.w, b.h),
                _ => (h - b.y - b.h, b.x, b.h, b.w),
            };
            BBox { x, y, w: bw, h: bh, label: b.label.clone() }
        })
        .collect();
    Some((out, bx))
}

/// Apply one transform, remapping boxes. `seed` only matters for grid distortion.
pub fn apply_transform(image: &ImageRecord, t: &Transform, seed: u64) -> Result<ImageRecord> {
    t.validate(&TransformLimits::default())?;
    let src = image.rgb()?;
    let (w, h) = src.dimensions();
    let (pixels, boxes) = if let Some(done) = exact(&src, &image.bboxes, t) {
        done
    } else if let Transform::Blur { radius } = *t {
        let out = if radius == 0.0 {
            (*src).clone()
        } else {
            imageops::blur(&*src, radius as f32)
        };
        (out, image.bboxes.clone())
    } else {
        let (warp, per_edge): (Box<dyn Warp>, usize) = match *t {
            Transform::Rotate { degrees } => (Box::new(Rotation::new(degrees, w, h)), 1),
            Transform::OpticalDistort { k } => (Box::new(Optical::new(k, w, h)), EDGE_SAMPLES),
            Transform::GridDistort { steps, magnitude } => (Box::new(Grid::new(steps, magnitude, w, h, seed)), EDGE_SAMPLES),
            _ => unreachable!("handled above"),
        };
        let (ow, oh) = warp.out_dims();
        let boxes = image
            .bboxes
            .iter()
            .filter_map(|b| {
                let pts = boundary_points(b, per_edge);
                hull_box(pts.into_iter().map(|(x, y)| warp.forward(x, y)), ow, oh, &b.label)
            })
            .collect();
        (warp_pixels(&src, warp.as_ref()), boxes)
    };
    let (ow, oh) = pixels.dimensions();
    let boxes = boxes
        .into_iter()
        .filter_map(|b| {
            if b.fits(ow, oh) {
                (b.area() >= MIN_BOX_AREA).then_some(b)
            } else {
                hull_box([(b.x, b.y), (b.right(), b.bottom())].into_iter(), ow, oh, &b.label)
            }
        })
        .collect();
    ImageRecord::from_rgb(
        format!("{}~{}", image.image_id, t.tag()),
        pixels,
        boxes,
        image.split,
    )
}

/// Draw `k` transforms with their per-transform seeds.
pub fn sample_transforms(k: usize, seed: u64, config: &ImageAugmentConfig) -> Result<Vec<(Transform, u64)>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| {
            let t = match rng.gen_range(0..6) {
                0 => Transform::Rotate {
                    degrees: rng.gen_range(-config.max_rotation..=config.max_rotation),
                },
                1 => Transform::Hflip,
                2 => Transform::Vflip,
                3 => Transform::Blur {
                    radius: rng.gen_range(config.blur_range.0..=config.blur_range.1),
                },
                4 => Transform::OpticalDistort {
                    k: rng.gen_range(-config.max_optical..=config.max_optical),
                },
                _ => Transform::GridDistort {
                    steps: rng.gen_range(config.grid_steps.0..=config.grid_steps.1),
                    magnitude: rng.gen_range(0.0..=config.max_grid_magnitude),
                },
            };
            (t, rng.gen())
        })
        .collect())
}

/// `k` augmented copies, each from one sampled transform. Ids are
/// `<image_id>~<transform>~<index>`.
pub fn augment_image(image: &ImageRecord, k: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    augment_image_with(image, k, seed, &ImageAugmentConfig::default())
}

pub fn augment_image_with(image: &ImageRecord, k: usize, seed: u64, config: &ImageAugmentConfig) -> Result<Vec<ImageRecord>> {
    sample_transforms(k, seed, config)?
        .into_iter()
        .enumerate()
        .map(|(i, (t, s))| {
            let mut out = apply_transform(image, &t, s)?;
            out.image_id = format!("{}~{}~{i}", image.image_id, t.tag());
            Ok(out)
        })
        .collect()
}
