//! CutMix-style joint augmentation: paste a labeled region into another
//! image and extend that image's caption to mention it.

use image::imageops::{self, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, CaptionRecord, ImageRecord};
use crate::{Error, Result};

pub const LABEL_SLOT: &str = "{label}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    /// Sentence appended to the destination caption; must contain `{label}`.
    pub template: String,
    pub max_attempts: usize,
    /// Largest allowed overlap with an existing box, measured as
    /// intersection over the smaller of the two areas.
    pub max_overlap: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            template: "there is a {label} .".into(),
            max_attempts: 20,
            max_overlap: 0.3,
        }
    }
}

/// `intersection / min(area)`: 1 whenever one box contains the other.
pub fn overlap_coefficient(a: &BBox, b: &BBox) -> f64 {
    let smaller = a.area().min(b.area());
    if smaller <= 0.0 {
        0.0
    } else {
        a.intersection(b) / smaller
    }
}

/// Append the instantiated template, inserting a sentence break if the
/// caption does not already end with one.
pub fn extend_caption(text: &str, label: &str, template: &str) -> String {
    let addition = template.replace(LABEL_SLOT, label);
    let base = text.trim_end();
    if base.is_empty() {
        addition
    } else if base.ends_with('.') {
        format!("{base} {addition}")
    } else {
        format!("{base} . {addition}")
    }
}

/// Integer pixel rectangle covering the box.
fn pixel_rect(b: &BBox, w: u32, h: u32) -> (u32, u32, u32, u32) {
    let x0 = (b.x.floor().max(0.0) as u32).min(w - 1);
    let y0 = (b.y.floor().max(0.0) as u32).min(h - 1);
    let x1 = (b.right().ceil() as u32).clamp(x0 + 1, w);
    let y1 = (b.bottom().ceil() as u32).clamp(y0 + 1, h);
    (x0, y0, x1 - x0, y1 - y0)
}

/// Size the patch is pasted at: unchanged when it fits, otherwise shrunk
/// (aspect preserved) to at most a quarter of the destination area.
pub fn paste_size(pw: u32, ph: u32, dw: u32, dh: u32) -> (u32, u32) {
    if pw <= dw && ph <= dh {
        return (pw, ph);
    }
    let (pwf, phf, dwf, dhf) = (pw as f64, ph as f64, dw as f64, dh as f64);
    let s = (dwf * dhf / 4.0 / (pwf * phf)).sqrt().min(dwf / pwf).min(dhf / phf);
    (((pwf * s).floor() as u32).clamp(1, dw), ((phf * s).floor() as u32).clamp(1, dh))
}

pub fn cutmix_joint(
    src: &ImageRecord,
    src_box: &BBox,
    dst: &ImageRecord,
    dst_caption: &CaptionRecord,
    placement_seed: u64,
) -> Result<(ImageRecord, CaptionRecord)> {
    cutmix_joint_with(src, src_box, dst, dst_caption, placement_seed, &JointConfig::default())
}

pub fn cutmix_joint_with(
    src: &ImageRecord,
    src_box: &BBox,
    dst: &ImageRecord,
    dst_caption: &CaptionRecord,
    placement_seed: u64,
    config: &JointConfig,
) -> Result<(ImageRecord, CaptionRecord)> {
    let label = match src_box.label.as_deref().map(str::trim) {
        Some(l) if !l.is_empty() => l.to_owned(),
        _ => return Err(Error::Argument("source box has no label".into())),
    };
    if !config.template.contains(LABEL_SLOT) {
        return Err(Error::Argument(format!("template {:?} lacks {LABEL_SLOT}", config.template)));
    }
    if !src_box.fits(src.width, src.height) || src_box.area() <= 0.0 {
        return Err(Error::Argument(format!("source box {src_box:?} outside source image")));
    }
    let src_px = src.rgb()?;
    let (sx, sy, sw, sh) = pixel_rect(src_box, src.width, src.height);
    let mut patch = imageops::crop_imm(&*src_px, sx, sy, sw, sh).to_image();
    let (pw, ph) = paste_size(sw, sh, dst.width, dst.height);
    if (pw, ph) != (sw, sh) {
        patch = imageops::resize(&patch, pw, ph, FilterType::Triangle);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(placement_seed);
    let mut placed = None;
    for _ in 0..config.max_attempts {
        let px = rng.gen_range(0..=dst.width - pw);
        let py = rng.gen_range(0..=dst.height - ph);
        let cand = BBox::new(px as f64, py as f64, pw as f64, ph as f64);
        if dst.bboxes.iter().all(|b| overlap_coefficient(&cand, b) <= config.max_overlap) {
            placed = Some((px, py, cand));
            break;
        }
    }
    let Some((px, py, new_box)) = placed else {
        return Err(Error::Placement {
            attempts: config.max_attempts,
        });
    };

    let mut out_px = (*dst.rgb()?).clone();
    imageops::replace(&mut out_px, &patch, px as i64, py as i64);
    let mut boxes = dst.bboxes.clone();
    boxes.push(new_box.with_label(label.clone()));
    let out_img = ImageRecord::from_rgb(
        format!("{}~cutmix~{}", dst.image_id, src.image_id),
        out_px,
        boxes,
        dst.split,
    )?;
    let mut caption = dst_caption.derive_augmented(extend_caption(&dst_caption.text, &label, &config.template), "cutmix", 0);
    caption.image_id = out_img.image_id.clone();
    Ok((out_img, caption))
}
