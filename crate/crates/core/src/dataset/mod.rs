//! Image and caption records, dataset loaders and vocabulary.

mod coco;
mod store;
pub mod synth;
mod vizwiz;
mod vocab;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::text;
use crate::{Error, Result};

pub use coco::{load_coco, parse_coco_annotations, parse_split_file, CocoAnnotations};
pub use store::{load_dir, parse_captions_jsonl, read_captions_jsonl, save_dir, write_captions_jsonl};
pub use vizwiz::{load_vizwiz, parse_vizwiz_annotations, VIZWIZ_VAL_FRACTION};
pub use vocab::{build_vocab, Vocabulary, END, PAD, START, UNK};

/// Image counts of the public releases, kept for reporting against loaded data.
pub const COCO2014_TRAIN_IMAGES: usize = 82_783;
pub const COCO2014_VAL_IMAGES: usize = 40_504;
pub const VIZWIZ_TRAIN_IMAGES: usize = 23_431;
pub const VIZWIZ_VAL_IMAGES: usize = 7_750;
pub const VIZWIZ_TEST_IMAGES: usize = 8_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Task(u32),
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => f.write_str("train"),
            SplitTag::Val => f.write_str("val"),
            SplitTag::Test => f.write_str("test"),
            SplitTag::Task(k) => write!(f, "task-{k}"),
        }
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "restval" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => other
                .strip_prefix("task-")
                .and_then(|k| k.parse().ok())
                .map(SplitTag::Task)
                .ok_or_else(|| Error::Argument(format!("unknown split tag {other:?}"))),
        }
    }
}

impl Serialize for SplitTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned box in pixel coordinates, top-left anchored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            x,
            y,
            w,
            h,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// True when the box is non-degenerate and fully inside a `width`×`height` image.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        finite
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.right() <= f64::from(width)
            && self.bottom() <= f64::from(height)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Pixel storage: decoded in memory, or a path decoded on demand.
#[derive(Debug, Clone)]
pub enum Pixels {
    Loaded(Arc<RgbImage>),
    Lazy(PathBuf),
}

impl Pixels {
    pub fn get(&self) -> Result<Arc<RgbImage>> {
        match self {
            Pixels::Loaded(img) => Ok(Arc::clone(img)),
            Pixels::Lazy(path) => decode_file(path).map(Arc::new),
        }
    }
}

pub(crate) fn decode_file(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes)
}

/// Decode PNG/JPEG bytes into an RGB image.
pub fn decode_bytes(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.is_empty() {
        return Err(Error::Image("empty image data".into()));
    }
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(Error::Image("zero-sized image".into()));
    }
    Ok(rgb)
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Pixels,
    pub bboxes: Vec<BBox>,
    pub split: SplitTag,
}

impl ImageRecord {
    /// Build an in-memory record, checking box containment.
    pub fn from_rgb(
        image_id: impl Into<String>,
        pixels: RgbImage,
        bboxes: Vec<BBox>,
        split: SplitTag,
    ) -> Result<Self> {
        let (width, height) = pixels.dimensions();
        if width == 0 || height == 0 {
            return Err(Error::Shape("image must be at least 1x1".into()));
        }
        let rec = ImageRecord {
            image_id: image_id.into(),
            width,
            height,
            pixels: Pixels::Loaded(Arc::new(pixels)),
            bboxes,
            split,
        };
        rec.check_boxes()?;
        Ok(rec)
    }

    pub fn check_boxes(&self) -> Result<()> {
        match self.bboxes.iter().find(|b| !b.fits(self.width, self.height)) {
            Some(b) => Err(Error::Argument(format!(
                "bbox {b:?} outside {}x{} image {}",
                self.width, self.height, self.image_id
            ))),
            None => Ok(()),
        }
    }

    pub fn rgb(&self) -> Result<Arc<RgbImage>> {
        let img = self.pixels.get()?;
        if img.dimensions() != (self.width, self.height) {
            return Err(Error::Shape(format!(
                "image {} is {:?}, record says {}x{}",
                self.image_id,
                img.dimensions(),
                self.width,
                self.height
            )));
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Predicted,
    Corrected,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub image_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

impl CaptionRecord {
    pub fn new(
        caption_id: impl Into<String>,
        image_id: impl Into<String>,
        text: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        let text = text.into();
        CaptionRecord {
            caption_id: caption_id.into(),
            image_id: image_id.into(),
            tokens: text::tokenize_capped(&text),
            text,
            provenance,
            method_tag: None,
            parent_id: None,
        }
    }

    /// A variant of `self` produced by augmentation `method`; `index` keeps ids unique.
    pub fn derive_augmented(&self, text: impl Into<String>, method: &str, index: usize) -> Self {
        let mut rec = CaptionRecord::new(
            format!("{}~{}~{}", self.caption_id, method, index),
            self.image_id.clone(),
            text,
            Provenance::Augmented,
        );
        rec.method_tag = Some(method.to_owned());
        rec.parent_id = Some(self.caption_id.clone());
        rec
    }

    /// Recompute tokens from text (after deserializing untrusted records).
    pub fn retokenize(&mut self) {
        self.tokens = text::tokenize_capped(&self.text);
    }

    pub fn check(&self) -> Result<()> {
        if self.provenance == Provenance::Augmented
            && (self.parent_id.is_none() || self.method_tag.is_none())
        {
            return Err(Error::Argument(format!(
                "augmented caption {} lacks parent_id or method_tag",
                self.caption_id
            )));
        }
        Ok(())
    }
}

/// A per-record problem that did not abort the load.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub record: String,
    pub message: String,
}

/// Output of a loader: records plus non-fatal per-record errors.
#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub errors: Vec<RecordError>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Directory image `file_name`s are resolved against; defaults to the annotation file's directory.
    pub images_dir: Option<PathBuf>,
    /// Keep only paths and decode pixels on demand.
    pub lazy: bool,
}

/// Resolve one image file according to `opts`, returning pixels and dimensions.
pub(crate) fn open_image(path: &Path, lazy: bool) -> Result<(Pixels, u32, u32)> {
    if lazy {
        let (w, h) = image::image_dimensions(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other.to_string()),
        })?;
        Ok((Pixels::Lazy(path.to_path_buf()), w, h))
    } else {
        let img = decode_file(path)?;
        let (w, h) = img.dimensions();
        Ok((Pixels::Loaded(Arc::new(img)), w, h))
    }
}

/// JSON ids may be numbers or strings; both become strings.
pub(crate) fn id_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_tag_roundtrip() {
        for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test, SplitTag::Task(7)] {
            assert_eq!(tag.to_string().parse::<SplitTag>().unwrap(), tag);
        }
        assert_eq!("restval".parse::<SplitTag>().unwrap(), SplitTag::Train);
        assert!("bogus".parse::<SplitTag>().is_err());
    }

    #[test]
    fn bbox_containment() {
        assert!(BBox::new(0.0, 0.0, 10.0, 10.0).fits(10, 10));
        assert!(!BBox::new(1.0, 0.0, 10.0, 10.0).fits(10, 10));
        assert!(!BBox::new(0.0, 0.0, 0.0, 10.0).fits(10, 10));
        assert!(!BBox::new(f64::NAN, 0.0, 1.0, 1.0).fits(10, 10));
    }

    #[test]
    fn iou_of_identical_and_disjoint() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(10.0, 10.0, 2.0, 2.0)), 0.0);
        assert!((a.iou(&BBox::new(2.0, 0.0, 4.0, 4.0)) - 8.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn record_rejects_out_of_bounds_box() {
        let img = RgbImage::new(10, 10);
        let err = ImageRecord::from_rgb("i", img, vec![BBox::new(5.0, 5.0, 6.0, 1.0)], SplitTag::Train);
        assert!(err.is_err());
    }

    #[test]
    fn augmented_caption_carries_provenance() {
        let base = CaptionRecord::new("c1", "i1", "A dog.", Provenance::Corrected);
        let aug = base.derive_augmented("a hound", "synonym", 0);
        assert_eq!(aug.parent_id.as_deref(), Some("c1"));
        assert_eq!(aug.method_tag.as_deref(), Some("synonym"));
        aug.check().unwrap();
        let mut bad = aug.clone();
        bad.parent_id = None;
        assert!(bad.check().is_err());
    }

    #[test]
    fn published_vizwiz_total() {
        assert_eq!(VIZWIZ_TRAIN_IMAGES + VIZWIZ_VAL_IMAGES + VIZWIZ_TEST_IMAGES, 39_181);
    }

    #[test]
    fn decode_rejects_empty() {
        assert!(decode_bytes(&[]).is_err());
        assert!(decode_bytes(b"not an image").is_err());
    }
}
