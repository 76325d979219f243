use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{id_string, open_image, CaptionRecord, ImageRecord, LoadOptions, Loaded, Provenance, RecordError, SplitTag};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CocoImage {
    pub id: String,
    pub file_name: String,
    pub width: Option<u32>,
    pub height: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoCaption {
    pub id: Option<String>,
    pub image_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CocoAnnotations {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoCaption>,
}

#[derive(Deserialize)]
struct RawFile {
    #[serde(default)]
    images: Vec<RawImage>,
    #[serde(default)]
    annotations: Vec<RawCaption>,
}

#[derive(Deserialize)]
struct RawImage {
    id: Value,
    file_name: String,
    width: Option<u32>,
    height: Option<u32>,
}

#[derive(Deserialize)]
struct RawCaption {
    #[serde(default)]
    id: Option<Value>,
    image_id: Value,
    caption: String,
    #[serde(default)]
    is_rejected: bool,
}

pub(super) fn parse_caption_json(what: &str, json: &str) -> Result<CocoAnnotations> {
    let raw: RawFile = serde_json::from_str(json).map_err(|e| Error::json(what, e))?;
    let bad_id = |v: &Value| Error::Argument(format!("{what}: id {v} is neither string nor number"));
    let images = raw
        .images
        .into_iter()
        .map(|im| {
            Ok(CocoImage {
                id: id_string(&im.id).ok_or_else(|| bad_id(&im.id))?,
                file_name: im.file_name,
                width: im.width,
                height: im.height,
            })
        })
        .collect::<Result<_>>()?;
    let annotations = raw
        .annotations
        .into_iter()
        .filter(|a| !a.is_rejected)
        .map(|a| {
            Ok(CocoCaption {
                id: a.id.as_ref().and_then(id_string),
                image_id: id_string(&a.image_id).ok_or_else(|| bad_id(&a.image_id))?,
                caption: a.caption,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CocoAnnotations {
        images,
        annotations,
    })
}

/// Parse a COCO-caption annotation document.
pub fn parse_coco_annotations(json: &str) -> Result<CocoAnnotations> {
    parse_caption_json("COCO annotations", json)
}

/// Parse a split assignment: either a flat `{image_id: split}` map or a
/// Karpathy-style `{"images": [{"cocoid"|"id", "split"}]}` document.
pub fn parse_split_file(json: &str) -> Result<HashMap<String, SplitTag>> {
    let value: Value = serde_json::from_str(json).map_err(|e| Error::json("split file", e))?;
    let mut out = HashMap::new();
    match &value {
        Value::Object(map) if map.get("images").is_some_and(Value::is_array) => {
            for entry in map["images"].as_array().into_iter().flatten() {
                let id = entry
                    .get("cocoid")
                    .or_else(|| entry.get("id"))
                    .and_then(id_string)
                    .ok_or_else(|| Error::Argument("split entry without cocoid/id".into()))?;
                let split = entry
                    .get("split")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::Argument(format!("split entry {id} without split")))?;
                out.insert(id, split.parse()?);
            }
        }
        Value::Object(map) => {
            for (id, split) in map {
                let split = split
                    .as_str()
                    .ok_or_else(|| Error::Argument(format!("split for {id} is not a string")))?;
                out.insert(id.clone(), split.parse()?);
            }
        }
        _ => return Err(Error::Argument("split file must be a JSON object".into())),
    }
    Ok(out)
}

/// Load a COCO-caption dataset with split assignments.
///
/// Malformed JSON is fatal. Missing image files and images without a split are
/// collected in [`Loaded::errors`] and dropped together with their captions.
pub fn load_coco(annotation_file: &Path, split_file: &Path, opts: &LoadOptions) -> Result<Loaded> {
    let ann_text = std::fs::read_to_string(annotation_file).map_err(|e| Error::io(annotation_file, e))?;
    let split_text = std::fs::read_to_string(split_file).map_err(|e| Error::io(split_file, e))?;
    let ann = parse_coco_annotations(&ann_text)?;
    let splits = parse_split_file(&split_text)?;
    let base = opts
        .images_dir
        .clone()
        .or_else(|| annotation_file.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    Ok(assemble(ann, &base, opts.lazy, |id| splits.get(id).copied()))
}

/// Shared by the COCO and VizWiz loaders: resolve files, attach captions.
pub(super) fn assemble(
    ann: CocoAnnotations,
    base: &Path,
    lazy: bool,
    split_of: impl Fn(&str) -> Option<SplitTag>,
) -> Loaded {
    let mut loaded = Loaded::default();
    let mut kept = HashSet::new();
    for im in ann.images {
        let Some(split) = split_of(&im.id) else {
            loaded.errors.push(RecordError {
                record: im.id,
                message: "no split assignment".into(),
            });
            continue;
        };
        if kept.contains(&im.id) {
            loaded.errors.push(RecordError {
                record: im.id,
                message: "duplicate image id".into(),
            });
            continue;
        }
        match open_image(&base.join(&im.file_name), lazy) {
            Ok((pixels, width, height)) => {
                kept.insert(im.id.clone());
                loaded.images.push(ImageRecord {
                    image_id: im.id,
                    width,
                    height,
                    pixels,
                    bboxes: Vec::new(),
                    split,
                });
            }
            Err(e) => loaded.errors.push(RecordError {
                record: im.id,
                message: e.to_string(),
            }),
        }
    }
    let mut per_image: HashMap<String, usize> = HashMap::new();
    for a in ann.annotations {
        if !kept.contains(&a.image_id) {
            loaded.errors.push(RecordError {
                record: a.id.unwrap_or_else(|| a.image_id.clone()),
                message: format!("caption references missing image {}", a.image_id),
            });
            continue;
        }
        let n = per_image.entry(a.image_id.clone()).or_default();
        let id = a.id.unwrap_or_else(|| format!("{}-{}", a.image_id, n));
        *n += 1;
        loaded
            .captions
            .push(CaptionRecord::new(id, a.image_id, a.caption, Provenance::GroundTruth));
    }
    loaded
}
