use std::collections::{HashMap, HashSet};
use std::path::Path;

use super::coco::{assemble, parse_caption_json, CocoAnnotations};
use super::{LoadOptions, Loaded, SplitTag};
use crate::{Error, Result};

/// Share of the (sorted) training images held out as validation, since the
/// official test captions are not public and the official val set is used
/// as test.
pub const VIZWIZ_VAL_FRACTION: f64 = 0.1;

/// Parse one VizWiz caption annotation file (`train.json` / `val.json`).
/// Rejected captions are skipped.
pub fn parse_vizwiz_annotations(json: &str) -> Result<CocoAnnotations> {
    parse_caption_json("VizWiz annotations", json)
}

/// Load VizWiz from `annotation_dir/{train,val}.json`, images resolved as
/// `<images_dir>/<subset>/<file_name>`.
///
/// The official val set is tagged `test`; the last `val_fraction` of train
/// images by sorted id become `val`.
pub fn load_vizwiz(annotation_dir: &Path, opts: &LoadOptions, val_fraction: f64) -> Result<Loaded> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::Argument(format!("val_fraction {val_fraction} outside [0,1]")));
    }
    let base = opts.images_dir.clone().unwrap_or_else(|| annotation_dir.to_path_buf());
    let mut out = Loaded::default();
    for subset in ["train", "val"] {
        let path = annotation_dir.join(format!("{subset}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ann = parse_vizwiz_annotations(&text)?;
        let loaded = if subset == "train" {
            let held_out = held_out_ids(&ann, val_fraction);
            assemble(ann, &base.join(subset), opts.lazy, |id| {
                Some(if held_out.contains(id) { SplitTag::Val } else { SplitTag::Train })
            })
        } else {
            assemble(ann, &base.join(subset), opts.lazy, |_| Some(SplitTag::Test))
        };
        out.images.extend(loaded.images);
        out.captions.extend(loaded.captions);
        out.errors.extend(loaded.errors);
    }
    Ok(out)
}

/// Ids of the last `round(n * fraction)` images in id order (numeric when
/// every id is an integer).
fn held_out_ids(ann: &CocoAnnotations, fraction: f64) -> HashSet<String> {
    let mut ids: Vec<&str> = ann.images.iter().map(|im| im.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let numeric: Option<HashMap<&str, u64>> = ids.iter().map(|id| id.parse().ok().map(|n| (*id, n))).collect();
    if let Some(nums) = numeric {
        ids.sort_by_key(|id| nums[id]);
    }
    let n_val = (ids.len() as f64 * fraction).round() as usize;
    ids[ids.len() - n_val..].iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann_with(ids: &[&str]) -> CocoAnnotations {
        let images = ids
            .iter()
            .map(|id| format!(r#"{{"id":{id},"file_name":"{id}.jpg"}}"#))
            .collect::<Vec<_>>()
            .join(",");
        parse_vizwiz_annotations(&format!(r#"{{"images":[{images}],"annotations":[]}}"#)).unwrap()
    }

    #[test]
    fn ten_images_fifth_held_out() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let held = held_out_ids(&ann_with(&ids), 0.2);
        assert_eq!(held, HashSet::from(["8".to_string(), "9".to_string()]));
    }

    #[test]
    fn numeric_ids_sort_numerically() {
        let held = held_out_ids(&ann_with(&["9", "10", "2"]), 0.34);
        assert_eq!(held, HashSet::from(["10".to_string()]));
    }

    #[test]
    fn rejected_captions_skipped() {
        let ann = parse_vizwiz_annotations(
            r#"{"images":[{"id":1,"file_name":"a.jpg"}],"annotations":[
                {"image_id":1,"caption":"ok","is_rejected":false},
                {"image_id":1,"caption":"Quality issues are too severe","is_rejected":true}]}"#,
        )
        .unwrap();
        assert_eq!(ann.annotations.len(), 1);
    }

    #[test]
    fn fraction_out_of_range() {
        assert!(load_vizwiz(Path::new("/nonexistent"), &LoadOptions::default(), 1.5).is_err());
    }
}
