//! On-disk dataset directory:
//!
//! ```text
//! <dir>/images.jsonl    one {"image_id","file","width","height","bboxes","split"} per line
//! <dir>/captions.jsonl  one CaptionRecord per line
//! <dir>/images/*.png
//! ```

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{open_image, BBox, CaptionRecord, ImageRecord, Loaded, RecordError, SplitTag};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    file: String,
    width: u32,
    height: u32,
    #[serde(default)]
    bboxes: Vec<BBox>,
    split: SplitTag,
}

fn file_name_for(index: usize, image_id: &str) -> String {
    let safe: String = image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    format!("{index:06}_{safe}.png")
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Parse a captions JSONL document; tokens are recomputed from text.
pub fn parse_captions_jsonl(text: &str) -> Result<Vec<CaptionRecord>> {
    let mut caps: Vec<CaptionRecord> = parse_jsonl(text)?;
    for c in &mut caps {
        c.retokenize();
        c.check()?;
    }
    Ok(caps)
}

pub fn read_captions_jsonl(path: &Path) -> Result<Vec<CaptionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_captions_jsonl(&text)
}

pub fn write_captions_jsonl(path: &Path, captions: &[CaptionRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in captions {
        serde_json::to_writer(&mut w, c).map_err(|e| Error::json("caption", e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write records (pixels as PNG) into `dir`, creating it if needed.
pub fn save_dir(dir: &Path, images: &[ImageRecord], captions: &[CaptionRecord]) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let index_path = dir.join("images.jsonl");
    let mut index = BufWriter::new(std::fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?);
    for (i, im) in images.iter().enumerate() {
        let file = file_name_for(i, &im.image_id);
        let path = img_dir.join(&file);
        im.rgb()?
            .save(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let line = ImageLine {
            image_id: im.image_id.clone(),
            file: format!("images/{file}"),
            width: im.width,
            height: im.height,
            bboxes: im.bboxes.clone(),
            split: im.split,
        };
        serde_json::to_writer(&mut index, &line).map_err(|e| Error::json("image index", e))?;
        index.write_all(b"\n").map_err(|e| Error::io(&index_path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    write_captions_jsonl(&dir.join("captions.jsonl"), captions)
}

/// Load a directory written by [`save_dir`].
pub fn load_dir(dir: &Path, lazy: bool) -> Result<Loaded> {
    let index_path = dir.join("images.jsonl");
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let lines: Vec<ImageLine> = parse_jsonl(&text)?;
    let mut out = Loaded::default();
    for line in lines {
        match open_image(&dir.join(&line.file), lazy) {
            Ok((pixels, width, height)) => {
                let rec = ImageRecord {
                    image_id: line.image_id,
                    width,
                    height,
                    pixels,
                    bboxes: line.bboxes,
                    split: line.split,
                };
                match rec.check_boxes() {
                    Ok(()) => out.images.push(rec),
                    Err(e) => out.errors.push(RecordError {
                        record: rec.image_id,
                        message: e.to_string(),
                    }),
                }
            }
            Err(e) => out.errors.push(RecordError {
                record: line.image_id,
                message: e.to_string(),
            }),
        }
    }
    let known: std::collections::HashSet<&str> = out.images.iter().map(|im| im.image_id.as_str()).collect();
    let (captions, orphans): (Vec<_>, Vec<_>) = read_captions_jsonl(&dir.join("captions.jsonl"))?
        .into_iter()
        .partition(|c| known.contains(c.image_id.as_str()));
    out.errors.extend(orphans.into_iter().map(|c| RecordError {
        record: c.caption_id,
        message: format!("caption references missing image {}", c.image_id),
    }));
    out.captions = captions;
    Ok(out)
}
