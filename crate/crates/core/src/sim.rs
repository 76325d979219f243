//! Simulated user: answers predictions and augmentations from ground truth.

use crate::augment::Rating;
use crate::dataset::CaptionRecord;
use crate::feedback::{EventPayload, NewEvent};
use crate::text::jaccard;
use crate::{Error, Result};

pub const DEFAULT_RATING_THRESHOLD: f64 = 0.5;

/// The ground-truth caption with the highest token-set Jaccard overlap with
/// the prediction; ties go to the smallest caption_id.
pub fn closest_reference<'a>(predicted: &CaptionRecord, gt_captions: &'a [CaptionRecord]) -> Result<&'a CaptionRecord> {
    gt_captions
        .iter()
        .map(|c| (jaccard(&predicted.tokens, &c.tokens), c))
        .reduce(|best, cand| {
            let better = cand.0 > best.0 || (cand.0 == best.0 && cand.1.caption_id < best.1.caption_id);
            if better { cand } else { best }
        })
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Argument("no ground-truth captions".into()))
}

pub fn simulate_correction(image_id: &str, predicted: &CaptionRecord, gt_captions: &[CaptionRecord]) -> Result<NewEvent> {
    let chosen = closest_reference(predicted, gt_captions)?;
    Ok(NewEvent {
        image_id: image_id.to_owned(),
        payload: EventPayload::CaptionCorrection {
            text: chosen.text.clone(),
            predicted_caption_id: Some(predicted.caption_id.clone()),
        },
    })
}

/// Good iff some reference reaches `threshold` token-set Jaccard similarity.
pub fn simulate_rating(augmentation: &CaptionRecord, gt_captions: &[CaptionRecord], threshold: f64) -> Result<Rating> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Argument(format!("threshold {threshold} outside [0, 1]")));
    }
    let best = gt_captions
        .iter()
        .map(|c| jaccard(&augmentation.tokens, &c.tokens))
        .fold(0.0, f64::max);
    Ok(if best >= threshold { Rating::Good } else { Rating::Bad })
}
