//! Feedback events and the service state derived from them.
//!
//! State is a pure fold over the event log: [`State::apply`] is the only way
//! it changes, so replaying a log reproduces the live state exactly.

mod log;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentationSet, ImageVariant, Rating, VariantContent};
use crate::continual::UpdateReport;
use crate::dataset::{BBox, CaptionRecord, Provenance};
use crate::{Error, Result};
pub use log::{format_event_id, parse_event_id, parse_log, replay_log, EventLog};

/// Schema version written in every event's `v` field.
pub const EVENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPayload {
    pub set_id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ratings: BTreeMap<String, Rating>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ranks: BTreeMap<String, u32>,
}

/// Which augmentations are approved for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApprovalPolicy {
    /// Ranked variants at or above this rank (1 = best) are approved.
    pub rank_cutoff: u32,
    /// Approve variants nobody rated or ranked.
    pub include_unrated: bool,
}

impl Default for ApprovalPolicy {
    fn default() -> Self {
        ApprovalPolicy {
            rank_cutoff: 5,
            include_unrated: false,
        }
    }
}

impl ApprovalPolicy {
    pub fn approves(&self, rating: Option<Rating>, rank: Option<u32>) -> bool {
        match (rating, rank) {
            (Some(Rating::Good), _) => true,
            (Some(Rating::Bad), _) => false,
            (None, Some(r)) => r <= self.rank_cutoff,
            (None, None) => self.include_unrated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    Prediction {
        caption_id: String,
        text: String,
        checkpoint_hash: String,
    },
    CaptionCorrection {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        predicted_caption_id: Option<String>,
    },
    /// Box in pixel coordinates of the image.
    BboxAnnotation { bbox: BBox },
    AugmentationRating(RatingPayload),
    /// Moves every approved pending instance into training.
    UpdateTrigger {
        policy: ApprovalPolicy,
        /// Only consume instances originating after this event.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        since_event_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        overrides: Option<serde_json::Value>,
    },
    /// Generated variants (written by the service, not by users).
    AugmentationSet { set: AugmentationSet },
    /// Outcome of the most recent trigger. On error its instances return to pending.
    UpdateCompleted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<UpdateReport>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::Prediction { .. } => "prediction",
            EventPayload::CaptionCorrection { .. } => "caption_correction",
            EventPayload::BboxAnnotation { .. } => "bbox_annotation",
            EventPayload::AugmentationRating(_) => "augmentation_rating",
            EventPayload::UpdateTrigger { .. } => "update_trigger",
            EventPayload::AugmentationSet { .. } => "augmentation_set",
            EventPayload::UpdateCompleted { .. } => "update_completed",
        }
    }
}

/// An event before the log assigns its id and timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewEvent {
    pub image_id: String,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub v: u32,
    pub event_id: String,
    /// UTC milliseconds.
    pub timestamp: u64,
    pub image_id: String,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// Caption id given to the correction carried by event `event_id`.
pub fn correction_caption_id(event_id: &str) -> String {
    format!("corr-{event_id}")
}

/// Set id for variants generated from event `event_id`.
pub fn set_id_for(event_id: &str) -> String {
    format!("set-{event_id}")
}

/// Check that ranks are exactly `1..=m` for the `m` ranked variants.
pub fn check_rank_permutation(ranks: &BTreeMap<String, u32>) -> Result<()> {
    let m = ranks.len() as u32;
    let got: BTreeSet<u32> = ranks.values().copied().collect();
    if got.len() as u32 != m || got.iter().any(|&r| r == 0 || r > m) {
        let mut v: Vec<u32> = ranks.values().copied().collect();
        v.sort();
        return Err(Error::Argument(format!("ranks {v:?} are not a permutation of 1..={m}")));
    }
    Ok(())
}

/// Something that can enter training once approved.
#[derive(Debug, Clone, PartialEq)]
pub enum PendingItem {
    Caption(CaptionRecord),
    /// An augmented image; trains with the latest correction of its source image.
    Image {
        variant: ImageVariant,
        augmentation_id: String,
        caption: Option<CaptionRecord>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub last_event_id: Option<String>,
    pub event_count: u64,
    /// image_id → (event_id, predicted text) of the latest prediction.
    pub predictions: BTreeMap<String, (String, String)>,
    /// caption_id → correction.
    pub corrections: BTreeMap<String, CaptionRecord>,
    /// image_id → caption_id of its most recent correction.
    pub latest_correction: BTreeMap<String, String>,
    pub bboxes: BTreeMap<String, Vec<BBox>>,
    pub augmentation_sets: BTreeMap<String, AugmentationSet>,
    /// Instance keys (`corr:<caption_id>` or `aug:<augmentation_id>`) not yet trained on.
    pub pending: BTreeSet<String>,
    pub in_flight: BTreeSet<String>,
    pub consumed: BTreeSet<String>,
    pub updates: Vec<UpdateReport>,
}

fn corr_key(caption_id: &str) -> String {
    format!("corr:{caption_id}")
}

fn aug_key(augmentation_id: &str) -> String {
    format!("aug:{augmentation_id}")
}

/// Number of the event an instance key was created from.
fn origin_event(key: &str) -> Option<u64> {
    let rest = key
        .strip_prefix("corr:corr-")
        .or_else(|| key.strip_prefix("aug:set-"))?;
    parse_event_id(rest.split('/').next()?).ok()
}

impl State {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold one event in. Invalid events leave the state untouched.
    pub fn apply(&mut self, event: &FeedbackEvent) -> Result<()> {
        if event.v != EVENT_SCHEMA_VERSION {
            return Err(Error::Argument(format!("unsupported event version {}", event.v)));
        }
        if let Some(last) = &self.last_event_id {
            if parse_event_id(&event.event_id)? <= parse_event_id(last)? {
                return Err(Error::Argument(format!("event id {} does not follow {last}", event.event_id)));
            }
        } else {
            parse_event_id(&event.event_id)?;
        }
        let image_id = event.image_id.as_str();
        match &event.payload {
            EventPayload::Prediction { text, .. } => {
                self.predictions
                    .insert(image_id.to_owned(), (event.event_id.clone(), text.clone()));
            }
            EventPayload::CaptionCorrection { text, .. } => {
                let caption_id = correction_caption_id(&event.event_id);
                let caption = CaptionRecord::new(&caption_id, image_id, text, Provenance::Corrected);
                if caption.tokens.is_empty() {
                    return Err(Error::Argument("correction has no tokens".into()));
                }
                self.pending.insert(corr_key(&caption_id));
                self.latest_correction.insert(image_id.to_owned(), caption_id.clone());
                self.corrections.insert(caption_id, caption);
            }
            EventPayload::BboxAnnotation { bbox } => {
                if !(bbox.w > 0.0 && bbox.h > 0.0 && bbox.x >= 0.0 && bbox.y >= 0.0) {
                    return Err(Error::Argument(format!("degenerate box {bbox:?}")));
                }
                self.bboxes.entry(image_id.to_owned()).or_default().push(bbox.clone());
            }
            EventPayload::AugmentationSet { set } => {
                if self.augmentation_sets.contains_key(&set.set_id) {
                    return Err(Error::Argument(format!("duplicate augmentation set {}", set.set_id)));
                }
                if set.image_id != image_id {
                    return Err(Error::Argument("set image does not match event image".into()));
                }
                let ids: BTreeSet<&str> = set.variants.iter().map(|v| v.augmentation_id.as_str()).collect();
                if ids.len() != set.variants.len() {
                    return Err(Error::Argument(format!("duplicate augmentation ids in {}", set.set_id)));
                }
                for v in &set.variants {
                    self.pending.insert(aug_key(&v.augmentation_id));
                }
                self.augmentation_sets.insert(set.set_id.clone(), set.clone());
            }
            EventPayload::AugmentationRating(p) => {
                self.merge_ratings(image_id, p)?;
            }
            EventPayload::UpdateTrigger { policy, since_event_id, .. } => {
                if !self.in_flight.is_empty() {
                    return Err(Error::Argument("an update is already in flight".into()));
                }
                let since = since_event_id.as_deref().map(parse_event_id).transpose()?;
                let approved: Vec<String> = self
                    .pending
                    .iter()
                    .filter(|k| since.is_none_or(|s| origin_event(k).is_some_and(|o| o > s)))
                    .filter(|k| self.is_approved(k, policy))
                    .cloned()
                    .collect();
                for k in approved {
                    self.pending.remove(&k);
                    self.in_flight.insert(k);
                }
            }
            EventPayload::UpdateCompleted { report, error } => {
                let flight = std::mem::take(&mut self.in_flight);
                match (report, error) {
                    (Some(r), None) => {
                        self.consumed.extend(flight);
                        self.updates.push(r.clone());
                    }
                    (_, Some(_)) => self.pending.extend(flight),
                    (None, None) => {
                        self.in_flight = flight;
                        return Err(Error::Argument("update_completed needs a report or an error".into()));
                    }
                }
            }
        }
        self.last_event_id = Some(event.event_id.clone());
        self.event_count += 1;
        Ok(())
    }

    fn merge_ratings(&mut self, image_id: &str, p: &RatingPayload) -> Result<()> {
        let set = self
            .augmentation_sets
            .get_mut(&p.set_id)
            .ok_or_else(|| Error::Argument(format!("unknown augmentation set {}", p.set_id)))?;
        if set.image_id != image_id {
            return Err(Error::Argument(format!("set {} belongs to image {}", p.set_id, set.image_id)));
        }
        if !p.ratings.is_empty() && !p.ranks.is_empty() {
            return Err(Error::Argument("submit ratings or ranks, not both".into()));
        }
        for id in p.ratings.keys().chain(p.ranks.keys()) {
            if !set.variants.iter().any(|v| &v.augmentation_id == id) {
                return Err(Error::Argument(format!("unknown augmentation {id} in set {}", p.set_id)));
            }
        }
        if !p.ranks.is_empty() {
            check_rank_permutation(&p.ranks)?;
            for v in &mut set.variants {
                v.rank = p.ranks.get(&v.augmentation_id).copied();
                v.rating = None;
            }
        }
        for v in &mut set.variants {
            if let Some(r) = p.ratings.get(&v.augmentation_id) {
                v.rating = Some(*r);
                v.rank = None;
            }
        }
        Ok(())
    }

    fn variant(&self, augmentation_id: &str) -> Option<&crate::augment::Variant> {
        let set_id = augmentation_id.rsplit_once('/').map(|(s, _)| s)?;
        self.augmentation_sets
            .get(set_id)?
            .variants
            .iter()
            .find(|v| v.augmentation_id == augmentation_id)
    }

    fn is_approved(&self, key: &str, policy: &ApprovalPolicy) -> bool {
        if key.starts_with("corr:") {
            return true;
        }
        let Some(v) = key.strip_prefix("aug:").and_then(|id| self.variant(id)) else {
            return false;
        };
        if !policy.approves(v.rating, v.rank) {
            return false;
        }
        match &v.content {
            VariantContent::Caption(_) => true,
            // Image variants need a caption to train with.
            VariantContent::Image(iv) => self.latest_correction.contains_key(&iv.source_image_id),
        }
    }

    /// Training items that the next trigger with `policy` would consume.
    pub fn approved_pending(&self, policy: &ApprovalPolicy) -> Vec<PendingItem> {
        self.items(self.pending.iter().filter(|k| self.is_approved(k, policy)))
    }

    /// Items moved by the last trigger and not yet completed.
    pub fn in_flight_items(&self) -> Vec<PendingItem> {
        self.items(self.in_flight.iter())
    }

    fn items<'a>(&self, keys: impl Iterator<Item = &'a String>) -> Vec<PendingItem> {
        keys.filter_map(|k| {
            if let Some(cid) = k.strip_prefix("corr:") {
                return self.corrections.get(cid).cloned().map(PendingItem::Caption);
            }
            let id = k.strip_prefix("aug:")?;
            let v = self.variant(id)?;
            Some(match &v.content {
                VariantContent::Caption(c) => PendingItem::Caption(c.clone()),
                VariantContent::Image(iv) => PendingItem::Image {
                    variant: iv.clone(),
                    augmentation_id: v.augmentation_id.clone(),
                    caption: self
                        .latest_correction
                        .get(&iv.source_image_id)
                        .and_then(|cid| self.corrections.get(cid))
                        .cloned(),
                },
            })
        })
        .collect()
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn canonical_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("state serializes");
        hex::encode(Sha256::digest(&json))
    }
}
