//! Text, image and joint augmentation of user feedback.

pub mod image;
pub mod joint;
pub mod text;

use serde::{Deserialize, Serialize};

use crate::dataset::CaptionRecord;
use image::Transform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rating {
    Good,
    Bad,
}

/// Reference to an augmented image: regenerated on demand from its source,
/// transform and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageVariant {
    pub source_image_id: String,
    pub transform: Transform,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VariantContent {
    Caption(CaptionRecord),
    Image(ImageVariant),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub augmentation_id: String,
    pub method_tag: String,
    pub content: VariantContent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<Rating>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<u32>,
}

/// An original instance together with its generated variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSet {
    pub set_id: String,
    pub image_id: String,
    pub source_caption_id: Option<String>,
    pub variants: Vec<Variant>,
}

impl AugmentationSet {
    /// Wrap caption variants; augmentation ids are `<set_id>/<index>`.
    pub fn from_captions(set_id: &str, source: &CaptionRecord, captions: Vec<CaptionRecord>) -> Self {
        let variants = captions
            .into_iter()
            .enumerate()
            .map(|(i, c)| Variant {
                augmentation_id: format!("{set_id}/{i}"),
                method_tag: c.method_tag.clone().unwrap_or_default(),
                content: VariantContent::Caption(c),
                rating: None,
                rank: None,
            })
            .collect();
        AugmentationSet {
            set_id: set_id.to_owned(),
            image_id: source.image_id.clone(),
            source_caption_id: Some(source.caption_id.clone()),
            variants,
        }
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}
