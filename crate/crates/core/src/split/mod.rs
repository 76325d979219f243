//! Concept-based task splits: noun phrases → word-vector embeddings →
//! k-means clusters → one split per cluster.

pub mod embed;
pub mod kmeans;
pub mod np;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{CaptionRecord, ImageRecord};
use crate::{Error, Result};
pub use embed::{embed_phrase, EmbeddingTable, PhraseEmbedding};
pub use kmeans::{kmeans, kmeans_restarts, KMeansResult};
pub use np::{extract_noun_phrases, noun_phrases};

pub const DEFAULT_SPLITS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCluster {
    pub cluster_id: usize,
    pub centroid: Vec<f64>,
    pub member_nps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub split_id: usize,
    /// In input order.
    pub image_ids: Vec<String>,
    pub source_cluster: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub splits: Vec<TaskSplit>,
    pub clusters: Vec<ConceptCluster>,
    /// Phrases with no in-table token; left out of clustering and voting.
    pub oov_phrases: Vec<String>,
}

impl SplitOutcome {
    pub fn sizes(&self) -> Vec<usize> {
        self.splits.iter().map(|s| s.image_ids.len()).collect()
    }
}

/// Pick a split from per-cluster NP counts: the plurality cluster; ties go to
/// the currently smallest split, then the lowest id. With no votes, the
/// smallest split wins.
pub fn choose_split(votes: &[usize], sizes: &[usize]) -> usize {
    let top = votes.iter().copied().max().unwrap_or(0);
    (0..sizes.len())
        .filter(|&j| top == 0 || votes.get(j).copied().unwrap_or(0) == top)
        .min_by_key(|&j| (sizes[j], j))
        .expect("at least one split")
}

pub fn assign_splits(
    images: &[ImageRecord],
    captions: &[CaptionRecord],
    table: &EmbeddingTable,
    k: usize,
    seed: u64,
) -> Result<SplitOutcome> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut per_image: HashMap<&str, Vec<String>> = HashMap::new();
    for c in captions {
        per_image.entry(c.image_id.as_str()).or_default().extend(extract_noun_phrases(c));
    }

    let mut phrases: Vec<String> = per_image.values().flatten().cloned().collect();
    phrases.sort();
    phrases.dedup();
    let mut oov_phrases = Vec::new();
    let mut known = Vec::new();
    let mut rows = Vec::new();
    for p in phrases {
        let e = embed_phrase(&p, table);
        if e.oov {
            oov_phrases.push(p);
        } else {
            rows.extend(e.vector);
            known.push(p);
        }
    }

    let mut clusters: Vec<ConceptCluster> = (0..k)
        .map(|j| ConceptCluster {
            cluster_id: j,
            centroid: vec![0.0; table.dim()],
            member_nps: Vec::new(),
        })
        .collect();
    let mut cluster_of: HashMap<&str, usize> = HashMap::new();
    if !known.is_empty() {
        let data = Array2::from_shape_vec((known.len(), table.dim()), rows).map_err(|e| Error::Shape(e.to_string()))?;
        let fit = kmeans(data.view(), k.min(known.len()), seed, kmeans::DEFAULT_MAX_ITER, kmeans::DEFAULT_TOL)?;
        for (j, c) in fit.centroids.rows().into_iter().enumerate() {
            clusters[j].centroid = c.to_vec();
        }
        for (p, &a) in known.iter().zip(&fit.assignments) {
            clusters[a].member_nps.push(p.clone());
            cluster_of.insert(p.as_str(), a);
        }
    }

    let mut splits: Vec<TaskSplit> = (0..k)
        .map(|j| TaskSplit {
            split_id: j,
            image_ids: Vec::new(),
            source_cluster: j,
        })
        .collect();
    let mut sizes = vec![0usize; k];
    for img in images {
        let mut votes = vec![0usize; k];
        for p in per_image.get(img.image_id.as_str()).into_iter().flatten() {
            if let Some(&c) = cluster_of.get(p.as_str()) {
                votes[c] += 1;
            }
        }
        let j = choose_split(&votes, &sizes);
        sizes[j] += 1;
        splits[j].image_ids.push(img.image_id.clone());
    }
    Ok(SplitOutcome {
        splits,
        clusters,
        oov_phrases,
    })
}

/// `splits.json`: `{"<split_id>": [image_id, ...]}`.
pub fn splits_to_json(splits: &[TaskSplit]) -> String {
    let map: BTreeMap<String, &Vec<String>> = splits.iter().map(|s| (s.split_id.to_string(), &s.image_ids)).collect();
    serde_json::to_string_pretty(&map).expect("string map serializes")
}

/// Parse `splits.json`, ordered by numeric split id. Rejects an image listed
/// in two splits.
pub fn parse_splits(json: &str) -> Result<Vec<TaskSplit>> {
    let map: BTreeMap<String, Vec<String>> = serde_json::from_str(json).map_err(|e| Error::json("splits", e))?;
    let mut out = Vec::with_capacity(map.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (key, ids) in map {
        let split_id: usize = key
            .parse()
            .map_err(|_| Error::Argument(format!("split id {key:?} is not a non-negative integer")))?;
        for id in &ids {
            if let Some(prev) = seen.insert(id.clone(), split_id) {
                return Err(Error::Argument(format!("image {id} in splits {prev} and {split_id}")));
            }
        }
        out.push(TaskSplit {
            split_id,
            image_ids: ids,
            source_cluster: split_id,
        });
    }
    out.sort_by_key(|s| s.split_id);
    Ok(out)
}

pub fn read_splits(path: &Path) -> Result<Vec<TaskSplit>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_splits(&text)
}

pub fn write_splits(path: &Path, splits: &[TaskSplit]) -> Result<()> {
    std::fs::write(path, splits_to_json(splits)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break_prefers_smaller_split() {
        assert_eq!(choose_split(&[2, 2], &[10, 7]), 1);
        assert_eq!(choose_split(&[2, 2], &[7, 7]), 0);
        assert_eq!(choose_split(&[0, 0, 3], &[0, 0, 9]), 2);
        assert_eq!(choose_split(&[0, 0, 0], &[4, 2, 2]), 1);
    }

    #[test]
    fn splits_json_round_trip() {
        let s = vec![
            TaskSplit { split_id: 0, image_ids: vec!["a".into()], source_cluster: 0 },
            TaskSplit { split_id: 10, image_ids: vec!["b".into(), "c".into()], source_cluster: 10 },
            TaskSplit { split_id: 2, image_ids: vec![], source_cluster: 2 },
        ];
        let back = parse_splits(&splits_to_json(&s)).unwrap();
        assert_eq!(back.iter().map(|t| t.split_id).collect::<Vec<_>>(), vec![0, 2, 10]);
        assert_eq!(back[2].image_ids, vec!["b", "c"]);
        assert!(parse_splits(r#"{"0": ["a"], "1": ["a"]}"#).is_err());
        assert!(parse_splits(r#"{"x": []}"#).is_err());
    }
}
