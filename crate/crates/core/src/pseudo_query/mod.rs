//! Relation-sensitive pseudo-queries.
//!
//! Detected boxes of one category are labelled with spatial relations by
//! comparing centers and areas; each label that survives the margin and
//! uniqueness checks becomes a `"<relation words> <noun>"` training query
//! whose target is the labelled box.

mod relations;

pub use relations::{assign_relations, resolve_query, Margins, RelationLabel, Resolution};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::BBox;
use crate::scene::{detect, sample_multi_instance_scene, DetectionSet, NoiseParams, SceneSpec};
use crate::seeds;
use crate::vocab::Shape;

pub const MAX_QUERY_TOKENS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Aug,
}

/// A referring query over one scene together with its supervision box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub scene_id: String,
    pub tokens: Vec<String>,
    pub target_box: BBox,
    pub source: Source,
    pub distractor_count: usize,
    pub relation: Option<RelationLabel>,
}

impl QuerySample {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > MAX_QUERY_TOKENS {
            return Err(LabError::Precondition(format!(
                "query {:?} has {} tokens",
                self.tokens,
                self.tokens.len()
            )));
        }
        let has_relation_word = self.tokens.iter().any(|t| crate::vocab::is_relation_word(t));
        if has_relation_word != self.relation.is_some() {
            return Err(LabError::Precondition(format!(
                "relation metadata {:?} disagrees with tokens {:?}",
                self.relation, self.tokens
            )));
        }
        Ok(())
    }
}

/// Templated pseudo-queries for one scene's detections.
///
/// Labels are visited in [`RelationLabel::PRIORITY`] order; a `(box, label)`
/// pair is emitted only if [`resolve_query`] maps the label back to that box.
/// At most `cap` pairs are returned.
pub fn generate_pseudo_pairs(
    detections: &DetectionSet,
    category: Shape,
    margins: Margins,
    cap: usize,
) -> Vec<QuerySample> {
    let boxes = &detections.boxes;
    if boxes.len() < 2 {
        return Vec::new();
    }
    let labels = assign_relations(boxes, margins).expect("two or more boxes");
    let mut out = Vec::new();
    for label in RelationLabel::PRIORITY {
        if out.len() >= cap {
            break;
        }
        let Some(idx) = labels.iter().position(|set| set.contains(&label)) else {
            continue;
        };
        if resolve_query(label, boxes, margins) != Resolution::Unique(idx) {
            continue;
        }
        let mut tokens: Vec<String> = label.words().iter().map(|w| w.to_string()).collect();
        tokens.push(category.name().to_string());
        out.push(QuerySample {
            scene_id: detections.scene_id.clone(),
            tokens,
            target_box: boxes[idx],
            source: Source::Aug,
            distractor_count: boxes.len() - 1,
            relation: Some(label),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub categories: Vec<Shape>,
    pub images_per_category: usize,
    /// Inclusive range of requested instance counts.
    pub count_range: (usize, usize),
    pub noise: NoiseParams,
    pub margins: Margins,
    /// Pseudo-queries kept per scene.
    pub cap: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            categories: Shape::ALL.to_vec(),
            images_per_category: 50,
            count_range: (3, 10),
            noise: NoiseParams::default(),
            margins: Margins::default(),
            cap: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentedDataset {
    pub scenes: Vec<SceneSpec>,
    pub samples: Vec<QuerySample>,
}

/// Runs generate -> detect -> pseudo-query for every category and image.
pub fn build_augmented_dataset(config: &AugmentConfig, seed: u64) -> Result<AugmentedDataset> {
    let (lo, hi) = config.count_range;
    if lo > hi {
        return Err(LabError::Config(format!("empty count range {lo}..={hi}")));
    }
    let mut out = AugmentedDataset::default();
    for (ci, &category) in config.categories.iter().enumerate() {
        for k in 0..config.images_per_category {
            let scene_seed = seeds::derive(seed, &[seeds::stream::AUG, ci as u64, k as u64]);
            let count = seeds::rng_at(scene_seed, &[0]).gen_range(lo..=hi);
            let scene = sample_multi_instance_scene(category, count, scene_seed)?;
            let dets = detect(&scene, config.noise, scene_seed)?;
            out.samples
                .extend(generate_pseudo_pairs(&dets, category, config.margins, config.cap));
            out.scenes.push(scene);
        }
    }
    Ok(out)
}

/// Target boxes of a sample set, for callers that only need geometry.
pub fn target_boxes(samples: &[QuerySample]) -> Vec<BBox> {
    samples.iter().map(|s| s.target_box).collect()
}
