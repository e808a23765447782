//! Top-1 accuracy at IoU > 0.5, stratified by distractor count and by
//! whether the query uses a relation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{write_jsonl, Dataset};
use crate::error::{LabError, Result};
use crate::geometry::{iou, BBox};
use crate::model::{encode_tokens, GroundingInput, GroundingModel, ModelParams, PriorInput};
use crate::pseudo_query::{QuerySample, RelationLabel};
use crate::scene::rasterize;
use crate::semantic_prior::render_prior;

pub const IOU_THRESHOLD: f64 = 0.5;
/// Distractor count at which a sample joins the hard slice.
pub const HARD_MIN_DISTRACTORS: usize = 4;

/// `(label, lo, hi)`, `hi = None` meaning unbounded.
pub const BUCKETS: [(&str, usize, Option<usize>); 4] = [
    ("0-1", 0, Some(1)),
    ("2-3", 2, Some(3)),
    ("4-5", 4, Some(5)),
    (">=6", 6, None),
];

pub fn is_correct(iou: f64) -> bool {
    iou > IOU_THRESHOLD
}

pub fn bucket_of(distractors: usize) -> usize {
    BUCKETS
        .iter()
        .position(|&(_, lo, hi)| distractors >= lo && hi.map_or(true, |h| distractors <= h))
        .expect("buckets cover every count")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub scene_id: String,
    pub tokens: Vec<String>,
    pub distractor_count: usize,
    pub relation: Option<RelationLabel>,
    pub predicted: BBox,
    pub target: BBox,
    pub iou: f64,
}

impl SampleResult {
    pub fn correct(&self) -> bool {
        is_correct(self.iou)
    }
}

/// Sample count and accuracy of one partition; accuracy is `None` when empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl Tally {
    fn of<'a>(results: impl Iterator<Item = &'a SampleResult>) -> Self {
        let (mut n, mut correct) = (0, 0);
        for r in results {
            n += 1;
            correct += r.correct() as usize;
        }
        Self {
            n,
            correct,
            accuracy: (n > 0).then(|| correct as f64 / n as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub distractors: usize,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSplit {
    pub with_relation: Tally,
    pub without_relation: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub buckets: Vec<BucketRow>,
    pub per_count: Vec<CountRow>,
    pub relation_split: RelationSplit,
    /// Relation queries with at least four distractors.
    pub hard_slice: Tally,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_results(results: &[SampleResult], config_hash: &str) -> Result<Self> {
        if results.is_empty() {
            return Err(LabError::Precondition("evaluation set is empty".into()));
        }
        let all = Tally::of(results.iter());
        // summed in sorted order so the report does not depend on sample order
        let mut ious: Vec<f64> = results.iter().map(|r| r.iou).collect();
        ious.sort_by(f64::total_cmp);
        let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
        Ok(Self {
            n: all.n,
            correct: all.correct,
            accuracy: all.accuracy.expect("non-empty"),
            mean_iou,
            buckets: stratify_by_distractors(results),
            per_count: per_count_table(results),
            relation_split: split_by_relation(results),
            hard_slice: Tally::of(
                results
                    .iter()
                    .filter(|r| r.relation.is_some() && r.distractor_count >= HARD_MIN_DISTRACTORS),
            ),
            config_hash: config_hash.to_string(),
        })
    }

    /// `bucket,n,accuracy` rows; empty buckets leave accuracy blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket,n,accuracy\n");
        for b in &self.buckets {
            let acc = b.tally.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", b.bucket, b.tally.n, acc));
        }
        s
    }

    pub fn per_count_csv(&self) -> String {
        let mut s = String::from("distractors,n,accuracy\n");
        for r in &self.per_count {
            let acc = r.tally.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.distractors, r.tally.n, acc));
        }
        s
    }

    /// Accuracy of the first bucket minus accuracy of the last, when both
    /// are non-empty.
    pub fn bucket_gap(&self) -> Option<f64> {
        let first = self.buckets.first()?.tally.accuracy?;
        let last = self.buckets.last()?.tally.accuracy?;
        Some(first - last)
    }
}

pub fn stratify_by_distractors(results: &[SampleResult]) -> Vec<BucketRow> {
    BUCKETS
        .iter()
        .enumerate()
        .map(|(i, &(label, _, _))| BucketRow {
            bucket: label.to_string(),
            tally: Tally::of(results.iter().filter(|r| bucket_of(r.distractor_count) == i)),
        })
        .collect()
}

pub fn per_count_table(results: &[SampleResult]) -> Vec<CountRow> {
    let mut by: BTreeMap<usize, Vec<&SampleResult>> = BTreeMap::new();
    for r in results {
        by.entry(r.distractor_count).or_default().push(r);
    }
    by.into_iter()
        .map(|(k, v)| CountRow {
            distractors: k,
            tally: Tally::of(v.into_iter()),
        })
        .collect()
}

pub fn split_by_relation(results: &[SampleResult]) -> RelationSplit {
    RelationSplit {
        with_relation: Tally::of(results.iter().filter(|r| r.relation.is_some())),
        without_relation: Tally::of(results.iter().filter(|r| r.relation.is_none())),
    }
}

fn check_vocabulary(sample: &QuerySample, model: &GroundingModel) -> Result<Vec<usize>> {
    encode_tokens(sample, model.config()).map_err(|e| {
        LabError::Config(format!(
            "sample {} does not fit the model vocabulary: {e}",
            sample.scene_id
        ))
    })
}

pub fn predict_sample(
    model: &GroundingModel,
    params: &ModelParams,
    dataset: &crate::dataset::SceneStore,
    sample: &QuerySample,
    use_prior: bool,
) -> Result<SampleResult> {
    let ids = check_vocabulary(sample, model)?;
    let scene = dataset.get(&sample.scene_id)?;
    let image = rasterize(scene);
    let prior_img = if use_prior {
        Some(render_prior(&sample.tokens, model.config().canvas)?)
    } else {
        None
    };
    let input = GroundingInput {
        token_ids: &ids,
        image: &image,
        prior: prior_img
            .as_ref()
            .map_or(PriorInput::Off, |p| PriorInput::Image(&p.image)),
    };
    let predicted = model.predict(params, &input)?;
    Ok(SampleResult {
        scene_id: sample.scene_id.clone(),
        tokens: sample.tokens.clone(),
        distractor_count: sample.distractor_count,
        relation: sample.relation,
        predicted,
        target: sample.target_box,
        iou: iou(&predicted, &sample.target_box),
    })
}

/// Per-sample predictions in dataset order, computed on up to `jobs` threads.
pub fn predict_all(
    model: &GroundingModel,
    params: &ModelParams,
    dataset: &Dataset,
    use_prior: bool,
    jobs: usize,
) -> Result<Vec<SampleResult>> {
    let store = dataset.store();
    let jobs = jobs.max(1).min(dataset.samples.len().max(1));
    let chunk = dataset.samples.len().div_ceil(jobs).max(1);
    let parts: Vec<Result<Vec<SampleResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = dataset
            .samples
            .chunks(chunk)
            .map(|part| {
                let store = &store;
                s.spawn(move || {
                    part.iter()
                        .map(|smp| predict_sample(model, params, store, smp, use_prior))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(dataset.samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &GroundingModel,
    params: &ModelParams,
    dataset: &Dataset,
    use_prior: bool,
    config_hash: &str,
    jobs: usize,
) -> Result<(EvalReport, Vec<SampleResult>)> {
    let results = predict_all(model, params, dataset, use_prior, jobs)?;
    Ok((EvalReport::from_results(&results, config_hash)?, results))
}

pub fn write_iou_dump(path: &Path, results: &[SampleResult]) -> Result<()> {
    write_jsonl(path, results)
}
