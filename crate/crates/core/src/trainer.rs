//! Dataset mixing, AdamW training and the four-way ablation grid.

use std::borrow::Cow;
use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{build_base_split, Dataset};
use crate::diffmath::Tensor2D;
use crate::error::{LabError, Result};
use crate::evaluator::{evaluate, EvalReport};
use crate::geometry::{LossValue, LossWeights};
use crate::model::{encode_tokens, GroundingInput, GroundingModel, ModelConfig, ModelParams, PriorInput};
use crate::pseudo_query::{Margins, QuerySample};
use crate::scene::{rasterize, Image};
use crate::seeds;
use crate::semantic_prior::render_prior;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning-rate multiplier for the text and visual encoders.
    pub encoder_lr_mult: f64,
    pub epochs: usize,
    /// First epoch (0-based) trained at `lr * 0.1`.
    pub lr_drop_epoch: usize,
    pub batch_size: usize,
    /// Augmented samples per real sample.
    pub mix_ratio: f64,
    pub seeds: Vec<u64>,
    pub use_prior: bool,
    pub use_aug: bool,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Redraw the augmented subset every epoch instead of fixing it once.
    pub redraw_aug: bool,
    /// Replace the real split with freshly generated base scenes after the
    /// first epoch (needs [`TrainData::fresh`]).
    pub fresh_real: bool,
    pub loss_weights: LossWeights,
    /// Evaluate on the held-out set every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            encoder_lr_mult: 1.0,
            epochs: 90,
            lr_drop_epoch: 60,
            batch_size: 8,
            mix_ratio: 1.0 / 3.0,
            seeds: vec![0, 1, 2],
            use_prior: false,
            use_aug: false,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            clip_norm: 1.0,
            redraw_aug: false,
            fresh_real: true,
            loss_weights: LossWeights::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad(format!("mix_ratio {} outside [0, 1]", self.mix_ratio));
        }
        if self.epochs == 0 || self.lr_drop_epoch >= self.epochs {
            return bad(format!(
                "lr_drop_epoch {} must be below epochs {}",
                self.lr_drop_epoch, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.encoder_lr_mult >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// SHA-256 over the canonical JSON of the model and training configs.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let v = serde_json::json!({ "model": model, "train": train });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// All real samples plus `floor(ratio * |real|)` augmented ones, shuffled.
///
/// Augmented samples are taken without replacement from a seeded
/// permutation of the pool, wrapping around when the pool is too small.
pub fn mix_datasets(
    real: &[QuerySample],
    augmented: &[QuerySample],
    ratio: f64,
    seed: u64,
) -> Vec<QuerySample> {
    let mut rng = seeds::rng_at(seed, &[seeds::stream::MIX]);
    let want = augmented_count(real.len(), ratio);
    let mut out: Vec<QuerySample> = real.to_vec();
    if !augmented.is_empty() {
        let mut perm: Vec<usize> = (0..augmented.len()).collect();
        perm.shuffle(&mut rng);
        out.extend((0..want).map(|i| augmented[perm[i % perm.len()]].clone()));
    }
    out.shuffle(&mut rng);
    out
}

pub fn augmented_count(real: usize, ratio: f64) -> usize {
    // tolerate ratios like 0.29 whose product lands just below an integer
    (ratio * real as f64 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub real: Dataset,
    pub augmented: Dataset,
    /// Generator settings for per-epoch fresh real scenes.
    pub fresh: Option<FreshReal>,
}

/// Where fresh real scenes come from: epoch `e > 0` uses
/// `build_base_split(|real|, TRAIN, derive(seed, [FRESH, e]), margins)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreshReal {
    pub seed: u64,
    pub margins: Margins,
}

impl TrainData {
    /// Real split used in `epoch`.
    pub fn real_for_epoch(&self, epoch: usize, fresh_real: bool) -> Result<Cow<'_, Dataset>> {
        match (self.fresh, fresh_real && epoch > 0) {
            (Some(f), true) => Ok(Cow::Owned(build_base_split(
                self.real.len(),
                seeds::stream::TRAIN,
                seeds::derive(f.seed, &[seeds::stream::FRESH, epoch as u64]),
                f.margins,
            )?)),
            _ => Ok(Cow::Borrowed(&self.real)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub samples: usize,
    pub mean_loss: f64,
    pub mean_smooth_l1: f64,
    pub mean_giou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub accuracy: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub seed: u64,
    pub use_prior: bool,
    pub use_aug: bool,
    pub train_samples: usize,
    pub augmented_samples: usize,
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    pub eval: Vec<EvalSnapshot>,
    pub wall_time_s: f64,
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
    t: i32,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ModelParams, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor2D> = params
            .arrays()
            .iter()
            .map(|a| Tensor2D::zeros(a.rows(), a.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            betas,
            eps,
            weight_decay,
        }
    }

    /// One update; `lrs[i]` is the learning rate of array `i`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor2D], lrs: &[f64]) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in params.arrays_mut().iter_mut().enumerate() {
            let lr = lrs[i];
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mk, gk) in m.iter_mut().zip(g) {
                *mk = b1 * *mk + (1.0 - b1) * gk;
            }
            let v = self.v[i].data_mut();
            for (vk, gk) in v.iter_mut().zip(g) {
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor2D], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Images and prior renderings shared by every step of a run.
struct Inputs {
    images: HashMap<String, Image>,
    priors: HashMap<Vec<String>, Image>,
}

impl Inputs {
    fn new() -> Self {
        Self {
            images: HashMap::new(),
            priors: HashMap::new(),
        }
    }

    fn add(&mut self, data: &Dataset, config: &ModelConfig, use_prior: bool) -> Result<()> {
        for s in &data.scenes {
            if !self.images.contains_key(&s.scene_id) {
                self.images.insert(s.scene_id.clone(), rasterize(s));
            }
        }
        if use_prior {
            for s in &data.samples {
                if !self.priors.contains_key(&s.tokens) {
                    let prior = render_prior(&s.tokens, config.canvas)?.image;
                    self.priors.insert(s.tokens.clone(), prior);
                }
            }
        }
        Ok(())
    }

    fn image(&self, id: &str) -> Result<&Image> {
        self.images
            .get(id)
            .ok_or_else(|| LabError::MissingScene(id.to_string()))
    }
}

type SampleGrad = (LossValue, Vec<Tensor2D>);

fn sample_grad(
    model: &GroundingModel,
    params: &ModelParams,
    inputs: &Inputs,
    sample: &QuerySample,
    use_prior: bool,
    weights: LossWeights,
) -> Result<SampleGrad> {
    let ids = encode_tokens(sample, model.config())?;
    let image = inputs.image(&sample.scene_id)?;
    let prior = if use_prior {
        PriorInput::Image(&inputs.priors[&sample.tokens])
    } else {
        PriorInput::Off
    };
    let input = GroundingInput {
        token_ids: &ids,
        image,
        prior,
    };
    let (_, loss, grads) = model.loss_and_grad(params, &input, &sample.target_box, weights)?;
    Ok((loss, grads))
}

/// Per-sample gradients of a batch, in batch order.
fn batch_grads(
    model: &GroundingModel,
    params: &ModelParams,
    inputs: &Inputs,
    batch: &[&QuerySample],
    use_prior: bool,
    weights: LossWeights,
    jobs: usize,
) -> Result<Vec<SampleGrad>> {
    if jobs <= 1 || batch.len() < 2 {
        return batch
            .iter()
            .map(|s| sample_grad(model, params, inputs, s, use_prior, weights))
            .collect();
    }
    let chunk = batch.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<SampleGrad>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| sample_grad(model, params, inputs, s, use_prior, weights))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Trains a fresh model. Per-sample gradients are reduced in batch order,
/// so the result does not depend on `jobs`.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &TrainData,
    eval_set: Option<&Dataset>,
    seed: u64,
    jobs: usize,
) -> Result<(ModelParams, RunLog)> {
    config.validate()?;
    if data.real.is_empty() {
        return Err(LabError::Precondition("no real training samples".into()));
    }
    let started = Instant::now();
    let model = GroundingModel::new(model_config.clone())?;
    let mut params = ModelParams::init(model_config, seed)?;
    let mut inputs = Inputs::new();
    inputs.add(&data.augmented, model_config, config.use_prior)?;
    let mut opt = AdamW::new(&params, config.betas, config.adam_eps, config.weight_decay);
    let hash = config_hash(model_config, config);
    let group: Vec<bool> = params.names().iter().map(|n| ModelParams::is_encoder(n)).collect();

    let draw = |real: &Dataset, epoch: u64| -> Vec<QuerySample> {
        if config.use_aug {
            mix_datasets(
                &real.samples,
                &data.augmented.samples,
                config.mix_ratio,
                seeds::derive(seed, &[epoch]),
            )
        } else {
            real.samples.clone()
        }
    };
    inputs.add(&data.real, model_config, config.use_prior)?;
    let mut list = draw(&data.real, 0);
    let augmented_samples = list.iter().filter(|s| s.source == crate::pseudo_query::Source::Aug).count();

    let mut log = RunLog {
        config_hash: hash.clone(),
        seed,
        use_prior: config.use_prior,
        use_aug: config.use_aug,
        train_samples: list.len(),
        augmented_samples,
        steps: 0,
        epochs: Vec::new(),
        eval: Vec::new(),
        wall_time_s: 0.0,
    };

    for epoch in 0..config.epochs {
        if epoch > 0 {
            let real = data.real_for_epoch(epoch, config.fresh_real)?;
            let fresh = matches!(real, Cow::Owned(_));
            if fresh {
                inputs = Inputs::new();
                inputs.add(&data.augmented, model_config, config.use_prior)?;
                inputs.add(&real, model_config, config.use_prior)?;
            }
            if fresh || config.redraw_aug {
                // a fixed augmented subset reuses the epoch-0 mixing seed
                let mix_epoch = if config.redraw_aug { epoch as u64 } else { 0 };
                list = draw(&real, mix_epoch);
            }
        }
        let mut order: Vec<usize> = (0..list.len()).collect();
        order.shuffle(&mut seeds::rng_at(seed, &[seeds::stream::SHUFFLE, epoch as u64]));
        let lr = config.lr_at(epoch);
        let lrs: Vec<f64> = group
            .iter()
            .map(|&enc| if enc { lr * config.encoder_lr_mult } else { lr })
            .collect();
        let (mut total, mut sl1, mut gi) = (0.0, 0.0, 0.0);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&QuerySample> = idx.iter().map(|&i| &list[i]).collect();
            let per = batch_grads(
                &model,
                &params,
                &inputs,
                &batch,
                config.use_prior,
                config.loss_weights,
                jobs,
            )
            .map_err(|e| match e {
                // a saturated head yields a zero-width box
                LabError::InvalidBox(_) | LabError::NonFinite { .. } => {
                    LabError::Diverged { epoch, step }
                }
                e => e,
            })?;
            let mut acc: Vec<Tensor2D> = params
                .arrays()
                .iter()
                .map(|a| Tensor2D::zeros(a.rows(), a.cols()))
                .collect();
            for (loss, g) in &per {
                if !loss.total.is_finite() {
                    return Err(LabError::Diverged { epoch, step });
                }
                total += loss.total;
                sl1 += loss.smooth_l1_term;
                gi += loss.giou_term;
                for (a, gk) in acc.iter_mut().zip(g) {
                    a.add_assign(gk);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in &mut acc {
                a.scale_in_place(inv);
            }
            let norm = clip_global_norm(&mut acc, config.clip_norm);
            if !norm.is_finite() {
                return Err(LabError::Diverged { epoch, step });
            }
            opt.step(&mut params, &acc, &lrs);
            log.steps += 1;
        }
        let n = list.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            lr,
            samples: list.len(),
            mean_loss: total / n,
            mean_smooth_l1: sl1 / n,
            mean_giou: gi / n,
        });
        if let Some(ev) = eval_set {
            if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 {
                let (rep, _) = evaluate(&model, &params, ev, config.use_prior, &hash, jobs)?;
                log.eval.push(EvalSnapshot {
                    epoch,
                    accuracy: rep.accuracy,
                    mean_iou: rep.mean_iou,
                });
            }
        }
    }
    log.wall_time_s = started.elapsed().as_secs_f64();
    Ok((params, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Aug,
    Prior,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Aug, Variant::Prior, Variant::Both];

    pub fn use_aug(self) -> bool {
        matches!(self, Variant::Aug | Variant::Both)
    }

    pub fn use_prior(self) -> bool {
        matches!(self, Variant::Prior | Variant::Both)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Aug => "+aug",
            Variant::Prior => "+prior",
            Variant::Both => "+both",
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        TrainConfig {
            use_aug: self.use_aug(),
            use_prior: self.use_prior(),
            ..config.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
    pub log: RunLog,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationTable {
    pub fn cells_of(&self, v: Variant) -> impl Iterator<Item = &AblationCell> {
        self.cells.iter().filter(move |c| c.variant == v)
    }

    pub fn mean_accuracy(&self, v: Variant) -> Option<f64> {
        mean(self.cells_of(v).map(|c| c.report.accuracy))
    }

    /// Mean over seeds of the hard-slice accuracy (seeds with an empty
    /// slice are skipped).
    pub fn mean_hard_accuracy(&self, v: Variant) -> Option<f64> {
        mean(self.cells_of(v).filter_map(|c| c.report.hard_slice.accuracy))
    }

    pub fn mean_bucket_gap(&self, v: Variant) -> Option<f64> {
        mean(self.cells_of(v).filter_map(|c| c.report.bucket_gap()))
    }

    /// Markdown table with one row per variant, averaged over seeds.
    pub fn markdown(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
        let mut s = String::from(
            "| variant | seeds | accuracy | relation | no relation | hard slice | 0-1 minus >=6 |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for v in Variant::ALL {
            let n = self.cells_of(v).count();
            if n == 0 {
                continue;
            }
            let rel = mean(self.cells_of(v).filter_map(|c| c.report.relation_split.with_relation.accuracy));
            let norel = mean(
                self.cells_of(v)
                    .filter_map(|c| c.report.relation_split.without_relation.accuracy),
            );
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                v.label(),
                n,
                fmt(self.mean_accuracy(v)),
                fmt(rel),
                fmt(norel),
                fmt(self.mean_hard_accuracy(v)),
                fmt(self.mean_bucket_gap(v)),
            ));
        }
        s
    }
}

/// Trains and evaluates every variant for every seed on shared data.
/// `on_cell` sees each cell as soon as it finishes.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_grid(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &TrainData,
    test: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    jobs: usize,
    on_cell: &mut dyn FnMut(&AblationCell),
) -> Result<AblationTable> {
    let model = GroundingModel::new(model_config.clone())?;
    let mut table = AblationTable::default();
    for &seed in seeds {
        for &v in variants {
            let cfg = v.apply(config);
            let (params, log) = train(&cfg, model_config, data, Some(test), seed, jobs)?;
            let (report, _) = evaluate(&model, &params, test, cfg.use_prior, &log.config_hash, jobs)?;
            let cell = AblationCell {
                variant: v,
                seed,
                report,
                log,
            };
            on_cell(&cell);
            table.cells.push(cell);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_base_split;
    use crate::pseudo_query::{build_augmented_dataset, AugmentConfig, Margins, Source};

    fn real(n: usize) -> Dataset {
        build_base_split(n, seeds::stream::TRAIN, 7, Margins::default()).unwrap()
    }

    fn aug() -> Dataset {
        build_augmented_dataset(
            &AugmentConfig {
                images_per_category: 10,
                ..AugmentConfig::default()
            },
            7,
        )
        .unwrap()
        .into()
    }

    #[test]
    fn mixing_counts() {
        let r = real(30);
        let a = aug();
        let mixed = mix_datasets(&r.samples, &a.samples, 1.0 / 3.0, 1);
        assert_eq!(mixed.len(), 40);
        assert_eq!(mixed.iter().filter(|s| s.source == Source::Aug).count(), 10);
        assert_eq!(augmented_count(2000, 1.0 / 3.0), 666);
        assert_eq!(augmented_count(100, 0.29), 29);
        let none = mix_datasets(&r.samples, &a.samples, 0.0, 1);
        assert!(none.iter().all(|s| s.source == Source::Real));
        assert_eq!(none.len(), 30);
        assert_eq!(mixed, mix_datasets(&r.samples, &a.samples, 1.0 / 3.0, 1));
        assert_ne!(mixed, mix_datasets(&r.samples, &a.samples, 1.0 / 3.0, 2));
    }

    #[test]
    fn mixing_without_replacement_then_cycles() {
        let r = real(30);
        let pool = &aug().samples[..7];
        let mixed = mix_datasets(&r.samples, pool, 1.0, 3);
        let drawn: Vec<&QuerySample> = mixed.iter().filter(|s| s.source == Source::Aug).collect();
        assert_eq!(drawn.len(), 30);
        for p in pool {
            let k = drawn.iter().filter(|d| **d == p).count();
            assert!(k == 4 || k == 5, "{k}");
        }
    }

    #[test]
    fn zero_gradient_step_is_pure_weight_decay() {
        let cfg = ModelConfig::small_for_tests();
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        let before = p.clone();
        let zeros: Vec<Tensor2D> = p
            .arrays()
            .iter()
            .map(|a| Tensor2D::zeros(a.rows(), a.cols()))
            .collect();
        let lrs: Vec<f64> = (0..p.len()).map(|i| if i % 2 == 0 { 1e-3 } else { 1e-4 }).collect();
        let mut opt = AdamW::new(&p, (0.9, 0.999), 1e-8, 1e-4);
        opt.step(&mut p, &zeros, &lrs);
        for (i, (a, b)) in before.arrays().iter().zip(p.arrays()).enumerate() {
            for (x, y) in a.data().iter().zip(b.data()) {
                let expect = x - lrs[i] * 1e-4 * x;
                assert!((y - expect).abs() <= 1e-18 + 1e-15 * x.abs());
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = ModelConfig::small_for_tests();
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor2D> = p
            .arrays()
            .iter()
            .map(|a| Tensor2D::filled(a.rows(), a.cols(), -0.3))
            .collect();
        let lrs = vec![0.01; p.len()];
        AdamW::new(&p, (0.9, 0.999), 1e-8, 0.0).step(&mut p, &grads, &lrs);
        // bias-corrected first step is lr * sign(g)
        for (a, b) in before.arrays().iter().zip(p.arrays()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor2D::filled(1, 4, 3.0), Tensor2D::filled(2, 2, 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 10.0).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|t| t.data().iter()).map(|x| x * x).sum();
        assert!((after.sqrt() - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor2D::filled(1, 1, 0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig {
            epochs: 6,
            lr_drop_epoch: 4,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|e| c.lr_at(e)).collect();
        assert_eq!(lrs[3], 1e-3);
        assert_eq!(lrs[4], 1e-3 * 0.1);
        assert_eq!(lrs[5], lrs[4]);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { mix_ratio: 1.5, ..TrainConfig::default() },
            TrainConfig { lr_drop_epoch: 90, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            lr_drop_epoch: 1,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_reproducible_and_jobs_invariant() {
        let data = TrainData {
            real: real(16),
            augmented: aug(),
            fresh: Some(FreshReal {
                seed: 7,
                margins: Margins::default(),
            }),
        };
        let cfg = TrainConfig {
            use_aug: true,
            use_prior: true,
            ..smoke_config()
        };
        let m = ModelConfig::small_for_tests();
        let (p1, l1) = train(&cfg, &m, &data, None, 4, 1).unwrap();
        let (p2, l2) = train(&cfg, &m, &data, None, 4, 3).unwrap();
        assert_eq!(p1.digest(), p2.digest());
        assert_eq!(l1.epochs, l2.epochs);
        assert_eq!(l1.config_hash, l2.config_hash);
        assert_eq!(l1.train_samples, 16 + 5);
        assert_eq!(l1.augmented_samples, 5);
        assert_eq!(l1.epochs[1].lr, l1.epochs[0].lr * 0.1);
    }

    #[test]
    fn smoke_training_reduces_loss() {
        let data = TrainData {
            real: real(32),
            augmented: Dataset::default(),
            fresh: None,
        };
        let cfg = TrainConfig {
            lr_drop_epoch: 1,
            ..smoke_config()
        };
        let m = ModelConfig::small_for_tests();
        let mut improved = 0;
        for seed in 0..3 {
            let (_, log) = train(&cfg, &m, &data, None, seed, 1).unwrap();
            assert!(log.epochs.iter().all(|e| e.mean_loss.is_finite()));
            if log.epochs[1].mean_loss < log.epochs[0].mean_loss {
                improved += 1;
            }
        }
        assert!(improved >= 2);
    }

    #[test]
    fn divergence_is_reported() {
        let data = TrainData {
            real: real(8),
            augmented: Dataset::default(),
            fresh: None,
        };
        let cfg = TrainConfig {
            lr: 1e300,
            ..smoke_config()
        };
        let err = train(&cfg, &ModelConfig::small_for_tests(), &data, None, 0, 1).unwrap_err();
        assert!(matches!(err, LabError::Diverged { .. }), "{err}");
    }

    #[test]
    fn grid_shape() {
        let data = TrainData {
            real: real(8),
            augmented: aug(),
            fresh: None,
        };
        let test = build_base_split(6, seeds::stream::TEST, 7, Margins::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            lr_drop_epoch: 0,
            ..smoke_config()
        };
        let mut seen = 0;
        let t = run_ablation_grid(
            &cfg,
            &ModelConfig::small_for_tests(),
            &data,
            &test,
            &Variant::ALL,
            &[0, 1, 2],
            1,
            &mut |_| seen += 1,
        )
        .unwrap();
        assert_eq!(t.cells.len(), 12);
        assert_eq!(seen, 12);
        let both = t.cells_of(Variant::Both).next().unwrap();
        assert!(both.log.use_aug && both.log.use_prior);
        assert!(t.markdown().lines().count() == 6);
    }
}
