//! Synthetic scenes: sampling, rasterization and a noisy detector stub.
//!
//! Two samplers share one placement routine. [`sample_base_scene`] produces
//! the "real" corpus, mixed-shape scenes whose same-category distractor count
//! is long-tailed. [`sample_multi_instance_scene`] stands in for prompting an
//! image generator with "`<count>` `<category>`": it places roughly `count`
//! objects of one shape, occasionally one more or one fewer than asked.
//!
//! Scenes are persisted as specs and re-rasterized on demand.

mod detect;
mod raster;

pub use detect::{detect, DetectionSet, NoiseParams, Provenance};
pub use raster::{rasterize, Image};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::{iou, BBox};
use crate::pseudo_query::{assign_relations, resolve_query, Margins, RelationLabel, Resolution};
use crate::seeds;
use crate::vocab::{Color, Shape};

pub const DEFAULT_CANVAS: usize = 64;
/// Normalized area separating `small` from `large` objects.
pub const SMALL_AREA_LIMIT: f64 = 0.02;
pub const MAX_OBJECTS: usize = 12;
pub const MAX_PAIRWISE_IOU: f64 = 0.1;
pub const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    /// Side length range as a fraction of the canvas width.
    fn side_fraction(self) -> (f64, f64) {
        match self {
            SizeClass::Small => (0.12, 0.1407),
            SizeClass::Large => (0.17, 0.25),
        }
    }

    pub fn of_area(area: f64) -> Self {
        if area < SMALL_AREA_LIMIT {
            SizeClass::Small
        } else {
            SizeClass::Large
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub seed: u64,
    /// `[height, width]` in pixels.
    pub canvas: [usize; 2],
    pub target_category: Shape,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn height(&self) -> usize {
        self.canvas[0]
    }

    pub fn width(&self) -> usize {
        self.canvas[1]
    }

    /// Same-category objects other than the target.
    pub fn distractor_count(&self) -> usize {
        self.objects
            .iter()
            .filter(|o| o.shape == self.target_category)
            .count()
            .saturating_sub(1)
    }

    pub fn category_boxes(&self) -> Vec<BBox> {
        self.objects
            .iter()
            .filter(|o| o.shape == self.target_category)
            .map(|o| o.bbox)
            .collect()
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if n == 0 || n > MAX_OBJECTS {
            return Err(LabError::Precondition(format!(
                "scene {} has {n} objects",
                self.scene_id
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_on_canvas() {
                return Err(LabError::Precondition(format!(
                    "object {i} of {} leaves the canvas",
                    self.scene_id
                )));
            }
            if SizeClass::of_area(o.bbox.area()) != o.size {
                return Err(LabError::Precondition(format!(
                    "object {i} of {} has size label {:?} for area {}",
                    self.scene_id,
                    o.size,
                    o.bbox.area()
                )));
            }
            for p in &self.objects[..i] {
                if iou(&o.bbox, &p.bbox) > MAX_PAIRWISE_IOU {
                    return Err(LabError::Precondition(format!(
                        "objects overlap in {}",
                        self.scene_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Query that a base scene was built to support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseQuery {
    pub tokens: Vec<String>,
    /// Index into `SceneSpec::objects`.
    pub target: usize,
    pub relation: Option<RelationLabel>,
}

struct Placer<'a> {
    rng: &'a mut ChaCha8Rng,
    height: usize,
    width: usize,
    placed: Vec<BBox>,
}

impl Placer<'_> {
    /// Pixel-aligned square of the given size class, rejection-sampled
    /// against everything already placed.
    fn place(&mut self, size: SizeClass, total: usize) -> Result<BBox> {
        let (lo, hi) = size.side_fraction();
        let smin = (lo * self.width as f64).ceil() as usize;
        let smax = ((hi * self.width as f64).floor() as usize).max(smin);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = self.rng.gen_range(smin..=smax);
            if side > self.width || side > self.height {
                break;
            }
            let x0 = self.rng.gen_range(0..=self.width - side);
            let y0 = self.rng.gen_range(0..=self.height - side);
            let (w, h) = (self.width as f64, self.height as f64);
            let b = BBox::from_corners(
                x0 as f64 / w,
                y0 as f64 / h,
                (x0 + side) as f64 / w,
                (y0 + side) as f64 / h,
            )?;
            if self.placed.iter().all(|p| iou(p, &b) <= MAX_PAIRWISE_IOU) {
                self.placed.push(b);
                return Ok(b);
            }
        }
        Err(LabError::Placement {
            count: total,
            height: self.height,
            width: self.width,
            attempts: PLACEMENT_ATTEMPTS,
        })
    }
}

fn random_size(rng: &mut ChaCha8Rng) -> SizeClass {
    if rng.gen_bool(0.5) {
        SizeClass::Small
    } else {
        SizeClass::Large
    }
}

fn object(shape: Shape, color: Color, bbox: BBox) -> ObjectSpec {
    ObjectSpec {
        shape,
        color,
        size: SizeClass::of_area(bbox.area()),
        bbox,
    }
}

/// Generator stand-in: a single-category scene with about `count` instances.
///
/// The realized count is `count + slack`, slack in {-1, 0, +1} with
/// probabilities 0.2/0.6/0.2. Half of the scenes paint every instance the same
/// color so only relations can tell them apart.
pub fn sample_multi_instance_scene(category: Shape, count: usize, seed: u64) -> Result<SceneSpec> {
    sample_multi_instance_scene_on(category, count, seed, [DEFAULT_CANVAS, DEFAULT_CANVAS])
}

pub fn sample_multi_instance_scene_on(
    category: Shape,
    count: usize,
    seed: u64,
    canvas: [usize; 2],
) -> Result<SceneSpec> {
    if !(3..=10).contains(&count) {
        return Err(LabError::Precondition(format!(
            "instance count {count} outside 3..=10"
        )));
    }
    let mut rng = seeds::rng(seed);
    let u: f64 = rng.gen();
    let realized = match u {
        u if u < 0.2 => count - 1,
        u if u < 0.8 => count,
        _ => count + 1,
    };
    let uniform_color = rng.gen_bool(0.5);
    let shared = *Color::ALL.choose(&mut rng).expect("colors");
    let mut placer = Placer {
        rng: &mut rng,
        height: canvas[0],
        width: canvas[1],
        placed: Vec::new(),
    };
    let mut objects = Vec::with_capacity(realized);
    for _ in 0..realized {
        let size = random_size(placer.rng);
        let b = placer.place(size, realized)?;
        let color = if uniform_color {
            shared
        } else {
            *Color::ALL.choose(placer.rng).expect("colors")
        };
        objects.push(object(category, color, b));
    }
    Ok(SceneSpec {
        scene_id: format!("aug-{category}-{seed:016x}"),
        seed,
        canvas,
        target_category: category,
        objects,
    })
}

/// Distractor-count buckets of the base corpus with their probabilities.
pub const BASE_DISTRACTOR_TAIL: [(std::ops::RangeInclusive<usize>, f64); 3] =
    [(0..=1, 0.70), (2..=3, 0.25), (4..=7, 0.05)];

/// Objects of other shapes added to every base scene as clutter.
pub const BASE_OTHER_OBJECTS: usize = 1;

/// Probability that a base scene with distractors is annotated with a
/// relation query instead of a color query.
pub const BASE_RELATION_QUERY_P: f64 = 0.5;

fn sample_distractors(rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (range, p) in BASE_DISTRACTOR_TAIL.iter() {
        acc += p;
        if u < acc {
            return rng.gen_range(range.clone());
        }
    }
    let last = &BASE_DISTRACTOR_TAIL[BASE_DISTRACTOR_TAIL.len() - 1].0;
    rng.gen_range(last.clone())
}

/// Scene for the base ("real") corpus together with its referring query.
///
/// The target is identified by color + shape, or, when every instance of its
/// category shares a color, by a relation that resolves uniquely on the exact
/// scene boxes.
pub fn sample_base_scene(seed: u64, margins: Margins) -> Result<(SceneSpec, BaseQuery)> {
    let canvas = [DEFAULT_CANVAS, DEFAULT_CANVAS];
    let mut rng = seeds::rng(seed);
    let distractors = sample_distractors(&mut rng);
    let category = *Shape::ALL.choose(&mut rng).expect("shapes");
    let others: Vec<Shape> = Shape::ALL.into_iter().filter(|s| *s != category).collect();
    let n_other = BASE_OTHER_OBJECTS;
    let wants_relation = distractors > 0 && rng.gen_bool(BASE_RELATION_QUERY_P);

    for _ in 0..32 {
        let mut placer = Placer {
            rng: &mut rng,
            height: canvas[0],
            width: canvas[1],
            placed: Vec::new(),
        };
        let total = distractors + 1 + n_other;
        let mut boxes = Vec::with_capacity(total);
        for _ in 0..total {
            let size = random_size(placer.rng);
            boxes.push(placer.place(size, total)?);
        }
        let same = &boxes[..=distractors];

        let (target, relation, colors) = if wants_relation {
            let labels = assign_relations(same, margins)?;
            let mut candidates: Vec<(usize, RelationLabel)> = labels
                .iter()
                .enumerate()
                .flat_map(|(i, set)| set.iter().map(move |&l| (i, l)))
                .filter(|&(i, l)| resolve_query(l, same, margins) == Resolution::Unique(i))
                .collect();
            if candidates.is_empty() {
                continue;
            }
            candidates.sort();
            let (t, l) = candidates[rng.gen_range(0..candidates.len())];
            let c = *Color::ALL.choose(&mut rng).expect("colors");
            (t, Some(l), vec![c; distractors + 1])
        } else {
            let target_color = *Color::ALL.choose(&mut rng).expect("colors");
            let rest: Vec<Color> = Color::ALL
                .into_iter()
                .filter(|c| *c != target_color)
                .collect();
            let mut colors = vec![target_color];
            for _ in 0..distractors {
                colors.push(*rest.choose(&mut rng).expect("colors"));
            }
            (0, None, colors)
        };

        let mut objects: Vec<ObjectSpec> = boxes[..=distractors]
            .iter()
            .zip(&colors)
            .map(|(b, c)| object(category, *c, *b))
            .collect();
        for b in &boxes[distractors + 1..] {
            let shape = *others.choose(&mut rng).expect("shapes");
            let color = *Color::ALL.choose(&mut rng).expect("colors");
            objects.push(object(shape, color, *b));
        }

        let mut tokens: Vec<String> = match relation {
            Some(l) => l.words().iter().map(|w| w.to_string()).collect(),
            None => vec![objects[target].color.name().to_string()],
        };
        tokens.push(category.name().to_string());

        let spec = SceneSpec {
            scene_id: format!("real-{seed:016x}"),
            seed,
            canvas,
            target_category: category,
            objects,
        };
        return Ok((
            spec,
            BaseQuery {
                tokens,
                target,
                relation,
            },
        ));
    }
    Err(LabError::Placement {
        count: distractors + 1 + n_other,
        height: canvas[0],
        width: canvas[1],
        attempts: PLACEMENT_ATTEMPTS,
    })
}
