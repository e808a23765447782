use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SceneSpec;
use crate::error::{LabError, Result};
use crate::geometry::BBox;
use crate::seeds;

/// Smallest side a jittered detection may have.
pub const MIN_DETECTION_SIDE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Std-dev of the Gaussian jitter on each of cx, cy, w, h.
    pub sigma: f64,
    pub drop_p: f64,
    /// Probability of one spurious box per scene.
    pub spurious_p: f64,
}

impl NoiseParams {
    pub const EXACT: NoiseParams = NoiseParams {
        sigma: 0.0,
        drop_p: 0.0,
        spurious_p: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma >= 0.0
            && self.sigma.is_finite()
            && (0.0..=1.0).contains(&self.drop_p)
            && (0.0..=0.3).contains(&self.spurious_p);
        if ok {
            Ok(())
        } else {
            Err(LabError::Precondition(format!("invalid detector noise {self:?}")))
        }
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            drop_p: 0.0,
            spurious_p: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Exact,
    Jittered {
        sigma: f64,
        drop_p: f64,
        spurious_p: f64,
    },
}

/// Detector output for one scene, sorted by `cx` then `cy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub scene_id: String,
    pub boxes: Vec<BBox>,
    pub provenance: Provenance,
}

/// Detector stub for the scene's target category.
///
/// Works on the spec boxes, not pixels. Each box gets independent
/// `N(0, sigma^2)` jitter on all four coordinates, then centers are clipped to
/// the canvas and sides floored at [`MIN_DETECTION_SIDE`]. Boxes are dropped
/// with `drop_p`; one random box is added with `spurious_p`.
pub fn detect(spec: &SceneSpec, noise: NoiseParams, seed: u64) -> Result<DetectionSet> {
    noise.validate()?;
    let exact = noise == NoiseParams::EXACT;
    let mut rng = seeds::rng_at(seed, &[seeds::stream::DETECT]);
    let jitter = Normal::new(0.0, noise.sigma).expect("sigma validated");
    let mut boxes = Vec::new();
    for o in spec.objects.iter().filter(|o| o.shape == spec.target_category) {
        if exact {
            boxes.push(o.bbox);
            continue;
        }
        let [cx, cy, w, h] = o.bbox.as_array();
        let d: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
        let dropped = rng.gen::<f64>() < noise.drop_p;
        if dropped {
            continue;
        }
        boxes.push(BBox::new(
            (cx + d[0]).clamp(0.0, 1.0),
            (cy + d[1]).clamp(0.0, 1.0),
            (w + d[2]).max(MIN_DETECTION_SIDE),
            (h + d[3]).max(MIN_DETECTION_SIDE),
        )?);
    }
    if !exact && rng.gen::<f64>() < noise.spurious_p {
        let s = rng.gen_range(0.06..0.2);
        boxes.push(BBox::new(
            rng.gen_range(s / 2.0..1.0 - s / 2.0),
            rng.gen_range(s / 2.0..1.0 - s / 2.0),
            s,
            s,
        )?);
    }
    boxes.sort_by(|a, b| a.cx().total_cmp(&b.cx()).then(a.cy().total_cmp(&b.cy())));
    Ok(DetectionSet {
        scene_id: spec.scene_id.clone(),
        boxes,
        provenance: if exact {
            Provenance::Exact
        } else {
            Provenance::Jittered {
                sigma: noise.sigma,
                drop_p: noise.drop_p,
                spurious_p: noise.spurious_p,
            }
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::sample_multi_instance_scene;
    use crate::vocab::Shape;

    #[test]
    fn exact_noise_returns_sorted_spec_boxes() {
        let s = sample_multi_instance_scene(Shape::Square, 6, 3).unwrap();
        let d = detect(&s, NoiseParams::EXACT, 1).unwrap();
        let mut want: Vec<BBox> = s.objects.iter().map(|o| o.bbox).collect();
        want.sort_by(|a, b| a.cx().total_cmp(&b.cx()).then(a.cy().total_cmp(&b.cy())));
        assert_eq!(d.boxes, want);
        assert_eq!(d.provenance, Provenance::Exact);
    }

    #[test]
    fn drop_all() {
        let s = sample_multi_instance_scene(Shape::Square, 6, 3).unwrap();
        let noise = NoiseParams {
            sigma: 0.01,
            drop_p: 1.0,
            spurious_p: 0.0,
        };
        assert!(detect(&s, noise, 1).unwrap().boxes.is_empty());
    }

    #[test]
    fn rejects_bad_noise() {
        let s = sample_multi_instance_scene(Shape::Square, 3, 3).unwrap();
        let bad = NoiseParams {
            sigma: -1.0,
            ..NoiseParams::EXACT
        };
        assert!(detect(&s, bad, 0).is_err());
        let bad = NoiseParams {
            spurious_p: 0.5,
            ..NoiseParams::EXACT
        };
        assert!(detect(&s, bad, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let s = sample_multi_instance_scene(Shape::Circle, 8, 5).unwrap();
        let n = NoiseParams {
            sigma: 0.02,
            drop_p: 0.1,
            spurious_p: 0.2,
        };
        assert_eq!(detect(&s, n, 9).unwrap(), detect(&s, n, 9).unwrap());
    }

    #[test]
    fn jitter_statistics() {
        // Single centered object so matching is trivial. Per-axis |N(0, s^2)|
        // has mean s*sqrt(2/pi); the 2-D displacement is Rayleigh with mean
        // s*sqrt(pi/2).
        use crate::scene::{ObjectSpec, SizeClass};
        use crate::vocab::Color;
        let sigma = 0.02;
        let noise = NoiseParams {
            sigma,
            drop_p: 0.0,
            spurious_p: 0.0,
        };
        let truth = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let spec = SceneSpec {
            scene_id: "one".into(),
            seed: 0,
            canvas: [64, 64],
            target_category: Shape::Square,
            objects: vec![ObjectSpec {
                shape: Shape::Square,
                color: Color::Red,
                size: SizeClass::Large,
                bbox: truth,
            }],
        };
        let draws = 10_000;
        let (mut axis, mut radial) = (0.0, 0.0);
        for seed in 0..draws {
            let d = detect(&spec, noise, seed).unwrap();
            assert_eq!(d.boxes.len(), 1);
            let (dx, dy) = (d.boxes[0].cx() - 0.5, d.boxes[0].cy() - 0.5);
            axis += dx.abs() + dy.abs();
            radial += (dx * dx + dy * dy).sqrt();
        }
        let axis_mean = axis / (2 * draws) as f64;
        let radial_mean = radial / draws as f64;
        let want_axis = sigma * (2.0 / std::f64::consts::PI).sqrt();
        let want_radial = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!((axis_mean / want_axis - 1.0).abs() < 0.05, "{axis_mean}");
        assert!((radial_mean / want_radial - 1.0).abs() < 0.05, "{radial_mean}");
    }
}
