//! Axis-aligned boxes, overlap measures and the box-regression loss.
//!
//! Boxes are stored in normalized center-size form `(cx, cy, w, h)`. The
//! grounding loss is the unweighted sum of a coordinate-wise smooth-L1 term
//! and `1 - GIoU`; [`grounding_loss_grad`] returns its analytic gradient with
//! respect to the predicted box so the model tape can be seeded with it.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Normalized center-size rectangle.
///
/// Only degenerate sizes are rejected at construction. Whether a box lies on
/// the canvas is checked separately by [`BBox::is_on_canvas`]; nothing here
/// clamps implicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Coordinate layout for [`BBox::to_form`] / [`BBox::from_form`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxForm {
    /// `(cx, cy, w, h)`
    CenterSize,
    /// `(x_min, y_min, x_max, y_max)`
    Corner,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(LabError::InvalidBox(format!(
                "non-finite box ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(LabError::InvalidBox(format!(
                "degenerate box with w={w}, h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        Self::new(
            (x_min + x_max) / 2.0,
            (y_min + y_max) / 2.0,
            x_max - x_min,
            y_max - y_min,
        )
    }

    pub fn from_form(coords: [f64; 4], form: BoxForm) -> Result<Self> {
        match form {
            BoxForm::CenterSize => Self::new(coords[0], coords[1], coords[2], coords[3]),
            BoxForm::Corner => Self::from_corners(coords[0], coords[1], coords[2], coords[3]),
        }
    }

    pub fn to_form(&self, form: BoxForm) -> [f64; 4] {
        match form {
            BoxForm::CenterSize => [self.cx, self.cy, self.w, self.h],
            BoxForm::Corner => self.corners(),
        }
    }

    #[inline]
    pub fn cx(&self) -> f64 {
        self.cx
    }
    #[inline]
    pub fn cy(&self) -> f64 {
        self.cy
    }
    #[inline]
    pub fn w(&self) -> f64 {
        self.w
    }
    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x_min, y_min, x_max, y_max)`
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// True when the whole rectangle lies inside the unit canvas.
    pub fn is_on_canvas(&self) -> bool {
        let [x0, y0, x1, y1] = self.corners();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0
    }

    /// Explicit clip of the corners to the unit canvas. Returns `None` when
    /// nothing of the box remains.
    pub fn clamp_to_canvas(&self) -> Option<Self> {
        let [x0, y0, x1, y1] = self.corners();
        Self::from_corners(x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0)).ok()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = LabError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

/// Convert a box to the requested 4-tuple layout.
pub fn box_convert(b: &BBox, form: BoxForm) -> [f64; 4] {
    b.to_form(form)
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: &BBox, b: &BBox) -> Overlap {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Overlap {
        inter,
        union,
        enclosing,
    }
}

/// Jaccard overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union
}

/// Generalized IoU: `IoU - (C - U) / C` with `C` the enclosing box area.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union - (o.enclosing - o.union) / o.enclosing
}

#[inline]
fn huber(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 1.0 {
        0.5 * x * x
    } else {
        ax - 0.5
    }
}

#[inline]
fn huber_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smooth-L1 averaged over the four center-size coordinates.
pub fn smooth_l1(pred: &BBox, gt: &BBox) -> f64 {
    let p = pred.as_array();
    let g = gt.as_array();
    p.iter().zip(g.iter()).map(|(a, b)| huber(a - b)).sum::<f64>() / 4.0
}

/// Per-term relative weights; the grounding objective uses `1.0` for both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub smooth_l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            smooth_l1: 1.0,
            giou: 1.0,
        }
    }
}

/// Decomposed loss. `total == smooth_l1_term + giou_term` for unit weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub smooth_l1_term: f64,
    pub giou_term: f64,
}

pub fn grounding_loss(pred: &BBox, gt: &BBox) -> LossValue {
    grounding_loss_grad(pred, gt, LossWeights::default()).0
}

/// Loss value plus its gradient with respect to `pred` in `(cx, cy, w, h)`.
///
/// At the `min`/`max` kinks of the overlap terms the left branch is taken.
pub fn grounding_loss_grad(pred: &BBox, gt: &BBox, weights: LossWeights) -> (LossValue, [f64; 4]) {
    let p = pred.as_array();
    let g = gt.as_array();

    let mut grad = [0.0; 4];
    let mut sl1 = 0.0;
    for k in 0..4 {
        let r = p[k] - g[k];
        sl1 += huber(r);
        grad[k] += weights.smooth_l1 * huber_grad(r) / 4.0;
    }
    sl1 /= 4.0;

    let [x1, y1, x2, y2] = pred.corners();
    let [gx1, gy1, gx2, gy2] = gt.corners();

    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let area_p = pred.w * pred.h;
    let union = area_p + gt.area() - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let enclosing = cw * ch;
    let giou_v = inter / union - (enclosing - union) / enclosing;

    // Partials of the intersection extents with respect to pred corners.
    let overlapping = iw_raw > 0.0 && ih_raw > 0.0;
    let (d_iw_x1, d_iw_x2) = if overlapping {
        (
            if x1 > gx1 { -1.0 } else { 0.0 },
            if x2 < gx2 { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let (d_ih_y1, d_ih_y2) = if overlapping {
        (
            if y1 > gy1 { -1.0 } else { 0.0 },
            if y2 < gy2 { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let d_i = [ih * d_iw_x1, iw * d_ih_y1, ih * d_iw_x2, iw * d_ih_y2];
    let d_ap = [-pred.h, -pred.w, pred.h, pred.w];
    let d_c = [
        if x1 < gx1 { -ch } else { 0.0 },
        if y1 < gy1 { -cw } else { 0.0 },
        if x2 > gx2 { ch } else { 0.0 },
        if y2 > gy2 { cw } else { 0.0 },
    ];

    // G = I/U + U/C - 1
    let mut d_g = [0.0; 4];
    for k in 0..4 {
        let d_u = d_ap[k] - d_i[k];
        d_g[k] = d_i[k] / union - inter * d_u / (union * union) + d_u / enclosing
            - union * d_c[k] / (enclosing * enclosing);
    }
    // corners (x1, y1, x2, y2) -> (cx, cy, w, h)
    let d_giou = [
        d_g[0] + d_g[2],
        d_g[1] + d_g[3],
        (d_g[2] - d_g[0]) / 2.0,
        (d_g[3] - d_g[1]) / 2.0,
    ];
    for k in 0..4 {
        grad[k] -= weights.giou * d_giou[k];
    }

    let smooth_l1_term = weights.smooth_l1 * sl1;
    let giou_term = weights.giou * (1.0 - giou_v);
    (
        LossValue {
            total: smooth_l1_term + giou_term,
            smooth_l1_term,
            giou_term,
        },
        grad,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn corner(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::from_corners(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn degenerate_rejected() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, -0.1).is_err());
        assert!(BBox::new(f64::NAN, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn iou_cases() {
        let b = BBox::new(0.3, 0.4, 0.2, 0.1).unwrap();
        assert_abs_diff_eq!(iou(&b, &b), 1.0, epsilon = 1e-12);
        let v = iou(&corner(0., 0., 2., 2.), &corner(1., 1., 3., 3.));
        assert_abs_diff_eq!(v, 1.0 / 7.0, epsilon = 1e-12);
        assert_eq!(iou(&corner(0., 0., 1., 1.), &corner(2., 2., 3., 3.)), 0.0);
    }

    #[test]
    fn giou_cases() {
        let b = BBox::new(0.3, 0.4, 0.2, 0.1).unwrap();
        assert_abs_diff_eq!(giou(&b, &b), 1.0, epsilon = 1e-12);
        let v = giou(&corner(0., 0., 2., 2.), &corner(1., 1., 3., 3.));
        assert_abs_diff_eq!(v, -5.0 / 63.0, epsilon = 1e-12);
        let v = giou(&corner(0., 0., 1., 1.), &corner(2., 0., 3., 1.));
        assert_abs_diff_eq!(v, -1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn smooth_l1_cases() {
        let g = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        assert_eq!(smooth_l1(&g, &g), 0.0);
        let p = BBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(smooth_l1(&p, &g), 0.125, epsilon = 1e-15);
        let p = BBox::new(2.5, 2.5, 2.5, 2.5).unwrap();
        assert_abs_diff_eq!(smooth_l1(&p, &g), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn smooth_l1_kink_is_c1() {
        let h = 1e-7;
        let left = (huber(1.0) - huber(1.0 - h)) / h;
        let right = (huber(1.0 + h) - huber(1.0)) / h;
        assert_abs_diff_eq!(left, right, epsilon = 1e-6);
        assert_abs_diff_eq!(huber(1.0 - 1e-12), huber(1.0), epsilon = 1e-11);
    }

    #[test]
    fn loss_cases() {
        let g = BBox::new(0.4, 0.6, 0.3, 0.2).unwrap();
        assert_eq!(grounding_loss(&g, &g).total, 0.0);
        let l = grounding_loss(&corner(0., 0., 1., 1.), &corner(2., 0., 3., 1.));
        assert_abs_diff_eq!(l.giou_term, 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn convert_cases() {
        let b = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(box_convert(&b, BoxForm::Corner), [0.0, 0.0, 1.0, 1.0]);
        let b = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        assert_eq!(box_convert(&b, BoxForm::Corner), [0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn serde_is_array_and_validates() {
        let b = BBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0.1,0.2,0.3,0.4]");
        assert!(serde_json::from_str::<BBox>("[0.1,0.2,0.0,0.4]").is_err());
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        use crate::diffmath::finite_diff_check;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 100 {
            let rb = |rng: &mut rand_chacha::ChaCha8Rng| {
                BBox::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.05..0.5),
                    rng.gen_range(0.05..0.5),
                )
                .unwrap()
            };
            let (p, g) = (rb(&mut rng), rb(&mut rng));
            // stay clear of the min/max kinks
            let (pc, gc) = (p.corners(), g.corners());
            let near_kink = pc
                .iter()
                .flat_map(|a| gc.iter().map(move |b| (a - b).abs()))
                .any(|d| d < 1e-3);
            if near_kink {
                continue;
            }
            let (_, grad) = grounding_loss_grad(&p, &g, LossWeights::default());
            let f = |x: &[f64]| grounding_loss(&BBox::new(x[0], x[1], x[2], x[3]).unwrap(), &g).total;
            let err = finite_diff_check(f, &grad, &p.as_array(), 1e-5).unwrap();
            assert!(err < 1e-6, "pair {p:?} {g:?}: {err}");
            checked += 1;
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..0.6f64, 0.01..0.6f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let i = iou(&a, &b);
            let g = giou(&a, &b);
            prop_assert!(g <= i + 1e-15);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!((iou(&b, &a) - i).abs() < 1e-15);
            prop_assert!((giou(&b, &a) - g).abs() < 1e-15);
        }

        #[test]
        fn overlap_invariant_under_similarity(
            a in arb_box(), b in arb_box(),
            dx in -2.0..2.0f64, dy in -2.0..2.0f64, s in 0.1..5.0f64,
        ) {
            let t = |x: &BBox| BBox::new(x.cx() * s + dx, x.cy() * s + dy, x.w() * s, x.h() * s).unwrap();
            let (ta, tb) = (t(&a), t(&b));
            prop_assert!((iou(&ta, &tb) - iou(&a, &b)).abs() < 1e-9);
            prop_assert!((giou(&ta, &tb) - giou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn round_trip(a in arb_box()) {
            for form in [BoxForm::Corner, BoxForm::CenterSize] {
                let back = BBox::from_form(a.to_form(form), form).unwrap();
                for (x, y) in back.as_array().iter().zip(a.as_array()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn total_is_sum(a in arb_box(), b in arb_box()) {
            let l = grounding_loss(&a, &b);
            prop_assert!((l.total - (smooth_l1(&a, &b) + 1.0 - giou(&a, &b))).abs() < 1e-12);
            prop_assert_eq!(l.total, l.smooth_l1_term + l.giou_term);
            prop_assert!(l.giou_term >= 0.0 && l.giou_term <= 2.0);
        }
    }
}
