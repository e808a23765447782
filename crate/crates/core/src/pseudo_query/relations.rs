use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::BBox;

/// Spatial relation of one box among a set of same-category boxes.
///
/// `Front`/`Behind` compare areas (largest/smallest); the others compare
/// centers in image coordinates, where y grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelationLabel {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
    Middle,
    SecondLeft,
    SecondRight,
    LeftTop,
    RightTop,
    LeftBottom,
    RightBottom,
    Front,
    Behind,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 13] = [
        RelationLabel::Leftmost,
        RelationLabel::Rightmost,
        RelationLabel::Topmost,
        RelationLabel::Bottommost,
        RelationLabel::Middle,
        RelationLabel::SecondLeft,
        RelationLabel::SecondRight,
        RelationLabel::LeftTop,
        RelationLabel::RightTop,
        RelationLabel::LeftBottom,
        RelationLabel::RightBottom,
        RelationLabel::Front,
        RelationLabel::Behind,
    ];

    /// Order in which pseudo-queries are taken when a scene is capped.
    pub const PRIORITY: [RelationLabel; 13] = [
        RelationLabel::Leftmost,
        RelationLabel::Rightmost,
        RelationLabel::Topmost,
        RelationLabel::Bottommost,
        RelationLabel::LeftTop,
        RelationLabel::RightTop,
        RelationLabel::LeftBottom,
        RelationLabel::RightBottom,
        RelationLabel::Middle,
        RelationLabel::SecondLeft,
        RelationLabel::SecondRight,
        RelationLabel::Front,
        RelationLabel::Behind,
    ];

    /// Phrase used in front of the noun.
    pub fn words(self) -> &'static [&'static str] {
        use RelationLabel::*;
        match self {
            Leftmost => &["leftmost"],
            Rightmost => &["rightmost"],
            Topmost => &["top"],
            Bottommost => &["bottom"],
            Middle => &["middle"],
            SecondLeft => &["second", "left"],
            SecondRight => &["second", "right"],
            LeftTop => &["left", "top"],
            RightTop => &["right", "top"],
            LeftBottom => &["left", "bottom"],
            RightBottom => &["right", "bottom"],
            Front => &["front"],
            Behind => &["behind"],
        }
    }

    pub fn from_words(words: &[&str]) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.words() == words)
    }

    pub fn name(self) -> &'static str {
        use RelationLabel::*;
        match self {
            Leftmost => "LEFTMOST",
            Rightmost => "RIGHTMOST",
            Topmost => "TOPMOST",
            Bottommost => "BOTTOMMOST",
            Middle => "MIDDLE",
            SecondLeft => "SECOND_LEFT",
            SecondRight => "SECOND_RIGHT",
            LeftTop => "LEFT_TOP",
            RightTop => "RIGHT_TOP",
            LeftBottom => "LEFT_BOTTOM",
            RightBottom => "RIGHT_BOTTOM",
            Front => "FRONT",
            Behind => "BEHIND",
        }
    }
}

/// Margins that a relation must clear before it is emitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Center margin in normalized units.
    pub tau: f64,
    /// Relative area margin.
    pub rho: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            tau: 0.05,
            rho: 0.2,
        }
    }
}

fn sorted_by(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    idx
}

/// Labels each box with the relations it satisfies under the margins.
///
/// Rank-based: the extreme, second and median positions are read off sorted
/// key orders and kept only if the gaps to their neighbours clear the margin.
pub fn assign_relations(boxes: &[BBox], m: Margins) -> Result<Vec<BTreeSet<RelationLabel>>> {
    use RelationLabel::*;
    let n = boxes.len();
    if n < 2 {
        return Err(LabError::Precondition(format!(
            "relation assignment needs at least 2 boxes, got {n}"
        )));
    }
    let mut out = vec![BTreeSet::new(); n];
    let cx: Vec<f64> = boxes.iter().map(|b| b.cx()).collect();
    let cy: Vec<f64> = boxes.iter().map(|b| b.cy()).collect();
    let tau = m.tau;
    let diag_tau = m.tau * std::f64::consts::SQRT_2;

    // min / max along a key with an additive margin
    let mut extremes = |keys: &[f64], margin: f64, low: RelationLabel, high: RelationLabel| {
        let s = sorted_by(keys);
        if keys[s[1]] - keys[s[0]] >= margin {
            out[s[0]].insert(low);
        }
        if keys[s[n - 1]] - keys[s[n - 2]] >= margin {
            out[s[n - 1]].insert(high);
        }
    };
    extremes(&cx, tau, Leftmost, Rightmost);
    extremes(&cy, tau, Topmost, Bottommost);
    let sum: Vec<f64> = boxes.iter().map(|b| b.cx() + b.cy()).collect();
    extremes(&sum, diag_tau, LeftTop, RightBottom);
    let diff: Vec<f64> = boxes.iter().map(|b| b.cx() - b.cy()).collect();
    extremes(&diff, diag_tau, LeftBottom, RightTop);

    let s = sorted_by(&cx);
    if n >= 3 {
        if cx[s[1]] - cx[s[0]] >= tau && cx[s[2]] - cx[s[1]] >= tau {
            out[s[1]].insert(SecondLeft);
        }
        if cx[s[n - 1]] - cx[s[n - 2]] >= tau && cx[s[n - 2]] - cx[s[n - 3]] >= tau {
            out[s[n - 2]].insert(SecondRight);
        }
    }
    if n >= 3 && n % 2 == 1 {
        let mid = n / 2;
        if cx[s[mid]] - cx[s[mid - 1]] >= tau && cx[s[mid + 1]] - cx[s[mid]] >= tau {
            out[s[mid]].insert(Middle);
        }
    }

    let area: Vec<f64> = boxes.iter().map(|b| b.area()).collect();
    let s = sorted_by(&area);
    if area[s[n - 1]] >= (1.0 + m.rho) * area[s[n - 2]] {
        out[s[n - 1]].insert(Front);
    }
    if area[s[1]] >= (1.0 + m.rho) * area[s[0]] {
        out[s[0]].insert(Behind);
    }
    Ok(out)
}

/// Outcome of resolving a relation against a box set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Unique(usize),
    Ambiguous,
}

/// Exhaustive resolver: tests the relation's defining pairwise comparison
/// for every candidate and reports the single satisfying box, if any.
///
/// Independent of [`assign_relations`]: nothing is sorted, every candidate is
/// compared against every other box.
pub fn resolve_query(relation: RelationLabel, boxes: &[BBox], m: Margins) -> Resolution {
    use RelationLabel::*;
    let n = boxes.len();
    let tau = m.tau;
    let diag_tau = m.tau * std::f64::consts::SQRT_2;
    let key = |b: &BBox| -> f64 {
        match relation {
            Leftmost | Rightmost | Middle | SecondLeft | SecondRight => b.cx(),
            Topmost | Bottommost => b.cy(),
            LeftTop | RightBottom => b.cx() + b.cy(),
            LeftBottom | RightTop => b.cx() - b.cy(),
            Front | Behind => b.area(),
        }
    };
    let keys: Vec<f64> = boxes.iter().map(key).collect();

    let satisfies = |i: usize| -> bool {
        let others = (0..n).filter(|&j| j != i);
        let below = others.clone().filter(|&j| keys[i] - keys[j] >= tau).count();
        let above = others.clone().filter(|&j| keys[j] - keys[i] >= tau).count();
        match relation {
            Leftmost | Topmost => n >= 2 && others.clone().all(|j| keys[j] - keys[i] >= tau),
            Rightmost | Bottommost => n >= 2 && others.clone().all(|j| keys[i] - keys[j] >= tau),
            LeftTop | LeftBottom => n >= 2 && others.clone().all(|j| keys[j] - keys[i] >= diag_tau),
            RightBottom | RightTop => {
                n >= 2 && others.clone().all(|j| keys[i] - keys[j] >= diag_tau)
            }
            SecondLeft => n >= 3 && below == 1 && above == n - 2,
            SecondRight => n >= 3 && above == 1 && below == n - 2,
            Middle => n >= 3 && n % 2 == 1 && below == (n - 1) / 2 && above == (n - 1) / 2,
            Front => {
                n >= 2 && others.clone().all(|j| keys[i] >= (1.0 + m.rho) * keys[j])
            }
            Behind => {
                n >= 2 && others.clone().all(|j| keys[j] >= (1.0 + m.rho) * keys[i])
            }
        }
    };

    let mut found = None;
    for i in 0..n {
        if satisfies(i) {
            if found.is_some() {
                return Resolution::Ambiguous;
            }
            found = Some(i);
        }
    }
    found.map_or(Resolution::Ambiguous, Resolution::Unique)
}
