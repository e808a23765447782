//! Query-conditioned prior images and the fused target token.
//!
//! The prior image is a deterministic object-centric rendering of the
//! attributes named in the query. It is encoded by the model's own visual
//! encoder, mean-pooled, and added to the learnable token `p_r`.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Tensor2D};
use crate::error::{LabError, Result};
use crate::geometry::BBox;
use crate::model::{BoundParams, GroundingModel, ModelParams};
use crate::scene::Image;
use crate::vocab::{self, Color, Shape, BACKGROUND_RGB, NEUTRAL_RGB};

/// Fraction of the canvas width covered by the rendered object.
pub const PRIOR_OBJECT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorImage {
    pub image: Image,
    pub shape: Shape,
    /// `None` renders the neutral color.
    pub color: Option<Color>,
}

/// Renders the shape (and color, if any) named by `tokens`, centered on a
/// gray canvas. Relation words are accepted and ignored.
pub fn render_prior(tokens: &[String], canvas: [usize; 2]) -> Result<PriorImage> {
    let mut shape = None;
    let mut color = None;
    for t in tokens {
        vocab::token_id(t)?;
        if let Some(s) = Shape::parse(t) {
            shape = Some(s);
        } else if let Some(c) = Color::parse(t) {
            color = Some(c);
        }
    }
    let shape = shape.ok_or_else(|| {
        LabError::Precondition(format!("query {tokens:?} names no shape"))
    })?;
    let [h, w] = canvas;
    let side = PRIOR_OBJECT_FRACTION;
    // square in pixels on non-square canvases
    let bbox = BBox::new(0.5, 0.5, side, side * w as f64 / h as f64)?;
    let mut image = Image::filled(h, w, BACKGROUND_RGB);
    image.draw(shape, &bbox, color.map_or(NEUTRAL_RGB, Color::rgb));
    Ok(PriorImage { image, shape, color })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    /// Learnable `p_r`.
    Learnable,
    /// `p_f = E(prior) + p_r`.
    Fused,
    /// Decoder output for the target token.
    Decoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVector {
    pub role: TokenRole,
    pub values: Vec<f64>,
}

impl TokenVector {
    pub fn new(role: TokenRole, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite {
                coord: i,
                value: values[i],
            });
        }
        Ok(Self { role, values })
    }

    pub fn learnable(params: &ModelParams) -> Self {
        let p_r = params.get("p_r").expect("p_r is always present");
        Self {
            role: TokenRole::Learnable,
            values: p_r.data().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor2D {
        Tensor2D::row_vector(self.values.clone())
    }
}

/// `E(img)`: shared visual encoder followed by mean pooling.
pub fn encode_prior(
    model: &GroundingModel,
    params: &ModelParams,
    img: &PriorImage,
) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let p = BoundParams::bind(&mut t, params, false);
    let v = model.encode_prior(&mut t, &p, &img.image)?;
    Ok(t.value(v).data().to_vec())
}

/// `p_f = prior + p_r`, elementwise.
pub fn fuse_token(prior: &[f64], p_r: &TokenVector) -> Result<TokenVector> {
    if prior.len() != p_r.dim() {
        return Err(LabError::Shape {
            op: "fuse_token",
            lhs: (1, prior.len()),
            rhs: (1, p_r.dim()),
        });
    }
    let values = prior.iter().zip(&p_r.values).map(|(a, b)| a + b).collect();
    TokenVector::new(TokenRole::Fused, values)
}
