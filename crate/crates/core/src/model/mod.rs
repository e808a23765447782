//! Transformer grounding model.
//!
//! Text and image are encoded separately, a target token is prepended, and a
//! stack of full self-attention layers runs over `[token; text; image]`. The
//! first output row goes through an MLP head and a logistic squash to give
//! `(cx, cy, w, h)`.
//!
//! Image patches pass through a two-layer GELU stem in place of a CNN
//! backbone. Each visual token is `stem + pe + pe * gate(stem)`, where `pe`
//! is the fixed 2-D sinusoidal table; the gate lets a patch's content decide
//! how strongly it reports its own position.
//!
//! The target token is the learnable `p_r`, or `p_r` plus a prior encoding
//! when the semantic prior is enabled (see [`crate::semantic_prior`]).

mod params;

pub use params::ModelParams;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Gradients, Tape, Tensor2D, Var};
use crate::error::{LabError, Result};
use crate::geometry::{grounding_loss_grad, BBox, LossValue, LossWeights};
use crate::pseudo_query::QuerySample;
use crate::scene::{rasterize, Image, SceneSpec};
use crate::semantic_prior::render_prior;
use crate::vocab::{self, BACKGROUND_RGB};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Visual encoder layers.
    pub enc_layers: usize,
    pub text_layers: usize,
    pub dec_layers: usize,
    pub patch: usize,
    /// `[height, width]`
    pub canvas: [usize; 2],
    pub vocab_size: usize,
    pub max_query_len: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Route the prior image through detached copies of the visual encoder.
    pub freeze_prior_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            enc_layers: 1,
            text_layers: 1,
            dec_layers: 2,
            patch: 16,
            canvas: [64, 64],
            vocab_size: vocab::vocab_size(),
            max_query_len: 6,
            ffn_mult: 2,
            freeze_prior_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        if self.patch == 0 || self.canvas[0] % self.patch != 0 || self.canvas[1] % self.patch != 0
        {
            return bad(format!(
                "canvas {:?} not divisible by patch {}",
                self.canvas, self.patch
            ));
        }
        if self.max_query_len < crate::pseudo_query::MAX_QUERY_TOKENS {
            return bad(format!(
                "max_query_len {} shorter than the longest query",
                self.max_query_len
            ));
        }
        if self.vocab_size < vocab::vocab_size() {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.canvas[0] / self.patch, self.canvas[1] / self.patch)
    }

    pub fn visual_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Decoder sequence length `1 + N_l + HW`.
    pub fn decoder_tokens(&self) -> usize {
        1 + self.max_query_len + self.visual_tokens()
    }

    #[doc(hidden)]
    pub fn small_for_tests() -> Self {
        Self {
            d_model: 16,
            heads: 2,
            enc_layers: 1,
            text_layers: 1,
            dec_layers: 1,
            patch: 16,
            ..Self::default()
        }
    }
}

/// Source of the prior added to `p_r`.
#[derive(Debug, Clone, Copy)]
pub enum PriorInput<'a> {
    /// Baseline: the target token is `p_r` alone.
    Off,
    /// Encode this prior image with the visual encoder.
    Image(&'a Image),
    /// Use a precomputed `1 x D` prior encoding.
    Vector(&'a Tensor2D),
}

/// One model input.
#[derive(Debug, Clone, Copy)]
pub struct GroundingInput<'a> {
    /// Padded token ids of length `max_query_len`.
    pub token_ids: &'a [usize],
    pub image: &'a Image,
    pub prior: PriorInput<'a>,
}

/// Parameters registered on a tape.
pub struct BoundParams {
    vars: Vec<Var>,
    /// Detached copies used by a frozen prior path.
    frozen: Option<Vec<Var>>,
    names: std::collections::HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams, with_frozen: bool) -> Self {
        let vars = params.arrays().iter().map(|a| tape.leaf(a.clone())).collect();
        let frozen = with_frozen.then(|| {
            params
                .arrays()
                .iter()
                .map(|a| tape.constant(a.clone()))
                .collect()
        });
        let names = params
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self { vars, frozen, names }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[self.names[name]]
    }

    fn frozen_var(&self, name: &str) -> Var {
        match &self.frozen {
            Some(f) => f[self.names[name]],
            None => self.var(name),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn view(&self, frozen: bool) -> ParamView<'_> {
        ParamView { bound: self, frozen }
    }
}

#[derive(Clone, Copy)]
struct ParamView<'a> {
    bound: &'a BoundParams,
    frozen: bool,
}

impl ParamView<'_> {
    fn get(&self, name: &str) -> Var {
        if self.frozen {
            self.bound.frozen_var(name)
        } else {
            self.bound.var(name)
        }
    }
}

/// Flattens an image into `(grid cells) x (patch * patch * 3)` rows. Values
/// are scaled to [0, 1] and shifted so the background color maps to zero.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor2D> {
    if img.height % patch != 0 || img.width % patch != 0 {
        return Err(LabError::Shape {
            op: "patchify",
            lhs: (img.height, img.width),
            rhs: (patch, patch),
        });
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let dim = patch * patch * 3;
    let mut out = Tensor2D::zeros(gh * gw, dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for dy in 0..patch {
                for dx in 0..patch {
                    let p = img.pixel(gy * patch + dy, gx * patch + dx);
                    let base = (dy * patch + dx) * 3;
                    for c in 0..3 {
                        row[base + c] = (p[c] as f64 - BACKGROUND_RGB[c] as f64) / 255.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fixed 2-D sinusoidal table: the first half of the channels encodes the
/// grid row, the second half the grid column.
pub fn position_table_2d(gh: usize, gw: usize, d: usize) -> Tensor2D {
    let half = d / 2;
    let mut t = Tensor2D::zeros(gh * gw, d);
    for y in 0..gh {
        for x in 0..gw {
            let row = t.row_mut(y * gw + x);
            for (off, pos) in [(0, y as f64), (half, x as f64)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[off + 2 * i] = (pos * freq).sin();
                    row[off + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    t
}

/// Additive key mask: `MASKED` in every column whose key is padding.
fn key_mask(rows: usize, padded_keys: &[bool]) -> Tensor2D {
    let mut m = Tensor2D::zeros(rows, padded_keys.len());
    for r in 0..rows {
        for (c, &p) in padded_keys.iter().enumerate() {
            if p {
                m.set(r, c, MASKED);
            }
        }
    }
    m
}

fn affine_ln(t: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = t.layer_norm(x);
    let s = t.mul_row(n, g)?;
    t.add_row(s, b)
}

fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = t.matmul(x, w)?;
    t.add_row(y, b)
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
fn transformer_layer(
    t: &mut Tape,
    p: ParamView<'_>,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<&Tensor2D>,
) -> Result<Var> {
    let g = |s: &str| p.get(&format!("{prefix}.{s}"));
    let d = t.shape(x).1;
    let dh = d / heads;

    let h = affine_ln(t, x, g("ln1_g"), g("ln1_b"))?;
    let no_key_bias = t.constant(Tensor2D::zeros(1, d));
    let bqkv = t.concat_cols(&[g("bq"), no_key_bias, g("bv")])?;
    let qkv = linear(t, h, g("wqkv"), bqkv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q = t.slice_cols(qkv, head * dh, (head + 1) * dh)?;
        let k = t.slice_cols(qkv, d + head * dh, d + (head + 1) * dh)?;
        let v = t.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh)?;
        let s = t.matmul_nt(q, k)?;
        let mut s = t.scale(s, scale);
        if let Some(m) = mask {
            s = t.add_const(s, m)?;
        }
        let a = t.softmax_rows(s);
        outs.push(t.matmul(a, v)?);
    }
    let o = if heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
    let o = linear(t, o, g("wo"), g("bo"))?;
    let x = t.add(x, o)?;

    let h = affine_ln(t, x, g("ln2_g"), g("ln2_b"))?;
    let f = linear(t, h, g("w1"), g("b1"))?;
    let f = t.gelu(f);
    let f = linear(t, f, g("w2"), g("b2"))?;
    t.add(x, f)
}

/// Model definition; stateless apart from the configuration and the
/// precomputed positional table.
#[derive(Debug, Clone)]
pub struct GroundingModel {
    config: ModelConfig,
    pos2d: Tensor2D,
}

impl GroundingModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (gh, gw) = config.grid();
        let pos2d = position_table_2d(gh, gw, config.d_model);
        Ok(Self { config, pos2d })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.config() != &self.config {
            return Err(LabError::Config(
                "parameters were built for a different model config".into(),
            ));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() != self.config.max_query_len {
            return Err(LabError::Config(format!(
                "expected {} token ids, got {}",
                self.config.max_query_len,
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(LabError::Config(format!("token id {bad} out of vocabulary")));
        }
        Ok(())
    }

    /// `F_l`: `N_l x D`. Padding keys are masked in attention.
    pub fn encode_text(&self, t: &mut Tape, p: &BoundParams, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let emb = t.embedding_lookup(p.var("text.tok_emb"), ids)?;
        let x = t.add(emb, p.var("text.pos"))?;
        let padded: Vec<bool> = ids.iter().map(|&i| i == 0).collect();
        let mask = key_mask(ids.len(), &padded);
        let mut x = x;
        for i in 0..self.config.text_layers {
            x = transformer_layer(
                t,
                p.view(false),
                &format!("text.layer{i}"),
                x,
                self.config.heads,
                Some(&mask),
            )?;
        }
        Ok(x)
    }

    fn encode_image_view(&self, t: &mut Tape, p: ParamView<'_>, img: &Image) -> Result<Var> {
        if [img.height, img.width] != self.config.canvas {
            return Err(LabError::Shape {
                op: "encode_image",
                lhs: (img.height, img.width),
                rhs: (self.config.canvas[0], self.config.canvas[1]),
            });
        }
        let patches = t.constant(patchify(img, self.config.patch)?);
        let h = linear(t, patches, p.get("vis.stem_w"), p.get("vis.stem_b"))?;
        let h = t.gelu(h);
        let x = linear(t, h, p.get("vis.patch_w"), p.get("vis.patch_b"))?;
        let x = t.add_const(x, &self.pos2d)?;
        // content-gated position: empty patches carry little position signal
        let gate = linear(t, h, p.get("vis.gate_w"), p.get("vis.gate_b"))?;
        let gated = t.mul_const(gate, &self.pos2d)?;
        let mut x = t.add(x, gated)?;
        for i in 0..self.config.enc_layers {
            x = transformer_layer(t, p, &format!("vis.layer{i}"), x, self.config.heads, None)?;
        }
        Ok(x)
    }

    /// `F_v`: `(H/patch * W/patch) x D`.
    pub fn encode_image(&self, t: &mut Tape, p: &BoundParams, img: &Image) -> Result<Var> {
        self.encode_image_view(t, p.view(false), img)
    }

    /// Mean-pooled visual encoding of a prior image, `1 x D`.
    pub fn encode_prior(&self, t: &mut Tape, p: &BoundParams, img: &Image) -> Result<Var> {
        let frozen = self.config.freeze_prior_encoder;
        let tokens = self.encode_image_view(t, p.view(frozen), img)?;
        Ok(t.mean_rows(tokens))
    }

    /// Target token fed to the decoder: `p_r`, or `p_r + prior`.
    pub fn target_token(&self, t: &mut Tape, p: &BoundParams, prior: PriorInput<'_>) -> Result<Var> {
        let p_r = p.var("p_r");
        match prior {
            PriorInput::Off => Ok(p_r),
            PriorInput::Image(img) => {
                let e = self.encode_prior(t, p, img)?;
                t.add(e, p_r)
            }
            PriorInput::Vector(v) => {
                let e = t.constant(v.clone());
                t.add(e, p_r)
            }
        }
    }

    /// Runs the fusion layers over `[token; F_l; F_v]` and returns the
    /// first output row.
    pub fn decode(
        &self,
        t: &mut Tape,
        p: &BoundParams,
        token: Var,
        text: Var,
        visual: Var,
        ids: &[usize],
    ) -> Result<Var> {
        let seq = t.concat_rows(&[token, text, visual])?;
        let n = t.shape(seq).0;
        let mut padded = vec![false; n];
        for (k, &id) in ids.iter().enumerate() {
            padded[1 + k] = id == 0;
        }
        let mask = key_mask(n, &padded);
        let mut x = seq;
        for i in 0..self.config.dec_layers {
            x = transformer_layer(
                t,
                p.view(false),
                &format!("dec.layer{i}"),
                x,
                self.config.heads,
                Some(&mask),
            )?;
        }
        t.slice_rows(x, 0, 1)
    }

    /// Decoder sequence for inspection (`(1 + N_l + HW) x D`).
    pub fn decoder_sequence(
        &self,
        t: &mut Tape,
        p: &BoundParams,
        input: &GroundingInput<'_>,
    ) -> Result<Var> {
        let token = self.target_token(t, p, input.prior)?;
        let text = self.encode_text(t, p, input.token_ids)?;
        let visual = self.encode_image(t, p, input.image)?;
        t.concat_rows(&[token, text, visual])
    }

    /// MLP head with logistic squash, `1 x 4`.
    pub fn predict_box(&self, t: &mut Tape, p: &BoundParams, token: Var) -> Result<Var> {
        let h = affine_ln(t, token, p.var("head.ln_g"), p.var("head.ln_b"))?;
        let h = linear(t, h, p.var("head.w1"), p.var("head.b1"))?;
        let h = t.gelu(h);
        let h = linear(t, h, p.var("head.w2"), p.var("head.b2"))?;
        let h = t.gelu(h);
        let o = linear(t, h, p.var("head.w3"), p.var("head.b3"))?;
        Ok(t.sigmoid(o))
    }

    /// Full graph from inputs to the `1 x 4` box.
    pub fn build(&self, t: &mut Tape, p: &BoundParams, input: &GroundingInput<'_>) -> Result<Var> {
        let token = self.target_token(t, p, input.prior)?;
        let text = self.encode_text(t, p, input.token_ids)?;
        let visual = self.encode_image(t, p, input.image)?;
        let out = self.decode(t, p, token, text, visual, input.token_ids)?;
        self.predict_box(t, p, out)
    }

    fn bind(&self, t: &mut Tape, params: &ModelParams, input: &GroundingInput<'_>) -> BoundParams {
        let frozen = self.config.freeze_prior_encoder && matches!(input.prior, PriorInput::Image(_));
        BoundParams::bind(t, params, frozen)
    }

    pub fn predict(&self, params: &ModelParams, input: &GroundingInput<'_>) -> Result<BBox> {
        self.check_params(params)?;
        let mut t = Tape::new();
        let p = self.bind(&mut t, params, input);
        let out = self.build(&mut t, &p, input)?;
        box_of(t.value(out))
    }

    /// Loss against `target` and gradients for every parameter array, in
    /// [`ModelParams`] order.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams,
        input: &GroundingInput<'_>,
        target: &BBox,
        weights: LossWeights,
    ) -> Result<(BBox, LossValue, Vec<Tensor2D>)> {
        self.check_params(params)?;
        let mut t = Tape::new();
        let p = self.bind(&mut t, params, input);
        let out = self.build(&mut t, &p, input)?;
        let pred = box_of(t.value(out))?;
        let (loss, g) = grounding_loss_grad(&pred, target, weights);
        let seed = Tensor2D::row_vector(g.to_vec());
        let mut grads: Gradients = t.backward(out, &seed)?;
        let gs = p
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("every parameter is a leaf"))
            .collect();
        Ok((pred, loss, gs))
    }

    pub fn loss(
        &self,
        params: &ModelParams,
        input: &GroundingInput<'_>,
        target: &BBox,
        weights: LossWeights,
    ) -> Result<LossValue> {
        let pred = self.predict(params, input)?;
        Ok(grounding_loss_grad(&pred, target, weights).0)
    }
}

fn box_of(t: &Tensor2D) -> Result<BBox> {
    let d = t.data();
    BBox::new(d[0], d[1], d[2], d[3])
}

/// Token ids for a sample under this config.
pub fn encode_tokens(sample: &QuerySample, config: &ModelConfig) -> Result<Vec<usize>> {
    vocab::encode(&sample.tokens, config.max_query_len)
}

/// End-to-end forward on one sample: rasterize, encode, decode, predict,
/// score against the sample's target box.
pub fn forward(
    model: &GroundingModel,
    sample: &QuerySample,
    scene: &SceneSpec,
    params: &ModelParams,
    use_prior: bool,
) -> Result<(BBox, LossValue)> {
    let image = rasterize(scene);
    let ids = encode_tokens(sample, model.config())?;
    let prior_img;
    let prior = if use_prior {
        prior_img = render_prior(&sample.tokens, model.config().canvas)?;
        PriorInput::Image(&prior_img.image)
    } else {
        PriorInput::Off
    };
    let input = GroundingInput {
        token_ids: &ids,
        image: &image,
        prior,
    };
    let pred = model.predict(params, &input)?;
    let loss = grounding_loss_grad(&pred, &sample.target_box, LossWeights::default()).0;
    Ok((pred, loss))
}

#[cfg(test)]
mod tests;
