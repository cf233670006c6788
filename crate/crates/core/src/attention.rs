//! Query/key/value attention with semantic support masks.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::scene::ImageBuffer;
use crate::segmatch::{self, AttentionMask, ClassMatch, SegmatchError, SemanticMap};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("mask row {row} has no admissible key")]
    EmptyRow { row: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error(transparent)]
    Segmatch(#[from] SegmatchError),
}

/// `tokens x dim` row-major matrix of token features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenTensor {
    pub fn new(tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self, AttentionError> {
        if data.len() != tokens * dim {
            return Err(AttentionError::DimensionMismatch(format!(
                "{} values for a {tokens}x{dim} tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite("token tensor"));
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Self {
        Self {
            tokens,
            dim,
            data: vec![0.0; tokens * dim],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            tokens: self.tokens,
            dim: self.dim,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.tokens, self.dim, &self.data)
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = m.transpose().as_slice().to_vec();
        Self {
            tokens: m.nrows(),
            dim: m.ncols(),
            data,
        }
    }
}

/// Square projection matrices applied on the right: `Q = F · W_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

impl ProjectionWeights {
    pub fn identity(dim: usize) -> Self {
        let eye = DMatrix::identity(dim, dim);
        Self {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye,
        }
    }
}

/// Projects features into queries, keys and values.
pub fn project_qkv(
    features: &TokenTensor,
    weights: &ProjectionWeights,
) -> Result<(TokenTensor, TokenTensor, TokenTensor), AttentionError> {
    let d = features.dim;
    for (name, w) in [("W_q", &weights.w_q), ("W_k", &weights.w_k), ("W_v", &weights.w_v)] {
        if w.nrows() != d || w.ncols() != d {
            return Err(AttentionError::DimensionMismatch(format!(
                "{name} is {}x{}, features have dim {d}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite("projection weights"));
        }
    }
    let f = features.to_matrix();
    Ok((
        TokenTensor::from_matrix(&(&f * &weights.w_q)),
        TokenTensor::from_matrix(&(&f * &weights.w_k)),
        TokenTensor::from_matrix(&(&f * &weights.w_v)),
    ))
}

/// How a false mask entry enters the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskSemantics {
    /// Masked keys are removed from the softmax support (logit −∞).
    #[default]
    Support,
    /// The logit is multiplied by the mask bit, so masked keys keep weight `e^0`.
    Multiplicative,
}

/// Row-stochastic attention weights, `rows x cols` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AttentionScores {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }
}

fn check_shapes(q: &TokenTensor, k: &TokenTensor, mask: &AttentionMask) -> Result<(), AttentionError> {
    if q.dim != k.dim {
        return Err(AttentionError::DimensionMismatch(format!(
            "query dim {} vs key dim {}",
            q.dim, k.dim
        )));
    }
    if mask.rows != q.tokens || mask.cols != k.tokens {
        return Err(AttentionError::DimensionMismatch(format!(
            "mask is {}x{}, expected {}x{}",
            mask.rows, mask.cols, q.tokens, k.tokens
        )));
    }
    Ok(())
}

/// Softmax over `(q_i · k_j) / √d` restricted by `mask`, written into `out`.
fn softmax_row(
    q: &TokenTensor,
    k: &TokenTensor,
    mask: &AttentionMask,
    semantics: MaskSemantics,
    i: usize,
    out: &mut [f64],
) -> Result<(), AttentionError> {
    let scale = 1.0 / (q.dim as f64).sqrt();
    let qi = q.row(i);
    let mut max = f64::NEG_INFINITY;
    for (j, o) in out.iter_mut().enumerate() {
        let logit = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        *o = match (mask.get(i, j), semantics) {
            (true, _) => logit,
            (false, MaskSemantics::Support) => f64::NEG_INFINITY,
            (false, MaskSemantics::Multiplicative) => 0.0,
        };
        max = max.max(*o);
    }
    if max == f64::NEG_INFINITY {
        return Err(AttentionError::EmptyRow { row: i });
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = if *o == f64::NEG_INFINITY { 0.0 } else { (*o - max).exp() };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    Ok(())
}

/// Post-softmax weights; entries outside the mask are exactly zero.
pub fn attention_scores(
    q: &TokenTensor,
    k: &TokenTensor,
    mask: &AttentionMask,
) -> Result<AttentionScores, AttentionError> {
    attention_scores_with(q, k, mask, MaskSemantics::Support)
}

pub fn attention_scores_with(
    q: &TokenTensor,
    k: &TokenTensor,
    mask: &AttentionMask,
    semantics: MaskSemantics,
) -> Result<AttentionScores, AttentionError> {
    check_shapes(q, k, mask)?;
    let cols = k.tokens;
    let mut weights = vec![0.0; q.tokens * cols];
    if cols > 0 {
        weights
            .par_chunks_mut(cols)
            .enumerate()
            .try_for_each(|(i, row)| softmax_row(q, k, mask, semantics, i, row))?;
    }
    Ok(AttentionScores {
        rows: q.tokens,
        cols,
        weights,
    })
}

/// Masked cross-image attention: each output row is the softmax-weighted
/// average of the style values over the row's admissible keys. An all-true
/// mask gives plain attention.
pub fn masked_cross_attention(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    mask: &AttentionMask,
) -> Result<TokenTensor, AttentionError> {
    masked_cross_attention_with(q, k, v, mask, MaskSemantics::Support)
}

pub fn masked_cross_attention_with(
    q: &TokenTensor,
    k: &TokenTensor,
    v: &TokenTensor,
    mask: &AttentionMask,
    semantics: MaskSemantics,
) -> Result<TokenTensor, AttentionError> {
    if k.tokens != v.tokens {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} keys vs {} values",
            k.tokens, v.tokens
        )));
    }
    let scores = attention_scores_with(q, k, mask, semantics)?;
    let mut out = TokenTensor::zeros(q.tokens, v.dim);
    if v.dim > 0 {
        out.data.par_chunks_mut(v.dim).enumerate().for_each(|(i, row)| {
            for (j, w) in scores.row(i).iter().enumerate() {
                if *w != 0.0 {
                    for (o, x) in row.iter_mut().zip(v.row(j)) {
                        *o += w * x;
                    }
                }
            }
        });
    }
    Ok(out)
}

/// Mean colour of every `patch x patch` block, row-major over the patch grid.
pub fn patch_means(img: &ImageBuffer, patch: usize) -> TokenTensor {
    let (gw, gh, c) = (img.width / patch, img.height / patch, img.channels);
    let mut out = TokenTensor::zeros(gw * gh, c);
    let norm = 1.0 / (patch * patch) as f64;
    for gy in 0..gh {
        for gx in 0..gw {
            let t = gy * gw + gx;
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    for (ch, v) in img.pixel(x, y).iter().enumerate() {
                        out.data[t * c + ch] += *v as f64 * norm;
                    }
                }
            }
        }
    }
    out
}

/// Patch-statistics appearance transfer.
///
/// Both images are cut into `patch`-sized tokens whose features are their mean
/// colours. Each source token attends (identity projections, logits divided by
/// `temperature`) to the style tokens admitted by the semantic mask, and its
/// patch is shifted so that its mean equals the attended style mean. Within-patch
/// detail is kept; the result is clamped to `[0, 1]`.
pub fn toy_semantic_transfer(
    src: &ImageBuffer,
    style: &ImageBuffer,
    src_map: &SemanticMap,
    style_map: &SemanticMap,
    matching: &ClassMatch,
    patch: usize,
    temperature: f64,
) -> Result<ImageBuffer, AttentionError> {
    let (grid_w, grid_h, mask) = transfer_mask(src, style, src_map, style_map, matching, patch)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AttentionError::InvalidTemperature(temperature));
    }
    let q = patch_means(src, patch);
    let kv = patch_means(style, patch);
    let attended = masked_cross_attention(&q.scaled(1.0 / temperature), &kv, &kv, &mask)?;
    let mut out = src.clone();
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let t = gy * grid_w + gx;
            let (old, new) = (q.row(t), attended.row(t));
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    for (ch, v) in out.pixel_mut(x, y).iter_mut().enumerate() {
                        *v = (*v as f64 - old[ch] + new[ch]) as f32;
                    }
                }
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// Validates transfer inputs and builds the patch-grid attention mask.
pub fn transfer_mask(
    src: &ImageBuffer,
    style: &ImageBuffer,
    src_map: &SemanticMap,
    style_map: &SemanticMap,
    matching: &ClassMatch,
    patch: usize,
) -> Result<(usize, usize, AttentionMask), AttentionError> {
    let dims = |w: usize, h: usize| format!("{w}x{h}");
    let want = dims(src.width, src.height);
    for (name, w, h) in [
        ("style image", style.width, style.height),
        ("source map", src_map.width, src_map.height),
        ("style map", style_map.width, style_map.height),
    ] {
        if dims(w, h) != want {
            return Err(AttentionError::DimensionMismatch(format!(
                "{name} is {}, source image is {want}",
                dims(w, h)
            )));
        }
    }
    if src.channels != style.channels {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} source channels vs {} style channels",
            src.channels, style.channels
        )));
    }
    if patch == 0 || !src.width.is_multiple_of(patch) || !src.height.is_multiple_of(patch) {
        return Err(AttentionError::DimensionMismatch(format!(
            "patch {patch} does not divide {want}"
        )));
    }
    let (gw, gh) = (src.width / patch, src.height / patch);
    let src_d = segmatch::downsample_map_to(src_map, gw, gh)?;
    let style_d = segmatch::downsample_map_to(style_map, gw, gh)?;
    let mask = segmatch::build_attention_mask(&src_d, &style_d, matching)?;
    Ok((gw, gh, mask))
}
