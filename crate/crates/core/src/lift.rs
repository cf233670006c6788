//! Autoregressive multi-view style lifting.
//!
//! Starting from one stylized frame, every later frame is produced by warping
//! a selection of already-stylized frames into it, blending the warps,
//! attaching the frame's depth, and handing the result to a [`Refiner`] that
//! completes missing pixels.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{self, Denoiser, DiffusionError};
use crate::scene::{GroundTruth, ImageBuffer, Scene};
use crate::warp::{
    self, blend_history, compose_condition, flow_from_pointmaps, importance_from_depth, select_frames, softmax_splat,
    FlowParams, SelectionStrategy, SplatParams, WarpError, WarpResult,
};
use crate::SeededRng;

pub use crate::warp::RefinerCondition;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LiftError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("seed frame {seed} out of range for a {frames}-frame scene")]
    SeedOutOfRange { seed: usize, frames: usize },
    #[error("frame {frame} receives no pixels from frames {sources:?}")]
    NoOverlap { frame: usize, sources: Vec<usize> },
    #[error("condition has no covered pixels to fill from")]
    AllMissing,
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Completes a warped condition into a full stylized frame.
pub trait Refiner: Send + Sync {
    fn refine(&self, condition: &RefinerCondition, rng: &mut SeededRng) -> Result<ImageBuffer, LiftError>;
}

/// Fills uncovered pixels with the discrete harmonic interpolant of the
/// covered ones (4-neighbour Laplace equation, free boundary at the image
/// border). Covered pixels pass through unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicFillRefiner {
    /// Stop once no value changes by more than this in a sweep.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Over-relaxation factor in `(0, 2)`.
    pub omega: f64,
}

/// Deterministic hole-filling refiner.
pub fn diffusion_fill_refiner() -> HarmonicFillRefiner {
    HarmonicFillRefiner {
        tolerance: 1e-6,
        max_sweeps: 200_000,
        omega: 1.85,
    }
}

fn condition_rgb(cond: &RefinerCondition) -> Vec<f64> {
    let mut out = Vec::with_capacity(cond.width * cond.height * 3);
    for y in 0..cond.height {
        for x in 0..cond.width {
            out.extend(cond.rgb(x, y).iter().map(|v| *v as f64));
        }
    }
    out
}

fn to_image(width: usize, height: usize, rgb: &[f64]) -> ImageBuffer {
    let data = rgb.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    ImageBuffer::from_data(width, height, 3, data).expect("finite rgb")
}

impl HarmonicFillRefiner {
    /// Solves the fill on an RGB buffer in place.
    pub fn fill(&self, width: usize, height: usize, rgb: &mut [f64], known: &[bool]) -> Result<(), LiftError> {
        let n = width * height;
        let known_count = known.iter().filter(|k| **k).count();
        if known_count == 0 {
            return Err(LiftError::AllMissing);
        }
        if known_count == n {
            return Ok(());
        }
        let mut mean = [0.0; 3];
        for p in (0..n).filter(|&p| known[p]) {
            for c in 0..3 {
                mean[c] += rgb[p * 3 + c] / known_count as f64;
            }
        }
        let holes: Vec<usize> = (0..n).filter(|&p| !known[p]).collect();
        for &p in &holes {
            rgb[p * 3..p * 3 + 3].copy_from_slice(&mean);
        }
        for _ in 0..self.max_sweeps {
            let mut max_change: f64 = 0.0;
            for &p in &holes {
                let (x, y) = (p % width, p / width);
                let mut sum = [0.0; 3];
                let mut count = 0.0;
                let mut add = |q: usize| {
                    for c in 0..3 {
                        sum[c] += rgb[q * 3 + c];
                    }
                    count += 1.0;
                };
                if x > 0 {
                    add(p - 1);
                }
                if x + 1 < width {
                    add(p + 1);
                }
                if y > 0 {
                    add(p - width);
                }
                if y + 1 < height {
                    add(p + width);
                }
                if count == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let old = rgb[p * 3 + c];
                    let new = old + self.omega * (sum[c] / count - old);
                    rgb[p * 3 + c] = new;
                    max_change = max_change.max((new - old).abs());
                }
            }
            if max_change <= self.tolerance {
                break;
            }
        }
        Ok(())
    }
}

impl Refiner for HarmonicFillRefiner {
    fn refine(&self, condition: &RefinerCondition, _rng: &mut SeededRng) -> Result<ImageBuffer, LiftError> {
        let known: Vec<bool> = (0..condition.width * condition.height)
            .map(|p| condition.mask_at(p))
            .collect();
        let mut rgb = condition_rgb(condition);
        self.fill(condition.width, condition.height, &mut rgb, &known)?;
        let mut out = to_image(condition.width, condition.height, &rgb);
        // Covered pixels must come through bit-exact.
        for p in (0..known.len()).filter(|&p| known[p]) {
            out.data[p * 3..p * 3 + 3].copy_from_slice(&condition.data[p * 5..p * 5 + 3]);
        }
        Ok(out)
    }
}

/// Conditional partial-diffusion refiner.
///
/// Runs a partial refinement of the warped image with the condition attached
/// to every denoiser call. With `reimpose` set, covered pixels are reset to
/// the warped colour noised to the current level after every reverse step,
/// so at the end they equal the warp exactly.
pub struct ToyDiffusionRefiner {
    pub denoiser: Arc<dyn Denoiser>,
    pub strength: f64,
    pub reimpose: bool,
}

pub fn toy_diffusion_refiner(denoiser: Arc<dyn Denoiser>, strength: f64) -> ToyDiffusionRefiner {
    ToyDiffusionRefiner {
        denoiser,
        strength,
        reimpose: true,
    }
}

impl Refiner for ToyDiffusionRefiner {
    fn refine(&self, condition: &RefinerCondition, rng: &mut SeededRng) -> Result<ImageBuffer, LiftError> {
        let warped = condition_rgb(condition);
        let known: Vec<bool> = (0..condition.width * condition.height)
            .map(|p| condition.mask_at(p))
            .collect();
        let schedule = self.denoiser.schedule().clone();
        let reimpose = self.reimpose;
        let mut hook = |t: usize, state: &mut [f64], rng: &mut SeededRng| {
            if !reimpose {
                return;
            }
            let ab = schedule.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for p in (0..known.len()).filter(|&p| known[p]) {
                for c in 0..3 {
                    let i = p * 3 + c;
                    let n = if b > 0.0 {
                        diffusion::standard_normal(1, rng)[0]
                    } else {
                        0.0
                    };
                    state[i] = a * warped[i] + b * n;
                }
            }
        };
        let out = diffusion::sdedit_refine_with(
            &warped,
            self.strength,
            self.denoiser.as_ref(),
            rng,
            Some(condition),
            &mut hook,
        )?;
        Ok(to_image(condition.width, condition.height, &out))
    }
}

/// Order in which frames are lifted away from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
    Both,
}

/// Where warps originate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpOrigin {
    /// Frames chosen by the selection strategy.
    #[default]
    Selected,
    /// Always and only the seed frame.
    SeedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftConfig {
    pub strategy: SelectionStrategy,
    pub gamma: f64,
    pub splat: SplatParams,
    pub flow: FlowParams,
    pub direction: Direction,
    pub origin: WarpOrigin,
    /// Refine frames with no coverage from an all-missing condition instead of failing.
    pub allow_gaps: bool,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::LastPlusTwoRandom,
            gamma: 1.0,
            splat: SplatParams::default(),
            flow: FlowParams::default(),
            direction: Direction::Forward,
            origin: WarpOrigin::Selected,
            allow_gaps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub sources: Vec<usize>,
    pub coverage: f64,
}

/// Result of a lift: stylized frames and warp masks by frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftState {
    pub stylized: BTreeMap<usize, ImageBuffer>,
    pub masks: BTreeMap<usize, Vec<bool>>,
    pub reports: Vec<FrameReport>,
    pub config: LiftConfig,
}

/// Warps stylized frame `source` into frame `target` of `scene`.
pub fn warp_frame(
    scene: &Scene,
    stylized: &ImageBuffer,
    source: usize,
    target: usize,
    config: &LiftConfig,
) -> Result<WarpResult, LiftError> {
    let (src, dst) = (&scene.frames[source], &scene.frames[target]);
    let flow = flow_from_pointmaps(&src.pointmap, &dst.pose, &dst.intrinsics, config.flow);
    let importance = importance_from_depth(&src.depth);
    Ok(softmax_splat(stylized, &flow, &importance, config.splat)?)
}

/// Lifts `stylized_seed` (frame `seed_index`'s stylization) to the rest of
/// the scene.
pub fn lift_sequence(
    scene: &Scene,
    stylized_seed: &ImageBuffer,
    seed_index: usize,
    refiner: &dyn Refiner,
    config: LiftConfig,
    rng: &mut SeededRng,
) -> Result<LiftState, LiftError> {
    if seed_index >= scene.len() {
        return Err(LiftError::SeedOutOfRange {
            seed: seed_index,
            frames: scene.len(),
        });
    }
    if stylized_seed.width != scene.width() || stylized_seed.height != scene.height() || stylized_seed.channels != 3 {
        return Err(LiftError::DimensionMismatch(format!(
            "stylized seed is {}x{}x{}, scene frames are {}x{}x3",
            stylized_seed.width,
            stylized_seed.height,
            stylized_seed.channels,
            scene.width(),
            scene.height()
        )));
    }
    let mut state = LiftState {
        stylized: BTreeMap::from([(seed_index, stylized_seed.clone())]),
        masks: BTreeMap::new(),
        reports: Vec::new(),
        config,
    };
    let forward: Vec<usize> = (seed_index..scene.len()).collect();
    let backward: Vec<usize> = (0..=seed_index).rev().collect();
    let chains = match config.direction {
        Direction::Forward => vec![forward],
        Direction::Backward => vec![backward],
        Direction::Both => vec![forward, backward],
    };
    for order in chains {
        lift_chain(scene, &order, refiner, &config, rng, &mut state)?;
    }
    Ok(state)
}

fn lift_chain(
    scene: &Scene,
    order: &[usize],
    refiner: &dyn Refiner,
    config: &LiftConfig,
    rng: &mut SeededRng,
    state: &mut LiftState,
) -> Result<(), LiftError> {
    for pos in 1..order.len() {
        let target = order[pos];
        let history: Vec<usize> = (0..pos).collect();
        let chosen = match config.origin {
            WarpOrigin::Selected => select_frames(pos, &history, config.strategy, rng)?.indices,
            WarpOrigin::SeedOnly => vec![0],
        };
        let mut warps = Vec::with_capacity(chosen.len());
        for &k in &chosen {
            let source = order[k];
            let warp = warp_frame(scene, &state.stylized[&source], source, target, config)?;
            warps.push((warp, pos - k));
        }
        let blended = blend_history(&warps, config.gamma)?;
        let sources: Vec<usize> = chosen.iter().map(|&k| order[k]).collect();
        if !blended.mask.iter().any(|m| *m) && !config.allow_gaps {
            return Err(LiftError::NoOverlap { frame: target, sources });
        }
        let condition = compose_condition(&blended, &scene.frames[target].depth)?;
        let mut frame_rng = crate::split_rng(rng);
        let out = refiner.refine(&condition, &mut frame_rng)?;
        if out.width != scene.width() || out.height != scene.height() || out.channels != 3 {
            return Err(LiftError::DimensionMismatch(format!(
                "refiner returned {}x{}x{}",
                out.width, out.height, out.channels
            )));
        }
        state.reports.push(FrameReport {
            frame: target,
            sources,
            coverage: blended.covered_fraction(),
        });
        state.masks.insert(target, blended.mask);
        state.stylized.insert(target, out);
    }
    Ok(())
}

/// Mean over ordered frame pairs `(a, b)` of the squared difference between
/// frame `a` warped into `b` (ground-truth flow, depth-ordered splat) and
/// frame `b`, over target pixels that are covered and co-visible.
pub fn pairwise_consistency_mse(
    frames: &BTreeMap<usize, ImageBuffer>,
    scene: &Scene,
    truth: &GroundTruth,
    splat: SplatParams,
) -> Result<f64, LiftError> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (&a, img_a) in frames {
        let importance = importance_from_depth(&scene.frames[a].depth);
        for (&b, img_b) in frames {
            if a == b {
                continue;
            }
            let warped = warp::softmax_splat(img_a, &truth.pair(a, b).flow, &importance, splat)?;
            let covis = &truth.pair(b, a).covisible;
            let c = img_b.channels;
            let mut sum = 0.0;
            let mut n = 0usize;
            for p in 0..covis.len() {
                if !(covis[p] && warped.mask[p]) {
                    continue;
                }
                for ch in 0..c {
                    let d = warped.image.data[p * c + ch] as f64 - img_b.data[p * c + ch] as f64;
                    sum += d * d;
                }
                n += c;
            }
            if n > 0 {
                total += sum / n as f64;
                pairs += 1;
            }
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn condition(width: usize, rgb: &[[f32; 3]], mask: &[bool]) -> RefinerCondition {
        let mut data = Vec::new();
        for (c, m) in rgb.iter().zip(mask) {
            data.extend_from_slice(c);
            data.push(if *m { 1.0 } else { 0.0 });
            data.push(0.0);
        }
        RefinerCondition {
            width,
            height: rgb.len() / width,
            data,
        }
    }

    #[test]
    fn full_coverage_passes_through() {
        let rgb = [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        let cond = condition(2, &rgb, &[true, true]);
        let out = diffusion_fill_refiner()
            .refine(&cond, &mut crate::seeded_rng(0))
            .unwrap();
        assert_eq!(out.data, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    }

    #[test]
    fn single_hole_in_constant_field() {
        let rgb = [[0.3, 0.6, 0.9]; 9];
        let mut mask = [true; 9];
        mask[4] = false;
        let cond = condition(3, &rgb, &mask);
        let out = diffusion_fill_refiner()
            .refine(&cond, &mut crate::seeded_rng(0))
            .unwrap();
        for (a, b) in out.pixel(1, 1).iter().zip([0.3, 0.6, 0.9]) {
            assert!((*a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn strip_fills_with_linear_ramp() {
        let mut rgb = [[0.0f32; 3]; 7];
        rgb[6] = [1.0; 3];
        let mut mask = [false; 7];
        mask[0] = true;
        mask[6] = true;
        let out = diffusion_fill_refiner()
            .refine(&condition(7, &rgb, &mask), &mut crate::seeded_rng(0))
            .unwrap();
        for x in 0..7 {
            assert!((out.pixel(x, 0)[0] as f64 - x as f64 / 6.0).abs() < 1e-4);
        }
    }

    #[test]
    fn all_missing_is_an_error() {
        let cond = condition(2, &[[0.0; 3]; 2], &[false, false]);
        assert_eq!(
            diffusion_fill_refiner().refine(&cond, &mut crate::seeded_rng(0)),
            Err(LiftError::AllMissing)
        );
    }
}
