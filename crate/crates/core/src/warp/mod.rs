//! Two-view geometry for style lifting: flow from pointmaps, forward
//! softmax splatting, multi-frame blending, frame selection and the refiner
//! condition.

mod splat;

pub use splat::{
    blend_history, importance_from_depth, softmax_splat, softmax_splat_with_stats, SplatParams, SplatStats, WarpResult,
};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::raster::FloatRaster;
use crate::scene::{CameraIntrinsics, CameraPose, DepthMap, Pointmap};
use crate::SeededRng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WarpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no warps to blend")]
    EmptyList,
    #[error("warp ages must be at least 1, got {0}")]
    InvalidAge(usize),
    #[error("frame history is empty")]
    EmptyHistory,
    #[error("history must end at the frame before {target}, found {found:?}")]
    InvalidHistory { target: usize, found: Option<usize> },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// Per-pixel displacement (target minus source, pixels) with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<[f32; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField {
    /// All-invalid zero flow.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            flow: vec![[0.0; 2]; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Valid flow with the same displacement everywhere.
    pub fn uniform(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        Self {
            width,
            height,
            flow: vec![[dx, dy]; width * height],
            valid: vec![true; width * height],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Points at or behind this camera depth are invalid.
    pub z_min: f64,
    /// Projections may fall this many pixels outside the target image.
    pub margin: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            z_min: 1e-6,
            margin: 0.0,
        }
    }
}

/// Slack in pixels when testing whether a projection lands inside the image.
pub const EDGE_TOLERANCE: f64 = 1e-3;

/// Flow from a world-coordinate pointmap into a target camera.
///
/// Pixels are invalid when their point is invalid, at or behind `z_min`, or
/// projects outside the target image (widened by `margin`).
pub fn flow_from_pointmaps(
    pointmap: &Pointmap,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    params: FlowParams,
) -> FlowField {
    let (w, h) = (pointmap.width, pointmap.height);
    let slack = params.margin + EDGE_TOLERANCE;
    let (max_u, max_v) = ((w - 1) as f64 + slack, (h - 1) as f64 + slack);
    let mut flow = FlowField::new(w, h);
    flow.flow
        .par_chunks_mut(w)
        .zip(flow.valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (frow, vrow))| {
            for x in 0..w {
                let i = y * w + x;
                if !pointmap.valid[i] {
                    continue;
                }
                let p = pointmap.data[i];
                let world = nalgebra::Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                let cam = pose.world_to_camera(&world);
                if cam.z <= params.z_min {
                    continue;
                }
                let (u, v) = intrinsics.project(&cam);
                if u < -slack || v < -slack || u > max_u || v > max_v {
                    continue;
                }
                frow[x] = [(u - x as f64) as f32, (v - y as f64) as f32];
                vrow[x] = true;
            }
        });
    flow
}

/// Which previously stylized frames feed the next one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Only the immediately preceding frame.
    LastOnly,
    /// Every stylized frame so far.
    AllHistory,
    /// The preceding frame plus two uniformly drawn older frames.
    #[default]
    LastPlusTwoRandom,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "last" | "last-only" => Ok(Self::LastOnly),
            "all" | "all-history" => Ok(Self::AllHistory),
            "ours" | "last-plus-two-random" => Ok(Self::LastPlusTwoRandom),
            other => Err(format!("unknown strategy {other:?} (expected last, all or ours)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSelection {
    pub strategy: SelectionStrategy,
    /// Chosen history indices, ascending.
    pub indices: Vec<usize>,
}

/// Picks source frames for target `target` from `history`, whose maximum
/// must be `target - 1`.
pub fn select_frames(
    target: usize,
    history: &[usize],
    strategy: SelectionStrategy,
    rng: &mut SeededRng,
) -> Result<FrameSelection, WarpError> {
    let Some(&last) = history.iter().max() else {
        return Err(WarpError::EmptyHistory);
    };
    if target == 0 || last != target - 1 {
        return Err(WarpError::InvalidHistory {
            target,
            found: Some(last),
        });
    }
    let mut older: Vec<usize> = history.iter().copied().filter(|&k| k != last).collect();
    older.sort_unstable();
    older.dedup();
    let mut indices = match strategy {
        SelectionStrategy::LastOnly => vec![last],
        SelectionStrategy::AllHistory => {
            let mut all = older.clone();
            all.push(last);
            all
        }
        SelectionStrategy::LastPlusTwoRandom => {
            let take = older.len().min(2);
            let mut chosen: Vec<usize> = index::sample(rng, older.len(), take)
                .into_iter()
                .map(|i| older[i])
                .collect();
            chosen.push(last);
            chosen
        }
    };
    indices.sort_unstable();
    Ok(FrameSelection { strategy, indices })
}

/// Refiner input: warped RGB, warp mask and normalized depth, 5 channels per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerCondition {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub const CONDITION_CHANNELS: usize = 5;

impl RefinerCondition {
    #[inline]
    fn at(&self, p: usize) -> &[f32] {
        &self.data[p * CONDITION_CHANNELS..(p + 1) * CONDITION_CHANNELS]
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f32; 3] {
        let px = self.at(y * self.width + x);
        [px[0], px[1], px[2]]
    }

    pub fn mask(&self, x: usize, y: usize) -> bool {
        self.mask_at(y * self.width + x)
    }

    pub fn mask_at(&self, p: usize) -> bool {
        self.at(p)[3] == 1.0
    }

    pub fn depth_at(&self, p: usize) -> f32 {
        self.at(p)[4]
    }

    pub fn covered_count(&self) -> usize {
        (0..self.width * self.height).filter(|&p| self.mask_at(p)).count()
    }

    pub fn to_raster(&self) -> FloatRaster {
        FloatRaster {
            width: self.width,
            height: self.height,
            channels: CONDITION_CHANNELS,
            data: self.data.clone(),
        }
    }

    pub fn from_raster(r: FloatRaster) -> Result<Self, WarpError> {
        if r.channels != CONDITION_CHANNELS {
            return Err(WarpError::ShapeMismatch(format!(
                "condition raster has {} channels, expected {CONDITION_CHANNELS}",
                r.channels
            )));
        }
        Ok(Self {
            width: r.width,
            height: r.height,
            data: r.data,
        })
    }
}

/// Depth rescaled to `[0, 1]` over valid pixels; a constant map and invalid
/// pixels map to 0.
pub fn normalized_depth(depth: &DepthMap) -> Vec<f32> {
    let Some((lo, hi)) = depth.valid_range() else {
        return vec![0.0; depth.data.len()];
    };
    let range = hi - lo;
    depth
        .data
        .iter()
        .zip(&depth.valid)
        .map(|(d, ok)| if *ok && range > 0.0 { (d - lo) / range } else { 0.0 })
        .collect()
}

/// Stacks warped colour, warp mask and normalized depth.
pub fn compose_condition(warped: &WarpResult, depth: &DepthMap) -> Result<RefinerCondition, WarpError> {
    let img = &warped.image;
    if img.width != depth.width || img.height != depth.height {
        return Err(WarpError::ShapeMismatch(format!(
            "warp is {}x{}, depth is {}x{}",
            img.width, img.height, depth.width, depth.height
        )));
    }
    let nd = normalized_depth(depth);
    let mut data = Vec::with_capacity(img.pixel_count() * CONDITION_CHANNELS);
    for p in 0..img.pixel_count() {
        let px = &img.data[p * img.channels..(p + 1) * img.channels];
        let rgb = if img.channels == 3 {
            [px[0], px[1], px[2]]
        } else {
            [px[0]; 3]
        };
        data.extend_from_slice(&rgb);
        data.push(if warped.mask[p] { 1.0 } else { 0.0 });
        data.push(nd[p]);
    }
    Ok(RefinerCondition {
        width: img.width,
        height: img.height,
        data,
    })
}
