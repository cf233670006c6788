//! Scene data: raster buffers, cameras, manifests and the synthetic generator.

mod camera;
mod manifest;
pub mod raster;
pub mod synth;

pub use camera::{CameraIntrinsics, CameraPose};
pub use manifest::{load_scene, save_scene, Frame, FrameKey, Scene};
pub use raster::{read_raster, write_raster, Raster};
pub use synth::{synth_scene, GroundTruth, PairTruth, PlaneSpec, SynthConfig, Texture};

use std::path::PathBuf;

/// Errors raised while reading, writing or validating scene data.
#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected magic {expected:?}, found {found:?}")]
    MagicMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{context}: malformed header: {reason}")]
    MalformedHeader { context: String, reason: String },
    #[error("frame {frame}: {field} file {path} does not exist")]
    MissingFile {
        frame: usize,
        field: FrameKey,
        path: PathBuf,
    },
    #[error("frame {frame}: {field} is {found_w}x{found_h}x{found_c}, expected {expected}")]
    DimensionMismatch {
        frame: usize,
        field: FrameKey,
        found_w: usize,
        found_h: usize,
        found_c: usize,
        expected: String,
    },
    #[error("frame {frame}: {field} uses label id {id} which is not in the label table")]
    UnknownLabelId { frame: usize, field: FrameKey, id: u16 },
    #[error("invalid buffer: {0}")]
    InvalidBuffer(String),
    #[error("degenerate trajectory: camera {frame} lies inside plane {plane:?}")]
    DegenerateTrajectory { frame: usize, plane: String },
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
}

/// Row-major image with 1 or 3 channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    /// Black image.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Wraps `data`, checking its length and that every value is finite.
    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, SceneError> {
        if channels != 1 && channels != 3 {
            return Err(SceneError::InvalidBuffer(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(SceneError::InvalidBuffer(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(SceneError::InvalidBuffer(format!(
                "image contains non-finite value {v}"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    /// Channel values of pixel `(x, y)`.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Metric depth raster with a validity mask. Invalid pixels store 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a depth map, marking non-positive or non-finite entries invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), width * height, "depth length mismatch");
        let valid: Vec<bool> = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        let data = values
            .into_iter()
            .zip(&valid)
            .map(|(v, ok)| if *ok { v } else { 0.0 })
            .collect();
        Self {
            width,
            height,
            data,
            valid,
        }
    }

    pub fn constant(width: usize, height: usize, depth: f32) -> Self {
        Self::from_values(width, height, vec![depth; width * height])
    }

    /// Minimum and maximum over valid pixels, `None` if none are valid.
    pub fn valid_range(&self) -> Option<(f32, f32)> {
        self.data
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .fold(None, |acc, (d, _)| match acc {
                None => Some((*d, *d)),
                Some((lo, hi)) => Some((lo.min(*d), hi.max(*d))),
            })
    }
}

/// Per-pixel world-coordinate points with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
            valid: vec![false; width * height],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_lengths_and_channels() {
        assert!(ImageBuffer::from_data(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageBuffer::from_data(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::from_data(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(ImageBuffer::from_data(2, 2, 1, vec![0.5; 4]).is_ok());
    }

    #[test]
    fn depth_marks_holes_invalid() {
        let d = DepthMap::from_values(3, 1, vec![1.0, 0.0, f32::INFINITY]);
        assert_eq!(d.valid, vec![true, false, false]);
        assert_eq!(d.data, vec![1.0, 0.0, 0.0]);
        assert_eq!(d.valid_range(), Some((1.0, 1.0)));
    }
}
