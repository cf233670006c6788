use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::raster::{self, LabelGrid, Raster};
use super::{CameraIntrinsics, CameraPose, DepthMap, ImageBuffer, Pointmap, SceneError};
use crate::segmatch::SemanticMap;

/// Manifest field names, used to locate errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKey {
    Image,
    Depth,
    Pointmap,
    Segmentation,
    Intrinsics,
    Pose,
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameKey::Image => "image",
            FrameKey::Depth => "depth",
            FrameKey::Pointmap => "pointmap",
            FrameKey::Segmentation => "segmentation",
            FrameKey::Intrinsics => "intrinsics",
            FrameKey::Pose => "pose",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameEntry {
    image: PathBuf,
    depth: PathBuf,
    pointmap: PathBuf,
    segmentation: PathBuf,
    intrinsics: CameraIntrinsics,
    pose: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    frames: Vec<FrameEntry>,
    labels: BTreeMap<u16, String>,
}

/// One loaded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub pointmap: Pointmap,
    pub segmentation: LabelGrid,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// A loaded, cross-validated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frames: Vec<Frame>,
    pub labels: BTreeMap<u16, String>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].image.width
    }

    pub fn height(&self) -> usize {
        self.frames[0].image.height
    }

    /// Semantic map of frame `index` with the scene's label table.
    pub fn semantic_map(&self, index: usize) -> SemanticMap {
        let seg = &self.frames[index].segmentation;
        SemanticMap {
            width: seg.width,
            height: seg.height,
            labels: seg.labels.clone(),
            label_table: self.labels.clone(),
        }
    }

    /// Checks the cross-frame invariants that [`load_scene`] enforces.
    pub fn validate(&self) -> Result<(), SceneError> {
        let Some(first) = self.frames.first() else {
            return Err(SceneError::InvalidConfig("scene has no frames".into()));
        };
        let (w, h) = (first.image.width, first.image.height);
        let expected = format!("{w}x{h}");
        for (i, frame) in self.frames.iter().enumerate() {
            let dims = [
                (
                    FrameKey::Image,
                    frame.image.width,
                    frame.image.height,
                    frame.image.channels,
                ),
                (FrameKey::Depth, frame.depth.width, frame.depth.height, 1),
                (FrameKey::Pointmap, frame.pointmap.width, frame.pointmap.height, 4),
                (
                    FrameKey::Segmentation,
                    frame.segmentation.width,
                    frame.segmentation.height,
                    1,
                ),
            ];
            for (field, fw, fh, fc) in dims {
                if fw != w || fh != h {
                    return Err(SceneError::DimensionMismatch {
                        frame: i,
                        field,
                        found_w: fw,
                        found_h: fh,
                        found_c: fc,
                        expected: expected.clone(),
                    });
                }
            }
            if let Some(id) = frame
                .segmentation
                .labels
                .iter()
                .find(|id| !self.labels.contains_key(id))
            {
                return Err(SceneError::UnknownLabelId {
                    frame: i,
                    field: FrameKey::Segmentation,
                    id: *id,
                });
            }
            frame.intrinsics.validate().map_err(|e| SceneError::MalformedHeader {
                context: format!("frame {i} {}", FrameKey::Intrinsics),
                reason: e.to_string(),
            })?;
            frame.pose.validate().map_err(|e| SceneError::MalformedHeader {
                context: format!("frame {i} {}", FrameKey::Pose),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }
}

fn frame_file(index: usize, key: FrameKey) -> String {
    let ext = match key {
        FrameKey::Image => "rsim",
        FrameKey::Depth => "rsdp",
        FrameKey::Pointmap => "rspm",
        FrameKey::Segmentation => "rssg",
        FrameKey::Intrinsics | FrameKey::Pose => unreachable!("not a raster"),
    };
    format!("frame_{index:03}_{key}.{ext}")
}

/// Writes every raster plus `manifest.json` into `dir`; returns the manifest path.
pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<PathBuf, SceneError> {
    let dir = dir.as_ref();
    scene.validate()?;
    std::fs::create_dir_all(dir).map_err(|source| SceneError::IoFailure {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for (i, frame) in scene.frames.iter().enumerate() {
        let rasters = [
            (FrameKey::Image, Raster::Image(frame.image.clone())),
            (FrameKey::Depth, Raster::Depth(frame.depth.clone())),
            (FrameKey::Pointmap, Raster::Pointmap(frame.pointmap.clone())),
            (FrameKey::Segmentation, Raster::Segmentation(frame.segmentation.clone())),
        ];
        for (key, r) in &rasters {
            raster::write_raster(r, dir.join(frame_file(i, *key)))?;
        }
        frames.push(FrameEntry {
            image: frame_file(i, FrameKey::Image).into(),
            depth: frame_file(i, FrameKey::Depth).into(),
            pointmap: frame_file(i, FrameKey::Pointmap).into(),
            segmentation: frame_file(i, FrameKey::Segmentation).into(),
            intrinsics: frame.intrinsics,
            pose: serde_json::to_value(frame.pose).expect("pose serializes"),
        });
    }
    let manifest = ManifestFile {
        frames,
        labels: scene.labels.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    raster::write_bytes(&path, text.as_bytes())?;
    Ok(path)
}

/// Loads and cross-validates a scene manifest.
///
/// Raster paths are resolved relative to the manifest's directory.
pub fn load_scene(manifest_path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let manifest_path = manifest_path.as_ref();
    let text = raster::read_bytes(manifest_path)?;
    let manifest: ManifestFile = serde_json::from_slice(&text).map_err(|e| SceneError::MalformedHeader {
        context: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    if manifest.frames.is_empty() {
        return Err(SceneError::MalformedHeader {
            context: manifest_path.display().to_string(),
            reason: "manifest lists no frames".into(),
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, entry) in manifest.frames.iter().enumerate() {
        let load = |key: FrameKey, rel: &Path| -> Result<Raster, SceneError> {
            let path = base.join(rel);
            if !path.exists() {
                return Err(SceneError::MissingFile {
                    frame: i,
                    field: key,
                    path,
                });
            }
            raster::read_raster(&path).map_err(|e| locate(e, i, key))
        };
        let wrong_kind = |key: FrameKey, r: &Raster| SceneError::MalformedHeader {
            context: format!("frame {i} {key}"),
            reason: format!("expected a {key} raster, found {}", r.kind()),
        };
        let image = match load(FrameKey::Image, &entry.image)? {
            Raster::Image(img) => img,
            other => return Err(wrong_kind(FrameKey::Image, &other)),
        };
        let depth = match load(FrameKey::Depth, &entry.depth)? {
            Raster::Depth(d) => d,
            other => return Err(wrong_kind(FrameKey::Depth, &other)),
        };
        let pointmap = match load(FrameKey::Pointmap, &entry.pointmap)? {
            Raster::Pointmap(p) => p,
            other => return Err(wrong_kind(FrameKey::Pointmap, &other)),
        };
        let segmentation = match load(FrameKey::Segmentation, &entry.segmentation)? {
            Raster::Segmentation(s) => s,
            other => return Err(wrong_kind(FrameKey::Segmentation, &other)),
        };
        let pose: CameraPose = serde_json::from_value(entry.pose.clone()).map_err(|e| SceneError::MalformedHeader {
            context: format!("frame {i} {}", FrameKey::Pose),
            reason: e.to_string(),
        })?;
        frames.push(Frame {
            image,
            depth,
            pointmap,
            segmentation,
            intrinsics: entry.intrinsics,
            pose,
        });
    }
    let scene = Scene {
        frames,
        labels: manifest.labels,
    };
    scene.validate()?;
    Ok(scene)
}

fn locate(err: SceneError, frame: usize, key: FrameKey) -> SceneError {
    match err {
        SceneError::MalformedHeader { context, reason } => SceneError::MalformedHeader {
            context: format!("frame {frame} {key} ({context})"),
            reason,
        },
        SceneError::MagicMismatch { path, expected, found } => SceneError::MagicMismatch {
            path,
            expected: format!("{expected} for frame {frame} {key}"),
            found,
        },
        other => other,
    }
}
