//! Piecewise-planar synthetic scenes rendered through a pinhole camera.
//!
//! Each pixel centre is ray-cast against a set of textured rectangles, which
//! gives exact depth, pointmaps, segmentation and, between any two frames,
//! analytic flow and co-visibility.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::raster::LabelGrid;
use super::{CameraIntrinsics, CameraPose, DepthMap, Frame, ImageBuffer, Pointmap, Scene, SceneError};
use crate::warp::FlowField;

/// Surface colour as a function of in-plane coordinates (metres).
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Constant([f64; 3]),
    /// `base + amplitude * (sin(2πu/pu + φu) + sin(2πv/pv + φv)) / 2`
    Waves {
        base: [f64; 3],
        amplitude: [f64; 3],
        period_u: f64,
        period_v: f64,
        phase_u: f64,
        phase_v: f64,
    },
}

impl Texture {
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        match self {
            Texture::Constant(c) => *c,
            Texture::Waves {
                base,
                amplitude,
                period_u,
                period_v,
                phase_u,
                phase_v,
            } => {
                let s = 0.5 * ((2.0 * PI * u / period_u + phase_u).sin() + (2.0 * PI * v / period_v + phase_v).sin());
                [0, 1, 2].map(|c| (base[c] + amplitude[c] * s).clamp(0.0, 1.0))
            }
        }
    }
}

/// Textured rectangle `origin + a·axis_u + b·axis_v`, `a ∈ [0, extent_u]`, `b ∈ [0, extent_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSpec {
    pub label: String,
    pub origin: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub extent_u: f64,
    pub extent_v: f64,
    pub texture: Texture,
}

impl PlaneSpec {
    fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v)
    }

    /// Ray parameter and in-plane coordinates of the hit, if inside the rectangle.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(self.origin - origin)) / denom;
        let rel = origin + dir * s - self.origin;
        let (a, b) = (rel.dot(&self.axis_u), rel.dot(&self.axis_v));
        const EDGE: f64 = 1e-9;
        let inside = (-EDGE..=self.extent_u + EDGE).contains(&a) && (-EDGE..=self.extent_v + EDGE).contains(&b);
        inside.then_some((s, a, b))
    }

    fn contains_point(&self, p: &Vector3<f64>) -> bool {
        let rel = p - self.origin;
        let (a, b) = (rel.dot(&self.axis_u), rel.dot(&self.axis_v));
        self.normal().dot(&rel).abs() < 1e-9 && (0.0..=self.extent_u).contains(&a) && (0.0..=self.extent_v).contains(&b)
    }
}

/// Synthetic scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub planes: Vec<PlaneSpec>,
    pub trajectory: Vec<CameraPose>,
    /// Standard deviation of additive Gaussian image noise.
    pub noise_level: f64,
}

/// Ground truth between an ordered frame pair `(i, j)`, over frame `i`'s pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTruth {
    /// Flow `i → j`; `valid` marks pixels whose surface point is visible in `j`.
    pub flow: FlowField,
    pub covisible: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub pairs: BTreeMap<(usize, usize), PairTruth>,
}

impl GroundTruth {
    pub fn pair(&self, from: usize, to: usize) -> &PairTruth {
        &self.pairs[&(from, to)]
    }
}

/// Label id reserved for rays that hit nothing.
pub const BACKGROUND_LABEL: u16 = 0;
const Z_MIN: f64 = 1e-6;

fn waves(base: [f64; 3], amplitude: [f64; 3], pu: f64, pv: f64, rng: &mut impl Rng) -> Texture {
    Texture::Waves {
        base,
        amplitude,
        period_u: pu,
        period_v: pv,
        phase_u: rng.random_range(0.0..2.0 * PI),
        phase_v: rng.random_range(0.0..2.0 * PI),
    }
}

impl SynthConfig {
    /// A room corner: back wall with a painting, a floor and a sofa front.
    /// Texture phases are drawn from `seed`; the trajectory is left empty.
    pub fn room_planes(seed: u64) -> Vec<PlaneSpec> {
        let mut rng = crate::seeded_rng(seed);
        let x = Vector3::x();
        let y = Vector3::y();
        vec![
            PlaneSpec {
                label: "wall".into(),
                origin: Vector3::new(-8.0, -5.0, 6.0),
                axis_u: x,
                axis_v: y,
                extent_u: 16.0,
                extent_v: 6.5,
                texture: waves([0.72, 0.68, 0.58], [0.14, 0.12, 0.1], 1.7, 1.1, &mut rng),
            },
            PlaneSpec {
                label: "floor".into(),
                origin: Vector3::new(-8.0, 1.5, 6.0),
                axis_u: x,
                axis_v: -Vector3::z(),
                extent_u: 16.0,
                extent_v: 8.0,
                texture: waves([0.45, 0.32, 0.22], [0.1, 0.08, 0.06], 1.3, 1.5, &mut rng),
            },
            PlaneSpec {
                label: "sofa".into(),
                origin: Vector3::new(-2.2, 0.3, 4.0),
                axis_u: x,
                axis_v: y,
                extent_u: 2.4,
                extent_v: 1.2,
                texture: waves([0.25, 0.35, 0.62], [0.06, 0.08, 0.12], 0.9, 0.7, &mut rng),
            },
            PlaneSpec {
                label: "painting".into(),
                origin: Vector3::new(0.9, -2.0, 5.95),
                axis_u: x,
                axis_v: y,
                extent_u: 2.2,
                extent_v: 1.6,
                texture: waves([0.78, 0.34, 0.22], [0.15, 0.12, 0.1], 0.8, 0.6, &mut rng),
            },
        ]
    }

    /// Sideways dolly with a slight pan, `frames` poses.
    pub fn pan(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        let n = frames.max(1);
        let trajectory = (0..n)
            .map(|k| {
                let s = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 - 0.5 };
                CameraPose::look_yaw(Vector3::new(0.8 * s, 0.0, 0.2 * s), -0.08 * s)
            })
            .collect();
        Self {
            width,
            height,
            focal: 0.9 * width as f64,
            planes: Self::room_planes(seed),
            trajectory,
            noise_level: 0.0,
        }
    }

    /// Out-and-back trajectory: the camera swings right and returns to its
    /// starting pose, so the last frame re-observes the first frame's content.
    pub fn revisiting(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        let n = frames.max(2);
        let trajectory = (0..n)
            .map(|k| {
                let s = (PI * k as f64 / (n - 1) as f64).sin();
                CameraPose::look_yaw(Vector3::new(1.2 * s, 0.0, 0.3 * s), 0.35 * s)
            })
            .collect();
        Self {
            width,
            height,
            focal: 0.9 * width as f64,
            planes: Self::room_planes(seed),
            trajectory,
            noise_level: 0.0,
        }
    }

    fn validate(&self) -> Result<(), SceneError> {
        if self.width < 8 || self.height < 8 {
            return Err(SceneError::InvalidConfig(format!(
                "resolution must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if self.trajectory.is_empty() {
            return Err(SceneError::InvalidConfig("trajectory is empty".into()));
        }
        if self.planes.is_empty() {
            return Err(SceneError::InvalidConfig("no planes".into()));
        }
        if !(self.focal > 0.0) || !(self.noise_level >= 0.0) {
            return Err(SceneError::InvalidConfig(
                "focal must be positive and noise non-negative".into(),
            ));
        }
        for p in &self.planes {
            let ortho = p.axis_u.dot(&p.axis_v).abs() < 1e-9
                && (p.axis_u.norm() - 1.0).abs() < 1e-9
                && (p.axis_v.norm() - 1.0).abs() < 1e-9;
            if !ortho || !(p.extent_u > 0.0 && p.extent_v > 0.0) {
                return Err(SceneError::InvalidConfig(format!(
                    "plane {:?} needs orthonormal axes and positive extents",
                    p.label
                )));
            }
        }
        for (frame, pose) in self.trajectory.iter().enumerate() {
            pose.validate()?;
            let c = pose.center();
            if let Some(p) = self.planes.iter().find(|p| p.contains_point(&c)) {
                return Err(SceneError::DegenerateTrajectory {
                    frame,
                    plane: p.label.clone(),
                });
            }
        }
        Ok(())
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    /// Label table: background plus one id per distinct plane label, in order.
    fn label_ids(&self) -> (BTreeMap<u16, String>, Vec<u16>) {
        let mut table = BTreeMap::from([(BACKGROUND_LABEL, "background".to_string())]);
        let mut ids = Vec::with_capacity(self.planes.len());
        for p in &self.planes {
            let id = match table.iter().find(|(_, name)| **name == p.label) {
                Some((id, _)) => *id,
                None => {
                    let id = table.len() as u16;
                    table.insert(id, p.label.clone());
                    id
                }
            };
            ids.push(id);
        }
        (table, ids)
    }
}

struct Hit {
    depth: f64,
    plane: usize,
    point: Vector3<f64>,
    u: f64,
    v: f64,
}

fn cast(planes: &[PlaneSpec], pose: &CameraPose, k: &CameraIntrinsics, px: f64, py: f64) -> Option<Hit> {
    let center = pose.center();
    let dir = pose.rotation.transpose() * k.ray(px, py);
    let mut best: Option<Hit> = None;
    for (idx, plane) in planes.iter().enumerate() {
        if let Some((s, u, v)) = plane.intersect(&center, &dir) {
            if s > Z_MIN && best.as_ref().is_none_or(|b| s < b.depth) {
                best = Some(Hit {
                    depth: s,
                    plane: idx,
                    point: center + dir * s,
                    u,
                    v,
                });
            }
        }
    }
    best
}

/// Renders every frame of `config` and the analytic ground truth between all
/// ordered frame pairs. Deterministic for a fixed `seed`.
pub fn synth_scene(config: &SynthConfig, seed: u64) -> Result<(Scene, GroundTruth), SceneError> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let k = config.intrinsics();
    let (labels, plane_ids) = config.label_ids();
    let mut rng = crate::seeded_rng(seed);
    let noise = Normal::new(0.0, config.noise_level.max(f64::MIN_POSITIVE)).expect("noise level validated");

    let mut frames = Vec::with_capacity(config.trajectory.len());
    let mut exact_points: Vec<Vec<Option<Vector3<f64>>>> = Vec::new();
    for pose in &config.trajectory {
        let mut image = ImageBuffer::new(w, h, 3);
        let mut depth = vec![0.0f32; w * h];
        let mut pointmap = Pointmap::new(w, h);
        let mut seg = vec![BACKGROUND_LABEL; w * h];
        let mut points = vec![None; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let Some(hit) = cast(&config.planes, pose, &k, x as f64, y as f64) else {
                    continue;
                };
                let color = config.planes[hit.plane].texture.sample(hit.u, hit.v);
                for (dst, c) in image.pixel_mut(x, y).iter_mut().zip(color) {
                    let noisy = if config.noise_level > 0.0 {
                        c + noise.sample(&mut rng)
                    } else {
                        c
                    };
                    *dst = noisy.clamp(0.0, 1.0) as f32;
                }
                depth[i] = hit.depth as f32;
                pointmap.data[i] = [hit.point.x as f32, hit.point.y as f32, hit.point.z as f32];
                pointmap.valid[i] = true;
                seg[i] = plane_ids[hit.plane];
                points[i] = Some(hit.point);
            }
        }
        frames.push(Frame {
            image,
            depth: DepthMap::from_values(w, h, depth),
            pointmap,
            segmentation: LabelGrid {
                width: w,
                height: h,
                labels: seg,
            },
            intrinsics: k,
            pose: *pose,
        });
        exact_points.push(points);
    }

    let mut truth = GroundTruth::default();
    let n = frames.len();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                truth
                    .pairs
                    .insert((i, j), pair_truth(config, &k, &exact_points[i], &config.trajectory[j]));
            }
        }
    }
    Ok((Scene { frames, labels }, truth))
}

fn pair_truth(
    config: &SynthConfig,
    k: &CameraIntrinsics,
    points: &[Option<Vector3<f64>>],
    target: &CameraPose,
) -> PairTruth {
    let (w, h) = (config.width, config.height);
    let mut flow = FlowField::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(p) = points[i] else { continue };
            let cam = target.world_to_camera(&p);
            if cam.z <= Z_MIN {
                continue;
            }
            let (u, v) = k.project(&cam);
            let tol = crate::warp::EDGE_TOLERANCE;
            if !(-tol..=(w - 1) as f64 + tol).contains(&u) || !(-tol..=(h - 1) as f64 + tol).contains(&v) {
                continue;
            }
            let visible = cast(&config.planes, target, k, u, v)
                .is_some_and(|hit| (hit.depth - cam.z).abs() <= 1e-7 * cam.z.max(1.0));
            if visible {
                flow.flow[i] = [(u - x as f64) as f32, (v - y as f64) as f32];
                flow.valid[i] = true;
            }
        }
    }
    let covisible = flow.valid.clone();
    PairTruth { flow, covisible }
}
