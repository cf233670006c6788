//! Evaluation metrics: depth structure, image reconstruction and camera pose
//! deviation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::scene::{CameraPose, DepthMap, ImageBuffer};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no pixels selected for evaluation")]
    EmptyMask,
    #[error("image is {width}x{height}, need at least {min}x{min}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("length mismatch: {what} has {found}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("cannot align trajectories: {0}")]
    DegenerateAlignment(String),
    #[error("error list is empty")]
    EmptyErrors,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Ratio threshold for the delta accuracy.
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Depth metrics in percent (sq_rel scaled by 100 as well).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub valid_pixels: usize,
}

/// Compares `pred` against `reference` on pixels where `mask` is set and both
/// maps are valid. `None` selects every pixel.
pub fn depth_metrics(pred: &DepthMap, reference: &DepthMap, mask: Option<&[bool]>) -> Result<DepthMetricsReport> {
    if pred.width != reference.width || pred.height != reference.height {
        return Err(MetricsError::LengthMismatch {
            what: "predicted depth",
            found: pred.data.len(),
            expected: reference.data.len(),
        });
    }
    check_mask(mask, reference.data.len())?;
    let (mut abs, mut sq, mut good, mut n) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..reference.data.len() {
        if !(mask.is_none_or(|m| m[i]) && reference.valid[i] && pred.valid[i]) {
            continue;
        }
        let (p, r) = (pred.data[i] as f64, reference.data[i] as f64);
        abs += (p - r).abs() / r;
        sq += (p - r) * (p - r) / r;
        if (p / r).max(r / p) < DELTA1_THRESHOLD {
            good += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let n_f = n as f64;
    Ok(DepthMetricsReport {
        abs_rel: 100.0 * abs / n_f,
        sq_rel: 100.0 * sq / n_f,
        delta1: 100.0 * good as f64 / n_f,
        valid_pixels: n,
    })
}

fn check_mask(mask: Option<&[bool]>, len: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != len => Err(MetricsError::LengthMismatch {
            what: "mask",
            found: m.len(),
            expected: len,
        }),
        _ => Ok(()),
    }
}

fn check_images(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricsError::LengthMismatch {
            what: "image",
            found: b.data.len(),
            expected: a.data.len(),
        })
    }
}

/// Peak signal-to-noise ratio in dB with peak 1. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[bool]>) -> Result<f64> {
    check_images(a, b)?;
    check_mask(mask, a.pixel_count())?;
    let c = a.channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..a.pixel_count() {
        if !mask.is_none_or(|m| m[p]) {
            continue;
        }
        for ch in 0..c {
            let d = a.data[p * c + ch] as f64 - b.data[p * c + ch] as f64;
            sum += d * d;
        }
        n += c;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Rec. 601 luma for 3-channel images, identity for 1-channel ones.
pub fn grayscale(img: &ImageBuffer) -> Vec<f64> {
    match img.channels {
        1 => img.data.iter().map(|v| *v as f64).collect(),
        _ => img
            .data
            .chunks_exact(img.channels)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean structural similarity over all fully contained 11x11 windows.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_images(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            width: a.width,
            height: a.height,
            min: SSIM_WINDOW,
        });
    }
    let (ga, gb) = (grayscale(a), grayscale(b));
    let w = a.width;
    let g = gaussian_window();
    let (out_w, out_h) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    // Separable filtering of the five moment images.
    let moments: [Vec<f64>; 5] = [
        ga.clone(),
        gb.clone(),
        ga.iter().map(|v| v * v).collect(),
        gb.iter().map(|v| v * v).collect(),
        ga.iter().zip(&gb).map(|(x, y)| x * y).collect(),
    ];
    let filtered: Vec<Vec<f64>> = moments
        .iter()
        .map(|m| {
            let mut rows = vec![0.0; out_w * a.height];
            for y in 0..a.height {
                for x in 0..out_w {
                    rows[y * out_w + x] = (0..SSIM_WINDOW).map(|k| g[k] * m[y * w + x + k]).sum();
                }
            }
            let mut out = vec![0.0; out_w * out_h];
            for y in 0..out_h {
                for x in 0..out_w {
                    out[y * out_w + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * out_w + x]).sum();
                }
            }
            out
        })
        .collect();
    let mut total = 0.0;
    for i in 0..out_w * out_h {
        let (mu_a, mu_b) = (filtered[0][i], filtered[1][i]);
        let var_a = filtered[2][i] - mu_a * mu_a;
        let var_b = filtered[3][i] - mu_b * mu_b;
        let cov = filtered[4][i] - mu_a * mu_b;
        total += (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
            / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
    }
    Ok(total / (out_w * out_h) as f64)
}

/// Similarity transform mapping estimated into reference world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityAlignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityAlignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Closed-form least-squares similarity from estimated to reference camera
/// centres. When the centres are collinear the rotation is instead taken from
/// the camera orientations.
pub fn align_trajectories(est: &[CameraPose], reference: &[CameraPose]) -> Result<SimilarityAlignment> {
    check_pose_lengths(est, reference)?;
    let n = est.len() as f64;
    let ce: Vec<Vector3<f64>> = est.iter().map(CameraPose::center).collect();
    let cr: Vec<Vector3<f64>> = reference.iter().map(CameraPose::center).collect();
    let mean_e = ce.iter().sum::<Vector3<f64>>() / n;
    let mean_r = cr.iter().sum::<Vector3<f64>>() / n;
    let var_e: f64 = ce.iter().map(|c| (c - mean_e).norm_squared()).sum::<f64>() / n;
    let var_r: f64 = cr.iter().map(|c| (c - mean_r).norm_squared()).sum::<f64>() / n;
    let spread = var_e.max(var_r).max(1e-300);
    if var_e <= 1e-18 * spread.max(1.0) || var_r <= 1e-18 * spread.max(1.0) {
        return Err(MetricsError::DegenerateAlignment("all camera centres coincide".into()));
    }
    let mut cov = Matrix3::zeros();
    for (e, r) in ce.iter().zip(&cr) {
        cov += (r - mean_r) * (e - mean_e).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let rotation = if sv[1] > 1e-9 * sv[0] {
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        u * d * v_t
    } else {
        let mut acc = Matrix3::zeros();
        for (e, r) in est.iter().zip(reference) {
            acc += r.rotation.transpose() * e.rotation;
        }
        project_to_rotation(&acc)
    };
    let mut num = 0.0;
    for (e, r) in ce.iter().zip(&cr) {
        num += (r - mean_r).dot(&(rotation * (e - mean_e)));
    }
    let scale = num / (n * var_e);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(MetricsError::DegenerateAlignment(format!("non-positive scale {scale}")));
    }
    Ok(SimilarityAlignment {
        scale,
        rotation,
        translation: mean_r - scale * (rotation * mean_e),
    })
}

fn check_pose_lengths(est: &[CameraPose], reference: &[CameraPose]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            what: "estimated poses",
            found: est.len(),
            expected: reference.len(),
        });
    }
    if est.len() < 2 {
        return Err(MetricsError::InvalidInput(format!(
            "need at least 2 poses, got {}",
            est.len()
        )));
    }
    Ok(())
}

/// Geodesic angle between two rotations in degrees.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let cos = (((a * b.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// Per-frame (or per-pair) errors: rotation in degrees, translation in
/// centimetres assuming scene units of metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub rotation_deg: Vec<f64>,
    pub translation_cm: Vec<f64>,
    pub scale: f64,
}

/// Absolute pose errors after similarity alignment.
pub fn pose_errors(est: &[CameraPose], reference: &[CameraPose]) -> Result<PoseErrors> {
    let align = align_trajectories(est, reference)?;
    let mut out = PoseErrors {
        rotation_deg: Vec::with_capacity(est.len()),
        translation_cm: Vec::with_capacity(est.len()),
        scale: align.scale,
    };
    for (e, r) in est.iter().zip(reference) {
        let aligned = e.rotation * align.rotation.transpose();
        out.rotation_deg.push(rotation_angle_deg(&aligned, &r.rotation));
        let c = align.apply(&e.center());
        out.translation_cm.push(100.0 * (c - r.center()).norm());
    }
    Ok(out)
}

/// Errors of consecutive relative poses `i -> i+1`, with estimated relative
/// translations rescaled by the trajectory alignment scale.
pub fn relative_pose_errors(est: &[CameraPose], reference: &[CameraPose]) -> Result<PoseErrors> {
    let align = align_trajectories(est, reference)?;
    let relative = |a: &CameraPose, b: &CameraPose| {
        let rot = b.rotation * a.rotation.transpose();
        (rot, b.translation - rot * a.translation)
    };
    let mut out = PoseErrors {
        rotation_deg: Vec::new(),
        translation_cm: Vec::new(),
        scale: align.scale,
    };
    for i in 0..est.len() - 1 {
        let (re, te) = relative(&est[i], &est[i + 1]);
        let (rr, tr) = relative(&reference[i], &reference[i + 1]);
        out.rotation_deg.push(rotation_angle_deg(&re, &rr));
        out.translation_cm.push(100.0 * (align.scale * te - tr).norm());
    }
    Ok(out)
}

/// Area under the cumulative error curve up to `threshold`, in percent.
pub fn pose_auc(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(MetricsError::InvalidInput(format!("threshold {threshold}")));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(MetricsError::InvalidInput("errors must be non-negative".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut area = 0.0;
    for (i, &e) in sorted.iter().enumerate() {
        if e >= threshold {
            break;
        }
        let next = sorted.get(i + 1).copied().unwrap_or(threshold).min(threshold);
        area += (i + 1) as f64 / n * (next - e);
    }
    Ok(100.0 * area / threshold)
}

/// Pose errors plus AUC at each threshold, keyed by the threshold value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub errors: PoseErrors,
    pub rotation_auc: Vec<(f64, f64)>,
    pub translation_auc: Vec<(f64, f64)>,
}

pub const ROTATION_THRESHOLDS_DEG: [f64; 3] = [5.0, 10.0, 15.0];
pub const TRANSLATION_THRESHOLDS_CM: [f64; 3] = [1.0, 2.0, 5.0];

pub fn pose_report(errors: PoseErrors, rotation: &[f64], translation: &[f64]) -> Result<PoseErrorReport> {
    let auc = |values: &[f64], taus: &[f64]| -> Result<Vec<(f64, f64)>> {
        taus.iter().map(|&t| Ok((t, pose_auc(values, t)?))).collect()
    };
    Ok(PoseErrorReport {
        rotation_auc: auc(&errors.rotation_deg, rotation)?,
        translation_auc: auc(&errors.translation_cm, translation)?,
        errors,
    })
}

/// JSON number, or the strings `"inf"`, `"-inf"`, `"nan"` for non-finite values.
pub fn json_number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}
