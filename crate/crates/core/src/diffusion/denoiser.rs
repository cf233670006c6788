use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{cfg_combine, check_guidance_weights, check_len, DiffusionError, NoiseSchedule};
use crate::warp::RefinerCondition;
use crate::SeededRng;

/// Noise predictor `ε_θ(x_t, t, c)`.
///
/// Implementations are shared between samplers, so they must be `Send + Sync`.
pub trait Denoiser: Send + Sync {
    fn predict(&self, x_t: &[f64], t: usize, condition: Option<&RefinerCondition>) -> Result<Vec<f64>, DiffusionError>;

    /// Schedule the predictions are defined under.
    fn schedule(&self) -> &NoiseSchedule;
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict(&self, x_t: &[f64], t: usize, condition: Option<&RefinerCondition>) -> Result<Vec<f64>, DiffusionError> {
        (**self).predict(x_t, t, condition)
    }

    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
}

/// Isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Isotropic Gaussian mixture over `dim`-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureModel {
    components: Vec<GaussianComponent>,
    dim: usize,
}

impl GaussianMixtureModel {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self, DiffusionError> {
        let Some(first) = components.first() else {
            return Err(DiffusionError::InvalidMixture("no components".into()));
        };
        let dim = first.mean.len();
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(DiffusionError::InvalidMixture(format!(
                    "component {k} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight > 0.0) || !(c.variance >= 0.0) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(DiffusionError::InvalidMixture(format!(
                    "component {k} needs positive weight, non-negative variance and a finite mean"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(DiffusionError::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(Self { components, dim })
    }

    /// Single Gaussian.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self, DiffusionError> {
        Self::new(vec![GaussianComponent {
            weight: 1.0,
            mean,
            variance,
        }])
    }

    /// Fits up to `k` isotropic components to interleaved pixel colours with a
    /// few rounds of k-means. Seeds are spread over the brightness order so the
    /// fit is deterministic.
    pub fn fit_colours(data: &[f32], channels: usize, k: usize) -> Result<Self, DiffusionError> {
        if channels == 0 || k == 0 || data.is_empty() || !data.len().is_multiple_of(channels) {
            return Err(DiffusionError::InvalidMixture(
                "need a non-empty colour buffer and k > 0".into(),
            ));
        }
        let points: Vec<&[f32]> = data.chunks_exact(channels).collect();
        let n = points.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let sa: f32 = points[a].iter().sum();
            let sb: f32 = points[b].iter().sum();
            sa.total_cmp(&sb).then(a.cmp(&b))
        });
        let k = k.min(n);
        let mut centers: Vec<Vec<f64>> = (0..k)
            .map(|j| {
                let idx = order[(2 * j + 1) * n / (2 * k)];
                points[idx].iter().map(|v| *v as f64).collect()
            })
            .collect();
        let dist2 = |p: &[f32], c: &[f64]| -> f64 { p.iter().zip(c).map(|(a, b)| (*a as f64 - b).powi(2)).sum() };
        let mut assign = vec![0usize; n];
        for _ in 0..20 {
            for (a, p) in assign.iter_mut().zip(&points) {
                *a = (0..k)
                    .min_by(|&i, &j| dist2(p, &centers[i]).total_cmp(&dist2(p, &centers[j])))
                    .expect("k > 0");
            }
            let mut sums = vec![vec![0.0; channels]; k];
            let mut counts = vec![0usize; k];
            for (a, p) in assign.iter().zip(&points) {
                counts[*a] += 1;
                for (s, v) in sums[*a].iter_mut().zip(p.iter()) {
                    *s += *v as f64;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                }
            }
        }
        let mut counts = vec![0usize; k];
        let mut spread = vec![0.0; k];
        for (a, p) in assign.iter().zip(&points) {
            counts[*a] += 1;
            spread[*a] += dist2(p, &centers[*a]);
        }
        let components = (0..k)
            .filter(|&j| counts[j] > 0)
            .map(|j| GaussianComponent {
                weight: counts[j] as f64 / n as f64,
                mean: centers[j].clone(),
                variance: (spread[j] / (counts[j] * channels) as f64).max(1e-4),
            })
            .collect();
        Self::new(components)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Draws one sample and the index of the component it came from.
    pub fn sample(&self, rng: &mut SeededRng) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        let sd = c.variance.sqrt();
        let x = c
            .mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect();
        (k, x)
    }

    /// Index of the component with the highest posterior for a clean sample.
    pub fn classify(&self, x: &[f64]) -> usize {
        let logs = self.log_responsibilities(x, 1.0, None, None);
        argmax(&logs)
    }

    /// Unnormalized log posterior of each component given `x_t` at signal
    /// level `alpha_bar`, with optional per-component log-weight bias and
    /// mean shift.
    fn log_responsibilities(
        &self,
        x_t: &[f64],
        alpha_bar: f64,
        log_bias: Option<&[f64]>,
        shift: Option<&[f64]>,
    ) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        self.components
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let v = alpha_bar * c.variance + (1.0 - alpha_bar);
                let dist2: f64 = x_t
                    .iter()
                    .zip(&c.mean)
                    .enumerate()
                    .map(|(d, (x, m))| {
                        let m = m + shift.map_or(0.0, |s| s[d]);
                        (x - sa * m).powi(2)
                    })
                    .sum();
                c.weight.ln() + log_bias.map_or(0.0, |b| b[k]) - 0.5 * (self.dim as f64 * v.ln() + dist2 / v)
            })
            .collect()
    }

    /// Exact posterior mean `E[x0 | x_t]` under the forward process at
    /// signal level `alpha_bar < 1`.
    pub fn posterior_mean(&self, x_t: &[f64], alpha_bar: f64) -> Vec<f64> {
        self.posterior_mean_biased(x_t, alpha_bar, None, None)
    }

    fn posterior_mean_biased(
        &self,
        x_t: &[f64],
        alpha_bar: f64,
        log_bias: Option<&[f64]>,
        shift: Option<&[f64]>,
    ) -> Vec<f64> {
        let logs = self.log_responsibilities(x_t, alpha_bar, log_bias, shift);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        let sa = alpha_bar.sqrt();
        let mut mean = vec![0.0; self.dim];
        for (c, r) in self.components.iter().zip(&resp) {
            let r = r / total;
            let v = alpha_bar * c.variance + (1.0 - alpha_bar);
            let gain = sa * c.variance / v;
            for (d, out) in mean.iter_mut().enumerate() {
                let m = c.mean[d] + shift.map_or(0.0, |s| s[d]);
                *out += r * (m + gain * (x_t[d] - sa * m));
            }
        }
        mean
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, x)| if *x > best.1 { (i, *x) } else { best },
        )
        .0
}

fn eps_from_mean(x_t: &[f64], mean: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.iter().zip(mean).map(|(x, m)| (x - sa * m) / sn).collect()
}

fn level(schedule: &NoiseSchedule, t: usize) -> Result<f64, DiffusionError> {
    if t > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar(t);
    if ab >= 1.0 {
        return Err(DiffusionError::DegenerateVariance { t });
    }
    Ok(ab)
}

/// Exact noise predictor for data drawn from a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    gmm: GaussianMixtureModel,
    schedule: NoiseSchedule,
}

/// `ε̂(x_t, t) = (x_t − √ᾱ_t E[x0 | x_t]) / √(1 − ᾱ_t)` with the exact mixture posterior.
pub fn analytic_denoiser(gmm: GaussianMixtureModel, schedule: NoiseSchedule) -> GmmDenoiser {
    GmmDenoiser { gmm, schedule }
}

impl GmmDenoiser {
    pub fn mixture(&self) -> &GaussianMixtureModel {
        &self.gmm
    }
}

impl Denoiser for GmmDenoiser {
    fn predict(
        &self,
        x_t: &[f64],
        t: usize,
        _condition: Option<&RefinerCondition>,
    ) -> Result<Vec<f64>, DiffusionError> {
        check_len(self.gmm.dim, x_t.len())?;
        let ab = level(&self.schedule, t)?;
        let mean = self.gmm.posterior_mean(x_t, ab);
        Ok(eps_from_mean(x_t, &mean, ab))
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

/// Per-pixel colour-mixture denoiser steered by a refiner condition.
///
/// The state is an image flattened as `pixels x channels`. Every pixel gets
/// the same colour mixture as prior, but component weights are biased toward
/// components close to the mean covered colour in a `(2r+1)²` window of the
/// warped image, and component means are shifted by `depth_shift` times the
/// condition's depth channel. Without a condition it is a plain per-pixel
/// analytic denoiser.
#[derive(Debug, Clone)]
pub struct ConditionalGmmDenoiser {
    pub gmm: GaussianMixtureModel,
    pub schedule: NoiseSchedule,
    pub guide_radius: usize,
    /// Scale of the log-weight bias `−sharpness · ‖guide − μ_k‖² / 2`.
    pub guide_sharpness: f64,
    pub depth_shift: Vec<f64>,
}

impl ConditionalGmmDenoiser {
    pub fn new(gmm: GaussianMixtureModel, schedule: NoiseSchedule) -> Self {
        let dim = gmm.dim();
        Self {
            gmm,
            schedule,
            guide_radius: 3,
            guide_sharpness: 200.0,
            depth_shift: vec![0.0; dim],
        }
    }

    /// Mean covered colour around each pixel, if any is covered.
    fn guides(&self, cond: &RefinerCondition) -> Vec<Option<Vec<f64>>> {
        let (w, h, c) = (cond.width, cond.height, self.gmm.dim());
        let r = self.guide_radius as isize;
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut sum = vec![0.0; c];
                let mut n = 0usize;
                for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        let (xx, yy) = (xx as usize, yy as usize);
                        if cond.mask(xx, yy) {
                            let rgb = cond.rgb(xx, yy);
                            for (s, v) in sum.iter_mut().zip(rgb.iter().take(c)) {
                                *s += *v as f64;
                            }
                            n += 1;
                        }
                    }
                }
                out.push((n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect()));
            }
        }
        out
    }
}

impl Denoiser for ConditionalGmmDenoiser {
    fn predict(&self, x_t: &[f64], t: usize, condition: Option<&RefinerCondition>) -> Result<Vec<f64>, DiffusionError> {
        let c = self.gmm.dim();
        if c == 0 || !x_t.len().is_multiple_of(c) {
            return Err(DiffusionError::ShapeMismatch {
                expected: c,
                found: x_t.len(),
            });
        }
        let ab = level(&self.schedule, t)?;
        let pixels = x_t.len() / c;
        let guides = match condition {
            Some(cond) => {
                check_len(cond.width * cond.height, pixels)?;
                Some(self.guides(cond))
            }
            None => None,
        };
        let mut eps = Vec::with_capacity(x_t.len());
        for p in 0..pixels {
            let xp = &x_t[p * c..(p + 1) * c];
            let bias: Option<Vec<f64>> = guides.as_ref().and_then(|g| g[p].as_ref()).map(|g| {
                self.gmm
                    .components()
                    .iter()
                    .map(|comp| {
                        let d2: f64 = g.iter().zip(&comp.mean).map(|(a, b)| (a - b).powi(2)).sum();
                        -0.5 * self.guide_sharpness * d2
                    })
                    .collect()
            });
            let shift: Option<Vec<f64>> = condition.map(|cond| {
                let depth = cond.depth_at(p) as f64;
                self.depth_shift.iter().map(|s| s * depth).collect()
            });
            let mean = self
                .gmm
                .posterior_mean_biased(xp, ab, bias.as_deref(), shift.as_deref());
            eps.extend(eps_from_mean(xp, &mean, ab));
        }
        Ok(eps)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

/// Combines unconditional, semantic and depth predictions with
/// [`cfg_combine`](super::cfg_combine).
pub struct GuidedDenoiser {
    pub unconditional: Arc<dyn Denoiser>,
    pub semantic: Arc<dyn Denoiser>,
    pub depth: Arc<dyn Denoiser>,
    pub alpha: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
}

impl GuidedDenoiser {
    pub fn new(
        unconditional: Arc<dyn Denoiser>,
        semantic: Arc<dyn Denoiser>,
        depth: Arc<dyn Denoiser>,
        alpha: f64,
        lambda_s: f64,
        lambda_d: f64,
    ) -> Result<Self, DiffusionError> {
        check_guidance_weights(lambda_s, lambda_d)?;
        Ok(Self {
            unconditional,
            semantic,
            depth,
            alpha,
            lambda_s,
            lambda_d,
        })
    }
}

impl Denoiser for GuidedDenoiser {
    fn predict(&self, x_t: &[f64], t: usize, condition: Option<&RefinerCondition>) -> Result<Vec<f64>, DiffusionError> {
        let u = self.unconditional.predict(x_t, t, None)?;
        let s = self.semantic.predict(x_t, t, condition)?;
        let d = self.depth.predict(x_t, t, condition)?;
        cfg_combine(&u, &s, &d, self.alpha, self.lambda_s, self.lambda_d)
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.unconditional.schedule()
    }
}
