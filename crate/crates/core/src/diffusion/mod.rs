//! Discrete-time diffusion numerics on flat `f64` state vectors.
//!
//! Notation: `alpha_bar[t]` is the cumulative signal coefficient, with
//! `alpha_bar[0] = 1`. The per-step coefficient is
//! `a_t = alpha_bar[t] / alpha_bar[t-1]`.

mod denoiser;
mod inversion;

pub use denoiser::{
    analytic_denoiser, ConditionalGmmDenoiser, Denoiser, GaussianComponent, GaussianMixtureModel, GmmDenoiser,
    GuidedDenoiser,
};
pub use inversion::{
    edit_friendly_invert, read_inversion_record, reconstruct, write_inversion_record, InversionRecord, MAGIC_INVERSION,
};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::warp::RefinerCondition;
use crate::SeededRng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: expected length {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("degenerate variance at step {t}")]
    DegenerateVariance { t: usize },
    #[error("record was produced under schedule {recorded:016x}, replaying with {current:016x}")]
    ScheduleMismatch { recorded: u64, current: u64 },
    #[error("guidance weights must sum to 1, got lambda_s + lambda_d = {0}")]
    WeightSumViolation(f64),
    #[error("strength must lie in [0, 1], got {0}")]
    InvalidStrength(f64),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("denoiser needs a condition: {0}")]
    MissingCondition(String),
    #[error("malformed inversion record: {0}")]
    MalformedRecord(String),
    #[error("{0}")]
    Io(String),
}

impl From<crate::scene::SceneError> for DiffusionError {
    fn from(e: crate::scene::SceneError) -> Self {
        Self::Io(e.to_string())
    }
}

/// How per-step betas are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Betas evenly spaced from `beta_start` to `beta_end`.
    LinearBeta { beta_start: f64, beta_end: f64 },
    /// Squared-cosine cumulative schedule with offset `s`, betas capped at 0.999.
    Cosine { s: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Cumulative signal coefficients `alpha_bar[0..=T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Wraps raw coefficients. They must start at 1, never increase, and end
    /// above 0. Flat segments are allowed here; [`make_schedule`] never makes them.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, DiffusionError> {
        if alpha_bar.len() < 2 {
            return Err(DiffusionError::InvalidParams("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(DiffusionError::InvalidParams(format!(
                "alpha_bar[0] must be 1, got {}",
                alpha_bar[0]
            )));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] <= w[0])) {
            return Err(DiffusionError::InvalidParams("alpha_bar must not increase".into()));
        }
        let last = *alpha_bar.last().expect("non-empty");
        if !(last > 0.0) {
            return Err(DiffusionError::InvalidParams(format!(
                "alpha_bar[T] must be positive, got {last}"
            )));
        }
        Ok(Self { alpha_bar })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step coefficient `a_t`, `t >= 1`.
    pub fn step_alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    /// Standard deviation of the ancestral step `t → t-1`; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let var = (1.0 - ab / ab_prev) * (1.0 - ab_prev) / (1.0 - ab);
        if var.is_finite() {
            var.max(0.0).sqrt()
        } else {
            0.0
        }
    }

    /// Stable 64-bit fingerprint of the coefficients.
    pub fn id(&self) -> u64 {
        let mut hasher = Sha256::new();
        for v in &self.alpha_bar {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }
}

/// Builds a schedule with `steps` steps.
pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidParams("T must be at least 1".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta { beta_start, beta_end } => {
            for b in [beta_start, beta_end] {
                if !(b > 0.0 && b < 1.0) {
                    return Err(DiffusionError::InvalidParams(format!("beta {b} outside (0, 1)")));
                }
            }
            (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect()
        }
        ScheduleKind::Cosine { s } => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DiffusionError::InvalidParams(format!(
                    "cosine offset {s} must be positive"
                )));
            }
            let f = |t: usize| {
                let x = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-12, 0.999))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

fn check_len(expected: usize, found: usize) -> Result<(), DiffusionError> {
    if expected != found {
        return Err(DiffusionError::ShapeMismatch { expected, found });
    }
    Ok(())
}

/// Draws a standard-normal vector of length `n`.
pub fn standard_normal(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · noise`.
pub fn forward_sample(
    x0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    check_len(x0.len(), noise.len())?;
    if t > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

/// Squared L2 distance between the denoiser's prediction at the noised
/// state and the injected noise.
pub fn denoising_loss(
    denoiser: &dyn Denoiser,
    x0: &[f64],
    t: usize,
    noise: &[f64],
    condition: Option<&RefinerCondition>,
) -> Result<f64, DiffusionError> {
    let x_t = forward_sample(x0, t, schedule_guard(denoiser, t)?, noise)?;
    let eps = denoiser.predict(&x_t, t, condition)?;
    check_len(noise.len(), eps.len())?;
    Ok(eps.iter().zip(noise).map(|(e, n)| (e - n).powi(2)).sum())
}

fn schedule_guard(denoiser: &dyn Denoiser, t: usize) -> Result<&NoiseSchedule, DiffusionError> {
    let schedule = denoiser.schedule();
    if t > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    Ok(schedule)
}

/// Mean of the ancestral step `t → t-1` given a noise prediction.
pub fn posterior_mean(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_step(t)?;
    check_len(x_t.len(), eps_hat.len())?;
    let a = schedule.step_alpha(t);
    let ab = schedule.alpha_bar(t);
    let coef = if a == 1.0 { 0.0 } else { (1.0 - a) / (1.0 - ab).sqrt() };
    let inv = 1.0 / a.sqrt();
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - coef * e) * inv).collect())
}

/// DDPM ancestral update `x_{t-1} = μ + σ_t · z`.
pub fn reverse_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
    z: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    check_len(x_t.len(), z.len())?;
    let mut mu = posterior_mean(x_t, t, eps_hat, schedule)?;
    let sigma = schedule.sigma(t);
    if sigma > 0.0 {
        mu.iter_mut().zip(z).for_each(|(m, zi)| *m += sigma * zi);
    }
    Ok(mu)
}

/// Guidance combination
/// `ε̂ = (1 − α) ε_uncond + α (λ_s ε_sem + λ_d ε_depth)` with `λ_s + λ_d = 1`.
pub fn cfg_combine(
    eps_uncond: &[f64],
    eps_sem: &[f64],
    eps_depth: &[f64],
    alpha: f64,
    lambda_s: f64,
    lambda_d: f64,
) -> Result<Vec<f64>, DiffusionError> {
    check_guidance_weights(lambda_s, lambda_d)?;
    check_len(eps_uncond.len(), eps_sem.len())?;
    check_len(eps_uncond.len(), eps_depth.len())?;
    Ok(eps_uncond
        .iter()
        .zip(eps_sem)
        .zip(eps_depth)
        .map(|((u, s), d)| (1.0 - alpha) * u + alpha * (lambda_s * s + lambda_d * d))
        .collect())
}

pub fn check_guidance_weights(lambda_s: f64, lambda_d: f64) -> Result<(), DiffusionError> {
    let sum = lambda_s + lambda_d;
    if (sum - 1.0).abs() > 1e-9 || !sum.is_finite() {
        return Err(DiffusionError::WeightSumViolation(sum));
    }
    Ok(())
}

/// First noising level used by a partial refinement of `strength`.
pub fn start_step(strength: f64, schedule: &NoiseSchedule) -> Result<usize, DiffusionError> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(DiffusionError::InvalidStrength(strength));
    }
    Ok((strength * schedule.steps() as f64).round() as usize)
}

/// Partial refinement: noise `x` to step `round(strength · T)` and run the
/// ancestral sampler back to 0. Strength 0 returns `x` unchanged.
pub fn sdedit_refine(
    x: &[f64],
    strength: f64,
    denoiser: &dyn Denoiser,
    rng: &mut SeededRng,
    condition: Option<&RefinerCondition>,
) -> Result<Vec<f64>, DiffusionError> {
    sdedit_refine_with(x, strength, denoiser, rng, condition, &mut |_, _, _| {})
}

/// [`sdedit_refine`] with a hook run after every reverse step. The hook gets
/// the new step index `t - 1`, the state, and the random stream.
pub fn sdedit_refine_with(
    x: &[f64],
    strength: f64,
    denoiser: &dyn Denoiser,
    rng: &mut SeededRng,
    condition: Option<&RefinerCondition>,
    after_step: &mut dyn FnMut(usize, &mut [f64], &mut SeededRng),
) -> Result<Vec<f64>, DiffusionError> {
    let schedule = denoiser.schedule();
    let t_start = start_step(strength, schedule)?;
    if t_start == 0 {
        return Ok(x.to_vec());
    }
    let noise = standard_normal(x.len(), rng);
    let mut state = forward_sample(x, t_start, schedule, &noise)?;
    for t in (1..=t_start).rev() {
        let eps = denoiser.predict(&state, t, condition)?;
        let z = if t > 1 {
            standard_normal(x.len(), rng)
        } else {
            vec![0.0; x.len()]
        };
        state = reverse_step(&state, t, &eps, schedule, &z)?;
        after_step(t - 1, &mut state, rng);
    }
    Ok(state)
}
