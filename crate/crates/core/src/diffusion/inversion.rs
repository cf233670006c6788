//! Edit-friendly DDPM inversion.
//!
//! Every noisy state `x_t` is drawn independently from `q(x_t | x_0)`, and the
//! per-step noise `z_t` is then solved from the ancestral update so that
//! replaying the sampler from `x_T` with those `z_t` walks through exactly the
//! same states. The last step is deterministic (`σ_1 = 0`), so its entry
//! stores the additive residual `x_0 − μ_1(x_1)` instead of a scaled noise.

use std::path::Path;

use super::{check_len, forward_sample, posterior_mean, standard_normal, Denoiser, DiffusionError};
use crate::scene::raster::{decode_header_any, encode_header, read_bytes, write_bytes};
use crate::warp::RefinerCondition;
use crate::SeededRng;

pub const MAGIC_INVERSION: &[u8; 4] = b"RSIR";

#[derive(Debug, Clone, PartialEq)]
pub struct InversionRecord {
    /// Terminal state `x_T`.
    pub x_t: Vec<f64>,
    /// `z_T, …, z_2` followed by the final residual.
    pub z: Vec<Vec<f64>>,
    pub schedule_id: u64,
}

impl InversionRecord {
    pub fn steps(&self) -> usize {
        self.z.len()
    }

    /// Raw container: the usual 16-byte header (width = state length,
    /// height = 1 + steps, channels = 1), the schedule id as `u64`, then the
    /// rows `x_T, z_T, …` as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.x_t.len();
        let mut out = encode_header(MAGIC_INVERSION, n, 1 + self.z.len(), 1);
        out.extend_from_slice(&self.schedule_id.to_le_bytes());
        for row in std::iter::once(&self.x_t).chain(&self.z) {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let bad = |s: String| DiffusionError::MalformedRecord(s);
        let header = decode_header_any(bytes, "inversion record")?;
        if &header.magic != MAGIC_INVERSION {
            return Err(bad(format!("magic {:?}", String::from_utf8_lossy(&header.magic))));
        }
        if header.channels != 1 || header.height == 0 {
            return Err(bad("expected one channel and at least one row".into()));
        }
        let (n, rows) = (header.width, header.height);
        let body = &bytes[16..];
        if body.len() != 8 + n * rows * 8 {
            return Err(bad(format!("payload is {} bytes", body.len())));
        }
        let schedule_id = u64::from_le_bytes(body[..8].try_into().expect("8 bytes"));
        let values: Vec<f64> = body[8..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let mut rows_iter = values.chunks_exact(n.max(1)).map(<[f64]>::to_vec);
        let x_t = if n == 0 {
            Vec::new()
        } else {
            rows_iter.next().expect("row")
        };
        let z = if n == 0 {
            vec![Vec::new(); rows - 1]
        } else {
            rows_iter.collect()
        };
        Ok(Self { x_t, z, schedule_id })
    }
}

pub fn write_inversion_record(record: &InversionRecord, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
    Ok(write_bytes(path.as_ref(), &record.to_bytes())?)
}

pub fn read_inversion_record(path: impl AsRef<Path>) -> Result<InversionRecord, DiffusionError> {
    InversionRecord::from_bytes(&read_bytes(path.as_ref())?)
}

/// Inverts `x0` under the denoiser's schedule.
pub fn edit_friendly_invert(
    x0: &[f64],
    denoiser: &dyn Denoiser,
    rng: &mut SeededRng,
    condition: Option<&RefinerCondition>,
) -> Result<InversionRecord, DiffusionError> {
    let schedule = denoiser.schedule();
    let steps = schedule.steps();
    // states[t] = x_t, independently noised.
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    for t in 1..=steps {
        let noise = standard_normal(x0.len(), rng);
        states.push(forward_sample(x0, t, schedule, &noise)?);
    }
    let mut z = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let eps = denoiser.predict(&states[t], t, condition)?;
        let mu = posterior_mean(&states[t], t, &eps, schedule)?;
        let target = &states[t - 1];
        if t == 1 {
            z.push(target.iter().zip(&mu).map(|(x, m)| x - m).collect());
        } else {
            let sigma = schedule.sigma(t);
            if !(sigma > 0.0) {
                return Err(DiffusionError::DegenerateVariance { t });
            }
            z.push(target.iter().zip(&mu).map(|(x, m)| (x - m) / sigma).collect());
        }
    }
    Ok(InversionRecord {
        x_t: states.pop().expect("at least one step"),
        z,
        schedule_id: schedule.id(),
    })
}

/// Replays the ancestral sampler from a record's terminal state.
pub fn reconstruct(
    record: &InversionRecord,
    denoiser: &dyn Denoiser,
    condition: Option<&RefinerCondition>,
) -> Result<Vec<f64>, DiffusionError> {
    let schedule = denoiser.schedule();
    if record.schedule_id != schedule.id() {
        return Err(DiffusionError::ScheduleMismatch {
            recorded: record.schedule_id,
            current: schedule.id(),
        });
    }
    if record.z.len() != schedule.steps() {
        return Err(DiffusionError::MalformedRecord(format!(
            "{} noise rows for {} steps",
            record.z.len(),
            schedule.steps()
        )));
    }
    let mut x = record.x_t.clone();
    for (t, z) in (1..=schedule.steps()).rev().zip(&record.z) {
        check_len(x.len(), z.len())?;
        let eps = denoiser.predict(&x, t, condition)?;
        let mu = posterior_mean(&x, t, &eps, schedule)?;
        let scale = if t == 1 { 1.0 } else { schedule.sigma(t) };
        x = mu.iter().zip(z).map(|(m, zi)| m + scale * zi).collect();
    }
    Ok(x)
}
