//! Poisson rate coding of images into spike trains.
//!
//! Pixel `i` with normalised intensity `I_i` emits `s_i ~ Poisson(k · I_i · Δt)`
//! spikes over a window of `Δt` seconds; `k · I_i · Δt` is the expected count.
//! [`adaptive_encode`] redraws the whole train with `k ← k + Δk` while the
//! total spike count stays below `s_min`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::data::MnistImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid rate-coding parameters: {0}")]
    InvalidParams(String),
    #[error("image {image_index}: only {total} spikes after {attempts} draws (effective k = {effective_k})")]
    EncodingFailure { image_index: u32, attempts: u32, total: u64, effective_k: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateCodingParams {
    /// Initial scaling factor `k`.
    pub k: f64,
    pub delta_k: f64,
    pub s_min: u64,
    /// Presentation window, seconds.
    pub delta_t: f64,
    /// Simulation step, seconds.
    pub dt: f64,
    /// Maximum number of `k` increments in [`adaptive_encode`].
    pub retry_cap: u32,
    /// Keep per-pixel spike times (needed for network simulation).
    pub materialize_times: bool,
}

impl Default for RateCodingParams {
    fn default() -> Self {
        RateCodingParams {
            k: 2.0,
            delta_k: 1.0,
            s_min: 5,
            delta_t: 0.35,
            dt: 0.001,
            retry_cap: 50,
            materialize_times: false,
        }
    }
}

impl RateCodingParams {
    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: String| Err(CodecError::InvalidParams(m));
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad(format!("k = {} must be positive", self.k));
        }
        if !(self.delta_k > 0.0 && self.delta_k.is_finite()) {
            return bad(format!("delta_k = {} must be positive", self.delta_k));
        }
        if !(self.delta_t > 0.0 && self.dt > 0.0) {
            return bad(format!("delta_t = {} and dt = {} must be positive", self.delta_t, self.dt));
        }
        let steps = self.delta_t / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return bad(format!("dt = {} does not divide delta_t = {}", self.dt, self.delta_t));
        }
        Ok(())
    }

    /// Number of simulation steps in one presentation window.
    pub fn steps(&self) -> usize {
        (self.delta_t / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    pub counts: Vec<u32>,
    /// Sorted spike times in seconds within `[0, Δt)`, one list per pixel.
    pub times: Option<Vec<Vec<f64>>>,
    pub total: u64,
    pub effective_k: f64,
}

impl SpikeTrain {
    /// Per-step lists of spiking pixel indices (a pixel may repeat within a step).
    pub fn step_raster(&self, params: &RateCodingParams) -> Option<Vec<Vec<usize>>> {
        let times = self.times.as_ref()?;
        let steps = params.steps();
        let mut raster = vec![Vec::new(); steps];
        for (pixel, ts) in times.iter().enumerate() {
            for &t in ts {
                let step = ((t / params.dt).floor() as usize).min(steps - 1);
                raster[step].push(pixel);
            }
        }
        Some(raster)
    }

    /// One line per pixel: `index,count,t1;t2;...` with times in milliseconds.
    pub fn write_raster<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, &c) in self.counts.iter().enumerate() {
            let times = self
                .times
                .as_ref()
                .map(|t| t[i].iter().map(|s| format!("{:.3}", s * 1e3)).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            writeln!(out, "{i},{c},{times}")?;
        }
        Ok(())
    }
}

fn draw_train<R: Rng + ?Sized>(image: &MnistImage, params: &RateCodingParams, k: f64, rng: &mut R) -> SpikeTrain {
    let mut counts = Vec::with_capacity(image.pixels.len());
    let mut times = params.materialize_times.then(|| Vec::with_capacity(image.pixels.len()));
    let mut total = 0u64;
    for &intensity in &image.pixels {
        let lambda = k * intensity as f64 * params.delta_t;
        let count = if lambda > 0.0 {
            // λ is finite and positive here, so construction cannot fail.
            Poisson::new(lambda).map(|d| d.sample(rng) as u32).unwrap_or(0)
        } else {
            0
        };
        if let Some(times) = times.as_mut() {
            let mut ts: Vec<f64> = (0..count).map(|_| rng.random::<f64>() * params.delta_t).collect();
            ts.sort_by(f64::total_cmp);
            times.push(ts);
        }
        total += count as u64;
        counts.push(count);
    }
    SpikeTrain { counts, times, total, effective_k: k }
}

/// One Poisson draw per pixel at the initial `k`.
pub fn encode_poisson<R: Rng + ?Sized>(
    image: &MnistImage,
    params: &RateCodingParams,
    rng: &mut R,
) -> Result<SpikeTrain, CodecError> {
    params.validate()?;
    Ok(draw_train(image, params, params.k, rng))
}

/// Redraws with `k ← k + Δk` until the train holds at least `s_min` spikes.
pub fn adaptive_encode<R: Rng + ?Sized>(
    image: &MnistImage,
    params: &RateCodingParams,
    rng: &mut R,
) -> Result<SpikeTrain, CodecError> {
    params.validate()?;
    let mut k = params.k;
    let mut attempts = 0u32;
    loop {
        let train = draw_train(image, params, k, rng);
        attempts += 1;
        if train.total >= params.s_min {
            return Ok(train);
        }
        if attempts > params.retry_cap {
            return Err(CodecError::EncodingFailure {
                image_index: image.index,
                attempts,
                total: train.total,
                effective_k: k,
            });
        }
        k += params.delta_k;
    }
}
