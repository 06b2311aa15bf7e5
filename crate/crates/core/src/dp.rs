//! Differential-privacy mechanisms applied to client updates.
//!
//! An update is first clipped to L2 norm `C` (`Δ / max(1, |Δ|₂ / C)`), then
//! perturbed. Gaussian noise has per-entry standard deviation `σ·C`. Laplace
//! noise has scale `b = Δf / ε`; inside [`privatize`] the sensitivity is the
//! clip bound `C` and `ε = C / σ`, so `b = σ`.
//!
//! Two budgets are reported: [`epsilon_linear`] is the linear relation
//! `ε = C / σ`, [`epsilon_classic`] is the textbook Gaussian-mechanism bound
//! `ε = sqrt(2 ln(1.25/δ)) / σ` for noise multiplier `σ`. Neither composes
//! across rounds.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{l2_norm, LayoutId, ParamError, ParamVector};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("invalid dp config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Gaussian,
    Laplace,
    None,
}

/// Where the noise term is added: on each client's clipped update before
/// upload, or once on the sum at the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSite {
    #[default]
    Client,
    Server,
}

pub const DEFAULT_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub mechanism: Mechanism,
    pub sigma: f64,
    pub clip_c: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub noise_site: NoiseSite,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Gaussian,
            sigma: 0.05,
            clip_c: 0.5,
            delta: DEFAULT_DELTA,
            noise_site: NoiseSite::Client,
        }
    }
}

impl DpConfig {
    pub fn disabled() -> Self {
        Self {
            mechanism: Mechanism::None,
            clip_c: f64::MAX,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DpError> {
        if self.clip_c.is_nan() || self.clip_c <= 0.0 {
            return Err(DpError::InvalidConfig(format!(
                "clip_c must be > 0, got {}",
                self.clip_c
            )));
        }
        if self.mechanism != Mechanism::None && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(DpError::InvalidConfig(format!(
                "sigma must be finite and > 0, got {}",
                self.sigma
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DpError::InvalidConfig(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Per-entry standard deviation of the noise term.
    pub fn noise_std(&self) -> f64 {
        match self.mechanism {
            Mechanism::Gaussian => self.sigma * self.clip_c,
            Mechanism::Laplace => self.laplace_scale() * std::f64::consts::SQRT_2,
            Mechanism::None => 0.0,
        }
    }

    pub fn laplace_scale(&self) -> f64 {
        laplace_scale(self.clip_c, epsilon_linear(self.clip_c, self.sigma))
    }

    pub fn report(&self) -> PrivacyReport {
        PrivacyReport {
            epsilon_linear: epsilon_linear(self.clip_c, self.sigma),
            epsilon_classic: epsilon_classic(self.sigma, self.delta),
            sensitivity: self.clip_c,
            noise_std: self.sigma * self.clip_c,
            mechanism: self.mechanism,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyReport {
    pub epsilon_linear: f64,
    pub epsilon_classic: f64,
    /// L2 sensitivity of one clipped update, bounded by the clip threshold.
    pub sensitivity: f64,
    /// Gaussian per-entry std `σ·C`.
    pub noise_std: f64,
    pub mechanism: Mechanism,
}

/// Scales `delta` into the L2 ball of radius `clip_c`. Vectors already inside
/// the ball are returned unchanged.
pub fn clip_update(delta: &ParamVector, clip_c: f64) -> Result<ParamVector, DpError> {
    if clip_c.is_nan() || clip_c <= 0.0 {
        return Err(DpError::InvalidConfig(format!(
            "clip_c must be > 0, got {clip_c}"
        )));
    }
    let norm = l2_norm(delta)?;
    let factor = (norm / clip_c).max(1.0);
    if factor == 1.0 {
        return Ok(delta.clone());
    }
    let values: Vec<f64> = delta.values().iter().map(|&x| x / factor).collect();
    // Rounding can leave the result a few ulps above the bound; pull it in so
    // the ball constraint holds exactly and clipping stays idempotent.
    let mut out = ParamVector::new(values, delta.layout_id())?;
    while l2_norm(&out)? > clip_c {
        let shrunk = out.values().iter().map(|&x| x * (1.0 - f64::EPSILON)).collect();
        out = ParamVector::new(shrunk, delta.layout_id())?;
    }
    Ok(out)
}

/// I.i.d. `N(0, (σC)²)` entries.
pub fn gaussian_noise<R: RngCore + ?Sized>(
    layout_id: LayoutId,
    len: usize,
    sigma: f64,
    clip_c: f64,
    rng: &mut R,
) -> ParamVector {
    let std = sigma * clip_c;
    let values = seed::standard_normals(rng, len)
        .into_iter()
        .map(|z| z * std)
        .collect();
    ParamVector::new(values, layout_id).expect("gaussian samples are finite")
}

/// `b = Δf / ε`.
pub fn laplace_scale(sensitivity: f64, epsilon: f64) -> f64 {
    sensitivity / epsilon
}

/// I.i.d. Laplace entries with scale `b = sensitivity / epsilon`, drawn by
/// inverse CDF: `u ∈ (-½, ½)`, `x = -b·sgn(u)·ln(1 - 2|u|)`.
pub fn laplace_noise<R: RngCore + ?Sized>(
    layout_id: LayoutId,
    len: usize,
    sensitivity: f64,
    epsilon: f64,
    rng: &mut R,
) -> ParamVector {
    let b = laplace_scale(sensitivity, epsilon);
    let values = (0..len)
        .map(|_| {
            let u = seed::uniform_open(rng) - 0.5;
            -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .map(|x| if x == 0.0 { 0.0 } else { x })
        .collect();
    ParamVector::new(values, layout_id).expect("laplace samples are finite")
}

/// Noise term for one update under `cfg`; all-zero for `Mechanism::None`.
pub fn mechanism_noise<R: RngCore + ?Sized>(
    layout_id: LayoutId,
    len: usize,
    cfg: &DpConfig,
    rng: &mut R,
) -> Option<ParamVector> {
    match cfg.mechanism {
        Mechanism::Gaussian => Some(gaussian_noise(layout_id, len, cfg.sigma, cfg.clip_c, rng)),
        Mechanism::Laplace => Some(laplace_noise(
            layout_id,
            len,
            cfg.clip_c,
            epsilon_linear(cfg.clip_c, cfg.sigma),
            rng,
        )),
        Mechanism::None => None,
    }
}

/// Clip, then add the mechanism's noise.
pub fn privatize<R: RngCore + ?Sized>(
    delta: &ParamVector,
    cfg: &DpConfig,
    rng: &mut R,
) -> Result<ParamVector, DpError> {
    cfg.validate()?;
    let clipped = clip_update(delta, cfg.clip_c)?;
    match mechanism_noise(delta.layout_id(), delta.len(), cfg, rng) {
        Some(noise) => Ok(clipped.add(&noise)?),
        None => Ok(clipped),
    }
}

/// `ε = C / σ`.
pub fn epsilon_linear(clip_c: f64, sigma: f64) -> f64 {
    clip_c / sigma
}

/// `ε = sqrt(2 ln(1.25/δ)) / σ`.
pub fn epsilon_classic(sigma: f64, delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt() / sigma
}
