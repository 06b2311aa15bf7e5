//! Gradient-inversion attacks on a single intercepted client update.
//!
//! The attacker sees only what crosses the network: the broadcast global
//! parameters and one [`ClientMessage`]. Two attacks are provided:
//!
//! - [`analytic_invert_linear`]: for `linear_pixel` the update of pixel `p` is
//!   `ΔW_p = -η r_p x_pᵀ / P` and `Δb_p = -η r_p / P`, so the input is the
//!   ratio `ΔW_p[k, :] / Δb_p[k]` for any class `k` with nonzero residual.
//! - [`optimize_invert`]: gradient matching. A dummy image is moved to
//!   minimize `1 - cos(∇θ L(θ; x̂), -Δ)`. The input gradient of that
//!   objective needs a Jacobian-transpose product, computed as a central
//!   difference of input gradients:
//!   `Jᵀu ≈ (∇x L(θ + εu) - ∇x L(θ - εu)) / 2ε`.
//!   Steps use Adam-style directions, are projected onto `[0, 1]`, and are
//!   accepted only if the objective does not increase.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{client_round, ClientError, ClientState, LocalHyper, LocalSchedule, Shard};
use crate::dp::{DpConfig, Mechanism};
use crate::learn::{gen_dataset, Architecture, LearnError, ModelKind, Sample, NUM_CLASSES};
use crate::net::ClientMessage;
use crate::params::{l2_norm_slice, ParamError, ParamVector};
use crate::seed::{self, Role};
use crate::server::init_global;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("uninformative gradient")]
    Uninformative,
    #[error("analytic inversion needs linear_pixel, got {0}")]
    UnsupportedModel(&'static str),
    #[error("update has {found} values, model expects {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite objective at iteration {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Reconstruction scored against the (held back) true image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub reconstructed: Vec<f64>,
    pub mse: f64,
    pub psnr: f64,
    pub iterations_used: usize,
    pub dp_was_applied: bool,
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "image sizes differ");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Peak signal-to-noise ratio for images in `[0, 1]`.
pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

impl AttackResult {
    pub fn score(reconstructed: Vec<f64>, truth: &[f64], iterations_used: usize, dp_was_applied: bool) -> Self {
        let mse = mse(&reconstructed, truth);
        Self {
            reconstructed,
            mse,
            psnr: psnr(mse),
            iterations_used,
            dp_was_applied,
        }
    }
}

fn check_len(arch: &Architecture, msg: &ClientMessage) -> Result<(), AttackError> {
    if msg.delta.len() != arch.layout().len() {
        return Err(AttackError::LengthMismatch {
            expected: arch.layout().len(),
            found: msg.delta.len(),
        });
    }
    Ok(())
}

/// Closed-form input recovery for a one-sample, one-step `linear_pixel`
/// update. Values are clamped to `[0, 1]`.
pub fn analytic_invert_linear(msg: &ClientMessage, arch: &Architecture) -> Result<Vec<f64>, AttackError> {
    if arch.kind() != ModelKind::LinearPixel {
        return Err(AttackError::UnsupportedModel(arch.kind().name()));
    }
    check_len(arch, msg)?;
    let pixels = arch.pixels();
    let (w, b) = msg.delta.split_at(pixels * 9);
    let peak = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak.is_nan() || peak <= 0.0 {
        return Err(AttackError::Uninformative);
    }
    let mut out = vec![0.0; pixels * 3];
    for pix in 0..pixels {
        let bp = &b[pix * 3..pix * 3 + 3];
        let k = (0..NUM_CLASSES)
            .max_by(|&i, &j| bp[i].abs().total_cmp(&bp[j].abs()))
            .unwrap();
        if bp[k] == 0.0 {
            return Err(AttackError::Uninformative);
        }
        for c in 0..3 {
            out[pix * 3 + c] = (w[pix * 9 + k * 3 + c] / bp[k]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Per-pixel labels implied by the bias update of `linear_pixel`: the true
/// class is the only one whose residual is negative, so its bias moves up.
pub fn infer_labels_linear(msg: &ClientMessage, arch: &Architecture) -> Result<Vec<u8>, AttackError> {
    check_len(arch, msg)?;
    let b = &msg.delta[arch.pixels() * 9..];
    Ok(b.chunks_exact(3)
        .map(|d| (0..3).max_by(|&i, &j| d[i].total_cmp(&d[j]).then(j.cmp(&i))).unwrap() as u8)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Std of the noise added to the 0.5 gray start image.
    pub init_noise: f64,
    /// Relative probe size for the Jacobian-transpose difference.
    pub fd_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            init_noise: 0.05,
            fd_eps: 1e-4,
        }
    }
}

/// Output of [`optimize_invert`] before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub image: Vec<f64>,
    pub objective: f64,
    pub iterations_used: usize,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

struct Matcher<'a> {
    arch: &'a Architecture,
    theta: &'a ParamVector,
    labels: &'a [u8],
    target: Vec<f64>,
    target_norm: f64,
    fd_eps: f64,
}

impl Matcher<'_> {
    fn sample<'s>(&'s self, x: &'s [f64]) -> Sample<'s> {
        Sample {
            image: x,
            mask: self.labels,
        }
    }

    fn grad(&self, x: &[f64]) -> Result<(Vec<f64>, f64, f64), AttackError> {
        let (_, g) = self.arch.loss_grad(self.theta, &[self.sample(x)])?;
        let g = g.to_vec();
        let norm = l2_norm_slice(&g)?;
        let dot: f64 = g.iter().zip(&self.target).map(|(a, b)| a * b).sum();
        Ok((g, norm, dot))
    }

    fn objective(&self, x: &[f64]) -> Result<f64, AttackError> {
        let (_, norm, dot) = self.grad(x)?;
        if norm == 0.0 {
            return Ok(1.0);
        }
        Ok(1.0 - dot / (norm * self.target_norm))
    }

    /// Objective and its gradient with respect to the image.
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), AttackError> {
        let (g, norm, dot) = self.grad(x)?;
        if norm == 0.0 {
            return Ok((1.0, vec![0.0; x.len()]));
        }
        let f = 1.0 - dot / (norm * self.target_norm);
        // d f / d g = -(t / (|g||t|) - <g,t> g / (|g|³|t|))
        let a = 1.0 / (norm * self.target_norm);
        let c = dot / (norm.powi(3) * self.target_norm);
        let u: Vec<f64> = self.target.iter().zip(&g).map(|(t, gi)| -(a * t - c * gi)).collect();
        let u_norm = l2_norm_slice(&u)?;
        if u_norm == 0.0 {
            return Ok((f, vec![0.0; x.len()]));
        }
        let scale = self.fd_eps * l2_norm_slice(self.theta.values())?.max(1.0);
        let h = scale / u_norm;
        let shifted = |sign: f64| -> Result<Vec<f64>, AttackError> {
            let p: Vec<f64> = self
                .theta
                .values()
                .iter()
                .zip(&u)
                .map(|(t, ui)| t + sign * h * ui)
                .collect();
            let p = ParamVector::new(p, self.theta.layout_id())?;
            Ok(self.arch.input_grad(&p, self.sample(x))?.1)
        };
        let plus = shifted(1.0)?;
        let minus = shifted(-1.0)?;
        let dx = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        Ok((f, dx))
    }
}

/// Gray start image with seeded noise, clamped to `[0, 1]`.
pub fn initial_dummy(len: usize, noise: f64, init_seed: u64) -> Vec<f64> {
    let mut rng = seed::derived_stream(init_seed, Role::AttackInit, 0, 0);
    seed::standard_normals(&mut rng, len)
        .into_iter()
        .map(|z| (0.5 + noise * z).clamp(0.0, 1.0))
        .collect()
}

/// Gradient-matching inversion from the observed update and the broadcast
/// parameters. Labels come from the bias update for `linear_pixel` and from
/// the model's prediction on the start image otherwise.
pub fn optimize_invert(
    msg: &ClientMessage,
    arch: &Architecture,
    theta: &ParamVector,
    budget: usize,
    init_seed: u64,
    opt: &OptimizerConfig,
) -> Result<Inversion, AttackError> {
    check_len(arch, msg)?;
    arch.layout().check(theta)?;
    let mut x = initial_dummy(arch.pixels() * 3, opt.init_noise, init_seed);
    let labels = match arch.kind() {
        ModelKind::LinearPixel => infer_labels_linear(msg, arch)?,
        ModelKind::MicroDualBranch => arch.predict(theta, &x)?,
    };
    let target: Vec<f64> = msg.delta.iter().map(|d| -d).collect();
    let target_norm = l2_norm_slice(&target)?;
    if target_norm == 0.0 {
        return Err(AttackError::Uninformative);
    }
    let m = Matcher {
        arch,
        theta,
        labels: &labels,
        target,
        target_norm,
        fd_eps: opt.fd_eps,
    };
    let mut f = m.objective(&x)?;
    if !f.is_finite() {
        return Err(AttackError::NonFinite(0));
    }
    let mut trace = vec![f];
    let mut m1 = vec![0.0; x.len()];
    let mut m2 = vec![0.0; x.len()];
    let mut step = opt.step;
    let mut used = 0;
    let mut t = 0i32;
    while used < budget && step > 1e-12 {
        used += 1;
        let (fx, g) = m.value_and_grad(&x)?;
        if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(AttackError::NonFinite(used));
        }
        t += 1;
        for i in 0..x.len() {
            m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * g[i];
            m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * g[i] * g[i];
        }
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        let candidate: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, xi)| (xi - step * (m1[i] / c1) / ((m2[i] / c2).sqrt() + 1e-12)).clamp(0.0, 1.0))
            .collect();
        let fc = m.objective(&candidate)?;
        if !fc.is_finite() {
            return Err(AttackError::NonFinite(used));
        }
        if fc <= f {
            x = candidate;
            f = fc;
            trace.push(f);
            step = (step * 1.1).min(opt.step);
        } else {
            step *= 0.5;
        }
    }
    Ok(Inversion {
        image: x,
        objective: f,
        iterations_used: used,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Analytic,
    Optimize,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Analytic => "analytic",
            Method::Optimize => "optimize",
        }
    }
}

/// Settings for a batch of paired trials.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSetup {
    pub model_kind: ModelKind,
    pub h: usize,
    pub w: usize,
    pub lr: f64,
    /// Privacy setting used for the DP side of each pair.
    pub dp: DpConfig,
    pub budget: usize,
    pub trials: usize,
    pub root_seed: u64,
    pub optimizer: OptimizerConfig,
}

impl AttackSetup {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.trials == 0 {
            return Err(AttackError::InvalidArgument("trials must be >= 1".into()));
        }
        if self.dp.mechanism == Mechanism::None {
            return Err(AttackError::InvalidArgument("the DP side needs a mechanism".into()));
        }
        self.dp
            .validate()
            .map_err(|e| AttackError::InvalidArgument(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub dp: bool,
    pub method: Method,
    pub result: AttackResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutput {
    pub trial: usize,
    pub truth: Vec<f64>,
    pub records: Vec<TrialRecord>,
}

/// The intercepted upload of one client holding a single sample, trained for
/// one full-batch step from `theta`.
pub fn victim_update(
    arch: &Architecture,
    theta: &ParamVector,
    image: &[f64],
    mask: &[u8],
    lr: f64,
    dp: &DpConfig,
    noise_seed: u64,
) -> Result<ClientMessage, AttackError> {
    let data = crate::learn::SegDataset::from_parts(arch.height(), arch.width(), image.to_vec(), mask.to_vec())?;
    let state = ClientState {
        client_id: 0,
        shard: Shard {
            data: Arc::new(data),
            indices: vec![0],
        },
        rng_seed: noise_seed,
        hyper: LocalHyper {
            lr,
            batch_size: 1,
            local_epochs: 1,
            schedule: LocalSchedule::Epochs,
        },
    };
    Ok(client_round(arch, theta, &state, dp, 0)?)
}

/// One pair of attacks (with and without DP) on the same sample and model.
pub fn run_trial(setup: &AttackSetup, trial: usize, dp_modes: &[bool]) -> Result<TrialOutput, AttackError> {
    let arch = Architecture::new(setup.model_kind, setup.h, setup.w)?;
    let sample_seed = seed::derive(setup.root_seed, Role::AttackSample, trial as u64, 0);
    let data = gen_dataset(1, setup.h, setup.w, sample_seed)?;
    let truth = data.image(0).to_vec();
    let theta = init_global(&arch, sample_seed);
    let init_seed = seed::derive(setup.root_seed, Role::AttackInit, trial as u64, 0);
    let mut records = Vec::new();
    for &with_dp in dp_modes {
        let dp = if with_dp { setup.dp } else { DpConfig::disabled() };
        let msg = victim_update(&arch, &theta, &truth, data.mask(0), setup.lr, &dp, sample_seed)?;
        if arch.kind() == ModelKind::LinearPixel {
            let rec = match analytic_invert_linear(&msg, &arch) {
                Ok(img) => img,
                Err(AttackError::Uninformative) => vec![0.5; truth.len()],
                Err(e) => return Err(e),
            };
            records.push(TrialRecord {
                trial,
                dp: with_dp,
                method: Method::Analytic,
                result: AttackResult::score(rec, &truth, 1, msg.dp_applied),
            });
        }
        let inv = optimize_invert(&msg, &arch, &theta, setup.budget, init_seed, &setup.optimizer)?;
        records.push(TrialRecord {
            trial,
            dp: with_dp,
            method: Method::Optimize,
            result: AttackResult::score(inv.image, &truth, inv.iterations_used, msg.dp_applied),
        });
    }
    Ok(TrialOutput { trial, truth, records })
}

pub fn run_trials(setup: &AttackSetup, dp_modes: &[bool]) -> Result<Vec<TrialOutput>, AttackError> {
    setup.validate()?;
    (0..setup.trials)
        .into_par_iter()
        .map(|t| run_trial(setup, t, dp_modes))
        .collect()
}

/// Median MSE and PSNR of one (method, dp) arm.
pub fn arm_medians(outputs: &[TrialOutput], method: Method, dp: bool) -> Option<(f64, f64)> {
    let pick = |f: fn(&AttackResult) -> f64| {
        let mut v: Vec<f64> = outputs
            .iter()
            .flat_map(|o| &o.records)
            .filter(|r| r.method == method && r.dp == dp)
            .map(|r| f(&r.result))
            .collect();
        (!v.is_empty()).then(|| crate::experiment::median(&mut v))
    };
    Some((pick(|r| r.mse)?, pick(|r| r.psnr)?))
}

/// Plain (ASCII) PPM of an interleaved RGB image in `[0, 1]`.
pub fn to_ppm(image: &[f64], h: usize, w: usize) -> String {
    let mut out = format!("P3\n{w} {h}\n255\n");
    for row in image.chunks(w * 3) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(h: usize, w: usize) -> Architecture {
        Architecture::new(ModelKind::LinearPixel, h, w).unwrap()
    }

    fn pair(h: usize, w: usize, seed_: u64) -> (Architecture, ParamVector, Vec<f64>, Vec<u8>) {
        let arch = linear(h, w);
        let theta = arch.init(seed_);
        let ds = gen_dataset(1, h, w, seed_).unwrap();
        (arch, theta, ds.image(0).to_vec(), ds.mask(0).to_vec())
    }

    #[test]
    fn analytic_inversion_is_exact_without_noise() {
        let (arch, theta, x, y) = pair(8, 8, 4);
        let msg = victim_update(&arch, &theta, &x, &y, 0.1, &DpConfig::disabled(), 1).unwrap();
        let rec = analytic_invert_linear(&msg, &arch).unwrap();
        assert!(mse(&rec, &x) < 1e-8, "{}", mse(&rec, &x));
        assert_eq!(infer_labels_linear(&msg, &arch).unwrap(), y);
    }

    #[test]
    fn zero_update_is_uninformative() {
        let arch = linear(8, 8);
        let msg = ClientMessage::new(0, 0, vec![0.0; arch.layout().len()], false);
        assert_eq!(analytic_invert_linear(&msg, &arch), Err(AttackError::Uninformative));
        let theta = arch.init(0);
        assert_eq!(
            optimize_invert(&msg, &arch, &theta, 5, 0, &OptimizerConfig::default()).unwrap_err(),
            AttackError::Uninformative
        );
    }

    #[test]
    fn analytic_needs_linear_model() {
        let arch = Architecture::new(ModelKind::MicroDualBranch, 8, 8).unwrap();
        let msg = ClientMessage::new(0, 0, vec![1.0; arch.layout().len()], false);
        assert!(matches!(analytic_invert_linear(&msg, &arch), Err(AttackError::UnsupportedModel(_))));
    }

    #[test]
    fn zero_budget_returns_start_image() {
        let (arch, theta, x, y) = pair(8, 8, 2);
        let msg = victim_update(&arch, &theta, &x, &y, 0.1, &DpConfig::disabled(), 1).unwrap();
        let inv = optimize_invert(&msg, &arch, &theta, 0, 7, &OptimizerConfig::default()).unwrap();
        assert_eq!(inv.iterations_used, 0);
        assert_eq!(inv.image, initial_dummy(x.len(), 0.05, 7));
        let res = AttackResult::score(inv.image, &x, 0, false);
        assert!((res.psnr + 10.0 * res.mse.log10()).abs() < 1e-12);
    }

    #[test]
    fn objective_never_increases_and_run_is_deterministic() {
        let (arch, theta, x, y) = pair(8, 8, 3);
        let msg = victim_update(&arch, &theta, &x, &y, 0.1, &DpConfig::disabled(), 1).unwrap();
        let a = optimize_invert(&msg, &arch, &theta, 100, 5, &OptimizerConfig::default()).unwrap();
        assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
        let b = optimize_invert(&msg, &arch, &theta, 100, 5, &OptimizerConfig::default()).unwrap();
        assert_eq!(a, b);
        let start = mse(&initial_dummy(x.len(), 0.05, 5), &x);
        assert!(mse(&a.image, &x) < start);
    }

    #[test]
    fn micro_model_inversion_runs() {
        let arch = Architecture::new(ModelKind::MicroDualBranch, 8, 8).unwrap();
        let theta = arch.init(1);
        let ds = gen_dataset(1, 8, 8, 1).unwrap();
        let msg = victim_update(&arch, &theta, ds.image(0), ds.mask(0), 0.1, &DpConfig::disabled(), 1).unwrap();
        let inv = optimize_invert(&msg, &arch, &theta, 20, 0, &OptimizerConfig::default()).unwrap();
        assert!(inv.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn input_jacobian_product_matches_finite_difference_of_objective() {
        let (arch, theta, x, y) = pair(8, 8, 6);
        let msg = victim_update(&arch, &theta, &x, &y, 0.1, &DpConfig::disabled(), 1).unwrap();
        let labels = infer_labels_linear(&msg, &arch).unwrap();
        let target: Vec<f64> = msg.delta.iter().map(|d| -d).collect();
        let m = Matcher {
            arch: &arch,
            theta: &theta,
            labels: &labels,
            target_norm: l2_norm_slice(&target).unwrap(),
            target,
            fd_eps: 1e-4,
        };
        let x0 = initial_dummy(x.len(), 0.1, 3);
        let (_, g) = m.value_and_grad(&x0).unwrap();
        for i in [0, 17, 100, 191] {
            let h = 1e-6;
            let mut a = x0.clone();
            a[i] += h;
            let mut b = x0.clone();
            b[i] -= h;
            let fd = (m.objective(&a).unwrap() - m.objective(&b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn ppm_format() {
        let p = to_ppm(&[0.0, 0.5, 1.0, 1.0, 1.0, 1.0], 1, 2);
        assert_eq!(p, "P3\n2 1\n255\n0 128 255 255 255 255\n");
    }
}
