//! Local training on a client's shard and the privatized upload.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{self, DpConfig, DpError, Mechanism, NoiseSite};
use crate::learn::{Architecture, LearnError, Sample, SegDataset};
use crate::net::ClientMessage;
use crate::params::{ParamError, ParamVector};
use crate::seed::{self, Role, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("client {client} diverged in round {round} at step {step}")]
    Diverged { client: u32, round: u32, step: u64 },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// How `local_epochs` is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalSchedule {
    /// Full passes over the shard, reshuffled each pass.
    #[default]
    Epochs,
    /// Individual minibatch steps.
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: u32,
    #[serde(default)]
    pub schedule: LocalSchedule,
}

impl LocalHyper {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ClientError::InvalidHyper(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(ClientError::InvalidHyper("batch_size must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(ClientError::InvalidHyper("local_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// A client's private shard: indices into a shared dataset.
#[derive(Debug, Clone)]
pub struct Shard {
    pub data: Arc<SegDataset>,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub shard: Shard,
    /// Root seed; per-round training and noise streams are derived from it.
    pub rng_seed: u64,
    pub hyper: LocalHyper,
}

/// SGD state for one round. The running update is kept separately from the
/// starting point so a single step yields exactly `-lr·∇L(θ)`.
#[derive(Debug, Clone)]
pub struct LocalTrainer<'a> {
    arch: &'a Architecture,
    base: ParamVector,
    delta: Vec<f64>,
    steps: u64,
    client: u32,
    round: u32,
}

impl<'a> LocalTrainer<'a> {
    pub fn new(arch: &'a Architecture, theta: &ParamVector, client: u32, round: u32) -> Result<Self, ClientError> {
        arch.layout().check(theta)?;
        Ok(Self {
            arch,
            base: theta.clone(),
            delta: vec![0.0; theta.len()],
            steps: 0,
            client,
            round,
        })
    }

    pub fn current(&self) -> Result<ParamVector, ClientError> {
        let values = self
            .base
            .values()
            .iter()
            .zip(&self.delta)
            .map(|(t, d)| t + d)
            .collect();
        ParamVector::new(values, self.base.layout_id()).map_err(|_| self.diverged())
    }

    pub fn delta(&self) -> Result<ParamVector, ClientError> {
        ParamVector::new(self.delta.clone(), self.base.layout_id()).map_err(|_| self.diverged())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn diverged(&self) -> ClientError {
        ClientError::Diverged {
            client: self.client,
            round: self.round,
            step: self.steps,
        }
    }

    /// One SGD step on the given minibatch.
    pub fn step(&mut self, batch: &[Sample<'_>], lr: f64) -> Result<f64, ClientError> {
        let params = self.current()?;
        let (loss, grad) = match self.arch.loss_grad(&params, batch) {
            Ok(v) => v,
            Err(LearnError::NonFinite(_)) | Err(LearnError::Param(ParamError::NonFinite { .. })) => {
                return Err(self.diverged())
            }
            Err(e) => return Err(e.into()),
        };
        for (d, g) in self.delta.iter_mut().zip(grad.values()) {
            *d -= lr * g;
        }
        self.steps += 1;
        if self.delta.iter().any(|d| !d.is_finite()) {
            return Err(self.diverged());
        }
        Ok(loss)
    }

    /// Runs `count` units of `hyper.schedule` over `shard`, drawing minibatch
    /// order from `rng`. Calling this twice with `count = 1` is identical to
    /// one call with `count = 2`.
    pub fn train(
        &mut self,
        shard: &Shard,
        hyper: &LocalHyper,
        count: u32,
        rng: &mut Stream,
    ) -> Result<(), ClientError> {
        hyper.validate()?;
        if shard.is_empty() {
            return Err(ClientError::InvalidHyper("empty shard".into()));
        }
        let mut order = shard.indices.clone();
        match hyper.schedule {
            LocalSchedule::Epochs => {
                for _ in 0..count {
                    order.copy_from_slice(&shard.indices);
                    order.shuffle(rng);
                    for chunk in order.chunks(hyper.batch_size) {
                        let batch: Vec<_> = chunk.iter().map(|&i| shard.data.sample(i)).collect();
                        self.step(&batch, hyper.lr)?;
                    }
                }
            }
            LocalSchedule::Steps => {
                for _ in 0..count {
                    let batch: Vec<_> = (0..hyper.batch_size.min(order.len()))
                        .map(|_| {
                            let j = (seed::uniform(rng) * order.len() as f64) as usize;
                            shard.data.sample(order[j.min(order.len() - 1)])
                        })
                        .collect();
                    self.step(&batch, hyper.lr)?;
                }
            }
        }
        Ok(())
    }
}

/// Stream that orders a client's minibatches in `round`.
pub fn train_stream(state: &ClientState, round: u32) -> Stream {
    seed::derived_stream(state.rng_seed, Role::ClientTrain, state.client_id.into(), round.into())
}

/// Stream for the client-side noise in `round`.
pub fn noise_stream(state: &ClientState, round: u32) -> Stream {
    seed::derived_stream(state.rng_seed, Role::ClientNoise, state.client_id.into(), round.into())
}

/// Trains from `theta` and returns `θ_local − θ`.
pub fn client_update(
    arch: &Architecture,
    theta: &ParamVector,
    state: &ClientState,
    round: u32,
) -> Result<ParamVector, ClientError> {
    let mut trainer = LocalTrainer::new(arch, theta, state.client_id, round)?;
    let mut rng = train_stream(state, round);
    trainer.train(&state.shard, &state.hyper, state.hyper.local_epochs, &mut rng)?;
    trainer.delta()
}

/// Local update, clipped to `clip_c` and (for client-side noise) perturbed,
/// ready to send. Clipping applies even when no mechanism is active.
pub fn client_round(
    arch: &Architecture,
    theta: &ParamVector,
    state: &ClientState,
    dp_cfg: &DpConfig,
    round: u32,
) -> Result<ClientMessage, ClientError> {
    let delta = client_update(arch, theta, state, round)?;
    let (out, applied) = match (dp_cfg.mechanism, dp_cfg.noise_site) {
        (_, NoiseSite::Client) if dp_cfg.mechanism != Mechanism::None => {
            let mut rng = noise_stream(state, round);
            (dp::privatize(&delta, dp_cfg, &mut rng)?, true)
        }
        _ => {
            dp_cfg.validate()?;
            (dp::clip_update(&delta, dp_cfg.clip_c)?, false)
        }
    };
    Ok(ClientMessage::new(round, state.client_id, out.to_vec(), applied))
}
