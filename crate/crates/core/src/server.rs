//! Global model state, client selection, aggregation and the round loop.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{client_round, ClientError, ClientState};
use crate::dp::{self, DpConfig, DpError, Mechanism, NoiseSite};
use crate::learn::{evaluate, Architecture, LearnError, SegDataset};
use crate::net::{ChannelError, ClientMessage, ServerMessage, Transport, WireError};
use crate::params::{ParamError, ParamVector};
use crate::seed::{self, Role};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("update from client {client} is for round {found}, expected {expected}")]
    MixedRounds { client: u32, expected: u32, found: u32 },
    #[error("update from client {client} has {found} values, expected {expected}")]
    LengthMismatch { client: u32, expected: usize, found: usize },
    #[error("duplicate update from client {0}")]
    DuplicateClient(u32),
    #[error("round {0}: no client update arrived")]
    RoundFailed(u32),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model diverged in round {0}")]
    Diverged(u32),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Metrics logged after each completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub loss: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub acc: f64,
    /// `None` when no mechanism is active.
    pub epsilon_paper: Option<f64>,
    pub epsilon_classic: Option<f64>,
    pub participating_clients: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RoundState {
    /// Number of completed rounds.
    pub round_t: u32,
    pub theta: ParamVector,
    pub selected: Vec<u32>,
    pub history: Vec<RoundRecord>,
}

impl RoundState {
    pub fn new(theta: ParamVector) -> Self {
        Self {
            round_t: 0,
            theta,
            selected: Vec::new(),
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    Loss,
    Dice,
    Jaccard,
    Acc,
}

/// Stop once `metric` has not improved by `min_delta` for `patience` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    pub metric: StopMetric,
    pub patience: u32,
    #[serde(default)]
    pub min_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    pub max_rounds: u32,
    #[serde(default)]
    pub convergence: Option<Convergence>,
}

impl StopRule {
    pub fn should_stop(&self, history: &[RoundRecord]) -> bool {
        if history.len() >= self.max_rounds as usize {
            return true;
        }
        let Some(c) = self.convergence else {
            return false;
        };
        if c.patience == 0 || history.len() <= c.patience as usize {
            return false;
        }
        let value = |r: &RoundRecord| match c.metric {
            StopMetric::Loss => -r.loss,
            StopMetric::Dice => r.dice,
            StopMetric::Jaccard => r.jaccard,
            StopMetric::Acc => r.acc,
        };
        let split = history.len() - c.patience as usize;
        let best_before = history[..split].iter().map(value).fold(f64::NEG_INFINITY, f64::max);
        let best_after = history[split..].iter().map(value).fold(f64::NEG_INFINITY, f64::max);
        best_after < best_before + c.min_delta
    }
}

/// How client updates are weighted in the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Equal,
    ShardSize,
}

pub fn init_global(arch: &Architecture, root_seed: u64) -> ParamVector {
    arch.init(seed::derive(root_seed, Role::Init, 0, 0))
}

/// Draws `k` distinct ids uniformly from `registered` and returns them
/// ascending.
pub fn select_clients<R: rand::Rng + ?Sized>(
    registered: &[u32],
    k: usize,
    rng: &mut R,
) -> Result<Vec<u32>, ServerError> {
    if k == 0 || k > registered.len() {
        return Err(ServerError::InvalidArgument(format!(
            "cannot select {k} of {} clients",
            registered.len()
        )));
    }
    let mut out: Vec<u32> = if k == registered.len() {
        registered.to_vec()
    } else {
        index::sample(rng, registered.len(), k)
            .into_iter()
            .map(|i| registered[i])
            .collect()
    };
    out.sort_unstable();
    Ok(out)
}

/// `θ + Σ w_i Δ_i / Σ w_i`, summing in ascending client id order. Equal
/// weights give `θ + mean(Δ)`.
pub fn aggregate_weighted(
    theta: &ParamVector,
    round: u32,
    updates: &[ClientMessage],
    weight: impl Fn(u32) -> f64,
) -> Result<ParamVector, ServerError> {
    if updates.is_empty() {
        return Err(ServerError::NoUpdates);
    }
    let mut order: Vec<&ClientMessage> = updates.iter().collect();
    order.sort_by_key(|m| m.client_id);
    for pair in order.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(ServerError::DuplicateClient(pair[0].client_id));
        }
    }
    let mut sum = vec![0.0; theta.len()];
    let mut total_weight = 0.0;
    for m in &order {
        if m.round != round {
            return Err(ServerError::MixedRounds {
                client: m.client_id,
                expected: round,
                found: m.round,
            });
        }
        if m.delta.len() != theta.len() {
            return Err(ServerError::LengthMismatch {
                client: m.client_id,
                expected: theta.len(),
                found: m.delta.len(),
            });
        }
        let w = weight(m.client_id);
        if !(w > 0.0 && w.is_finite()) {
            return Err(ServerError::InvalidArgument(format!(
                "weight for client {} must be positive, got {w}",
                m.client_id
            )));
        }
        total_weight += w;
        for (s, d) in sum.iter_mut().zip(&m.delta) {
            *s += w * d;
        }
    }
    let values = theta
        .values()
        .iter()
        .zip(&sum)
        .map(|(t, s)| t + s / total_weight)
        .collect();
    ParamVector::new(values, theta.layout_id()).map_err(|_| ServerError::Diverged(round))
}

pub fn aggregate(theta: &ParamVector, round: u32, updates: &[ClientMessage]) -> Result<ParamVector, ServerError> {
    aggregate_weighted(theta, round, updates, |_| 1.0)
}

/// Server-side perturbation of the mean: noise with the client-side
/// distribution, divided by the number of contributors.
pub fn server_noise(
    theta: &ParamVector,
    cfg: &DpConfig,
    contributors: usize,
    root_seed: u64,
    round: u32,
) -> Result<ParamVector, ServerError> {
    let mut rng = seed::derived_stream(root_seed, Role::ServerNoise, 0, round.into());
    match dp::mechanism_noise(theta.layout_id(), theta.len(), cfg, &mut rng) {
        Some(noise) => Ok(theta.add(&noise.scale(1.0 / contributors as f64)?)?),
        None => Ok(theta.clone()),
    }
}

/// Held-out evaluation split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub data: Arc<SegDataset>,
    pub indices: Vec<usize>,
}

/// Everything the server needs to run rounds: the model, the registered
/// clients (indexed by id), the privacy setting and the simulated network.
#[derive(Debug)]
pub struct Federation {
    pub arch: Architecture,
    pub clients: Vec<ClientState>,
    pub dp: DpConfig,
    pub transport: Transport,
    pub eval: EvalSet,
    pub root_seed: u64,
    pub clients_per_round: usize,
    pub weighting: Weighting,
}

impl Federation {
    pub fn registered(&self) -> Vec<u32> {
        self.clients.iter().map(|c| c.client_id).collect()
    }

    fn privacy_columns(&self) -> (Option<f64>, Option<f64>) {
        match self.dp.mechanism {
            Mechanism::None => (None, None),
            _ => {
                let r = self.dp.report();
                (Some(r.epsilon_linear), Some(r.epsilon_classic))
            }
        }
    }

    /// One synchronous round: broadcast, local training, upload, aggregation
    /// and held-out evaluation.
    pub fn run_round(&mut self, state: &RoundState) -> Result<RoundState, ServerError> {
        let started = Instant::now();
        let round = state.round_t;
        let mut sel_rng = seed::derived_stream(self.root_seed, Role::Selection, 0, round.into());
        let selected = select_clients(&self.registered(), self.clients_per_round, &mut sel_rng)?;
        let digest = state.theta.layout_id().0;
        let broadcast = ServerMessage::new(round, state.theta.to_vec(), digest).encode();
        for &id in &selected {
            self.transport.downlinks[id as usize].send(broadcast.clone())?;
        }
        let latency = self.transport.latency();
        self.transport.advance_downlinks(latency);

        let mut reached = Vec::new();
        for &id in &selected {
            if let Some(bytes) = self.transport.downlinks[id as usize].recv()? {
                let msg = ServerMessage::decode(&bytes)?;
                if msg.round != round || msg.layout_digest != digest {
                    return Err(ServerError::InvalidArgument(format!(
                        "client {id} received a model for round {} / layout {:x}",
                        msg.round, msg.layout_digest
                    )));
                }
                let theta = ParamVector::new(msg.theta, state.theta.layout_id())?;
                reached.push((id, theta));
            }
        }

        let arch = &self.arch;
        let clients = &self.clients;
        let dp_cfg = &self.dp;
        let uploads: Vec<Result<Vec<u8>, ClientError>> = reached
            .par_iter()
            .map(|(id, theta)| {
                client_round(arch, theta, &clients[*id as usize], dp_cfg, round).map(|m| m.encode())
            })
            .collect();
        for ((id, _), upload) in reached.iter().zip(uploads) {
            self.transport.uplinks[*id as usize].send(upload?)?;
        }
        self.transport.advance_uplinks(latency);

        let mut updates = Vec::new();
        for &id in &selected {
            while let Some(bytes) = self.transport.uplinks[id as usize].recv()? {
                updates.push(ClientMessage::decode(&bytes)?);
            }
        }
        if updates.is_empty() {
            return Err(ServerError::RoundFailed(round));
        }

        let mut theta = match self.weighting {
            Weighting::Equal => aggregate(&state.theta, round, &updates)?,
            Weighting::ShardSize => {
                aggregate_weighted(&state.theta, round, &updates, |id| clients[id as usize].shard.len() as f64)?
            }
        };
        if self.dp.noise_site == NoiseSite::Server {
            theta = server_noise(&theta, &self.dp, updates.len(), self.root_seed, round)?;
        }

        let eval = evaluate(&self.arch, &theta, &self.eval.data, &self.eval.indices)?;
        if !eval.loss.is_finite() {
            return Err(ServerError::Diverged(round));
        }
        let (epsilon_paper, epsilon_classic) = self.privacy_columns();
        let mut history = state.history.clone();
        history.push(RoundRecord {
            round: round + 1,
            loss: eval.loss,
            dice: eval.metrics.dice,
            jaccard: eval.metrics.jaccard,
            acc: eval.metrics.acc,
            epsilon_paper,
            epsilon_classic,
            participating_clients: updates.len(),
            wall_ms: started.elapsed().as_millis() as u64,
        });
        Ok(RoundState {
            round_t: round + 1,
            theta,
            selected,
            history,
        })
    }

    /// Runs rounds from `state` until `stop` fires. A round in which every
    /// message was dropped keeps the previous model and is not logged.
    pub fn run(&mut self, mut state: RoundState, stop: &StopRule) -> Result<RoundState, ServerError> {
        let mut failed = 0u32;
        while !stop.should_stop(&state.history) {
            match self.run_round(&state) {
                Ok(next) => {
                    state = next;
                    failed = 0;
                }
                Err(ServerError::RoundFailed(_)) if failed < 100 => {
                    failed += 1;
                    state.round_t += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;
    use proptest::prelude::*;

    fn msg(round: u32, id: u32, delta: Vec<f64>) -> ClientMessage {
        ClientMessage::new(round, id, delta, false)
    }

    fn theta(values: Vec<f64>) -> ParamVector {
        ParamVector::new(values, crate::params::LayoutId(1)).unwrap()
    }

    #[test]
    fn aggregate_is_theta_plus_mean() {
        let t = theta(vec![1.0, 2.0]);
        let out = aggregate(&t, 0, &[msg(0, 1, vec![1.0, 0.0]), msg(0, 0, vec![3.0, -2.0])]).unwrap();
        assert_eq!(out.values(), &[3.0, 1.0]);
    }

    #[test]
    fn aggregate_is_order_independent_bitwise() {
        let t = theta(vec![0.1, 0.2, 0.3]);
        let a = msg(0, 0, vec![0.1, 1e-17, 3.3]);
        let b = msg(0, 1, vec![1e16, 0.7, -3.3]);
        let c = msg(0, 2, vec![-1e16, 0.9, 1e-3]);
        let x = aggregate(&t, 0, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = aggregate(&t, 0, &[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_deltas_leave_theta_unchanged() {
        let t = theta(vec![0.1, -3.7, 1e-300, 5e300]);
        let msgs: Vec<_> = (0..4).map(|i| msg(2, i, vec![0.0; 4])).collect();
        let out = aggregate(&t, 2, &msgs).unwrap();
        let bits = |v: &ParamVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&t));
    }

    proptest! {
        #[test]
        fn aggregate_ignores_message_order(
            deltas in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..8),
            shuffle_seed in any::<u64>(),
        ) {
            let t = theta(vec![0.5; 5]);
            let msgs: Vec<_> = deltas.into_iter().enumerate().map(|(i, d)| msg(0, i as u32, d)).collect();
            let mut shuffled = msgs.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut stream(shuffle_seed));
            prop_assert_eq!(aggregate(&t, 0, &msgs).unwrap(), aggregate(&t, 0, &shuffled).unwrap());
        }
    }

    #[test]
    fn aggregate_errors() {
        let t = theta(vec![0.0]);
        assert_eq!(aggregate(&t, 0, &[]), Err(ServerError::NoUpdates));
        assert!(matches!(
            aggregate(&t, 1, &[msg(1, 0, vec![0.0]), msg(2, 1, vec![0.0])]),
            Err(ServerError::MixedRounds { client: 1, .. })
        ));
        assert!(matches!(
            aggregate(&t, 0, &[msg(0, 0, vec![0.0, 1.0])]),
            Err(ServerError::LengthMismatch { .. })
        ));
        assert_eq!(
            aggregate(&t, 0, &[msg(0, 3, vec![0.0]), msg(0, 3, vec![1.0])]),
            Err(ServerError::DuplicateClient(3))
        );
    }

    #[test]
    fn weighted_aggregate() {
        let t = theta(vec![0.0]);
        let out = aggregate_weighted(&t, 0, &[msg(0, 0, vec![1.0]), msg(0, 1, vec![4.0])], |id| {
            if id == 0 {
                3.0
            } else {
                1.0
            }
        })
        .unwrap();
        assert_eq!(out.values(), &[7.0 / 4.0]);
    }

    #[test]
    fn selection_is_sorted_distinct_and_seeded() {
        let ids: Vec<u32> = (0..10).collect();
        let a = select_clients(&ids, 4, &mut stream(1)).unwrap();
        assert_eq!(a, select_clients(&ids, 4, &mut stream(1)).unwrap());
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_clients(&ids, 10, &mut stream(1)).unwrap(), ids);
        assert!(select_clients(&ids, 11, &mut stream(1)).is_err());
        assert!(select_clients(&ids, 0, &mut stream(1)).is_err());
    }

    fn record(round: u32, dice: f64) -> RoundRecord {
        RoundRecord {
            round,
            loss: 1.0 - dice,
            dice,
            jaccard: dice,
            acc: dice,
            epsilon_paper: None,
            epsilon_classic: None,
            participating_clients: 1,
            wall_ms: 0,
        }
    }

    #[test]
    fn stop_rule_max_rounds_and_plateau() {
        let plain = StopRule {
            max_rounds: 3,
            convergence: None,
        };
        let hist: Vec<_> = (1..=2).map(|r| record(r, 0.5)).collect();
        assert!(!plain.should_stop(&hist));
        assert!(plain.should_stop(&[hist.clone(), vec![record(3, 0.5)]].concat()));

        let patient = StopRule {
            max_rounds: 100,
            convergence: Some(Convergence {
                metric: StopMetric::Dice,
                patience: 3,
                min_delta: 1e-3,
            }),
        };
        let mut improving: Vec<_> = (1..=6).map(|r| record(r, 0.1 * r as f64)).collect();
        assert!(!patient.should_stop(&improving));
        for r in 7..=9 {
            improving.push(record(r, 0.6));
        }
        assert!(patient.should_stop(&improving));
    }
}
