use feddp::client::client_round;
use feddp::dp::{DpConfig, NoiseSite};
use feddp::experiment::{run_experiment, DatasetConfig, ExperimentConfig, Setup};
use feddp::learn::PartitionMode;
use feddp::net::ChannelConfig;
use feddp::params::ParamVector;
use feddp::server::{init_global, RoundState, ServerError, Weighting};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        clients: 3,
        local_epochs: 2,
        rounds: 4,
        dataset: DatasetConfig {
            n: 40,
            h: 16,
            w: 16,
            ..DatasetConfig::default()
        },
        root_seed: 17,
        ..ExperimentConfig::default()
    }
}

/// Single-process reference: every client trains in id order and the mean is
/// accumulated with a plain loop.
fn sequential(cfg: &ExperimentConfig, rounds: u32) -> Vec<ParamVector> {
    let setup = Setup::build(cfg).unwrap();
    let clients = setup.client_states(cfg);
    let mut theta = init_global(&setup.arch, cfg.root_seed);
    let mut out = vec![theta.clone()];
    for t in 0..rounds {
        let mut sum = vec![0.0; theta.len()];
        for c in &clients {
            let msg = client_round(&setup.arch, &theta, c, &cfg.dp, t).unwrap();
            for (s, d) in sum.iter_mut().zip(&msg.delta) {
                *s += d;
            }
        }
        let next: Vec<f64> = theta
            .values()
            .iter()
            .zip(&sum)
            .map(|(a, s)| a + s / clients.len() as f64)
            .collect();
        theta = ParamVector::new(next, theta.layout_id()).unwrap();
        out.push(theta.clone());
    }
    out
}

fn distributed(cfg: &ExperimentConfig, rounds: u32) -> Vec<ParamVector> {
    let setup = Setup::build(cfg).unwrap();
    let mut fed = setup.federation(cfg).unwrap();
    let mut state = RoundState::new(init_global(&setup.arch, cfg.root_seed));
    let mut out = vec![state.theta.clone()];
    for _ in 0..rounds {
        state = fed.run_round(&state).unwrap();
        out.push(state.theta.clone());
    }
    out
}

#[test]
fn lossless_network_matches_sequential_reference() {
    let mut cfg = small();
    cfg.dp = DpConfig::disabled();
    assert_eq!(distributed(&cfg, 4), sequential(&cfg, 4));
}

#[test]
fn client_noise_matches_sequential_reference() {
    let cfg = small();
    assert_eq!(distributed(&cfg, 3), sequential(&cfg, 3));
}

#[test]
fn latency_does_not_change_the_trajectory() {
    let mut cfg = small();
    cfg.dp = DpConfig::disabled();
    cfg.transport = ChannelConfig {
        latency_ticks: 7,
        ..ChannelConfig::default()
    };
    assert_eq!(distributed(&cfg, 2), sequential(&cfg, 2));
}

#[test]
fn drops_reduce_participation() {
    let mut cfg = small();
    cfg.rounds = 10;
    cfg.clients = 5;
    cfg.transport = ChannelConfig {
        drop_rate: 0.4,
        ..ChannelConfig::default()
    };
    let out = run_experiment(&cfg).unwrap();
    let counts: Vec<usize> = out.history().iter().map(|r| r.participating_clients).collect();
    assert_eq!(counts.len(), 10);
    assert!(counts.iter().all(|&c| (1..=5).contains(&c)));
    assert!(counts.iter().any(|&c| c < 5), "{counts:?}");
    let rounds: Vec<u32> = out.history().iter().map(|r| r.round).collect();
    assert!(rounds.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn partial_participation_selects_k_clients() {
    let mut cfg = small();
    cfg.clients = 4;
    cfg.clients_per_round = Some(2);
    let setup = Setup::build(&cfg).unwrap();
    let mut fed = setup.federation(&cfg).unwrap();
    let mut state = RoundState::new(init_global(&setup.arch, cfg.root_seed));
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..6 {
        state = fed.run_round(&state).unwrap();
        assert_eq!(state.selected.len(), 2);
        seen.extend(state.selected.iter().copied());
    }
    assert!(seen.len() > 2);
}

#[test]
fn server_site_noise_changes_the_model() {
    let mut cfg = small();
    let client_side = run_experiment(&cfg).unwrap();
    cfg.dp.noise_site = NoiseSite::Server;
    let server_side = run_experiment(&cfg).unwrap();
    assert_ne!(client_side.state.theta, server_side.state.theta);
    assert!(server_side.history().iter().all(|r| r.loss.is_finite()));
}

#[test]
fn shard_size_weighting_runs_with_label_skew() {
    let mut cfg = small();
    cfg.weighting = Weighting::ShardSize;
    cfg.dataset.partition = PartitionMode::LabelSkew { factor: 1.5 };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.history().len(), 4);
}

#[test]
fn all_messages_dropped_is_a_failed_round() {
    let mut cfg = small();
    cfg.clients = 1;
    cfg.transport = ChannelConfig {
        drop_rate: 0.999,
        ..ChannelConfig::default()
    };
    let setup = Setup::build(&cfg).unwrap();
    let mut fed = setup.federation(&cfg).unwrap();
    let state = RoundState::new(init_global(&setup.arch, cfg.root_seed));
    assert_eq!(fed.run_round(&state).unwrap_err(), ServerError::RoundFailed(0));
}

#[test]
fn runs_are_reproducible() {
    let mut cfg = small();
    cfg.transport.drop_rate = 0.2;
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.state.theta, b.state.theta);
    assert_eq!(a.history(), b.history());
    cfg.root_seed += 1;
    let c = run_experiment(&cfg).unwrap();
    assert_ne!(a.state.theta, c.state.theta);
}
