//! Experiment configuration and the runners behind the command-line tool.
//!
//! A run is fully determined by its [`ExperimentConfig`]; every random
//! stream is derived from `root_seed` (see [`crate::seed`]).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{arm_medians, to_ppm, AttackSetup, Method, OptimizerConfig, TrialOutput};
use crate::client::{ClientState, LocalHyper, LocalSchedule, Shard};
use crate::dp::{DpConfig, Mechanism};
use crate::learn::dataset::{partition_indices, train_test_split};
use crate::learn::{gen_dataset, Architecture, LearnError, ModelKind, PartitionMode, SegDataset};
use crate::net::{ChannelConfig, ServerMessage, Transport, WireError};
use crate::params::ParamVector;
use crate::seed::{self, Role};
use crate::server::{
    init_global, Convergence, EvalSet, Federation, RoundRecord, RoundState, ServerError, StopRule,
    Weighting,
};

pub const METRICS_HEADER: &str =
    "round,loss,dice,jaccard,acc,epsilon_paper,epsilon_classic,participating_clients,wall_ms";
pub const GRID_HEADER: &str = "sigma,clip_c,dice,jaccard,acc,epsilon_paper,status";

/// Rounds used by the long profile.
pub const PAPER_SCALE_ROUNDS: u32 = 150;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),
}

impl ExperimentError {
    /// Whether the failure is a numerical blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            ExperimentError::Server(ServerError::Diverged(_))
                | ExperimentError::Server(ServerError::Client(crate::client::ClientError::Diverged { .. }))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// Derived from `root_seed` when absent.
    pub seed: Option<u64>,
    pub partition: PartitionMode,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 500,
            h: 32,
            w: 32,
            seed: None,
            partition: PartitionMode::Iid,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: LocalSchedule,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 16,
            schedule: LocalSchedule::Epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub clients: usize,
    /// All clients when absent.
    pub clients_per_round: Option<usize>,
    pub local_epochs: u32,
    pub rounds: u32,
    pub convergence: Option<Convergence>,
    pub model_kind: ModelKind,
    pub dataset: DatasetConfig,
    pub dp: DpConfig,
    pub hyper: HyperConfig,
    pub transport: ChannelConfig,
    pub weighting: Weighting,
    pub output_dir: PathBuf,
    pub root_seed: u64,
    /// Log measured round times; otherwise the `wall_ms` column is 0 so the
    /// metrics file is reproducible byte for byte.
    pub record_wall_ms: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            clients_per_round: None,
            local_epochs: 5,
            rounds: 50,
            convergence: None,
            model_kind: ModelKind::MicroDualBranch,
            dataset: DatasetConfig::default(),
            dp: DpConfig::default(),
            hyper: HyperConfig::default(),
            transport: ChannelConfig::default(),
            weighting: Weighting::Equal,
            output_dir: PathBuf::from("out"),
            root_seed: 0,
            record_wall_ms: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON, reporting the offending field path on failure.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Field {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn paper_scale(mut self) -> Self {
        self.rounds = PAPER_SCALE_ROUNDS;
        self
    }

    pub fn local_hyper(&self) -> LocalHyper {
        LocalHyper {
            lr: self.hyper.lr,
            batch_size: self.hyper.batch_size,
            local_epochs: self.local_epochs,
            schedule: self.hyper.schedule,
        }
    }

    pub fn per_round(&self) -> usize {
        self.clients_per_round.unwrap_or(self.clients)
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset
            .seed
            .unwrap_or_else(|| seed::derive(self.root_seed, Role::Dataset, 0, 0))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, msg: String| ConfigError::Field {
            path: field.into(),
            message: msg,
        };
        if self.clients == 0 {
            return Err(bad("clients", "must be >= 1".into()));
        }
        let k = self.per_round();
        if k == 0 || k > self.clients {
            return Err(bad("clients_per_round", format!("must lie in 1..={}", self.clients)));
        }
        if self.rounds == 0 {
            return Err(bad("rounds", "must be >= 1".into()));
        }
        self.local_hyper()
            .validate()
            .map_err(|e| bad("hyper", e.to_string()))?;
        self.dp.validate().map_err(|e| bad("dp", e.to_string()))?;
        self.transport
            .validate()
            .map_err(|e| bad("transport", e.to_string()))?;
        let d = &self.dataset;
        if d.h < 8 || d.w < 8 {
            return Err(bad("dataset", format!("images must be at least 8x8, got {}x{}", d.h, d.w)));
        }
        if self.model_kind == ModelKind::MicroDualBranch && (!d.h.is_multiple_of(4) || !d.w.is_multiple_of(4)) {
            return Err(bad("dataset", "micro_dual_branch needs h and w divisible by 4".into()));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(bad("dataset.train_fraction", "must lie in (0, 1)".into()));
        }
        let train = (d.n as f64 * d.train_fraction).round() as usize;
        if d.n < 2 || train < self.clients {
            return Err(bad(
                "dataset.n",
                format!("{} training samples cannot feed {} clients", train, self.clients),
            ));
        }
        Ok(())
    }
}

/// Dataset, split and model assembled from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub arch: Architecture,
    pub data: Arc<SegDataset>,
    pub shards: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let d = &cfg.dataset;
        let ds_seed = cfg.dataset_seed();
        let data = Arc::new(gen_dataset(d.n, d.h, d.w, ds_seed)?);
        let (train, test) = train_test_split(d.n, d.train_fraction, ds_seed);
        let shards = partition_indices(&data, &train, cfg.clients, d.partition, ds_seed)?;
        let arch = Architecture::new(cfg.model_kind, d.h, d.w)?;
        Ok(Self {
            arch,
            data,
            shards,
            test,
        })
    }

    pub fn client_states(&self, cfg: &ExperimentConfig) -> Vec<ClientState> {
        self.shards
            .iter()
            .enumerate()
            .map(|(i, idx)| ClientState {
                client_id: i as u32,
                shard: Shard {
                    data: Arc::clone(&self.data),
                    indices: idx.clone(),
                },
                rng_seed: cfg.root_seed,
                hyper: cfg.local_hyper(),
            })
            .collect()
    }

    pub fn federation(&self, cfg: &ExperimentConfig) -> Result<Federation, ExperimentError> {
        let transport_seed = seed::derive(cfg.root_seed, Role::Transport, u64::MAX, 0);
        let transport = Transport::new(cfg.clients, &cfg.transport, transport_seed)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Federation {
            arch: self.arch.clone(),
            clients: self.client_states(cfg),
            dp: cfg.dp,
            transport,
            eval: EvalSet {
                data: Arc::clone(&self.data),
                indices: self.test.clone(),
            },
            root_seed: cfg.root_seed,
            clients_per_round: cfg.per_round(),
            weighting: cfg.weighting,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub arch: Architecture,
    pub state: RoundState,
}

impl Outcome {
    pub fn history(&self) -> &[RoundRecord] {
        &self.state.history
    }

    pub fn final_record(&self) -> Option<&RoundRecord> {
        self.state.history.last()
    }
}

/// Trains a federation in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, ExperimentError> {
    let setup = Setup::build(cfg)?;
    let mut fed = setup.federation(cfg)?;
    let theta0 = init_global(&setup.arch, cfg.root_seed);
    let stop = StopRule {
        max_rounds: cfg.rounds,
        convergence: cfg.convergence,
    };
    let mut state = fed.run(RoundState::new(theta0), &stop)?;
    if !cfg.record_wall_ms {
        state.history.iter_mut().for_each(|r| r.wall_ms = 0);
    }
    Ok(Outcome {
        arch: setup.arch,
        state,
    })
}

#[derive(Serialize)]
struct MetricsRow {
    round: u32,
    loss: f64,
    dice: f64,
    jaccard: f64,
    acc: f64,
    epsilon_paper: f64,
    epsilon_classic: f64,
    participating_clients: usize,
    wall_ms: u64,
}

/// Metrics CSV; privacy columns read `inf` when no mechanism is active.
pub fn metrics_csv(history: &[RoundRecord]) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(MetricsRow {
            round: r.round,
            loss: r.loss,
            dice: r.dice,
            jaccard: r.jaccard,
            acc: r.acc,
            epsilon_paper: r.epsilon_paper.unwrap_or(f64::INFINITY),
            epsilon_classic: r.epsilon_classic.unwrap_or(f64::INFINITY),
            participating_clients: r.participating_clients,
            wall_ms: r.wall_ms,
        })?;
    }
    if history.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    w.into_inner().map_err(|e| ExperimentError::Csv(e.into_error().into()))
}

/// Global model serialized with the wire framing.
pub fn encode_model(theta: &ParamVector, rounds: u32) -> Vec<u8> {
    ServerMessage::new(rounds, theta.to_vec(), theta.layout_id().0).encode()
}

pub fn decode_model(bytes: &[u8]) -> Result<ServerMessage, WireError> {
    ServerMessage::decode(bytes)
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub model: PathBuf,
    pub config: PathBuf,
    pub outcome: Outcome,
}

/// Runs `cfg` and writes `metrics.csv`, `model.bin` and `config.json` into
/// its output directory.
pub fn run_to_dir(cfg: &ExperimentConfig) -> Result<RunArtifacts, ExperimentError> {
    let outcome = run_experiment(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, metrics_csv(outcome.history())?).map_err(io_err(&metrics))?;
    let model = dir.join("model.bin");
    fs::write(&model, encode_model(&outcome.state.theta, outcome.state.round_t)).map_err(io_err(&model))?;
    let config = dir.join("config.json");
    fs::write(&config, cfg.to_json()).map_err(io_err(&config))?;
    Ok(RunArtifacts {
        metrics,
        model,
        config,
        outcome,
    })
}

/// One `(σ, C)` cell of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub sigma: f64,
    pub clip_c: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub acc: f64,
    pub epsilon_paper: f64,
    /// `ok`, or the first error met by any seed.
    pub status: String,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Root seeds used for multi-seed medians: `root_seed, root_seed + 1, ...`.
pub fn seed_list(cfg: &ExperimentConfig, seeds: usize) -> Vec<u64> {
    (0..seeds as u64).map(|i| cfg.root_seed.wrapping_add(i)).collect()
}

/// Final-round metrics for `cfg` under each root seed.
pub fn final_metrics(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Result<RoundRecord, String>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.root_seed = s;
            c.record_wall_ms = false;
            run_experiment(&c)
                .map_err(|e| e.to_string())
                .and_then(|o| o.final_record().cloned().ok_or_else(|| "no rounds completed".into()))
        })
        .collect()
}

/// Runs every `(σ, C)` pair with the base config's mechanism (Gaussian when
/// the base has none) and reports per-cell medians over `seeds`.
pub fn ablate(
    base: &ExperimentConfig,
    sigmas: &[f64],
    clips: &[f64],
    seeds: usize,
) -> Result<Vec<GridCell>, ConfigError> {
    if sigmas.is_empty() || clips.is_empty() || seeds == 0 {
        return Err(ConfigError::Invalid("ablation grids and seed count must be nonempty".into()));
    }
    let mechanism = match base.dp.mechanism {
        Mechanism::None => Mechanism::Gaussian,
        m => m,
    };
    let seeds = seed_list(base, seeds);
    let cells: Vec<(f64, f64)> = sigmas
        .iter()
        .flat_map(|&s| clips.iter().map(move |&c| (s, c)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(sigma, clip_c)| {
            let mut cfg = base.clone();
            cfg.dp = DpConfig {
                mechanism,
                sigma,
                clip_c,
                ..base.dp
            };
            let eps = crate::dp::epsilon_linear(clip_c, sigma);
            if let Err(e) = cfg.validate() {
                return failed_cell(sigma, clip_c, eps, e.to_string());
            }
            let results = final_metrics(&cfg, &seeds);
            if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
                return failed_cell(sigma, clip_c, eps, e.clone());
            }
            let recs: Vec<RoundRecord> = results.into_iter().map(Result::unwrap).collect();
            let pick = |f: fn(&RoundRecord) -> f64| median(&mut recs.iter().map(f).collect::<Vec<_>>());
            GridCell {
                sigma,
                clip_c,
                dice: pick(|r| r.dice),
                jaccard: pick(|r| r.jaccard),
                acc: pick(|r| r.acc),
                epsilon_paper: eps,
                status: "ok".into(),
            }
        })
        .collect())
}

fn failed_cell(sigma: f64, clip_c: f64, eps: f64, status: String) -> GridCell {
    GridCell {
        sigma,
        clip_c,
        dice: f64::NAN,
        jaccard: f64::NAN,
        acc: f64::NAN,
        epsilon_paper: eps,
        status: format!("error: {status}"),
    }
}

#[derive(Serialize)]
struct GridRow<'a> {
    sigma: f64,
    clip_c: f64,
    dice: f64,
    jaccard: f64,
    acc: f64,
    epsilon_paper: f64,
    status: &'a str,
}

pub fn grid_csv(cells: &[GridCell]) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(GridRow {
            sigma: c.sigma,
            clip_c: c.clip_c,
            dice: c.dice,
            jaccard: c.jaccard,
            acc: c.acc,
            epsilon_paper: c.epsilon_paper,
            status: &c.status,
        })?;
    }
    if cells.is_empty() {
        w.write_record(GRID_HEADER.split(','))?;
    }
    w.into_inner().map_err(|e| ExperimentError::Csv(e.into_error().into()))
}

pub const ATTACK_HEADER: &str = "trial,dp,method,mse,psnr,iterations";
pub const ATTACK_SUMMARY_HEADER: &str =
    "method,median_mse_nodp,median_mse_dp,mse_ratio,median_psnr_nodp,median_psnr_dp,psnr_margin_db";

/// Paired-attack settings taken from an experiment config. The DP side uses
/// the config's privacy setting, or the default Gaussian one when the config
/// disables privacy.
pub fn attack_setup(cfg: &ExperimentConfig, model_kind: ModelKind, trials: usize, budget: usize) -> AttackSetup {
    let dp = match cfg.dp.mechanism {
        Mechanism::None => DpConfig::default(),
        _ => cfg.dp,
    };
    AttackSetup {
        model_kind,
        h: cfg.dataset.h,
        w: cfg.dataset.w,
        lr: cfg.hyper.lr,
        dp,
        budget,
        trials,
        root_seed: cfg.root_seed,
        optimizer: OptimizerConfig::default(),
    }
}

#[derive(Serialize)]
struct AttackRow {
    trial: usize,
    dp: bool,
    method: &'static str,
    mse: f64,
    psnr: f64,
    iterations: usize,
}

pub fn attack_csv(outputs: &[TrialOutput]) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in outputs.iter().flat_map(|o| &o.records) {
        w.serialize(AttackRow {
            trial: r.trial,
            dp: r.dp,
            method: r.method.name(),
            mse: r.result.mse,
            psnr: r.result.psnr,
            iterations: r.result.iterations_used,
        })?;
    }
    w.into_inner().map_err(|e| ExperimentError::Csv(e.into_error().into()))
}

/// Median contrast per method; arms that were not run are left empty.
pub fn attack_summary_csv(outputs: &[TrialOutput]) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ATTACK_SUMMARY_HEADER.split(','))?;
    for method in [Method::Analytic, Method::Optimize] {
        let off = arm_medians(outputs, method, false);
        let on = arm_medians(outputs, method, true);
        if off.is_none() && on.is_none() {
            continue;
        }
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let both = off.zip(on);
        w.write_record([
            method.name().to_string(),
            cell(off.map(|a| a.0)),
            cell(on.map(|a| a.0)),
            cell(both.map(|(a, b)| b.0 / a.0)),
            cell(off.map(|a| a.1)),
            cell(on.map(|a| a.1)),
            cell(both.map(|(a, b)| a.1 - b.1)),
        ])?;
    }
    w.into_inner().map_err(|e| ExperimentError::Csv(e.into_error().into()))
}

/// Writes `attack.csv`, `attack_summary.csv`, and per trial the true image
/// plus the optimizer's reconstruction for each privacy mode.
pub fn write_attack_outputs(dir: &Path, setup: &AttackSetup, outputs: &[TrialOutput]) -> Result<(), ExperimentError> {
    write_file(&dir.join("attack.csv"), &attack_csv(outputs)?)?;
    write_file(&dir.join("attack_summary.csv"), &attack_summary_csv(outputs)?)?;
    let images = dir.join("images");
    for o in outputs {
        let truth = to_ppm(&o.truth, setup.h, setup.w);
        write_file(&images.join(format!("trial{:03}_truth.ppm", o.trial)), truth.as_bytes())?;
        for r in o.records.iter().filter(|r| r.method == Method::Optimize) {
            let tag = if r.dp { "dp" } else { "nodp" };
            let ppm = to_ppm(&r.result.reconstructed, setup.h, setup.w);
            write_file(&images.join(format!("trial{:03}_{tag}.ppm", o.trial)), ppm.as_bytes())?;
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}
