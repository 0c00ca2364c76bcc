//! Round-based orchestration of FedDM and the baseline protocols.
//!
//! FedDM: every round the server broadcasts `w_r`, each client learns a
//! synthetic set around it, the server pools the sets and trains on them by SGD
//! constrained to the ρ-ball around `w_r`. REAL is the same loop with randomly
//! chosen real examples in place of learned ones. FedAvg and FedProx train
//! locally on real data and average the weights.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::accounting::PayloadReport;
use crate::data::{dirichlet_partition, Dataset, Partition};
use crate::distillation::{client_update, dump_images, init_synthetic, ClientConfig, SyntheticSet};
use crate::error::{Error, Result};
use crate::models::{Architecture, Model};
use crate::numerics::{grad, project_ball_in_place, Graph, ParamVector};
use crate::privacy::DpBudget;
use crate::seeds::{rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    FedDm,
    FedAvg,
    FedProx,
    Real,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::FedDm => "feddm",
            Protocol::FedAvg => "fedavg",
            Protocol::FedProx => "fedprox",
            Protocol::Real => "real",
        }
    }

    fn uploads_synthetic(self) -> bool {
        matches!(self, Protocol::FedDm | Protocol::Real)
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feddm" => Ok(Protocol::FedDm),
            "fedavg" => Ok(Protocol::FedAvg),
            "fedprox" => Ok(Protocol::FedProx),
            "real" => Ok(Protocol::Real),
            other => Err(Error::invalid(
                "protocol",
                format!("unknown protocol {other:?} (expected feddm, fedavg, fedprox or real)"),
            )),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Local training of the weight-averaging baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Proximal coefficient; only FedProx reads it.
    pub mu: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            epochs: 10,
            lr: 0.01,
            batch: 256,
            mu: 0.01,
        }
    }
}

/// Global training on the pooled synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerConfig {
    pub lr: f64,
    /// Epochs per round.
    pub epochs: usize,
    pub batch: usize,
    pub rho: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            lr: 0.01,
            epochs: 500,
            batch: 256,
            rho: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedRunConfig {
    pub protocol: Protocol,
    pub rounds: usize,
    pub clients: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Share of clients taking part in each round.
    pub client_fraction: f64,
    pub client: ClientConfig,
    pub local: LocalConfig,
    pub server: ServerConfig,
    pub arch: Architecture,
    /// Guarantee reported alongside `client.sigma`; informational only.
    pub dp: Option<DpBudget>,
    /// Client worker threads; 0 uses every core.
    pub workers: usize,
    /// Record elapsed time per round. Off keeps histories byte-identical.
    pub wall_clock: bool,
    /// Directory for image dumps of the last round's synthetic sets.
    pub dump_dir: Option<PathBuf>,
}

impl FedRunConfig {
    pub fn new(protocol: Protocol, arch: Architecture) -> Self {
        FedRunConfig {
            protocol,
            rounds: 20,
            clients: 10,
            alpha: 0.5,
            seed: 0,
            client_fraction: 1.0,
            client: ClientConfig::default(),
            local: LocalConfig::default(),
            server: ServerConfig::default(),
            arch,
            dp: None,
            workers: 1,
            wall_clock: false,
            dump_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be at least 1"));
        }
        if self.clients == 0 {
            return Err(Error::invalid("clients", "must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::invalid(
                "client_fraction",
                format!("must lie in (0, 1], got {}", self.client_fraction),
            ));
        }
        self.arch.validate()?;
        if self.protocol.uploads_synthetic() {
            self.client.validate()?;
            sgd_config_checks("server", self.server.lr, self.server.batch)?;
            if !(self.server.rho >= 0.0) {
                return Err(Error::invalid("server rho", format!("must be non-negative, got {}", self.server.rho)));
            }
        } else {
            sgd_config_checks("local", self.local.lr, self.local.batch)?;
            if !(self.local.mu >= 0.0) || !self.local.mu.is_finite() {
                return Err(Error::invalid("mu", format!("must be non-negative, got {}", self.local.mu)));
            }
        }
        Ok(())
    }

    fn sgd_local(&self) -> SgdConfig {
        SgdConfig {
            lr: self.local.lr,
            epochs: self.local.epochs,
            batch: self.local.batch,
            mu: if self.protocol == Protocol::FedProx { self.local.mu } else { 0.0 },
            rho: None,
        }
    }

    fn sgd_server(&self) -> SgdConfig {
        SgdConfig {
            lr: self.server.lr,
            epochs: self.server.epochs,
            batch: self.server.batch,
            mu: 0.0,
            rho: Some(self.server.rho),
        }
    }
}

fn sgd_config_checks(prefix: &'static str, lr: f64, batch: usize) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(prefix, format!("learning rate must be positive, got {lr}")));
    }
    if batch == 0 {
        return Err(Error::invalid(prefix, "batch size must be at least 1"));
    }
    Ok(())
}

/// Training and test data with the client split.
#[derive(Clone, Debug)]
pub struct FedData {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub clients: Vec<Dataset>,
}

impl FedData {
    /// Splits `train` across `clients` with a Dirichlet(`alpha`) partition.
    pub fn new(train: Dataset, test: Dataset, clients: usize, alpha: f64, seed: u64) -> Result<Self> {
        let seed = crate::seeds::derive_seed(seed, Stream::Partition, 0, 0);
        let partition = dirichlet_partition(train.labels(), train.num_classes(), clients, alpha, seed)?;
        Self::with_partition(train, test, partition)
    }

    pub fn with_partition(train: Dataset, test: Dataset, partition: Partition) -> Result<Self> {
        partition.validate(train.len())?;
        let clients = partition
            .index_sets
            .iter()
            .map(|set| train.subset(set))
            .collect::<Result<Vec<_>>>()?;
        Ok(FedData {
            train,
            test,
            partition,
            clients,
        })
    }

    pub fn for_config(train: Dataset, test: Dataset, cfg: &FedRunConfig) -> Result<Self> {
        Self::new(train, test, cfg.clients, cfg.alpha, cfg.seed)
    }
}

/// Pooled examples with per-example weights.
#[derive(Clone, Debug)]
pub struct WeightedDataset {
    pub data: Dataset,
    /// Raw weights; see [`aggregate_surrogate`].
    pub weights: Vec<f64>,
}

impl WeightedDataset {
    pub fn uniform(data: Dataset) -> Self {
        let w = 1.0 / data.len() as f64;
        let weights = vec![w; data.len()];
        WeightedDataset { data, weights }
    }

    /// Weights rescaled to sum to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    /// `Σ_i weights[i]·ℓ_i` under `model`.
    pub fn weighted_loss(&self, model: &Model) -> Result<f64> {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false)?;
        let x = g.constant(self.data.inputs().clone());
        let f = model.forward(&mut g, &p, x)?;
        let loss = model.loss(&mut g, f.logits, self.data.labels(), &self.weights)?;
        Ok(g.value(loss).data()[0])
    }
}

/// Pools the clients' synthetic sets. Client `k`'s surrogate is the mean loss
/// over its `n_k^S` examples, scaled by `n_k^S/n`, so each pooled example
/// carries raw weight `1/n` with `n` the number of real training examples. The
/// weighted pool loss is then exactly `Σ_k (n_k^S/n)·f̂_k`.
pub fn aggregate_surrogate(sets: &[SyntheticSet], total_real: usize) -> Result<WeightedDataset> {
    let parts: Vec<&SyntheticSet> = sets.iter().filter(|s| !s.is_empty()).collect();
    if parts.is_empty() {
        return Err(Error::EmptyDataset("no synthetic examples to aggregate".into()));
    }
    if total_real == 0 {
        return Err(Error::invalid("total_real", "must be positive"));
    }
    let num_classes = parts.iter().map(|s| s.num_classes()).max().unwrap_or(0);
    let inputs: Vec<_> = parts.iter().map(|s| s.inputs()).collect();
    let inputs = crate::numerics::Tensor::concat_rows(&inputs)?;
    let labels: Vec<usize> = parts.iter().flat_map(|s| s.labels()).collect();
    let n = labels.len();
    let data = Dataset::new("surrogate", inputs, labels, num_classes)?;
    Ok(WeightedDataset {
        data,
        weights: vec![1.0 / total_real as f64; n],
    })
}

/// Mini-batch SGD settings shared by server, local and centralized training.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Proximal coefficient pulling towards the anchor; zero disables it.
    pub mu: f64,
    /// Project onto the ball of this radius around the anchor after each step.
    pub rho: Option<f64>,
}

/// Mini-batch SGD from `model`'s weights. Each epoch visits a fresh shuffle in
/// batches of `cfg.batch`; a batch's loss is its weighted average (weights
/// renormalized within the batch, uniform when `weights` is `None`).
pub fn train_sgd<R: Rng + ?Sized>(
    model: &Model,
    data: &Dataset,
    weights: Option<&[f64]>,
    cfg: &SgdConfig,
    rng: &mut R,
) -> Result<ParamVector> {
    if let Some(w) = weights {
        if w.len() != data.len() {
            return Err(Error::shape("train weights", format!("{} for {} examples", w.len(), data.len())));
        }
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    let anchor = model.params();
    let mut w = anchor.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch) {
            let mut g = minibatch_grad(model, &w, data, weights, batch)?;
            if cfg.mu > 0.0 {
                add_proximal_grad(g.as_mut_slice(), &w, anchor, cfg.mu);
            }
            for (wi, gi) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *wi -= cfg.lr * gi;
            }
            if let Some(rho) = cfg.rho {
                project_ball_in_place(&mut w, anchor, rho)?;
            }
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("weights after SGD epoch"));
        }
    }
    Ok(w)
}

/// `μ/2·‖w − anchor‖²`.
pub fn proximal_term(w: &ParamVector, anchor: &ParamVector, mu: f64) -> f64 {
    let d = w.distance(anchor);
    0.5 * mu * d * d
}

/// Gradient of [`proximal_term`]: `μ·(w − anchor)`.
pub fn proximal_grad(w: &ParamVector, anchor: &ParamVector, mu: f64) -> ParamVector {
    let mut g = vec![0.0; w.dim()];
    add_proximal_grad(&mut g, w, anchor, mu);
    ParamVector::new(g)
}

fn add_proximal_grad(g: &mut [f64], w: &ParamVector, anchor: &ParamVector, mu: f64) {
    for ((gi, wi), ai) in g.iter_mut().zip(w.as_slice()).zip(anchor.as_slice()) {
        *gi += mu * (wi - ai);
    }
}

fn minibatch_grad(
    model: &Model,
    w: &ParamVector,
    data: &Dataset,
    weights: Option<&[f64]>,
    batch: &[usize],
) -> Result<ParamVector> {
    let x = data.inputs().gather_rows(batch)?;
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
    let bw: Vec<f64> = match weights {
        None => vec![1.0 / batch.len() as f64; batch.len()],
        Some(all) => {
            let total: f64 = batch.iter().map(|&i| all[i]).sum();
            batch.iter().map(|&i| all[i] / total).collect()
        }
    };
    let mut g = Graph::new();
    let params = model.bind_params(&mut g, w, true)?;
    let x = g.constant(x);
    let f = model.forward(&mut g, &params, x)?;
    let loss = model.loss(&mut g, f.logits, &labels, &bw)?;
    grad(&g, loss, &params)
}

/// `w_{r+1}`: weighted SGD on the surrogate from `w_r`, kept inside the ρ-ball.
pub fn server_train<R: Rng + ?Sized>(
    global: &Model,
    surrogate: &WeightedDataset,
    cfg: &ServerConfig,
    rng: &mut R,
) -> Result<ParamVector> {
    let sgd = SgdConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch: cfg.batch,
        mu: 0.0,
        rho: Some(cfg.rho),
    };
    train_sgd(global, &surrogate.data, Some(&surrogate.weights), &sgd, rng)
}

/// Local training of one client for FedAvg/FedProx.
pub fn local_train<R: Rng + ?Sized>(global: &Model, data: &Dataset, cfg: &SgdConfig, rng: &mut R) -> Result<ParamVector> {
    train_sgd(global, data, None, cfg, rng)
}

/// `Σ_k (n_k/n)·w_k`.
pub fn weighted_average(weights: &[ParamVector], sizes: &[usize]) -> Result<ParamVector> {
    let first = weights
        .first()
        .ok_or_else(|| Error::invalid("weights", "need at least one model"))?;
    if weights.len() != sizes.len() {
        return Err(Error::shape("weighted average", format!("{} models, {} sizes", weights.len(), sizes.len())));
    }
    let n: usize = sizes.iter().sum();
    let mut out = vec![0.0; first.dim()];
    for (w, &nk) in weights.iter().zip(sizes) {
        if w.dim() != out.len() {
            return Err(Error::shape("weighted average", format!("dim {} vs {}", w.dim(), out.len())));
        }
        let share = nk as f64 / n as f64;
        for (o, v) in out.iter_mut().zip(w.as_slice()) {
            *o += share * v;
        }
    }
    Ok(ParamVector::new(out))
}

/// One row of the run history.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub floats_uploaded: u64,
    pub cumulative_floats: u64,
    pub test_accuracy: f64,
    pub sigma: f64,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub wall_ms: u64,
    /// SHA-256 of the global weights after the round (little-endian f64 bytes).
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub protocol: Protocol,
    pub initial_accuracy: f64,
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
}

pub const HISTORY_COLUMNS: &str = "round,protocol,floats_uploaded,cumulative_floats,test_accuracy,sigma,epsilon,delta,wall_ms";

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_COLUMNS);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{},{},{}",
                r.round,
                self.protocol,
                r.floats_uploaded,
                r.cumulative_floats,
                r.test_accuracy,
                r.sigma,
                opt(r.epsilon),
                opt(r.delta),
                r.wall_ms
            );
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(self.initial_accuracy, |r| r.test_accuracy)
    }

    /// Accuracy after `round` (1-based).
    pub fn accuracy_at(&self, round: usize) -> Option<f64> {
        self.records.iter().find(|r| r.round == round).map(|r| r.test_accuracy)
    }
}

pub fn params_hash(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in params.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Initial global model of a run.
pub fn initial_model(cfg: &FedRunConfig) -> Result<Model> {
    Model::init(cfg.arch.clone(), &mut rng(cfg.seed, Stream::ModelInit, 0, 0))
}

/// Runs the protocol selected in `cfg`.
pub fn run(cfg: &FedRunConfig, data: &FedData) -> Result<RunHistory> {
    cfg.validate()?;
    if data.clients.len() != cfg.clients {
        return Err(Error::invalid(
            "clients",
            format!("config has {} clients, data is split {} ways", cfg.clients, data.clients.len()),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    pool.install(|| run_rounds(cfg, data))
}

pub fn run_feddm(cfg: &FedRunConfig, data: &FedData) -> Result<RunHistory> {
    run(&with_protocol(cfg, Protocol::FedDm), data)
}

pub fn run_real(cfg: &FedRunConfig, data: &FedData) -> Result<RunHistory> {
    run(&with_protocol(cfg, Protocol::Real), data)
}

pub fn run_fedavg(cfg: &FedRunConfig, data: &FedData) -> Result<RunHistory> {
    run(&with_protocol(cfg, Protocol::FedAvg), data)
}

pub fn run_fedprox(cfg: &FedRunConfig, data: &FedData) -> Result<RunHistory> {
    run(&with_protocol(cfg, Protocol::FedProx), data)
}

fn with_protocol(cfg: &FedRunConfig, protocol: Protocol) -> FedRunConfig {
    FedRunConfig {
        protocol,
        ..cfg.clone()
    }
}

fn participants(cfg: &FedRunConfig, round: usize) -> Vec<usize> {
    if cfg.client_fraction >= 1.0 {
        return (0..cfg.clients).collect();
    }
    let m = ((cfg.client_fraction * cfg.clients as f64).ceil() as usize).clamp(1, cfg.clients);
    let mut r = rng(cfg.seed, Stream::ClientSampling, round as u64, 0);
    let mut chosen = index::sample(&mut r, cfg.clients, m).into_vec();
    chosen.sort_unstable();
    chosen
}

fn run_rounds(cfg: &FedRunConfig, data: &FedData) -> Result<RunHistory> {
    let mut global = initial_model(cfg)?;
    let initial_accuracy = global.accuracy(&data.test)?;
    let example_floats = data.train.example_len();
    let synthetic = cfg.protocol.uploads_synthetic();
    let sigma = if cfg.protocol == Protocol::FedDm { cfg.client.sigma } else { 0.0 };
    let (epsilon, delta) = match cfg.dp {
        Some(b) if sigma > 0.0 => (Some(b.epsilon()), Some(b.delta())),
        _ => (None, None),
    };
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut cumulative = 0u64;
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let chosen = participants(cfg, round);
        let r = round as u64;
        let uploaded = if synthetic {
            let sets: Vec<SyntheticSet> = chosen
                .par_iter()
                .map(|&k| {
                    let mut crng = rng(cfg.seed, Stream::ClientUpdate, r, k as u64);
                    let local = &data.clients[k];
                    match cfg.protocol {
                        Protocol::FedDm => client_update(k, local, &global, &cfg.client, &mut crng),
                        _ => init_synthetic(k, local, cfg.client.ipc, &mut crng),
                    }
                })
                .collect::<Result<_>>()?;
            if round == cfg.rounds {
                if let Some(dir) = &cfg.dump_dir {
                    for s in &sets {
                        dump_images(dir, s)?;
                    }
                }
            }
            let cpc: Vec<usize> = sets.iter().map(|s| s.classes().len()).collect();
            let surrogate = aggregate_surrogate(&sets, data.train.len())?;
            let mut srng = rng(cfg.seed, Stream::ServerTrain, r, 0);
            let w = train_sgd(&global, &surrogate.data, Some(&surrogate.weights), &cfg.sgd_server(), &mut srng)?;
            global = global.with_params(w)?;
            PayloadReport::synthetic(&cpc, cfg.client.ipc, example_floats).round_total
        } else {
            let sgd = cfg.sgd_local();
            let local: Vec<ParamVector> = chosen
                .par_iter()
                .map(|&k| {
                    let mut lrng = rng(cfg.seed, Stream::LocalTrain, r, k as u64);
                    local_train(&global, &data.clients[k], &sgd, &mut lrng)
                })
                .collect::<Result<_>>()?;
            let sizes: Vec<usize> = chosen.iter().map(|&k| data.clients[k].len()).collect();
            global = global.with_params(weighted_average(&local, &sizes)?)?;
            PayloadReport::weights(global.param_count(), chosen.len()).round_total
        };
        cumulative += uploaded;
        let test_accuracy = global.accuracy(&data.test)?;
        let wall_ms = if cfg.wall_clock { start.elapsed().as_millis() as u64 } else { 0 };
        log::info!(
            "{} round {round}/{}: accuracy {test_accuracy:.4}, uploaded {uploaded} floats",
            cfg.protocol,
            cfg.rounds
        );
        records.push(RoundRecord {
            round,
            floats_uploaded: uploaded,
            cumulative_floats: cumulative,
            test_accuracy,
            sigma,
            epsilon,
            delta,
            wall_ms,
            params_hash: params_hash(global.params()),
        });
    }
    Ok(RunHistory {
        protocol: cfg.protocol,
        initial_accuracy,
        records,
        final_params: global.params().clone(),
    })
}

/// Centralized baseline: `rounds × epochs` of plain SGD on `train` from the
/// run's initial model, one shuffle stream per round.
pub fn train_centralized(cfg: &FedRunConfig, train: &Dataset, sgd: &SgdConfig, rounds: usize) -> Result<Model> {
    let mut model = initial_model(cfg)?;
    for round in 1..=rounds {
        let mut r = rng(cfg.seed, Stream::LocalTrain, round as u64, 0);
        let w = train_sgd(&model, train, None, sgd, &mut r)?;
        model = model.with_params(w)?;
    }
    Ok(model)
}
