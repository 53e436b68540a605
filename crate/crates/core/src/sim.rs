//! Round-based federated simulation.
//!
//! Each round the server broadcasts the global model to a sample of clients,
//! trains them independently (in parallel with rayon), collects their weights
//! and mean latent representations, turns the latents into contribution
//! factors when normalization is enabled, and aggregates with the configured
//! strategy. Client results are always reduced in client-id order, so serial
//! and parallel execution produce identical bits.

use std::time::Instant;

use ndarray::Axis;
use rand::seq::index;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::aggregation::{self, ClientUpdate, LocalTrainingHooks, ServerStrategyState, StrategyConfig};
use crate::config::{DatasetSource, PartitionConfig, RunConfig};
use crate::data::{self, Dataset, DirichletConfig, PartitionPlan};
use crate::nn::{self, Batch, ModelSpec, OptimizerConfig, OptimizerState, ParameterVector};
use crate::normalization::{self, MeanLatent};
use crate::rng::{self, Stream};
use crate::{math, Error, Result};

/// A simulated client: which training samples it owns and its private seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// Local training schedule shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { epochs: 2, batch_size: 64, optimizer: OptimizerConfig::default() }
    }
}

/// Contribution normalization switch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationConfig {
    pub enabled: bool,
    pub temperature: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self { enabled: true, temperature: normalization::DEFAULT_TEMPERATURE }
    }
}

/// Trains one client from the broadcast model.
///
/// The shuffle of every epoch is derived from `(client seed, round, epoch)`.
/// The mean latent representation is computed on the client's full shard with
/// the weights produced by the last epoch.
pub fn local_train(
    client: &ClientState,
    train: &Dataset,
    global: &ParameterVector,
    local: &LocalConfig,
    hooks: &LocalTrainingHooks,
    round: u64,
) -> Result<ClientUpdate> {
    if local.epochs == 0 {
        return Err(Error::InvalidArgument("local training needs at least one epoch".into()));
    }
    if local.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if client.indices.is_empty() {
        return Err(Error::EmptyDataset(format!("client {} has no samples", client.id)));
    }
    let diverged = |step: usize, e: Error| Error::Training { client: client.id, step, reason: e.to_string() };

    let shard = train.subset(&client.indices)?;
    let n = shard.len();
    let mut weights = global.clone();
    let mut optimizer = OptimizerState::new(local.optimizer, weights.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..local.epochs {
        let round_seed = rng::derive_seed(client.seed, Stream::Shuffle, round);
        let mut shuffle = rng::stream_rng(round_seed, Stream::Shuffle, epoch as u64);
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(local.batch_size) {
            let inputs = shard.features().select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| shard.labels()[i]).collect();
            let batch = Batch::new(inputs.view(), &labels)?;
            let (_, mut grad) = nn::loss_and_grad(&weights, &batch, hooks.prox()).map_err(|e| diverged(step, e))?;
            hooks.adjust_gradient(&mut grad);
            optimizer.step(&mut weights, &grad).map_err(|e| diverged(step, e))?;
            step += 1;
        }
    }

    let z = nn::mean_latent(&weights, shard.features().view())?;
    let latent = MeanLatent::new(client.id, z)?;

    let cv_delta = hooks.server_control.as_ref().map(|c| {
        let scale = 1.0 / (step as f64 * local.optimizer.lr);
        c.iter().zip(global.values()).zip(weights.values()).map(|((c, g), w)| -c + (g - w) * scale).collect()
    });

    Ok(ClientUpdate { client_id: client.id, weights, latent, samples: n, local_steps: step, cv_delta })
}

/// Per-client entry of a [`RoundReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    pub lambda: f64,
    pub nu: f64,
    pub u: f64,
    /// Cosine between the client's trained weights and the new global model.
    pub cos_local_global: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based index of the completed round.
    pub round: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub clients: Vec<ClientReport>,
    /// Wall-clock time of the round; zero unless timing is enabled.
    pub duration_ms: u64,
}

/// Everything the server owns between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: ParameterVector,
    pub round: u64,
    pub strategy: StrategyConfig,
    pub strategy_state: ServerStrategyState,
    pub normalization: NormalizationConfig,
}

/// A federation ready to run rounds.
#[derive(Debug, Clone)]
pub struct Simulation {
    train: Dataset,
    test: Dataset,
    clients: Vec<ClientState>,
    local: LocalConfig,
    participation: f64,
    seed: u64,
    record_timing: bool,
    server: ServerState,
}

/// Inputs for [`Simulation::new`].
#[derive(Debug, Clone)]
pub struct SimulationSetup {
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientState>,
    pub initial: ParameterVector,
    pub local: LocalConfig,
    pub strategy: StrategyConfig,
    pub normalization: NormalizationConfig,
    pub participation: f64,
    pub seed: u64,
    pub record_timing: bool,
}

impl Simulation {
    pub fn new(setup: SimulationSetup) -> Result<Self> {
        let SimulationSetup {
            train,
            test,
            clients,
            initial,
            local,
            strategy,
            normalization,
            participation,
            seed,
            record_timing,
        } = setup;
        if clients.is_empty() {
            return Err(Error::config("clients", "need at least one client"));
        }
        if !(participation > 0.0 && participation <= 1.0) {
            return Err(Error::config("participation", format!("must be in (0, 1], got {participation}")));
        }
        if local.epochs == 0 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if local.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(normalization.temperature > 0.0 && normalization.temperature.is_finite()) {
            return Err(Error::config(
                "temperature",
                format!("must be finite and > 0, got {}", normalization.temperature),
            ));
        }
        strategy.validate().map_err(|(k, why)| Error::config(format!("strategy.{k}"), why))?;
        local.optimizer.validate().map_err(|(k, why)| Error::config(format!("optimizer.{k}"), why))?;
        let spec = initial.spec();
        if spec.input_dim() != train.dims() || test.dims() != train.dims() {
            return Err(Error::DimensionMismatch("model input width differs from the data".into()));
        }
        if spec.class_count() < train.class_count().max(test.class_count()) {
            return Err(Error::DimensionMismatch("model has fewer outputs than the data has classes".into()));
        }
        for c in &clients {
            if c.indices.is_empty() {
                return Err(Error::EmptyDataset(format!("client {} has no samples", c.id)));
            }
            if let Some(&i) = c.indices.iter().find(|&&i| i >= train.len()) {
                return Err(Error::InvalidArgument(format!("client {} owns missing sample {i}", c.id)));
            }
        }
        let strategy_state = ServerStrategyState::new(&strategy, &initial, clients.len())?;
        // Fail early on strategy/optimizer combinations that cannot work.
        aggregation::local_hooks(&strategy, &initial, &strategy_state, clients[0].id, &local.optimizer)?;
        Ok(Self {
            train,
            test,
            clients,
            local,
            participation,
            seed,
            record_timing,
            server: ServerState { global: initial, round: 0, strategy, strategy_state, normalization },
        })
    }

    /// Builds data, partition, model and clients from a run configuration.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let full = match &cfg.dataset {
            DatasetSource::Synthetic(s) => data::generate_synthetic(s, rng::derive_seed(seed, Stream::Data, 0))?,
            DatasetSource::Idx { images, labels } => data::load_idx(images, labels)?,
        };
        let (train, test) = full.split_holdout(cfg.test_fraction, rng::derive_seed(seed, Stream::Split, 0))?;
        let plan = partition(&train, cfg)?;

        let mut sizes = vec![train.dims()];
        sizes.extend_from_slice(&cfg.hidden_layers);
        sizes.push(full.class_count());
        let spec = ModelSpec::new(sizes, cfg.activation)?;
        let initial = nn::init_model(&spec, rng::derive_seed(seed, Stream::Init, 0));

        let clients = plan
            .assignments()
            .iter()
            .enumerate()
            .map(|(id, idx)| ClientState {
                id,
                indices: idx.clone(),
                seed: rng::derive_seed(seed, Stream::Client, id as u64),
            })
            .collect();
        Simulation::new(SimulationSetup {
            train,
            test,
            clients,
            initial,
            local: LocalConfig { epochs: cfg.local_epochs, batch_size: cfg.batch_size, optimizer: cfg.optimizer },
            strategy: cfg.strategy,
            normalization: NormalizationConfig { enabled: cfg.normalize, temperature: cfg.temperature },
            participation: cfg.participation,
            seed,
            record_timing: cfg.timing,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn global(&self) -> &ParameterVector {
        &self.server.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// Client ids taking part in the next round, ascending.
    pub fn participants(&self, round: u64) -> Vec<usize> {
        let total = self.clients.len();
        let k = ((self.participation * total as f64).ceil() as usize).clamp(1, total);
        if k == total {
            return (0..total).collect();
        }
        let mut rng = rng::stream_rng(self.seed, Stream::Sampling, round);
        let mut picked = index::sample(&mut rng, total, k).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Runs one communication round and advances the server state.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let started = Instant::now();
        let round = self.server.round + 1;
        let participants = self.participants(round);
        let server = &self.server;

        let hooks = participants
            .iter()
            .map(|&i| {
                aggregation::local_hooks(
                    &server.strategy,
                    &server.global,
                    &server.strategy_state,
                    self.clients[i].id,
                    &self.local.optimizer,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let updates = participants
            .par_iter()
            .zip(hooks.par_iter())
            .map(|(&i, h)| local_train(&self.clients[i], &self.train, &server.global, &self.local, h, round))
            .collect::<Result<Vec<_>>>()?;

        let nu = aggregation::importance(&updates, &server.strategy);
        let lambda = if server.normalization.enabled && updates.len() >= 2 {
            let latents: Vec<MeanLatent> = updates.iter().map(|u| u.latent.clone()).collect();
            let s = normalization::similarity_matrix(&latents)?;
            normalization::contribution(&s, server.normalization.temperature)?.into_lambda()
        } else {
            vec![1.0; updates.len()]
        };
        let u = normalization::normalize_weights(&lambda, &nu)?;

        let server = &mut self.server;
        let global =
            aggregation::aggregate(&server.global, &updates, &u, &server.strategy, &mut server.strategy_state)?;
        let eval = nn::evaluate(&global, &self.test.batch())?;

        let clients = updates
            .iter()
            .enumerate()
            .map(|(k, up)| ClientReport {
                client_id: up.client_id,
                lambda: lambda[k],
                nu: nu[k],
                u: u.as_slice()[k],
                cos_local_global: math::cosine(up.weights.values(), global.values()).unwrap_or(0.0),
            })
            .collect();
        server.global = global;
        server.round = round;
        Ok(RoundReport {
            round,
            accuracy: eval.accuracy,
            loss: eval.loss,
            clients,
            duration_ms: if self.record_timing { started.elapsed().as_millis() as u64 } else { 0 },
        })
    }
}

fn partition(train: &Dataset, cfg: &RunConfig) -> Result<PartitionPlan> {
    match &cfg.partition {
        PartitionConfig::Dirichlet { alpha, min_samples_per_client, max_redraws } => data::partition_dirichlet(
            train,
            &DirichletConfig {
                alpha: *alpha,
                clients: cfg.clients,
                min_samples_per_client: *min_samples_per_client,
                max_redraws: *max_redraws,
            },
            rng::derive_seed(cfg.seed, Stream::Partition, 0),
        ),
        PartitionConfig::LabelSplit { groups } => data::partition_label_split(train, groups),
    }
}

/// Runs every configured round, handing each report to `sink` as soon as it
/// is produced. On error, the reports already delivered stay with the sink.
pub fn run_experiment(cfg: &RunConfig, mut sink: impl FnMut(&RoundReport) -> Result<()>) -> Result<Vec<RoundReport>> {
    let mut sim = Simulation::from_config(cfg)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let report = sim.run_round()?;
        sink(&report)?;
        reports.push(report);
    }
    Ok(reports)
}
