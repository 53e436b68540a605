//! Server aggregation strategies and the local-training hooks they need.
//!
//! Every strategy consumes aggregation weights `u` rather than computing its
//! own, so contribution normalization composes with all of them: pass either
//! the plain importance weights `nu` or the normalized weights.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{GradientVector, OptimizerConfig, OptimizerKind, ParameterVector, Prox};
use crate::normalization::{AggregationWeights, MeanLatent};
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    FedAvg,
    FedProx,
    Scaffold,
    Sgdm,
    FedNova,
    FedBabu,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::Scaffold,
        StrategyKind::Sgdm,
        StrategyKind::FedNova,
        StrategyKind::FedBabu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::Scaffold => "scaffold",
            StrategyKind::Sgdm => "sgdm",
            StrategyKind::FedNova => "fednova",
            StrategyKind::FedBabu => "fedbabu",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// FedProx proximal coefficient.
    pub mu: f64,
    /// Server momentum (SGDM).
    pub beta: f64,
    /// Server step size (SGDM, SCAFFOLD).
    pub server_lr: f64,
    /// Linear layer kept frozen by FedBABU; defaults to the output layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_layer_index: Option<usize>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self { kind: StrategyKind::FedAvg, mu: 0.01, beta: 0.9, server_lr: 1.0, head_layer_index: None }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, ..Self::default() }
    }

    /// Returns the name of the first out-of-range field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(("mu", format!("must be finite and >= 0, got {}", self.mu)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(("beta", format!("must be in [0, 1), got {}", self.beta)));
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return Err(("server_lr", format!("must be finite and > 0, got {}", self.server_lr)));
        }
        Ok(())
    }
}

/// What one client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: ParameterVector,
    pub latent: MeanLatent,
    /// Local sample count `n_r`.
    pub samples: usize,
    /// Local optimizer steps `tau_r`.
    pub local_steps: usize,
    /// SCAFFOLD control-variate change `c_i+ - c_i`.
    pub cv_delta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
struct FrozenHead {
    range: Range<usize>,
    values: Vec<f64>,
}

/// Strategy state carried by the server between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerStrategyState {
    momentum: Option<Vec<f64>>,
    control: Option<Vec<f64>>,
    client_controls: BTreeMap<usize, Vec<f64>>,
    frozen_head: Option<FrozenHead>,
    total_clients: usize,
}

impl ServerStrategyState {
    pub fn new(cfg: &StrategyConfig, initial: &ParameterVector, total_clients: usize) -> Result<Self> {
        let len = initial.len();
        let frozen_head = match cfg.kind {
            StrategyKind::FedBabu => {
                let spec = initial.spec();
                let index = cfg.head_layer_index.unwrap_or(spec.layer_count() - 1);
                let layer = spec.layer(index).ok_or_else(|| {
                    Error::config(
                        "strategy.head_layer_index",
                        format!("layer {index} does not exist; the model has {} layers", spec.layer_count()),
                    )
                })?;
                let range = layer.range();
                Some(FrozenHead { values: initial.values()[range.clone()].to_vec(), range })
            }
            _ => None,
        };
        Ok(Self {
            momentum: (cfg.kind == StrategyKind::Sgdm).then(|| vec![0.0; len]),
            control: (cfg.kind == StrategyKind::Scaffold).then(|| vec![0.0; len]),
            client_controls: BTreeMap::new(),
            frozen_head,
            total_clients,
        })
    }

    pub fn momentum(&self) -> Option<&[f64]> {
        self.momentum.as_deref()
    }

    /// SCAFFOLD server control variate `c`.
    pub fn control(&self) -> Option<&[f64]> {
        self.control.as_deref()
    }

    /// SCAFFOLD client control variate `c_i`; zero until the client first
    /// participates.
    pub fn client_control(&self, client: usize) -> Option<&[f64]> {
        self.client_controls.get(&client).map(Vec::as_slice)
    }

    /// Parameter range frozen by FedBABU.
    pub fn head_range(&self) -> Option<Range<usize>> {
        self.frozen_head.as_ref().map(|h| h.range.clone())
    }
}

/// Per-step modifications a strategy makes to plain local training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalTrainingHooks {
    /// FedProx: `(mu, anchor)` added to the loss.
    pub prox: Option<(f64, ParameterVector)>,
    /// SCAFFOLD: `c - c_i`, added to every gradient.
    pub correction: Option<Vec<f64>>,
    /// SCAFFOLD: server variate `c`, needed for the client's variate update.
    pub server_control: Option<Vec<f64>>,
    /// FedBABU: parameters whose gradients are zeroed.
    pub frozen: Option<Range<usize>>,
}

impl LocalTrainingHooks {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn prox(&self) -> Option<Prox<'_>> {
        self.prox.as_ref().map(|(mu, anchor)| Prox { mu: *mu, anchor })
    }

    /// Applies the variate correction and head freezing to a raw gradient.
    pub fn adjust_gradient(&self, grad: &mut GradientVector) {
        let g = grad.as_mut_slice();
        if let Some(correction) = &self.correction {
            for (g, c) in g.iter_mut().zip(correction) {
                *g += c;
            }
        }
        if let Some(range) = &self.frozen {
            g[range.clone()].fill(0.0);
        }
    }
}

/// Hooks for one client's local training this round.
pub fn local_hooks(
    cfg: &StrategyConfig,
    global: &ParameterVector,
    state: &ServerStrategyState,
    client: usize,
    optimizer: &OptimizerConfig,
) -> Result<LocalTrainingHooks> {
    let mut hooks = LocalTrainingHooks::identity();
    match cfg.kind {
        StrategyKind::FedProx => hooks.prox = Some((cfg.mu, global.clone())),
        StrategyKind::Scaffold => {
            if optimizer.kind != OptimizerKind::Sgd {
                return Err(Error::config("optimizer.kind", "SCAFFOLD requires plain SGD local steps"));
            }
            if !(optimizer.lr > 0.0) {
                return Err(Error::config("optimizer.lr", "SCAFFOLD requires a positive local learning rate"));
            }
            let c = state.control.clone().unwrap_or_else(|| vec![0.0; global.len()]);
            let correction = match state.client_controls.get(&client) {
                Some(ci) => c.iter().zip(ci).map(|(c, ci)| c - ci).collect(),
                None => c.clone(),
            };
            hooks.correction = Some(correction);
            hooks.server_control = Some(c);
        }
        StrategyKind::FedBabu => hooks.frozen = state.head_range(),
        StrategyKind::FedAvg | StrategyKind::Sgdm | StrategyKind::FedNova => {}
    }
    Ok(hooks)
}

/// Importance weights `nu_r = n_r / sum n` (all six strategies weight by data
/// size; FedNova's step normalization happens in [`aggregate`]).
pub fn importance(updates: &[ClientUpdate], _cfg: &StrategyConfig) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.samples).sum();
    updates.iter().map(|u| u.samples as f64 / total as f64).collect()
}

fn weighted_sum<'a>(u: &[f64], vectors: impl Iterator<Item = &'a [f64]>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&w, v) in u.iter().zip(vectors) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Produces the next global model.
pub fn aggregate(
    global: &ParameterVector,
    updates: &[ClientUpdate],
    u: &AggregationWeights,
    cfg: &StrategyConfig,
    state: &mut ServerStrategyState,
) -> Result<ParameterVector> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates to aggregate".into()));
    }
    if updates.len() != u.len() {
        return Err(Error::DimensionMismatch(format!("{} updates but {} weights", updates.len(), u.len())));
    }
    if let Some(bad) = updates.iter().find(|up| !up.weights.same_layout(global)) {
        return Err(Error::DimensionMismatch(format!("client {} sent weights of another layout", bad.client_id)));
    }
    let u = u.as_slice();
    let g = global.values();
    let len = g.len();
    let average = || weighted_sum(u, updates.iter().map(|up| up.weights.values()), len);

    let next = match cfg.kind {
        StrategyKind::FedAvg | StrategyKind::FedProx => average(),
        StrategyKind::FedBabu => {
            let mut w = average();
            if let Some(head) = &state.frozen_head {
                w[head.range.clone()].copy_from_slice(&head.values);
            }
            w
        }
        StrategyKind::Sgdm => {
            let avg = average();
            let m = state.momentum.get_or_insert_with(|| vec![0.0; len]);
            // w = g - lr * m, written as avg - (lr * m - delta) with
            // delta = g - avg so that beta = 0, lr = 1 reproduces avg exactly.
            avg.iter()
                .zip(g)
                .zip(m.iter_mut())
                .map(|((&a, &gi), mi)| {
                    let delta = gi - a;
                    *mi = cfg.beta * *mi + delta;
                    a - (cfg.server_lr * *mi - delta)
                })
                .collect()
        }
        StrategyKind::FedNova => {
            let tau_eff: f64 = u.iter().zip(updates).map(|(w, up)| w * up.local_steps as f64).sum();
            let mut direction = vec![0.0; len];
            for (&w, up) in u.iter().zip(updates) {
                let tau = up.local_steps as f64;
                for ((d, &gi), &wi) in direction.iter_mut().zip(g).zip(up.weights.values()) {
                    *d += w * (gi - wi) / tau;
                }
            }
            g.iter().zip(&direction).map(|(gi, d)| gi - tau_eff * d).collect()
        }
        StrategyKind::Scaffold => {
            let mut step = vec![0.0; len];
            for (&w, up) in u.iter().zip(updates) {
                for ((s, &gi), &wi) in step.iter_mut().zip(g).zip(up.weights.values()) {
                    *s += w * (gi - wi);
                }
            }
            let next = g.iter().zip(&step).map(|(gi, s)| gi - cfg.server_lr * s).collect();

            let mut mean_delta = vec![0.0; len];
            for up in updates {
                let delta = up.cv_delta.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "SCAFFOLD update from client {} lacks a variate delta",
                        up.client_id
                    ))
                })?;
                if delta.len() != len {
                    return Err(Error::DimensionMismatch(format!("variate delta of client {}", up.client_id)));
                }
                for (m, d) in mean_delta.iter_mut().zip(delta) {
                    *m += d;
                }
                let ci = state.client_controls.entry(up.client_id).or_insert_with(|| vec![0.0; len]);
                for (c, d) in ci.iter_mut().zip(delta) {
                    *c += d;
                }
            }
            let participating = updates.len() as f64;
            let scale = participating / state.total_clients.max(updates.len()) as f64;
            let c = state.control.get_or_insert_with(|| vec![0.0; len]);
            for (c, m) in c.iter_mut().zip(&mean_delta) {
                *c += scale * m / participating;
            }
            next
        }
    };
    if !math::all_finite(&next) {
        return Err(Error::NonFinite(format!("{} aggregate", cfg.kind)));
    }
    ParameterVector::from_values(global.spec().clone(), next)
}
