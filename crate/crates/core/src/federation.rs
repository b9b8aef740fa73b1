//! Synchronous federated rounds: broadcast the global model, train locally on
//! every client, aggregate with client weights and let the controller pick
//! the next learning rate.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{compute_delta_loss, update_lr, ControllerConfig};
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::model::{grad, init_params, loss, sgd_step, ModelArch, ParamVector};
use crate::rng::{derive_seed, rng_for, TAG_LOCAL};
use crate::simnet::{ClientWork, CostModel, Network};
use crate::traffic::ClientDataset;

pub const ROUND_LOG_HEADER: [&str; 6] = [
    "round",
    "loss_before",
    "loss_after",
    "delta_loss",
    "eta",
    "duration_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    DataSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub weight_scheme: WeightScheme,
    pub hidden_width: usize,
    pub controller: ControllerConfig,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            alpha: 1.0,
            beta: 0.1,
            local_epochs: 1,
            batch_size: 16,
            rounds: 30,
            weight_scheme: WeightScheme::DataSize,
            hidden_width: 16,
            controller: ControllerConfig::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::invalid("hyper.eta0", "must be positive"));
        }
        for (field, v) in [("hyper.alpha", self.alpha), ("hyper.beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, "must be a finite non-negative number"));
            }
        }
        for (field, v) in [
            ("hyper.local_epochs", self.local_epochs),
            ("hyper.batch_size", self.batch_size),
            ("hyper.rounds", self.rounds),
            ("hyper.hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        self.controller.validate()?;
        let c = &self.controller;
        if self.eta0 < c.eta_min || self.eta0 > c.eta_max {
            return Err(Error::invalid(
                "hyper.eta0",
                format!("must lie within [{}, {}]", c.eta_min, c.eta_max),
            ));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ModelArch> {
        ModelArch::traffic(self.hidden_width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_client_loss_before: f64,
    pub mean_client_loss_after: f64,
    /// `before - after`; positive means improvement.
    pub delta_loss: f64,
    pub eta_used: f64,
    pub round_duration_s: f64,
    pub per_client_losses: Vec<f64>,
    /// Gradient evaluations summed over all clients.
    pub gradient_steps: usize,
}

pub fn client_weights(clients: &[ClientDataset], scheme: WeightScheme) -> Result<Vec<f64>> {
    if clients.is_empty() {
        return Err(Error::Empty("client_weights"));
    }
    Ok(clients
        .iter()
        .map(|c| match scheme {
            WeightScheme::Uniform => 1.0,
            WeightScheme::DataSize => c.n_k() as f64,
        })
        .collect())
}

/// `w_i / sum(w)`.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::OutOfRange("weights must be finite and non-negative".into()));
    }
    if total <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Number of optimiser steps one client performs in `local_training`.
pub fn local_step_count(n_k: usize, epochs: usize, batch_size: usize) -> usize {
    epochs * n_k.div_ceil(batch_size)
}

/// Mini-batch SGD over the client's data. Each epoch reshuffles with an RNG
/// seeded by `seed`; the last batch of an epoch may be short.
pub fn local_training(
    dataset: &ClientDataset,
    theta: &ParamVector,
    eta: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    if dataset.samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    let mut rng = rng_for(seed, &[TAG_LOCAL]);
    let mut order: Vec<usize> = (0..dataset.n_k()).collect();
    let mut params = theta.clone();
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset.samples[i].clone()));
            let g = grad(&params, &batch)?;
            params = sgd_step(&params, &g, eta)?;
        }
    }
    Ok(params)
}

/// Weighted average `sum(w_i * theta_i) / sum(w_i)`, accumulated in input order.
pub fn aggregate(params_list: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = params_list.first().ok_or(Error::Empty("aggregate"))?;
    if weights.len() != params_list.len() {
        return Err(Error::DimensionMismatch {
            expected: params_list.len(),
            actual: weights.len(),
        });
    }
    if let Some(bad) = params_list.iter().find(|p| p.len() != first.len()) {
        return Err(Error::DimensionMismatch {
            expected: first.len(),
            actual: bad.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::OutOfRange("weights must be finite and non-negative".into()));
    }
    if total <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    let mut acc = vec![0.0; first.len()];
    for (p, &w) in params_list.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    ParamVector::from_values(first.arch(), acc)
}

/// Mutable state of one federated run. Single-owner.
#[derive(Debug, Clone)]
pub struct FedState {
    pub global_params: ParamVector,
    pub eta: f64,
    pub round: usize,
    pub clients: Vec<ClientDataset>,
    pub weights: Vec<f64>,
    pub history: Vec<RoundRecord>,
    pub config: HyperParams,
    pub seed: u64,
    pub network: Network,
}

impl FedState {
    /// Initial state: `init_params(seed)`, `eta = eta0`, weights from the scheme.
    pub fn new(config: &HyperParams, clients: Vec<ClientDataset>, cost: &CostModel, seed: u64) -> Result<Self> {
        config.validate()?;
        cost.validate()?;
        let params = init_params(config.arch()?, seed);
        Self::with_params(config, clients, cost, seed, params)
    }

    pub fn with_params(
        config: &HyperParams,
        mut clients: Vec<ClientDataset>,
        cost: &CostModel,
        seed: u64,
        params: ParamVector,
    ) -> Result<Self> {
        if let Some(c) = clients.iter().find(|c| c.samples.is_empty()) {
            return Err(Error::InsufficientData {
                node_id: c.node_id,
                available: 0,
            });
        }
        clients.sort_by_key(|c| c.node_id);
        let weights = client_weights(&clients, config.weight_scheme)?;
        normalize_weights(&weights)?;
        Ok(Self {
            global_params: params,
            eta: config.eta0,
            round: 0,
            clients,
            weights,
            history: Vec::new(),
            config: config.clone(),
            seed,
            network: Network::new(cost.clone()),
        })
    }

    /// Per-client losses at `params`, in client order.
    pub fn client_losses(&self, params: &ParamVector) -> Result<Vec<f64>> {
        self.clients
            .par_iter()
            .map(|c| loss(params, &c.samples))
            .collect()
    }

    /// Loss averaged with the normalised client weights.
    pub fn weighted_loss(&self, losses: &[f64]) -> Result<f64> {
        let p = normalize_weights(&self.weights)?;
        Ok(p.iter().zip(losses).map(|(p, l)| p * l).sum())
    }

    /// Finishes a round whose client results are `locals`: aggregate, score,
    /// adjust the learning rate, advance the clock and append the record.
    pub(crate) fn complete_round(
        &mut self,
        locals: Vec<ParamVector>,
        steps: Vec<usize>,
        eta_used: f64,
    ) -> Result<()> {
        let before = self.client_losses(&self.global_params)?;
        let loss_before = self.weighted_loss(&before)?;
        let global = aggregate(&locals, &self.weights)?;
        let after = self.client_losses(&global)?;
        let loss_after = self.weighted_loss(&after)?;
        let delta = compute_delta_loss(loss_before, loss_after)?;

        let payload = global.encoded_len();
        let work: Vec<ClientWork> = self
            .clients
            .iter()
            .zip(&steps)
            .map(|(c, &s)| ClientWork {
                client: c.node_id,
                gradient_steps: s,
            })
            .collect();
        let duration = self.network.synchronous_round(&work, payload, payload);

        self.round += 1;
        self.history.push(RoundRecord {
            round: self.round,
            mean_client_loss_before: loss_before,
            mean_client_loss_after: loss_after,
            delta_loss: delta,
            eta_used,
            round_duration_s: duration,
            per_client_losses: after,
            gradient_steps: steps.iter().sum(),
        });
        self.global_params = global;
        self.eta = update_lr(self.eta, delta, &self.config.controller);
        Ok(())
    }
}

/// Total federated step budget for `config` over `clients`.
pub fn federated_step_budget(config: &HyperParams, clients: &[ClientDataset]) -> usize {
    config.rounds
        * clients
            .iter()
            .map(|c| local_step_count(c.n_k(), config.local_epochs, config.batch_size))
            .sum::<usize>()
}

/// One standard federated round. Clients train concurrently from the current
/// global model; results are merged in node order.
pub fn run_round(state: &mut FedState) -> Result<()> {
    let theta = state.global_params.clone();
    let eta = state.eta;
    let cfg = state.config.clone();
    let round = state.round as u64;
    let seed = state.seed;
    let locals: Vec<ParamVector> = state
        .clients
        .par_iter()
        .map(|c| {
            let client_seed = derive_seed(seed, &[TAG_LOCAL, round, c.node_id as u64]);
            local_training(c, &theta, eta, cfg.local_epochs, cfg.batch_size, client_seed)
        })
        .collect::<Result<_>>()?;
    let steps = state
        .clients
        .iter()
        .map(|c| local_step_count(c.n_k(), cfg.local_epochs, cfg.batch_size))
        .collect();
    state.complete_round(locals, steps, eta)
}

/// Runs `config.rounds` standard federated rounds from `init_params(seed)`.
pub fn run_training(
    config: &HyperParams,
    clients: Vec<ClientDataset>,
    cost: &CostModel,
    seed: u64,
) -> Result<(ParamVector, Vec<RoundRecord>)> {
    let mut state = FedState::new(config, clients, cost, seed)?;
    for _ in 0..config.rounds {
        run_round(&mut state)?;
    }
    Ok((state.global_params, state.history))
}

pub fn write_round_log<W: Write>(history: &[RoundRecord], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(ROUND_LOG_HEADER)
        .map_err(crate::traffic::csv_err)?;
    for r in history {
        wtr.write_record([
            r.round.to_string(),
            sig9(r.mean_client_loss_before),
            sig9(r.mean_client_loss_after),
            sig9(r.delta_loss),
            sig9(r.eta_used),
            sig9(r.round_duration_s),
        ])
        .map_err(crate::traffic::csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Checkpoint layout: serialized parameters followed by the round index as a
/// little-endian `u64`.
pub fn encode_checkpoint(params: &ParamVector, round: usize) -> Vec<u8> {
    let mut bytes = params.to_bytes();
    bytes.extend_from_slice(&(round as u64).to_le_bytes());
    bytes
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamVector, usize)> {
    let (params, used) = ParamVector::from_bytes_prefix(bytes)?;
    let tail = &bytes[used..];
    if tail.len() != 8 {
        return Err(Error::Parse(format!(
            "checkpoint trailer must be 8 bytes, found {}",
            tail.len()
        )));
    }
    let round = u64::from_le_bytes(tail.try_into().expect("8 bytes")) as usize;
    Ok((params, round))
}
