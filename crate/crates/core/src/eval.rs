//! Accuracy, simulated response time, the centralized baseline and the
//! three-way comparison harness (centralized vs. standard FL vs. meta FL).
//!
//! A comparison cell trains all variants on the same per-node streams, then
//! picks an unseen sensor site. Each variant is first adapted on a pre-shift
//! task at that site to fix its own reference accuracy; afterwards an incident
//! burst is injected and the variant adapts on the shifted support set. The
//! cell reports query accuracy after a fixed number of adaptation steps and
//! the simulated time until accuracy recovers to a fraction of the reference.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::controller::{compute_delta_loss, update_lr};
use crate::error::{Error, Result};
use crate::federation::{federated_step_budget, run_training, HyperParams, RoundRecord};
use crate::format::{round9, sig9};
use crate::meta::{deploy_adapt, meta_step_budget, run_meta_training, LocalTaskSampler};
use crate::model::{grad, init_params, loss, predict, sgd_step, ParamVector};
use crate::rng::{derive_seed, rng_for, TAG_CENTRAL, TAG_EVAL};
use crate::simnet::{compute_time, transmit, CostModel};
use crate::traffic::{
    gen_scenario, make_task_at, partition_noniid, ClientDataset, DensityRegime, SiteProfile, Task,
    ScenarioSpec, TrafficSample, SAMPLE_WIRE_BYTES,
};

pub const REPORT_CSV_HEADER: [&str; 6] = [
    "variant",
    "regime",
    "seed",
    "accuracy",
    "response_time_s",
    "steps_to_threshold",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Centralized,
    StandardFl,
    MetaFl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Self::Centralized, Self::StandardFl, Self::MetaFl];

    pub fn name(self) -> &'static str {
        match self {
            Self::Centralized => "centralized",
            Self::StandardFl => "standard_fl",
            Self::MetaFl => "meta_fl",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub variants: Vec<Variant>,
    pub regimes: Vec<DensityRegime>,
    /// Support-set steps allowed before accuracy is measured.
    pub adapt_steps: usize,
    /// Cap on adaptation steps when searching for the recovery threshold.
    pub max_adapt_steps: usize,
    /// Recovery threshold as a fraction of the pre-shift accuracy.
    pub threshold_fraction: f64,
    pub support_size: usize,
    pub query_size: usize,
    /// Incident probability during the injected burst.
    pub shift_incident_rate: f64,
    /// Dirichlet label skew used to re-partition the pooled streams; 0 keeps
    /// the per-node streams as generated.
    pub label_skew: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            regimes: DensityRegime::ALL.to_vec(),
            adapt_steps: 5,
            max_adapt_steps: 100,
            threshold_fraction: 0.8,
            support_size: 10,
            query_size: 200,
            shift_incident_rate: 0.6,
            label_skew: 0.0,
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::invalid("comparison.variants", "must not be empty"));
        }
        if self.regimes.is_empty() {
            return Err(Error::invalid("comparison.regimes", "must not be empty"));
        }
        if self.adapt_steps > self.max_adapt_steps {
            return Err(Error::invalid(
                "comparison.adapt_steps",
                "must not exceed max_adapt_steps",
            ));
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return Err(Error::invalid("comparison.threshold_fraction", "must lie in (0, 1]"));
        }
        if self.support_size == 0 || self.query_size == 0 {
            return Err(Error::invalid(
                "comparison.support_size",
                "support and query sizes must be at least 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.shift_incident_rate) {
            return Err(Error::invalid("comparison.shift_incident_rate", "must lie in [0, 1]"));
        }
        if !(self.label_skew >= 0.0 && self.label_skew.is_finite()) {
            return Err(Error::invalid("comparison.label_skew", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy(theta: &ParamVector, data: &[TrafficSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    for s in data {
        if predict(theta, &s.features)? == s.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Plain mini-batch SGD on the pooled data for exactly `step_budget` steps.
pub fn train_centralized(pool: &[TrafficSample], config: &HyperParams, step_budget: usize, seed: u64) -> Result<ParamVector> {
    Ok(train_centralized_logged(pool, config, step_budget, &CostModel::zero(), seed)?.0)
}

/// [`train_centralized`] with a per-round log. The step budget is split into
/// `config.rounds` equal chunks; after each chunk the pooled loss drives the
/// same learning-rate controller the federated runs use.
pub fn train_centralized_logged(
    pool: &[TrafficSample],
    config: &HyperParams,
    step_budget: usize,
    cost: &CostModel,
    seed: u64,
) -> Result<(ParamVector, Vec<RoundRecord>)> {
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut params = init_params(config.arch()?, seed);
    let mut rng = rng_for(seed, &[TAG_CENTRAL]);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();
    let mut eta = config.eta0;
    let mut history = Vec::with_capacity(config.rounds);
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut done = 0;
    for r in 0..config.rounds {
        let chunk_end = step_budget * (r + 1) / config.rounds;
        let steps = chunk_end - done;
        let before = loss(&params, pool)?;
        for _ in 0..steps {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + config.batch_size).min(order.len());
            batch.clear();
            batch.extend(order[cursor..end].iter().map(|&i| pool[i].clone()));
            cursor = end;
            params = sgd_step(&params, &grad(&params, &batch)?, eta)?;
        }
        done = chunk_end;
        let after = loss(&params, pool)?;
        let delta = compute_delta_loss(before, after)?;
        history.push(RoundRecord {
            round: r + 1,
            mean_client_loss_before: before,
            mean_client_loss_after: after,
            delta_loss: delta,
            eta_used: eta,
            round_duration_s: compute_time(cost, steps),
            per_client_losses: vec![after],
            gradient_steps: steps,
        });
        eta = update_lr(eta, delta, &config.controller);
    }
    Ok((params, history))
}

/// Query accuracy after each of `0..=max_steps` support-set steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationTrace {
    pub accuracies: Vec<f64>,
    pub threshold: f64,
    /// First step count whose accuracy reaches the threshold, capped at `max_steps`.
    pub steps_to_threshold: usize,
    pub param_bytes: usize,
    pub support_bytes: usize,
}

pub fn adaptation_trace(
    theta: &ParamVector,
    task: &Task,
    beta: f64,
    max_steps: usize,
    threshold: f64,
) -> Result<AdaptationTrace> {
    let mut params = theta.clone();
    let mut accuracies = Vec::with_capacity(max_steps + 1);
    accuracies.push(accuracy(&params, &task.query)?);
    for _ in 0..max_steps {
        params = deploy_adapt(&params, task, beta, 1)?;
        accuracies.push(accuracy(&params, &task.query)?);
    }
    let steps_to_threshold = accuracies
        .iter()
        .position(|&a| a >= threshold)
        .unwrap_or(max_steps)
        .min(max_steps);
    Ok(AdaptationTrace {
        accuracies,
        threshold,
        steps_to_threshold,
        param_bytes: theta.encoded_len(),
        support_bytes: task.support.len() * SAMPLE_WIRE_BYTES,
    })
}

/// Simulated seconds from the shift until the adapted model is in service.
///
/// Federated variants adapt at the edge and push the adapted parameters.
/// The centralized variant must first upload the new support data.
pub fn response_time(variant: Variant, cost: &CostModel, trace: &AdaptationTrace) -> f64 {
    let upload = match variant {
        Variant::Centralized => transmit(cost, trace.support_bytes, None),
        Variant::StandardFl | Variant::MetaFl => 0.0,
    };
    upload + compute_time(cost, trace.steps_to_threshold) + transmit(cost, trace.param_bytes, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub variant: Variant,
    pub regime: DensityRegime,
    pub seed: u64,
    pub accuracy: f64,
    pub response_time_s: f64,
    pub steps_to_threshold: usize,
    pub pre_shift_accuracy: f64,
    /// Gradient evaluations spent in training.
    pub training_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean: round9(mean),
            sd: round9(sd),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub regime: DensityRegime,
    pub n: usize,
    pub accuracy: MeanSd,
    pub response_time_s: MeanSd,
    pub steps_to_threshold: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    /// Sorted by (variant, regime, seed).
    pub cells: Vec<CellResult>,
}

impl ComparisonReport {
    /// Mean over every cell of `variant`.
    pub fn mean_of(&self, variant: Variant, metric: impl Fn(&CellResult) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .map(metric)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn summary(&self) -> Summary {
        summarize(&self.seeds, &self.cells)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(REPORT_CSV_HEADER)
            .map_err(crate::traffic::csv_err)?;
        for c in &self.cells {
            wtr.write_record([
                c.variant.name().to_string(),
                c.regime.name().to_string(),
                c.seed.to_string(),
                sig9(c.accuracy),
                sig9(c.response_time_s),
                c.steps_to_threshold.to_string(),
            ])
            .map_err(crate::traffic::csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn summarize(seeds: &[u64], cells: &[CellResult]) -> Summary {
    let mut groups: BTreeMap<(Variant, DensityRegime), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.variant, c.regime)).or_default().push(c);
    }
    let rows = groups
        .into_iter()
        .map(|((variant, regime), cs)| {
            let col = |f: &dyn Fn(&CellResult) -> f64| -> Vec<f64> { cs.iter().map(|c| round9(f(c))).collect() };
            SummaryRow {
                variant,
                regime,
                n: cs.len(),
                accuracy: MeanSd::of(&col(&|c| c.accuracy)),
                response_time_s: MeanSd::of(&col(&|c| c.response_time_s)),
                steps_to_threshold: MeanSd::of(&col(&|c| c.steps_to_threshold as f64)),
            }
        })
        .collect();
    Summary {
        seeds: seeds.to_vec(),
        rows,
    }
}

pub fn write_summary_json<W: Write>(summary: &Summary, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, summary)?;
    writeln!(out)?;
    Ok(())
}

/// Re-reads a report CSV into a summary (the `report` subcommand).
pub fn summary_from_csv<R: Read>(input: R) -> Result<Summary> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(crate::traffic::csv_err)?.clone();
    if header.iter().ne(REPORT_CSV_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("unexpected report header {header:?}")));
    }
    let mut cells = Vec::new();
    let mut seeds = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(crate::traffic::csv_err)?;
        let get = |i: usize| record.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            get(i)
                .parse()
                .map_err(|e| Error::Parse(format!("{}: {e}", REPORT_CSV_HEADER[i])))
        };
        let seed: u64 = get(2).parse().map_err(|e| Error::Parse(format!("seed: {e}")))?;
        if !seeds.contains(&seed) {
            seeds.push(seed);
        }
        cells.push(CellResult {
            variant: get(0).parse()?,
            regime: get(1).parse()?,
            seed,
            accuracy: num(3)?,
            response_time_s: num(4)?,
            steps_to_threshold: get(5)
                .parse()
                .map_err(|e| Error::Parse(format!("steps_to_threshold: {e}")))?,
            pre_shift_accuracy: f64::NAN,
            training_steps: 0,
        });
    }
    Ok(summarize(&seeds, &cells))
}

/// Trained models of one (regime, seed) cell group.
struct TrainedModels {
    models: Vec<(Variant, ParamVector, usize)>,
}

/// Per-node streams of `spec`, optionally re-partitioned with label skew.
pub fn scenario_clients(spec: &ScenarioSpec, label_skew: f64, seed: u64) -> Result<Vec<ClientDataset>> {
    let clients = gen_scenario(spec, seed)?;
    if label_skew > 0.0 {
        let pool: Vec<TrafficSample> = clients.into_iter().flat_map(|c| c.samples).collect();
        partition_noniid(&pool, spec.num_nodes, label_skew, seed)
    } else {
        Ok(clients)
    }
}

fn train_variants(cfg: &ExperimentConfig, regime: DensityRegime, seed: u64, clients: Vec<ClientDataset>) -> Result<TrainedModels> {
    let hyper = &cfg.hyper;
    let budget = federated_step_budget(hyper, &clients);
    let mut models = Vec::new();
    for &variant in &cfg.comparison.variants {
        let (params, steps) = match variant {
            Variant::StandardFl => (run_training(hyper, clients.clone(), &cfg.cost, seed)?.0, budget),
            Variant::Centralized => {
                let pool: Vec<TrafficSample> = clients.iter().flat_map(|c| c.samples.iter().cloned()).collect();
                (train_centralized(&pool, hyper, budget, seed)?, budget)
            }
            Variant::MetaFl => {
                let steps = meta_step_budget(hyper, &cfg.meta, clients.len());
                let sampler = LocalTaskSampler { regime };
                let (params, _) = run_meta_training(hyper, &cfg.meta, clients.clone(), &sampler, &cfg.cost, seed)?;
                (params, steps)
            }
        };
        models.push((variant, params, steps));
    }
    check_budget_parity(&models, budget)?;
    Ok(TrainedModels { models })
}

/// Centralized and standard FL spend exactly the federated step budget; meta
/// FL may not exceed it.
fn check_budget_parity(models: &[(Variant, ParamVector, usize)], budget: usize) -> Result<()> {
    for (variant, _, steps) in models {
        let ok = match variant {
            Variant::Centralized | Variant::StandardFl => *steps == budget,
            Variant::MetaFl => *steps <= budget,
        };
        if !ok {
            return Err(Error::Assertion(format!(
                "step budget parity violated: {} used {steps} steps against a budget of {budget}",
                variant.name()
            )));
        }
    }
    Ok(())
}

/// Evaluates one trained model on the pre-shift and shifted tasks.
pub fn evaluate_cell(
    cfg: &ExperimentConfig,
    variant: Variant,
    theta: &ParamVector,
    pre_task: &Task,
    shifted_task: &Task,
) -> Result<(f64, AdaptationTrace, f64)> {
    let cmp = &cfg.comparison;
    let beta = cfg.hyper.beta;
    let pre_adapted = deploy_adapt(theta, pre_task, beta, cmp.adapt_steps)?;
    let pre_shift_accuracy = accuracy(&pre_adapted, &pre_task.query)?;
    let trace = adaptation_trace(
        theta,
        shifted_task,
        beta,
        cmp.max_adapt_steps,
        cmp.threshold_fraction * pre_shift_accuracy,
    )?;
    let response = response_time(variant, &cfg.cost, &trace);
    Ok((pre_shift_accuracy, trace, response))
}

/// Pre-shift and shifted tasks at an unseen site of the regime.
pub fn evaluation_tasks(cfg: &ExperimentConfig, regime: DensityRegime, data_seed: u64) -> Result<(Task, Task)> {
    let spec = cfg.scenario.with_regime(regime);
    let cmp = &cfg.comparison;
    let site = SiteProfile::draw(spec.node_bias_scale, &mut rng_for(data_seed, &[TAG_EVAL, 1]));
    let pre = make_task_at(&spec, &site, cmp.support_size, cmp.query_size, derive_seed(data_seed, &[TAG_EVAL, 2]))?;
    let shifted_spec = ScenarioSpec {
        incident_rate: cmp.shift_incident_rate,
        ..spec
    };
    let post = make_task_at(
        &shifted_spec,
        &site,
        cmp.support_size,
        cmp.query_size,
        derive_seed(data_seed, &[TAG_EVAL, 3]),
    )?;
    Ok((pre, post))
}

fn data_seed(seed: u64, regime: DensityRegime) -> u64 {
    derive_seed(seed, &[TAG_EVAL, regime.index()])
}

fn run_group(cfg: &ExperimentConfig, regime: DensityRegime, seed: u64) -> Result<Vec<CellResult>> {
    let ds = data_seed(seed, regime);
    let clients = scenario_clients(&cfg.scenario.with_regime(regime), cfg.comparison.label_skew, ds)?;
    let trained = train_variants(cfg, regime, seed, clients)?;
    let (pre, post) = evaluation_tasks(cfg, regime, ds)?;
    trained
        .models
        .iter()
        .map(|(variant, theta, steps)| {
            let (pre_acc, trace, response) = evaluate_cell(cfg, *variant, theta, &pre, &post)?;
            Ok(CellResult {
                variant: *variant,
                regime,
                seed,
                accuracy: trace.accuracies[cfg.comparison.adapt_steps],
                response_time_s: response,
                steps_to_threshold: trace.steps_to_threshold,
                pre_shift_accuracy: pre_acc,
                training_steps: *steps,
            })
        })
        .collect()
}

/// Runs every (variant, regime, seed) cell. Cell groups run concurrently;
/// the report is assembled in sorted cell order.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let groups: Vec<(DensityRegime, u64)> = cfg
        .comparison
        .regimes
        .iter()
        .flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let mut cells: Vec<CellResult> = groups
        .par_iter()
        .map(|&(regime, seed)| run_group(cfg, regime, seed))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    cells.sort_by_key(|a| (a.variant, a.regime, a.seed));

    let expected = cfg.comparison.variants.len() * groups.len();
    if cells.len() != expected {
        return Err(Error::Assertion(format!(
            "report incomplete: {} of {expected} cells",
            cells.len()
        )));
    }
    if let Some(bad) = cells.iter().find(|c| !(0.0..=1.0).contains(&c.accuracy)) {
        return Err(Error::Assertion(format!("accuracy {} outside [0, 1]", bad.accuracy)));
    }
    Ok(ComparisonReport {
        seeds: cfg.seeds.clone(),
        cells,
    })
}
