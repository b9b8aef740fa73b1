//! First-order MAML layered on the federated round protocol.
//!
//! Each client samples support/query tasks from its own data, adapts the
//! global model on every support set, takes the query gradient at the adapted
//! point and applies the summed query gradients to the global model with the
//! meta rate `alpha`. The server only aggregates. At deployment the meta-learned
//! model is adapted to a new task with a few support-set steps of size `beta`.

use rand::seq::SliceRandom;
use rand_distr::{Dirichlet, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{FedState, HyperParams, RoundRecord};
use crate::model::{grad, sgd_step, ParamVector};
use crate::rng::{derive_seed, rng_for, TAG_META};
use crate::simnet::CostModel;
use crate::traffic::{apportion, make_task, NUM_CLASSES, ClientDataset, DensityRegime, ScenarioSpec, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub tasks_per_client: usize,
    pub support_size: usize,
    pub query_size: usize,
    /// Label skew of locally sampled tasks: each task's class mix is drawn
    /// from `Dirichlet(1/task_class_skew)`; 0 samples uniform subsets.
    #[serde(default = "default_task_class_skew")]
    pub task_class_skew: f64,
}

fn default_task_class_skew() -> f64 {
    1.0
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 5,
            inner_lr: 0.05,
            tasks_per_client: 2,
            support_size: 10,
            query_size: 20,
            task_class_skew: default_task_class_skew(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::invalid("meta.inner_lr", "must be positive"));
        }
        if !(self.task_class_skew >= 0.0 && self.task_class_skew.is_finite()) {
            return Err(Error::invalid(
                "meta.task_class_skew",
                "must be a finite non-negative number",
            ));
        }
        for (field, v) in [
            ("meta.tasks_per_client", self.tasks_per_client),
            ("meta.support_size", self.support_size),
            ("meta.query_size", self.query_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Gradient evaluations one client spends per meta round.
    pub fn steps_per_round(&self) -> usize {
        self.tasks_per_client * (self.inner_steps + 1)
    }
}

/// Anything with a support loss and a query loss to differentiate.
pub trait MetaTask {
    fn support_grad(&self, theta: &ParamVector) -> Result<ParamVector>;
    fn query_grad(&self, theta: &ParamVector) -> Result<ParamVector>;
}

impl MetaTask for Task {
    fn support_grad(&self, theta: &ParamVector) -> Result<ParamVector> {
        grad(theta, &self.support)
    }

    fn query_grad(&self, theta: &ParamVector) -> Result<ParamVector> {
        grad(theta, &self.query)
    }
}

/// `steps` full-batch gradient steps on the task's support set.
pub fn inner_adapt<T: MetaTask + ?Sized>(
    theta: &ParamVector,
    task: &T,
    inner_lr: f64,
    steps: usize,
) -> Result<ParamVector> {
    let mut params = theta.clone();
    for _ in 0..steps {
        let g = task.support_grad(&params)?;
        params = sgd_step(&params, &g, inner_lr)?;
    }
    Ok(params)
}

/// First-order meta update: `theta - alpha * sum_tasks grad_query(adapted_task)`.
pub fn meta_outer_step<T: MetaTask>(
    theta: &ParamVector,
    tasks: &[T],
    alpha: f64,
    cfg: &MetaConfig,
) -> Result<ParamVector> {
    if tasks.is_empty() {
        return Err(Error::Empty("meta_outer_step"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidRate(alpha));
    }
    let mut summed: Option<ParamVector> = None;
    for task in tasks {
        let adapted = inner_adapt(theta, task, cfg.inner_lr, cfg.inner_steps)?;
        let g = task.query_grad(&adapted)?;
        summed = Some(match summed {
            None => g,
            Some(acc) => add(&acc, &g)?,
        });
    }
    let summed = summed.expect("tasks is non-empty");
    sgd_step(theta, &summed, alpha)
}

fn add(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    ParamVector::from_values(a.arch(), values)
}

/// Few-shot deployment adaptation: `steps` support-set steps of size `beta`.
/// The query set is left for evaluation.
pub fn deploy_adapt(theta_prime: &ParamVector, new_task: &Task, beta: f64, steps: usize) -> Result<ParamVector> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidRate(beta));
    }
    inner_adapt(theta_prime, new_task, beta, steps)
}

/// Supplies meta-training tasks for a client.
pub trait TaskSource: Sync {
    fn sample_tasks(&self, client: &ClientDataset, cfg: &MetaConfig, seed: u64) -> Result<Vec<Task>>;
}

/// Draws tasks from the client's own samples, so no data leaves the client.
/// Support and query are disjoint within a task; different tasks may overlap.
///
/// With `task_class_skew > 0` every task gets its own class mix, drawn from a
/// symmetric Dirichlet. Episodes then differ the way traffic conditions do
/// (a burst of congestion shifts the label mix), which is the variation the
/// meta-learned initialisation is meant to absorb in a few steps.
#[derive(Debug, Clone, Copy)]
pub struct LocalTaskSampler {
    pub regime: DensityRegime,
}

impl TaskSource for LocalTaskSampler {
    fn sample_tasks(&self, client: &ClientDataset, cfg: &MetaConfig, seed: u64) -> Result<Vec<Task>> {
        let n = client.n_k();
        if n < 2 {
            return Err(Error::InsufficientData {
                node_id: client.node_id,
                available: n,
            });
        }
        cfg.validate()?;
        let support = cfg.support_size.min(n - 1);
        let size = support + cfg.query_size.min(n - support);
        let mut rng = rng_for(seed, &[]);
        let mut order: Vec<usize> = (0..n).collect();
        let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
        for (i, smp) in client.samples.iter().enumerate() {
            by_class[smp.label as usize].push(i);
        }
        let mix = (cfg.task_class_skew > 0.0)
            .then(|| Dirichlet::new([1.0 / cfg.task_class_skew; NUM_CLASSES]))
            .transpose()
            .map_err(|e| Error::invalid("meta.task_class_skew", e.to_string()))?;
        let take = |idx: &[usize]| idx.iter().map(|&i| client.samples[i].clone()).collect();
        let mut tasks = Vec::with_capacity(cfg.tasks_per_client);
        for _ in 0..cfg.tasks_per_client {
            let picked: Vec<usize> = match &mix {
                None => order.partial_shuffle(&mut rng, size).0.to_vec(),
                Some(dirichlet) => {
                    let counts = apportion(size, &dirichlet.sample(&mut rng));
                    let mut picked = Vec::with_capacity(size);
                    for (pool, want) in by_class.iter_mut().zip(counts) {
                        let k = want.min(pool.len());
                        picked.extend_from_slice(pool.partial_shuffle(&mut rng, k).0);
                    }
                    // classes the client lacks are made up from the rest
                    let short = size - picked.len();
                    if short > 0 {
                        let mut chosen = vec![false; n];
                        for &i in &picked {
                            chosen[i] = true;
                        }
                        order.shuffle(&mut rng);
                        picked.extend(order.iter().filter(|&&i| !chosen[i]).take(short));
                    }
                    picked.shuffle(&mut rng);
                    picked
                }
            };
            tasks.push(Task {
                support: take(&picked[..support]),
                query: take(&picked[support..]),
                regime: self.regime,
            });
        }
        Ok(tasks)
    }
}

/// Draws fresh tasks from the generative process of a scenario.
#[derive(Debug, Clone)]
pub struct GeneratorTaskSource {
    pub spec: ScenarioSpec,
}

impl TaskSource for GeneratorTaskSource {
    fn sample_tasks(&self, _client: &ClientDataset, cfg: &MetaConfig, seed: u64) -> Result<Vec<Task>> {
        (0..cfg.tasks_per_client as u64)
            .map(|t| make_task(&self.spec, cfg.support_size, cfg.query_size, derive_seed(seed, &[t])))
            .collect()
    }
}

/// One meta-federated round. Every client runs a local [`meta_outer_step`] from
/// the current global model; the server aggregates exactly as in standard
/// federated rounds and the controller still tracks the loss, but its learning
/// rate is not used by the meta step.
pub fn meta_fed_round(state: &mut FedState, meta_cfg: &MetaConfig, source: &dyn TaskSource) -> Result<()> {
    let theta = state.global_params.clone();
    let alpha = state.config.alpha;
    let round = state.round as u64;
    let seed = state.seed;
    let locals: Vec<ParamVector> = state
        .clients
        .par_iter()
        .map(|c| {
            let client_seed = derive_seed(seed, &[TAG_META, round, c.node_id as u64]);
            let tasks = source.sample_tasks(c, meta_cfg, client_seed)?;
            meta_outer_step(&theta, &tasks, alpha, meta_cfg)
        })
        .collect::<Result<_>>()?;
    let steps = vec![meta_cfg.steps_per_round(); state.clients.len()];
    let eta = state.eta;
    state.complete_round(locals, steps, eta)
}

/// `config.rounds` meta-federated rounds from `init_params(seed)`.
pub fn run_meta_training(
    config: &HyperParams,
    meta_cfg: &MetaConfig,
    clients: Vec<ClientDataset>,
    source: &dyn TaskSource,
    cost: &CostModel,
    seed: u64,
) -> Result<(ParamVector, Vec<RoundRecord>)> {
    meta_cfg.validate()?;
    let mut state = FedState::new(config, clients, cost, seed)?;
    for _ in 0..config.rounds {
        meta_fed_round(&mut state, meta_cfg, source)?;
    }
    Ok((state.global_params, state.history))
}

/// Gradient evaluations `run_meta_training` spends across all clients and rounds.
pub fn meta_step_budget(config: &HyperParams, meta_cfg: &MetaConfig, num_clients: usize) -> usize {
    config.rounds * num_clients * meta_cfg.steps_per_round()
}
