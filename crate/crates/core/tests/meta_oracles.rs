mod common;

use metafed::config::ExperimentConfig;
use metafed::eval::{run_comparison, ComparisonConfig, Variant};
use metafed::federation::{aggregate, run_round, FedState, HyperParams};
use metafed::meta::{
    deploy_adapt, inner_adapt, meta_fed_round, meta_outer_step, run_meta_training, LocalTaskSampler, MetaConfig,
    MetaTask, TaskSource,
};
use metafed::model::{grad, init_params, loss, sgd_step, ModelArch, ParamVector};
use metafed::rng::{derive_seed, TAG_META};
use metafed::simnet::CostModel;
use metafed::traffic::{gen_scenario, make_task, ClientDataset, DensityRegime, ScenarioSpec, Task};

/// Support loss `|theta - a|^2 / 2`, query loss `|theta - b|^2 / 2`.
struct Quadratic {
    a: Vec<f64>,
    b: Vec<f64>,
}

fn minus(theta: &ParamVector, target: &[f64]) -> ParamVector {
    let v = theta.values().iter().zip(target).map(|(t, c)| t - c).collect();
    ParamVector::from_values(theta.arch(), v).unwrap()
}

impl MetaTask for Quadratic {
    fn support_grad(&self, theta: &ParamVector) -> metafed::Result<ParamVector> {
        Ok(minus(theta, &self.a))
    }
    fn query_grad(&self, theta: &ParamVector) -> metafed::Result<ParamVector> {
        Ok(minus(theta, &self.b))
    }
}

fn tiny_arch() -> ModelArch {
    ModelArch::new(1, 1, 1).unwrap()
}

#[test]
fn quadratic_tasks_match_closed_form_first_order_update() {
    let theta = ParamVector::from_values(tiny_arch(), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let tasks = vec![
        Quadratic {
            a: vec![0.0, 1.0, 2.0, -1.0],
            b: vec![1.0, 1.0, 1.0, 1.0],
        },
        Quadratic {
            a: vec![-3.0, 0.5, 0.0, 2.0],
            b: vec![0.0, -1.0, 4.0, 0.0],
        },
    ];
    let (lr, k, alpha) = (0.25, 3, 0.1);
    let cfg = MetaConfig {
        inner_steps: k,
        inner_lr: lr,
        ..MetaConfig::default()
    };
    let got = meta_outer_step(&theta, &tasks, alpha, &cfg).unwrap();
    let shrink = (1.0 - lr).powi(k as i32);
    for c in 0..4 {
        let t = theta.values()[c];
        let summed: f64 = tasks
            .iter()
            .map(|q| {
                let adapted = q.a[c] + shrink * (t - q.a[c]);
                adapted - q.b[c]
            })
            .sum();
        assert!((got.values()[c] - (t - alpha * summed)).abs() < 1e-14);
    }
}

#[test]
fn inner_adapt_replays_support_steps() {
    let spec = ScenarioSpec::default();
    let task = make_task(&spec, 10, 20, 4).unwrap();
    let theta = init_params(ModelArch::traffic(8).unwrap(), 4);
    let mut manual = theta.clone();
    for _ in 0..3 {
        manual = sgd_step(&manual, &grad(&manual, &task.support).unwrap(), 0.05).unwrap();
    }
    assert_eq!(inner_adapt(&theta, &task, 0.05, 3).unwrap(), manual);
    let one = sgd_step(&theta, &grad(&theta, &task.support).unwrap(), 0.05).unwrap();
    assert_eq!(inner_adapt(&theta, &task, 0.05, 1).unwrap(), one);
    assert_eq!(deploy_adapt(&theta, &task, 0.05, 1).unwrap(), one);
}

#[test]
fn neutral_rates_and_reductions_are_bitwise() {
    let spec = ScenarioSpec::default();
    let tasks: Vec<Task> = (0..3).map(|s| make_task(&spec, 10, 20, s).unwrap()).collect();
    let theta = init_params(ModelArch::traffic(16).unwrap(), 8);
    let cfg = MetaConfig::default();
    assert_eq!(meta_outer_step(&theta, &tasks, 0.0, &cfg).unwrap(), theta);
    assert_eq!(deploy_adapt(&theta, &tasks[0], 0.0, 7).unwrap(), theta);

    let flat = MetaConfig {
        inner_steps: 0,
        ..cfg
    };
    let mut summed = grad(&theta, &tasks[0].query).unwrap();
    for t in &tasks[1..] {
        let g = grad(&theta, &t.query).unwrap();
        let v = summed.values().iter().zip(g.values()).map(|(x, y)| x + y).collect();
        summed = ParamVector::from_values(theta.arch(), v).unwrap();
    }
    let want = sgd_step(&theta, &summed, 0.3).unwrap();
    assert_eq!(meta_outer_step(&theta, &tasks, 0.3, &flat).unwrap(), want);
    let single = sgd_step(&theta, &grad(&theta, &tasks[1].query).unwrap(), 0.3).unwrap();
    assert_eq!(meta_outer_step(&theta, &tasks[1..2], 0.3, &flat).unwrap(), single);
    assert!(meta_outer_step::<Task>(&theta, &[], 0.3, &cfg).is_err());
    assert!(deploy_adapt(&theta, &tasks[0], -0.1, 1).is_err());
}

fn small_state(hyper: &HyperParams, seed: u64) -> FedState {
    let spec = ScenarioSpec {
        num_nodes: 4,
        intervals_per_node: 60,
        ..ScenarioSpec::default()
    };
    FedState::new(hyper, gen_scenario(&spec, seed).unwrap(), &CostModel::default(), seed).unwrap()
}

#[test]
fn meta_round_matches_manual_composition() {
    let hyper = HyperParams::default();
    let cfg = MetaConfig::default();
    let sampler = LocalTaskSampler {
        regime: DensityRegime::Moderate,
    };
    let mut state = small_state(&hyper, 21);
    for _ in 0..2 {
        let theta = state.global_params.clone();
        let round = state.round as u64;
        let locals: Vec<ParamVector> = state
            .clients
            .iter()
            .map(|c| {
                let seed = derive_seed(state.seed, &[TAG_META, round, c.node_id as u64]);
                let tasks = sampler.sample_tasks(c, &cfg, seed).unwrap();
                meta_outer_step(&theta, &tasks, hyper.alpha, &cfg).unwrap()
            })
            .collect();
        let want = aggregate(&locals, &state.weights).unwrap();
        meta_fed_round(&mut state, &cfg, &sampler).unwrap();
        assert_eq!(state.global_params, want);
    }
    assert_eq!(state.history.len(), 2);
}

#[test]
fn single_task_no_inner_steps_collapses_to_a_federated_round() {
    let hyper = HyperParams::default();
    let cfg = MetaConfig {
        inner_steps: 0,
        tasks_per_client: 1,
        ..MetaConfig::default()
    };
    let sampler = LocalTaskSampler {
        regime: DensityRegime::Moderate,
    };
    let mut meta_state = small_state(&hyper, 5);
    let theta = meta_state.global_params.clone();
    // the FL round trains each client on exactly the query batch its meta task used
    let query_clients: Vec<ClientDataset> = meta_state
        .clients
        .iter()
        .map(|c| {
            let seed = derive_seed(meta_state.seed, &[TAG_META, 0, c.node_id as u64]);
            let task = sampler.sample_tasks(c, &cfg, seed).unwrap().remove(0);
            ClientDataset {
                node_id: c.node_id,
                samples: task.query,
            }
        })
        .collect();
    let fl_hyper = HyperParams {
        eta0: hyper.alpha,
        batch_size: cfg.query_size,
        local_epochs: 1,
        ..hyper.clone()
    };
    let mut fl_state = FedState::with_params(&fl_hyper, query_clients, &CostModel::default(), 5, theta).unwrap();
    // equal query sizes make data-size weights uniform in both runs
    fl_state.weights = meta_state.weights.clone();
    run_round(&mut fl_state).unwrap();
    meta_fed_round(&mut meta_state, &cfg, &sampler).unwrap();
    let diff = common::max_abs_diff(meta_state.global_params.values(), fl_state.global_params.values());
    assert!(diff < 1e-12, "{diff:e}");
}

#[test]
fn zero_outer_rate_never_moves_the_global_model() {
    let hyper = HyperParams {
        alpha: 0.0,
        rounds: 3,
        ..HyperParams::default()
    };
    let spec = ScenarioSpec::default();
    let clients = gen_scenario(&spec, 2).unwrap();
    let sampler = LocalTaskSampler {
        regime: spec.density_regime,
    };
    let (params, history) =
        run_meta_training(&hyper, &MetaConfig::default(), clients, &sampler, &CostModel::default(), 2).unwrap();
    let init = init_params(hyper.arch().unwrap(), 2);
    assert!(common::max_abs_diff(params.values(), init.values()) <= 1e-12);
    assert_eq!(history.len(), 3);
}

/// Meta-trained starting points adapt to a regime they never saw better than
/// a fresh initialisation does.
#[test]
fn meta_training_beats_random_init_on_a_held_out_regime() {
    let hyper = HyperParams::default();
    let cfg = MetaConfig::default();
    let spec = ScenarioSpec::default();
    let held_out = spec.with_regime(DensityRegime::High);
    let (mut meta_loss, mut fresh_loss) = (0.0, 0.0);
    for seed in 0..10u64 {
        let clients = gen_scenario(&spec, seed).unwrap();
        let sampler = LocalTaskSampler {
            regime: spec.density_regime,
        };
        let (theta, _) = run_meta_training(&hyper, &cfg, clients, &sampler, &CostModel::default(), seed).unwrap();
        let fresh = init_params(hyper.arch().unwrap(), seed);
        let task = make_task(&held_out, 10, 200, 1000 + seed).unwrap();
        meta_loss += loss(&deploy_adapt(&theta, &task, hyper.beta, 5).unwrap(), &task.query).unwrap();
        fresh_loss += loss(&deploy_adapt(&fresh, &task, hyper.beta, 5).unwrap(), &task.query).unwrap();
    }
    assert!(meta_loss < fresh_loss, "meta {meta_loss} vs fresh {fresh_loss}");
}

/// After the incident burst, the meta-federated model adapted with the
/// default budget is at least as accurate as the standard federated one.
#[test]
fn meta_model_adapts_at_least_as_well_as_standard_fl() {
    let cfg = ExperimentConfig {
        comparison: ComparisonConfig {
            variants: vec![Variant::StandardFl, Variant::MetaFl],
            regimes: vec![DensityRegime::Moderate],
            ..ComparisonConfig::default()
        },
        seeds: (1..=10).collect(),
        ..ExperimentConfig::default()
    };
    let report = run_comparison(&cfg).unwrap();
    let meta = report.mean_of(Variant::MetaFl, |c| c.accuracy).unwrap();
    let fl = report.mean_of(Variant::StandardFl, |c| c.accuracy).unwrap();
    assert!(meta >= fl, "meta {meta} vs standard {fl}");
}
