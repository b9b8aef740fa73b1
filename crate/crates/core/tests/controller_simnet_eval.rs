mod common;

use metafed::controller::{compute_delta_loss, update_lr, ControllerConfig};
use metafed::eval::{
    accuracy, adaptation_trace, response_time, train_centralized, train_centralized_logged, AdaptationTrace,
    Variant,
};
use metafed::federation::{federated_step_budget, HyperParams};
use metafed::model::{grad, init_params, sgd_step, ModelArch};
use metafed::rng::rng_for;
use metafed::simnet::{
    compute_time, round_trip_time, transmit, ClientWork, CostModel, EventKind, Network,
};
use metafed::traffic::{gen_scenario, make_task, ScenarioSpec, TrafficSample};
use proptest::prelude::*;
use std::collections::HashMap;

fn cost(grad_step_s: f64) -> CostModel {
    CostModel {
        base_latency_s: 0.010,
        per_kb_s: 0.001,
        grad_step_s,
        jitter: false,
        seed: 0,
    }
}

#[test]
fn controller_examples() {
    let cfg = ControllerConfig::default();
    assert!((update_lr(0.1, 0.05, &cfg) - 0.105).abs() < 1e-15);
    let loose = ControllerConfig {
        eta_min: 0.001,
        ..cfg.clone()
    };
    assert!((update_lr(0.1, -0.01, &loose) - 0.07).abs() < 1e-15);
    assert_eq!(update_lr(cfg.eta_max, 0.3, &cfg), cfg.eta_max);
    assert_eq!(update_lr(cfg.eta_min, -0.3, &cfg), cfg.eta_min);
    assert!((update_lr(0.1, 0.0, &cfg) - 0.07).abs() < 1e-15);
    assert!((compute_delta_loss(1.0, 0.8).unwrap() - 0.2).abs() < 1e-15);
}

proptest! {
    #[test]
    fn controller_stays_in_bounds_and_is_sign_monotone(
        deltas in proptest::collection::vec(-1.0f64..1.0, 1..100),
        up in 1.0001f64..3.0,
        down in 0.01f64..0.9999,
        lo in 1e-6f64..0.1,
        span in 1.0f64..1e3,
    ) {
        let cfg = ControllerConfig { kappa_up: up, kappa_down: down, eta_min: lo, eta_max: lo * span };
        cfg.validate().unwrap();
        let mut eta = cfg.eta_min;
        for d in deltas {
            let next = update_lr(eta, d, &cfg);
            prop_assert!(next >= cfg.eta_min && next <= cfg.eta_max);
            prop_assert!(update_lr(eta, d.abs() + 1e-9, &cfg) >= update_lr(eta, -d.abs(), &cfg));
            eta = next;
        }
    }
}

#[test]
fn transmit_and_compute_examples() {
    let c = cost(0.002);
    assert!((transmit(&c, 5120, None) - 0.015).abs() < 1e-15);
    assert!((transmit(&c, 0, None) - 0.010).abs() < 1e-15);
    assert_eq!(transmit(&CostModel::zero(), 5000, None), 0.0);
    assert!((compute_time(&c, 50) - 0.1).abs() < 1e-15);
    assert_eq!(compute_time(&c, 0), 0.0);
    assert!((compute_time(&c, 40) - 2.0 * compute_time(&c, 20)).abs() < 1e-15);
    let rt = round_trip_time(&cost(0.001), 1024, 1024, 10);
    assert!((rt - 0.032).abs() < 1e-12);
    assert_eq!(round_trip_time(&CostModel::zero(), 9999, 1, 77), 0.0);
}

#[test]
fn jitter_is_bounded_and_seeded() {
    let c = CostModel {
        jitter: true,
        seed: 4,
        ..cost(0.002)
    };
    let draw = |seed| {
        let mut r = rng_for(seed, &[]);
        (0..100).map(|_| transmit(&c, 2048, Some(&mut r))).collect::<Vec<_>>()
    };
    let a = draw(4);
    assert_eq!(a, draw(4));
    let plain = transmit(&c, 2048, None);
    assert!(a.iter().all(|t| *t >= plain && *t <= plain + 0.1 * c.base_latency_s));
}

#[test]
fn synchronous_round_log_is_consistent() {
    let c = cost(0.003);
    let work: Vec<ClientWork> = [5usize, 40, 12, 0]
        .iter()
        .enumerate()
        .map(|(client, &gradient_steps)| ClientWork { client, gradient_steps })
        .collect();
    let mut net = Network::new(c.clone());
    let d1 = net.synchronous_round(&work, 2000, 3000);
    let slowest = work
        .iter()
        .map(|w| round_trip_time(&c, 2000, 3000, w.gradient_steps))
        .fold(0.0, f64::max);
    assert!((d1 - slowest).abs() < 1e-15);
    net.synchronous_round(&work, 2000, 3000);
    let events = net.events();
    assert_eq!(events.len(), 2 * 6 * work.len());
    assert!(events.windows(2).all(|w| w[0].time_s <= w[1].time_s));
    let mut sends: HashMap<u64, f64> = HashMap::new();
    let mut receives: HashMap<u64, f64> = HashMap::new();
    for e in events {
        match (e.kind, e.message) {
            (EventKind::Send, Some(id)) => assert!(sends.insert(id, e.time_s).is_none()),
            (EventKind::Receive, Some(id)) => assert!(receives.insert(id, e.time_s).is_none()),
            _ => {}
        }
    }
    assert_eq!(sends.len(), receives.len());
    for (id, t) in &sends {
        assert!(receives[id] >= *t);
    }

    let mut again = Network::new(c);
    again.synchronous_round(&work, 2000, 3000);
    again.synchronous_round(&work, 2000, 3000);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    net.write_jsonl(&mut a).unwrap();
    again.write_jsonl(&mut b).unwrap();
    assert_eq!(a, b);
    let first: serde_json::Value = serde_json::from_slice(a.split(|&c| c == b'\n').next().unwrap()).unwrap();
    for key in ["t", "kind", "actor", "bytes"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

fn trace(steps: usize) -> AdaptationTrace {
    AdaptationTrace {
        accuracies: vec![0.5; steps + 1],
        threshold: 0.4,
        steps_to_threshold: steps,
        param_bytes: 1500,
        support_bytes: 410,
    }
}

#[test]
fn response_time_composes_link_and_compute_costs() {
    let c = cost(0.002);
    let t = trace(7);
    let push = transmit(&c, 1500, None);
    let fed = compute_time(&c, 7) + push;
    assert!((response_time(Variant::MetaFl, &c, &t) - fed).abs() < 1e-15);
    assert!((response_time(Variant::StandardFl, &c, &t) - fed).abs() < 1e-15);
    let central = transmit(&c, 410, None) + fed;
    assert!((response_time(Variant::Centralized, &c, &t) - central).abs() < 1e-15);
    assert!(response_time(Variant::MetaFl, &c, &trace(5)) < response_time(Variant::StandardFl, &c, &trace(20)));
}

#[test]
fn adaptation_trace_reports_first_crossing() {
    let spec = ScenarioSpec::default();
    let task = make_task(&spec, 10, 50, 3).unwrap();
    let theta = init_params(ModelArch::traffic(8).unwrap(), 3);
    let t = adaptation_trace(&theta, &task, 0.5, 10, 0.0).unwrap();
    assert_eq!(t.steps_to_threshold, 0);
    assert_eq!(t.accuracies.len(), 11);
    let never = adaptation_trace(&theta, &task, 0.5, 10, 1.1).unwrap();
    assert_eq!(never.steps_to_threshold, 10);
    assert_eq!(never.param_bytes, theta.encoded_len());
    assert_eq!(never.support_bytes, 10 * 41);
}

#[test]
fn accuracy_counts_exact_matches() {
    let arch = ModelArch::traffic(2).unwrap();
    let zero = init_params(arch, 0);
    let zero = metafed::model::ParamVector::zeros(zero.arch());
    // all-zero params tie every class, which resolves to class 0
    let batch: Vec<TrafficSample> = (0..4)
        .map(|i| TrafficSample {
            features: [0.1, 0.2, 0.3, 0.0, 1.0],
            label: if i < 3 { 0 } else { 2 },
        })
        .collect();
    assert_eq!(accuracy(&zero, &batch).unwrap(), 0.75);
    assert!(accuracy(&zero, &[]).is_err());
}

#[test]
fn centralized_single_full_batch_step_is_pooled_gradient_descent() {
    let pool = common::random_batch(40, &mut common::rng(8));
    let hyper = HyperParams {
        eta0: 0.25,
        batch_size: 40,
        rounds: 1,
        hidden_width: 6,
        ..HyperParams::default()
    };
    let got = train_centralized(&pool, &hyper, 1, 5).unwrap();
    let theta0 = init_params(hyper.arch().unwrap(), 5);
    let want = sgd_step(&theta0, &grad(&theta0, &pool).unwrap(), 0.25).unwrap();
    assert!(common::max_abs_diff(got.values(), want.values()) < 1e-15);
}

#[test]
fn centralized_spends_exactly_the_federated_budget() {
    let spec = ScenarioSpec::default();
    let clients = gen_scenario(&spec, 1).unwrap();
    let hyper = HyperParams {
        rounds: 7,
        ..HyperParams::default()
    };
    let budget = federated_step_budget(&hyper, &clients);
    assert_eq!(budget, 7 * 8 * 12);
    let pool: Vec<TrafficSample> = clients.into_iter().flat_map(|c| c.samples).collect();
    let (_, history) = train_centralized_logged(&pool, &hyper, budget, &cost(0.002), 1).unwrap();
    let spent: usize = history.iter().map(|r| r.gradient_steps).sum();
    assert!(spent.abs_diff(budget) <= 1);
    assert_eq!(history.len(), 7);
}
