//! Discrete-event network simulation: a virtual clock, an ordered event log and
//! the cost model that turns payloads and gradient steps into simulated seconds.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub base_latency_s: f64,
    pub per_kb_s: f64,
    pub grad_step_s: f64,
    /// Adds uniform `[0, 0.1 * base_latency_s]` jitter to every transmission.
    #[serde(default)]
    pub jitter: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            base_latency_s: 0.010,
            per_kb_s: 0.001,
            grad_step_s: 0.002,
            jitter: false,
            seed: 0,
        }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            base_latency_s: 0.0,
            per_kb_s: 0.0,
            grad_step_s: 0.0,
            jitter: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("cost.base_latency_s", self.base_latency_s),
            ("cost.per_kb_s", self.per_kb_s),
            ("cost.grad_step_s", self.grad_step_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Time to move `payload_bytes` across one link. Jitter is applied only when
/// an RNG is supplied.
pub fn transmit(model: &CostModel, payload_bytes: usize, jitter: Option<&mut SimRng>) -> f64 {
    let mut t = model.base_latency_s + model.per_kb_s * (payload_bytes as f64 / 1024.0);
    if let Some(rng) = jitter {
        let bound = 0.1 * model.base_latency_s;
        if bound > 0.0 {
            t += rng.random_range(0.0..=bound);
        }
    }
    t
}

pub fn compute_time(model: &CostModel, gradient_steps: usize) -> f64 {
    model.grad_step_s * gradient_steps as f64
}

/// Download, local compute and upload for one client, without jitter.
pub fn round_trip_time(
    model: &CostModel,
    payload_down: usize,
    payload_up: usize,
    gradient_steps: usize,
) -> f64 {
    transmit(model, payload_down, None)
        + compute_time(model, gradient_steps)
        + transmit(model, payload_up, None)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now_s: f64,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now_s
    }

    /// Moves the clock to `t`; the clock never runs backwards.
    pub fn advance_to(&mut self, t: f64) {
        debug_assert!(t >= self.now_s, "clock moved backwards");
        self.now_s = self.now_s.max(t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Receive,
    ComputeStart,
    ComputeEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Actor {
    Coordinator,
    Client(usize),
}

impl Actor {
    pub fn label(&self) -> String {
        match self {
            Actor::Coordinator => "coordinator".to_string(),
            Actor::Client(id) => format!("client-{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time_s: f64,
    pub kind: EventKind,
    pub actor: Actor,
    pub payload_bytes: usize,
    /// Pairs a `Send` with its `Receive`; `None` for compute events.
    pub message: Option<u64>,
}

/// Work a client performs inside one synchronous round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientWork {
    pub client: usize,
    pub gradient_steps: usize,
}

/// Single-owner simulated network driving one clock.
#[derive(Debug, Clone)]
pub struct Network {
    cost: CostModel,
    clock: SimClock,
    events: Vec<SimEvent>,
    next_message: u64,
    jitter_rng: Option<SimRng>,
}

impl Network {
    pub fn new(cost: CostModel) -> Self {
        let jitter_rng = cost.jitter.then(|| rng_for(cost.seed, &[]));
        Self {
            cost,
            clock: SimClock::default(),
            events: Vec::new(),
            next_message: 0,
            jitter_rng,
        }
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    fn link_time(&mut self, bytes: usize) -> f64 {
        transmit(&self.cost, bytes, self.jitter_rng.as_mut())
    }

    /// Broadcasts `down_bytes` to every client, runs their local work and
    /// collects `up_bytes` from each. Returns the round duration, which is the
    /// slowest client's round trip.
    pub fn synchronous_round(
        &mut self,
        work: &[ClientWork],
        down_bytes: usize,
        up_bytes: usize,
    ) -> f64 {
        let start = self.clock.now();
        let mut batch = Vec::with_capacity(work.len() * 6);
        let mut end = start;
        for w in work {
            let actor = Actor::Client(w.client);
            let down_id = self.next_message;
            let up_id = down_id + 1;
            self.next_message += 2;

            let arrive = start + self.link_time(down_bytes);
            let done = arrive + compute_time(&self.cost, w.gradient_steps);
            let back = done + self.link_time(up_bytes);
            end = end.max(back);

            batch.push(event(start, EventKind::Send, Actor::Coordinator, down_bytes, Some(down_id)));
            batch.push(event(arrive, EventKind::Receive, actor, down_bytes, Some(down_id)));
            batch.push(event(arrive, EventKind::ComputeStart, actor, 0, None));
            batch.push(event(done, EventKind::ComputeEnd, actor, 0, None));
            batch.push(event(done, EventKind::Send, actor, up_bytes, Some(up_id)));
            batch.push(event(back, EventKind::Receive, Actor::Coordinator, up_bytes, Some(up_id)));
        }
        // stable: simultaneous events keep their causal emission order
        batch.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
        self.events.extend(batch);
        self.clock.advance_to(end);
        end - start
    }

    /// JSON-lines export, one `{"t","kind","actor","bytes"}` object per event.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            let line = serde_json::json!({
                "t": e.time_s,
                "kind": e.kind,
                "actor": e.actor.label(),
                "bytes": e.payload_bytes,
            });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn event(time_s: f64, kind: EventKind, actor: Actor, payload_bytes: usize, message: Option<u64>) -> SimEvent {
    SimEvent {
        time_s,
        kind,
        actor,
        payload_bytes,
        message,
    }
}
