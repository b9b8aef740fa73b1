//! Synthetic traffic streams, non-IID client partitions and meta-learning tasks.
//!
//! Each interval at a sensor site carries a latent traffic state (occupancy and
//! speed) from which the congestion label is derived. The site reports that
//! state through a miscalibrated sensor: every site has a fixed occupancy and
//! speed offset drawn from `Normal(0, node_bias_scale)`. Sites therefore agree
//! on the physics but disagree on how it looks in feature space, which is the
//! heterogeneity federated and meta-learned models have to cope with.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::sig9;
use crate::rng::{rng_for, SimRng, TAG_NODE, TAG_PARTITION, TAG_SITE, TAG_TASK};

pub const FEATURE_DIM: usize = 5;
pub const NUM_CLASSES: usize = 3;

/// Intervals per simulated day (15-minute bins).
pub const INTERVALS_PER_DAY: usize = 96;
/// Peak-to-mean occupancy swing at `daily_amplitude = 1`.
pub const DAILY_SWING: f64 = 0.25;
pub const INCIDENT_OCCUPANCY_JUMP: f64 = 0.3;
pub const INCIDENT_SPEED_FACTOR: f64 = 0.5;
/// Fraction of an incident's effect on occupancy and speed that reaches the
/// site's detector. Incidents happen downstream of the sensor, so the segment
/// is more congested than the readings suggest.
pub const INCIDENT_VISIBILITY: f64 = 0.3;
/// Free-flow speed falls linearly with occupancy at this slope.
pub const SPEED_SLOPE: f64 = 0.8;
pub const SPEED_NOISE: f64 = 0.05;
pub const COUNT_NOISE: f64 = 0.02;

pub const LOW_CONGESTION_THRESHOLD: f64 = 0.15;
pub const HIGH_CONGESTION_THRESHOLD: f64 = 0.4;

/// Bytes needed to ship one sample over the simulated network: five `f64`
/// features and a one-byte label.
pub const SAMPLE_WIRE_BYTES: usize = FEATURE_DIM * 8 + 1;

pub const CSV_HEADER: [&str; 7] = [
    "node_id",
    "vehicle_count",
    "mean_speed",
    "occupancy",
    "tod_sin",
    "tod_cos",
    "label",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityRegime {
    Low,
    Moderate,
    High,
}

impl DensityRegime {
    pub const ALL: [DensityRegime; 3] = [Self::Low, Self::Moderate, Self::High];

    /// Mean occupancy of the regime.
    pub fn base_occupancy(self) -> f64 {
        match self {
            Self::Low => 0.2,
            Self::Moderate => 0.5,
            Self::High => 0.8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Moderate => "moderate",
            Self::High => "high",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for DensityRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Self::Low),
            "moderate" => Ok(Self::Moderate),
            "high" => Ok(Self::High),
            other => Err(Error::Parse(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub density_regime: DensityRegime,
    /// Probability that an interval carries an incident.
    pub incident_rate: f64,
    pub daily_amplitude: f64,
    /// Standard deviation of the per-site sensor offsets.
    pub node_bias_scale: f64,
    pub num_nodes: usize,
    pub intervals_per_node: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            density_regime: DensityRegime::Moderate,
            incident_rate: 0.05,
            daily_amplitude: 0.6,
            node_bias_scale: 0.04,
            num_nodes: 8,
            intervals_per_node: 192,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(field, format!("{v} is outside [0, 1]")))
            }
        };
        unit("scenario.incident_rate", self.incident_rate)?;
        unit("scenario.daily_amplitude", self.daily_amplitude)?;
        if !(self.node_bias_scale >= 0.0 && self.node_bias_scale.is_finite()) {
            return Err(Error::invalid(
                "scenario.node_bias_scale",
                "must be a finite non-negative number",
            ));
        }
        if self.num_nodes == 0 {
            return Err(Error::invalid("scenario.num_nodes", "must be at least 1"));
        }
        if self.intervals_per_node == 0 {
            return Err(Error::invalid(
                "scenario.intervals_per_node",
                "must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn with_regime(&self, regime: DensityRegime) -> Self {
        Self {
            density_regime: regime,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSample {
    /// `[vehicle_count, mean_speed, occupancy, tod_sin, tod_cos]`
    pub features: [f64; FEATURE_DIM],
    pub label: u8,
}

impl TrafficSample {
    pub fn vehicle_count(&self) -> f64 {
        self.features[0]
    }

    pub fn mean_speed(&self) -> f64 {
        self.features[1]
    }

    pub fn occupancy(&self) -> f64 {
        self.features[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub node_id: usize,
    pub samples: Vec<TrafficSample>,
}

impl ClientDataset {
    pub fn n_k(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support: Vec<TrafficSample>,
    pub query: Vec<TrafficSample>,
    pub regime: DensityRegime,
}

/// Fixed calibration of one sensor site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteProfile {
    pub occupancy_offset: f64,
    pub speed_offset: f64,
    /// Interval of the day at which the site's stream starts.
    pub start_interval: usize,
}

impl SiteProfile {
    pub fn draw(bias_scale: f64, rng: &mut SimRng) -> Self {
        let (occupancy_offset, speed_offset) = if bias_scale > 0.0 {
            let normal = Normal::new(0.0, bias_scale).expect("finite positive scale");
            (normal.sample(rng), normal.sample(rng))
        } else {
            (0.0, 0.0)
        };
        Self {
            occupancy_offset,
            speed_offset,
            start_interval: rng.random_range(0..INTERVALS_PER_DAY),
        }
    }
}

/// One generated interval with its latent state exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub sample: TrafficSample,
    pub incident: bool,
    pub true_occupancy: f64,
    pub true_speed: f64,
}

/// Congestion class from `c = occupancy * (1 - speed)`: class 0 below 0.15,
/// class 1 below 0.4, class 2 otherwise. Boundary values join the upper class.
pub fn label_rule(occupancy: f64, speed: f64) -> Result<u8> {
    for (name, v) in [("occupancy", occupancy), ("speed", speed)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("{name} {v} is outside [0, 1]")));
        }
    }
    let c = occupancy * (1.0 - speed);
    Ok(if c < LOW_CONGESTION_THRESHOLD {
        0
    } else if c < HIGH_CONGESTION_THRESHOLD {
        1
    } else {
        2
    })
}

/// Generates `count` consecutive intervals at `site`.
pub fn simulate_intervals(
    spec: &ScenarioSpec,
    site: &SiteProfile,
    count: usize,
    rng: &mut SimRng,
) -> Vec<Interval> {
    let speed_noise = Normal::new(0.0, SPEED_NOISE).expect("valid");
    let count_noise = Normal::new(0.0, COUNT_NOISE).expect("valid");
    let base = spec.density_regime.base_occupancy();
    (0..count)
        .map(|t| {
            let slot = (site.start_interval + t) % INTERVALS_PER_DAY;
            let phase = TAU * slot as f64 / INTERVALS_PER_DAY as f64;
            // occupancy peaks at midday, bottoms out at midnight
            let calm_occupancy = base - spec.daily_amplitude * DAILY_SWING * phase.cos();
            // draw unconditionally so the stream layout never depends on the rate
            let incident = rng.random::<f64>() < spec.incident_rate;
            let jump = if incident { INCIDENT_OCCUPANCY_JUMP } else { 0.0 };
            let calm_occupancy = calm_occupancy.clamp(0.0, 1.0);
            let occupancy = (calm_occupancy + jump).clamp(0.0, 1.0);
            let noise = speed_noise.sample(rng);
            let calm_speed = (1.0 - SPEED_SLOPE * calm_occupancy + noise).clamp(0.0, 1.0);
            let mut speed = (1.0 - SPEED_SLOPE * occupancy + noise).clamp(0.0, 1.0);
            if incident {
                speed *= INCIDENT_SPEED_FACTOR;
            }
            let label = label_rule(occupancy, speed).expect("state clamped to unit square");
            // the detector sees only part of a downstream incident
            let seen_occupancy = calm_occupancy + INCIDENT_VISIBILITY * (occupancy - calm_occupancy);
            let seen_speed = calm_speed + INCIDENT_VISIBILITY * (speed - calm_speed);
            let vehicle_count =
                (4.0 * seen_occupancy * seen_speed + count_noise.sample(rng)).clamp(0.0, 1.0);
            let features = [
                vehicle_count,
                (seen_speed + site.speed_offset).clamp(0.0, 1.0),
                (seen_occupancy + site.occupancy_offset).clamp(0.0, 1.0),
                phase.sin(),
                phase.cos(),
            ];
            Interval {
                sample: TrafficSample { features, label },
                incident,
                true_occupancy: occupancy,
                true_speed: speed,
            }
        })
        .collect()
}

pub fn node_site(spec: &ScenarioSpec, node_id: usize, seed: u64) -> SiteProfile {
    SiteProfile::draw(
        spec.node_bias_scale,
        &mut rng_for(seed, &[TAG_SITE, node_id as u64]),
    )
}

/// Full interval record of node `node_id`; see [`gen_node_stream`].
pub fn gen_node_intervals(spec: &ScenarioSpec, node_id: usize, seed: u64) -> Result<Vec<Interval>> {
    spec.validate()?;
    if node_id >= spec.num_nodes {
        return Err(Error::NodeOutOfRange {
            node_id,
            num_nodes: spec.num_nodes,
        });
    }
    let site = node_site(spec, node_id, seed);
    let mut rng = rng_for(seed, &[TAG_NODE, node_id as u64]);
    Ok(simulate_intervals(spec, &site, spec.intervals_per_node, &mut rng))
}

pub fn gen_node_stream(spec: &ScenarioSpec, node_id: usize, seed: u64) -> Result<ClientDataset> {
    let samples = gen_node_intervals(spec, node_id, seed)?
        .into_iter()
        .map(|i| i.sample)
        .collect();
    Ok(ClientDataset { node_id, samples })
}

/// Streams for every node of the scenario, in node order.
pub fn gen_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Vec<ClientDataset>> {
    (0..spec.num_nodes)
        .map(|k| gen_node_stream(spec, k, seed))
        .collect()
}

/// Splits `pool` across `k` clients with Dirichlet label skew.
///
/// Each client draws class proportions from `Dirichlet(1/skew)`; every class is
/// then divided among clients in proportion to those draws. `skew = 0` deals
/// class-sorted samples round-robin, which gives an exactly balanced split.
pub fn partition_noniid(
    pool: &[TrafficSample],
    k: usize,
    skew: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if pool.len() < k {
        return Err(Error::PoolTooSmall {
            pool: pool.len(),
            clients: k,
        });
    }
    if !(skew >= 0.0 && skew.is_finite()) {
        return Err(Error::invalid("skew", "must be a finite non-negative number"));
    }
    let mut rng = rng_for(seed, &[TAG_PARTITION]);
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, s) in pool.iter().enumerate() {
        let c = s.label as usize;
        if c >= NUM_CLASSES {
            return Err(Error::OutOfRange(format!("label {c}")));
        }
        by_class[c].push(i);
    }
    for group in &mut by_class {
        group.shuffle(&mut rng);
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
    if skew == 0.0 {
        for (j, idx) in by_class.iter().flatten().enumerate() {
            assignment[j % k].push(*idx);
        }
    } else {
        let concentration = 1.0 / skew.max(1e-6);
        let dirichlet = Dirichlet::new([concentration; NUM_CLASSES])
            .map_err(|e| Error::invalid("skew", e.to_string()))?;
        let proportions: Vec<[f64; NUM_CLASSES]> =
            (0..k).map(|_| dirichlet.sample(&mut rng)).collect();
        for (c, group) in by_class.iter().enumerate() {
            let weights: Vec<f64> = proportions.iter().map(|p| p[c]).collect();
            let counts = apportion(group.len(), &weights);
            let mut rest = group.as_slice();
            for (client, n) in counts.into_iter().enumerate() {
                let (take, tail) = rest.split_at(n);
                assignment[client].extend_from_slice(take);
                rest = tail;
            }
        }
        // no client may end up empty: move one sample from the largest
        while let Some(empty) = assignment.iter().position(Vec::is_empty) {
            let donor = (0..k)
                .max_by_key(|&j| (assignment[j].len(), std::cmp::Reverse(j)))
                .expect("k >= 1");
            let moved = assignment[donor].pop().expect("donor has > 1 sample");
            assignment[empty].push(moved);
        }
    }

    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(node_id, mut idx)| {
            idx.sort_unstable();
            ClientDataset {
                node_id,
                samples: idx.into_iter().map(|i| pool[i].clone()).collect(),
            }
        })
        .collect())
}

/// Largest-remainder split of `total` items in proportion to `weights`.
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Support/query task from a site with the given calibration.
pub fn make_task_at(
    spec: &ScenarioSpec,
    site: &SiteProfile,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Task> {
    spec.validate()?;
    if support_size == 0 || query_size == 0 {
        return Err(Error::invalid(
            "task size",
            "support and query sizes must be at least 1",
        ));
    }
    let mut rng = rng_for(seed, &[TAG_TASK, 1]);
    let mut samples: Vec<TrafficSample> =
        simulate_intervals(spec, site, support_size + query_size, &mut rng)
            .into_iter()
            .map(|i| i.sample)
            .collect();
    let query = samples.split_off(support_size);
    Ok(Task {
        support: samples,
        query,
        regime: spec.density_regime,
    })
}

/// Fresh task from a previously unseen site of the scenario.
pub fn make_task(
    spec: &ScenarioSpec,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Task> {
    let site = SiteProfile::draw(spec.node_bias_scale, &mut rng_for(seed, &[TAG_TASK, 0]));
    make_task_at(spec, &site, support_size, query_size, seed)
}

pub fn write_dataset_csv<W: Write>(clients: &[ClientDataset], out: W) -> Result<usize> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CSV_HEADER).map_err(csv_err)?;
    let mut rows = 0;
    for client in clients {
        for s in &client.samples {
            let mut record = vec![client.node_id.to_string()];
            record.extend(s.features.iter().map(|&v| sig9(v)));
            record.push(s.label.to_string());
            wtr.write_record(&record).map_err(csv_err)?;
            rows += 1;
        }
    }
    wtr.flush()?;
    Ok(rows)
}

/// Reads a dataset CSV back into per-node datasets, ordered by node id.
pub fn read_dataset_csv<R: Read>(input: R) -> Result<Vec<ClientDataset>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("unexpected dataset header {header:?}")));
    }
    let mut clients: std::collections::BTreeMap<usize, Vec<TrafficSample>> = Default::default();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        let node_id: usize = field(0)
            .parse()
            .map_err(|e| Error::Parse(format!("node_id: {e}")))?;
        let mut features = [0.0; FEATURE_DIM];
        for (j, f) in features.iter_mut().enumerate() {
            *f = field(j + 1)
                .parse()
                .map_err(|e| Error::Parse(format!("{}: {e}", CSV_HEADER[j + 1])))?;
        }
        let label: u8 = field(6)
            .parse()
            .map_err(|e| Error::Parse(format!("label: {e}")))?;
        if label as usize >= NUM_CLASSES {
            return Err(Error::Parse(format!("label {label} out of range")));
        }
        clients
            .entry(node_id)
            .or_default()
            .push(TrafficSample { features, label });
    }
    Ok(clients
        .into_iter()
        .map(|(node_id, samples)| ClientDataset { node_id, samples })
        .collect())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
