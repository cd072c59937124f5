//! Training and inference for the two strategies.
//!
//! The general strategy fits one policy on whole routes. The zoned strategy
//! cuts every route into per-zone sub-instances, fits one policy per zone,
//! and at inference stitches the zone sub-tours back together.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor};
use crate::baselines::nearest_neighbor;
use crate::error::{Error, Result};
use crate::hexgrid::ProjectedPoint;
use crate::policy::{decode, encode, greedy_decode, DecodeMode, DecodeResult, Mode, ModelConfig, ModelParams};
use crate::rng::{derive_path, derive_seed, seeded};
use crate::routegraph::{build_graph, project_stops, tour_length, Route, RouteGraph};
use crate::zoning::Zoning;

const INIT_TAG: u64 = 1;
const SHUFFLE_TAG: u64 = 2;
const ROUTE_TAG: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub seed: u64,
    /// EMA decay of the REINFORCE baseline.
    pub baseline_decay: f64,
    /// Global gradient-norm clip; not positive disables clipping.
    pub max_grad_norm: f64,
    pub samples_per_route: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            hidden_dim: 64,
            dropout: 0.1,
            seed: 42,
            baseline_decay: 0.9,
            max_grad_norm: 1.0,
            samples_per_route: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_route == 0 {
            return Err(Error::domain("epochs, batch_size and samples_per_route must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::domain(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::domain("baseline_decay must lie in [0, 1)"));
        }
        if !self.max_grad_norm.is_finite() {
            return Err(Error::domain("max_grad_norm must be finite"));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_sampled_len: f64,
    pub greedy_eval_len: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// How a training instance picks its start node each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartRule {
    Fixed(usize),
    /// Uniform over the instance's nodes, redrawn every epoch.
    Random,
}

/// A graph ready for training.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub graph: RouteGraph,
    pub travel: Vec<Vec<f64>>,
    pub start: StartRule,
}

impl TrainInstance {
    pub fn from_route(route: &Route) -> Result<Self> {
        Ok(TrainInstance {
            graph: build_graph(route)?,
            travel: route.travel.clone(),
            start: StartRule::Fixed(route.start()?),
        })
    }
}

/// Routes held out for the per-epoch greedy evaluation: the last tenth,
/// or none when there are fewer than ten.
pub fn holdout_len(n: usize) -> usize {
    n / 10
}

struct Rollout {
    lengths: Vec<f64>,
    /// Gradient of each sample's log-probability, one set per sample.
    grads: Vec<Vec<Tensor>>,
}

fn rollout(params: &ModelParams, inst: &TrainInstance, samples: usize, seed: u64) -> Result<Rollout> {
    let mut rng = seeded(seed);
    let mut graph = inst.graph.clone();
    graph.start = match inst.start {
        StartRule::Fixed(s) => s,
        StartRule::Random => rng.random_range(0..graph.n),
    };
    let mut tape = Tape::new();
    let p = params.bind(&mut tape)?;
    let emb = encode(&mut tape, &p, &graph, Mode::Train, &mut rng)?;
    let mut out = Rollout {
        lengths: Vec::with_capacity(samples),
        grads: Vec::with_capacity(samples),
    };
    for _ in 0..samples {
        let d = decode(&mut tape, &p, emb, graph.start, DecodeMode::Sample, &mut rng)?;
        out.lengths.push(tour_length(&d.tour, &inst.travel, false)?);
        let mut g = tape.backward(d.log_prob)?;
        out.grads.push(p.vars.iter().map(|&v| g.take(v)).collect());
    }
    Ok(out)
}

fn greedy_mean(params: &ModelParams, instances: &[&TrainInstance]) -> Result<f64> {
    let lens = instances
        .par_iter()
        .map(|inst| {
            let mut g = inst.graph.clone();
            if let StartRule::Fixed(s) = inst.start {
                g.start = s;
            }
            Ok(greedy_decode(params, &g, &inst.travel)?.length)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(lens.iter().sum::<f64>() / lens.len() as f64)
}

/// Minibatch REINFORCE with an EMA baseline and Adam.
///
/// Randomness is keyed by `(seed, epoch, instance)`, and per-instance
/// gradients are summed in a fixed order, so the result does not depend on
/// the number of worker threads.
pub fn train_instances(instances: &[TrainInstance], cfg: &TrainConfig, seed: u64) -> Result<TrainOutput> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::domain("no training instances"));
    }
    let held = holdout_len(instances.len());
    let (train, eval): (Vec<usize>, Vec<&TrainInstance>) = if held == 0 {
        ((0..instances.len()).collect(), instances.iter().collect())
    } else {
        let cut = instances.len() - held;
        ((0..cut).collect(), instances[cut..].iter().collect())
    };

    let mut params = ModelParams::init(cfg.model_config(), derive_seed(seed, INIT_TAG))?;
    let mut adam = Adam::new(cfg.lr, cfg.max_grad_norm);
    let mut baseline: Option<f64> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut seeded(derive_path(seed, &[SHUFFLE_TAG, epoch as u64])));
        let (mut len_sum, mut len_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let rollouts = batch
                .par_iter()
                .map(|&i| {
                    let s = derive_path(seed, &[ROUTE_TAG, epoch as u64, i as u64]);
                    rollout(&params, &instances[i], cfg.samples_per_route, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let lengths: Vec<f64> = rollouts.iter().flat_map(|r| r.lengths.iter().copied()).collect();
            if lengths.iter().any(|l| !l.is_finite()) {
                return Err(Error::numeric("non-finite sampled tour length"));
            }
            let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
            let b = baseline.unwrap_or(mean);

            // ∇ mean_i (L_i − b) log p_i, with the advantages held constant
            let scale = 1.0 / lengths.len() as f64;
            let mut grad: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
            for r in &rollouts {
                for (len, g) in r.lengths.iter().zip(&r.grads) {
                    let w = (len - b) * scale;
                    for (acc, gk) in grad.iter_mut().zip(g) {
                        for (a, v) in acc.data_mut().iter_mut().zip(gk.data()) {
                            *a += w * v;
                        }
                    }
                }
            }
            adam.step(&mut params.tensors, &grad)?;
            baseline = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * mean);
            len_sum += lengths.iter().sum::<f64>();
            len_count += lengths.len();
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_sampled_len: len_sum / len_count as f64,
            greedy_eval_len: greedy_mean(&params, &eval)?,
            baseline: baseline.unwrap_or(f64::NAN),
        });
    }
    Ok(TrainOutput { params, log })
}

/// One policy over whole routes.
pub fn train_general(routes: &[Route], cfg: &TrainConfig) -> Result<TrainOutput> {
    let instances = routes.iter().map(TrainInstance::from_route).collect::<Result<Vec<_>>>()?;
    train_instances(&instances, cfg, cfg.seed)
}

/// The stops of one route that fall in one zone.
#[derive(Debug, Clone, PartialEq)]
pub struct SubInstance {
    pub route_index: usize,
    pub zone: usize,
    /// Stop indices into the parent route, in route order.
    pub indices: Vec<usize>,
    /// Position of the parent route's start stop within `indices`.
    pub start: Option<usize>,
    pub route: Route,
}

/// Splits every route by zone, keeping zones with at least two stops.
pub fn extract_zone_subroutes(routes: &[Route], zoning: &Zoning) -> Result<BTreeMap<usize, Vec<SubInstance>>> {
    let mut out: BTreeMap<usize, Vec<SubInstance>> = BTreeMap::new();
    for (ri, route) in routes.iter().enumerate() {
        let start = route.start()?;
        for (zone, indices) in group_by_zone(route, zoning)? {
            if indices.len() < 2 {
                continue;
            }
            let pos = indices.iter().position(|&i| i == start);
            let sub = route.sub_route(format!("{}#z{zone}", route.id), &indices, pos.unwrap_or(0));
            out.entry(zone).or_default().push(SubInstance {
                route_index: ri,
                zone,
                indices,
                start: pos,
                route: sub,
            });
        }
    }
    Ok(out)
}

fn group_by_zone(route: &Route, zoning: &Zoning) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, z) in zoning.zones_of_route(route)?.into_iter().enumerate() {
        groups.entry(z).or_default().push(i);
    }
    Ok(groups)
}

/// Seed of the model trained for `zone`.
pub fn zone_seed(seed: u64, zone: usize) -> u64 {
    derive_seed(seed, zone as u64)
}

/// Per-zone policies sharing one zoning.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneModelSet {
    pub zoning: Zoning,
    pub models: BTreeMap<usize, ModelParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneTraining {
    pub set: ZoneModelSet,
    pub logs: BTreeMap<usize, Vec<EpochLog>>,
}

/// Fits one policy per zone on that zone's sub-instances. Zones train in
/// parallel; each owns its seed, so the outcome is independent of
/// scheduling.
pub fn train_zone_models(routes: &[Route], zoning: &Zoning, cfg: &TrainConfig) -> Result<ZoneTraining> {
    cfg.validate()?;
    let subs = extract_zone_subroutes(routes, zoning)?;
    if subs.is_empty() {
        return Err(Error::domain("no zone has a sub-instance with at least 2 stops"));
    }
    let jobs: Vec<(usize, Vec<SubInstance>)> = subs.into_iter().collect();
    let trained = jobs
        .par_iter()
        .map(|(zone, subs)| {
            let instances = subs
                .iter()
                .map(|s| {
                    Ok(TrainInstance {
                        graph: build_graph(&s.route)?,
                        travel: s.route.travel.clone(),
                        start: s.start.map_or(StartRule::Random, StartRule::Fixed),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((*zone, train_instances(&instances, cfg, zone_seed(cfg.seed, *zone))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut models = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for (zone, out) in trained {
        models.insert(zone, out.params);
        logs.insert(zone, out.log);
    }
    Ok(ZoneTraining {
        set: ZoneModelSet {
            zoning: zoning.clone(),
            models,
        },
        logs,
    })
}

/// Greedy tour of a whole route with one policy.
pub fn infer_general(route: &Route, params: &ModelParams) -> Result<DecodeResult> {
    route.validate()?;
    greedy_decode(params, &build_graph(route)?, &route.travel)
}

fn nearest(points: &[ProjectedPoint], candidates: &[usize], from: ProjectedPoint) -> usize {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if points[c].dist2(&from) < points[best].dist2(&from) {
            best = c;
        }
    }
    best
}

/// Zone-by-zone greedy tour.
///
/// Zones are visited starting with the start stop's zone, then always the
/// unvisited zone whose stop centroid is nearest the last emitted stop.
/// Each zone is entered at its stop nearest the last emitted stop and
/// ordered by that zone's policy, or by nearest neighbour when the zone has
/// no model. Distance ties go to the lower index.
pub fn infer_zoned(route: &Route, set: &ZoneModelSet) -> Result<DecodeResult> {
    route.validate()?;
    let start = route.start()?;
    let pts = project_stops(route)?;
    let groups = group_by_zone(route, &set.zoning)?;
    let centroid = |ix: &[usize]| {
        let n = ix.len() as f64;
        ProjectedPoint::new(
            ix.iter().map(|&i| pts[i].x).sum::<f64>() / n,
            ix.iter().map(|&i| pts[i].y).sum::<f64>() / n,
        )
    };
    let centroids: BTreeMap<usize, ProjectedPoint> = groups.iter().map(|(&z, ix)| (z, centroid(ix))).collect();
    let mut remaining: Vec<usize> = groups.keys().copied().collect();
    let mut zone = set.zoning.zone_of_stop(&route.stops[start])?;
    let mut tour = Vec::with_capacity(route.len());
    let mut log_prob = 0.0;
    loop {
        remaining.retain(|&z| z != zone);
        let members = &groups[&zone];
        let entry = if tour.is_empty() {
            start
        } else {
            nearest(&pts, members, pts[*tour.last().expect("non-empty")])
        };
        if members.len() == 1 {
            tour.push(entry);
        } else {
            let pos = members.iter().position(|&i| i == entry).expect("entry is a member");
            let sub = route.sub_route(format!("{}#z{zone}", route.id), members, pos);
            let local = match set.models.get(&zone) {
                Some(params) => {
                    let r = greedy_decode(params, &build_graph(&sub)?, &sub.travel)?;
                    log_prob += r.log_prob;
                    r.tour
                }
                None => nearest_neighbor(&sub.travel, pos)?,
            };
            tour.extend(local.into_iter().map(|k| members[k]));
        }
        let Some(&first) = remaining.first() else { break };
        let here = pts[*tour.last().expect("non-empty")];
        zone = remaining[1..].iter().fold(first, |best, &z| {
            if centroids[&z].dist2(&here) < centroids[&best].dist2(&here) {
                z
            } else {
                best
            }
        });
    }
    let length = tour_length(&tour, &route.travel, false)?;
    Ok(DecodeResult { tour, log_prob, length })
}

pub const GENERAL_CHECKPOINT: &str = "general.ckpt.json";
pub const GENERAL_LOG: &str = "train_log.csv";
pub const ZONES_FILE: &str = "zones.json";
pub const ZONE_DIR: &str = "zones";

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `general.ckpt.json` and `train_log.csv` into `dir`.
pub fn write_general(dir: &Path, out: &TrainOutput) -> Result<()> {
    create_dir(dir)?;
    out.params.write(&dir.join(GENERAL_CHECKPOINT))?;
    write_log(&dir.join(GENERAL_LOG), &out.log)
}

pub fn read_general(dir: &Path) -> Result<ModelParams> {
    ModelParams::read(&dir.join(GENERAL_CHECKPOINT))
}

/// Writes `zones.json` plus one checkpoint and log per zone under `zones/`.
pub fn write_zoned(dir: &Path, training: &ZoneTraining) -> Result<()> {
    let zdir = dir.join(ZONE_DIR);
    create_dir(&zdir)?;
    training.set.zoning.write(&dir.join(ZONES_FILE))?;
    for (zone, params) in &training.set.models {
        params.write(&zdir.join(format!("zone_{zone}.ckpt.json")))?;
    }
    for (zone, log) in &training.logs {
        write_log(&zdir.join(format!("zone_{zone}.log.csv")), log)?;
    }
    Ok(())
}

/// Loads the per-zone checkpoints in `dir`, using `zoning` if given and the
/// directory's own `zones.json` otherwise.
pub fn read_zoned(dir: &Path, zoning: Option<Zoning>) -> Result<ZoneModelSet> {
    let zoning = match zoning {
        Some(z) => z,
        None => Zoning::read(&dir.join(ZONES_FILE))?,
    };
    let mut models = BTreeMap::new();
    for zone in 0..zoning.k {
        let path = dir.join(ZONE_DIR).join(format!("zone_{zone}.ckpt.json"));
        if path.exists() {
            models.insert(zone, ModelParams::read(&path)?);
        }
    }
    Ok(ZoneModelSet { zoning, models })
}
