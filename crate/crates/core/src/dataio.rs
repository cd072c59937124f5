//! Route files and synthetic instances.
//!
//! The on-disk layout is the one used by the public last-mile routing
//! challenge data: a directory with `route_data.json`, `travel_times.json`
//! and optionally `actual_sequences.json`. The full Los Angeles split of
//! that data has [`LA_TRAIN_ROUTES`] training and [`LA_TEST_ROUTES`] test
//! routes; the loader reads either fold unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{nearest_neighbor, two_opt};
use crate::error::{Error, Result};
use crate::hexgrid::{cell_of, unproject, GeoPoint, GridSpec, ProjectedPoint};
use crate::rng::seeded;
use crate::routegraph::{Route, Stop};

pub const ROUTE_DATA_FILE: &str = "route_data.json";
pub const TRAVEL_TIMES_FILE: &str = "travel_times.json";
pub const ACTUAL_SEQUENCES_FILE: &str = "actual_sequences.json";

/// Routes in the Los Angeles training fold.
pub const LA_TRAIN_ROUTES: usize = 2_888;
/// Routes in the Los Angeles test fold.
pub const LA_TEST_ROUTES: usize = 1_626;

/// Stop `type` marking the start of a route.
pub const STATION_TYPE: &str = "Station";
const DROPOFF_TYPE: &str = "Dropoff";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RouteRecord {
    station_code: String,
    stops: BTreeMap<String, StopRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StopRecord {
    lat: f64,
    lng: f64,
    #[serde(default)]
    zone_id: Option<String>,
    #[serde(rename = "type")]
    kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ActualRecord {
    actual: BTreeMap<String, usize>,
}

type TravelFile = BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn build_route(
    id: &str,
    rec: &RouteRecord,
    travel: Option<&BTreeMap<String, BTreeMap<String, f64>>>,
    actual: Option<&ActualRecord>,
) -> Result<Route> {
    let ids: Vec<&String> = rec.stops.keys().collect();
    let stops: Vec<Stop> = rec
        .stops
        .iter()
        .map(|(sid, s)| Stop {
            id: sid.clone(),
            geo: GeoPoint { lat: s.lat, lng: s.lng },
            zone_label: s.zone_id.clone(),
            is_start: s.kind == STATION_TYPE,
        })
        .collect();
    if !stops.iter().any(|s| s.is_start) {
        return Err(Error::data(id, "no stop of type Station"));
    }
    let travel = travel.ok_or_else(|| Error::data(id, "missing from travel_times.json"))?;
    let mut matrix = vec![vec![0.0; ids.len()]; ids.len()];
    for (i, from) in ids.iter().enumerate() {
        let row = travel
            .get(*from)
            .ok_or_else(|| Error::data(id, format!("no travel times from {from}")))?;
        for (j, to) in ids.iter().enumerate() {
            matrix[i][j] = *row
                .get(*to)
                .ok_or_else(|| Error::data(id, format!("missing travel time {from} -> {to}")))?;
        }
    }
    let actual_order = match actual {
        None => None,
        Some(a) => {
            let mut order = vec![usize::MAX; ids.len()];
            for (i, sid) in ids.iter().enumerate() {
                let pos = *a
                    .actual
                    .get(*sid)
                    .ok_or_else(|| Error::data(id, format!("stop {sid} missing from actual sequence")))?;
                if pos >= ids.len() || order[pos] != usize::MAX {
                    return Err(Error::data(id, format!("duplicate or out-of-range order {pos}")));
                }
                order[pos] = i;
            }
            Some(order)
        }
    };
    let route = Route {
        id: id.to_string(),
        stops,
        travel: matrix,
        actual_order,
    };
    route.validate()?;
    Ok(route)
}

/// Loads every route in `dir`, ordered by route id, with stops ordered by
/// stop id.
pub fn load_routes(dir: &Path) -> Result<Vec<Route>> {
    let data: BTreeMap<String, RouteRecord> = read_json(&dir.join(ROUTE_DATA_FILE))?;
    let travel: TravelFile = read_json(&dir.join(TRAVEL_TIMES_FILE))?;
    let actual_path = dir.join(ACTUAL_SEQUENCES_FILE);
    let actual: BTreeMap<String, ActualRecord> = if actual_path.exists() {
        read_json(&actual_path)?
    } else {
        BTreeMap::new()
    };
    data.iter()
        .map(|(id, rec)| build_route(id, rec, travel.get(id), actual.get(id)))
        .collect()
}

/// Writes `routes` in the layout [`load_routes`] reads. The actual
/// sequences file is written only when at least one route has one.
pub fn write_routes(dir: &Path, routes: &[Route]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut data = BTreeMap::new();
    let mut travel: TravelFile = BTreeMap::new();
    let mut actual = BTreeMap::new();
    for r in routes {
        r.validate()?;
        let start = r.start()?;
        let stops = r
            .stops
            .iter()
            .map(|s| {
                let rec = StopRecord {
                    lat: s.geo.lat,
                    lng: s.geo.lng,
                    zone_id: s.zone_label.clone(),
                    kind: if s.is_start { STATION_TYPE } else { DROPOFF_TYPE }.to_string(),
                };
                (s.id.clone(), rec)
            })
            .collect();
        let rec = RouteRecord {
            station_code: r.stops[start].id.clone(),
            stops,
        };
        if data.insert(r.id.clone(), rec).is_some() {
            return Err(Error::data(&r.id, "duplicate route id"));
        }
        let m = r
            .stops
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let row = r.stops.iter().enumerate().map(|(j, b)| (b.id.clone(), r.travel[i][j])).collect();
                (a.id.clone(), row)
            })
            .collect();
        travel.insert(r.id.clone(), m);
        if let Some(order) = &r.actual_order {
            let seq = order.iter().enumerate().map(|(pos, &i)| (r.stops[i].id.clone(), pos)).collect();
            actual.insert(r.id.clone(), ActualRecord { actual: seq });
        }
    }
    write_json(&dir.join(ROUTE_DATA_FILE), &data)?;
    write_json(&dir.join(TRAVEL_TIMES_FILE), &travel)?;
    if !actual.is_empty() {
        write_json(&dir.join(ACTUAL_SEQUENCES_FILE), &actual)?;
    }
    Ok(())
}

/// Parameters of the synthetic metro generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_routes: usize,
    pub stops_min: usize,
    pub stops_max: usize,
    pub n_neighborhoods: usize,
    pub metro_radius_m: f64,
    pub speed_mps: f64,
    /// Strength of the antisymmetric travel-time factor, in `[0, 1)`.
    pub asym: f64,
    /// Strength of the i.i.d. per-arc slowdown, in `[0, 1)`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_routes: 500,
            stops_min: 10,
            stops_max: 10,
            n_neighborhoods: 3,
            metro_radius_m: 15_000.0,
            speed_mps: 8.0,
            asym: 0.1,
            noise: 0.1,
            seed: 42,
        }
    }
}

/// Depot shared by every synthetic route.
pub const SYNTH_DEPOT: GeoPoint = GeoPoint { lat: 34.05, lng: -118.25 };

/// Resolution of the hex cells used as synthetic zone labels.
pub const SYNTH_LABEL_RESOLUTION: u8 = 9;

/// Scatter of stops around a neighbourhood centre, as a fraction of the
/// metro radius.
const SCATTER: f64 = 0.08;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_routes == 0 {
            return Err(Error::domain("n_routes must be at least 1"));
        }
        if self.stops_min < 2 || self.stops_min > self.stops_max {
            return Err(Error::domain(format!(
                "need 2 <= stops_min <= stops_max, got {}..{}",
                self.stops_min, self.stops_max
            )));
        }
        if self.n_neighborhoods == 0 {
            return Err(Error::domain("n_neighborhoods must be at least 1"));
        }
        if !(self.metro_radius_m > 0.0 && self.metro_radius_m.is_finite()) {
            return Err(Error::domain("metro_radius_m must be positive"));
        }
        if !(self.speed_mps > 0.0 && self.speed_mps.is_finite()) {
            return Err(Error::domain("speed_mps must be positive"));
        }
        for (name, v) in [("asym", self.asym), ("noise", self.noise)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

fn pad(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(3)
}

/// Seeded synthetic routes around [`SYNTH_DEPOT`].
///
/// Stop 0 of every route is the station at the depot. The recorded actual
/// sequence is 2-opt applied to nearest neighbour, a stand-in for driver
/// behaviour.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Route>> {
    cfg.validate()?;
    let spec = GridSpec::new(SYNTH_DEPOT);
    let mut rng = seeded(cfg.seed);
    let radius = cfg.metro_radius_m;
    let centers: Vec<ProjectedPoint> = (0..cfg.n_neighborhoods)
        .map(|_| {
            let r = radius * rng.random::<f64>().sqrt();
            let theta = std::f64::consts::TAU * rng.random::<f64>();
            ProjectedPoint::new(r * theta.cos(), r * theta.sin())
        })
        .collect();
    let scatter = Normal::new(0.0, SCATTER * radius).map_err(|e| Error::domain(e.to_string()))?;
    let route_pad = pad(cfg.n_routes);

    let mut routes = Vec::with_capacity(cfg.n_routes);
    for k in 0..cfg.n_routes {
        let n = rng.random_range(cfg.stops_min..=cfg.stops_max);
        let mut hoods: Vec<usize> = (0..cfg.n_neighborhoods).collect();
        hoods.shuffle(&mut rng);
        hoods.truncate(rng.random_range(1..=cfg.n_neighborhoods.min(3)));

        let mut pts = vec![ProjectedPoint::new(0.0, 0.0)];
        for _ in 1..n {
            let c = centers[hoods[rng.random_range(0..hoods.len())]];
            pts.push(ProjectedPoint::new(c.x + scatter.sample(&mut rng), c.y + scatter.sample(&mut rng)));
        }

        let mut travel = vec![vec![0.0; n]; n];
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                s[i][j] = rng.random_range(-1.0..1.0);
                s[j][i] = -s[i][j];
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let u: f64 = rng.random();
                    let d = pts[i].dist(&pts[j]).max(1.0);
                    travel[i][j] = d / cfg.speed_mps * (1.0 + cfg.noise * u) * (1.0 + cfg.asym * s[i][j]);
                }
            }
        }

        let stop_pad = pad(n);
        let mut stops = Vec::with_capacity(n);
        for (i, p) in pts.iter().enumerate() {
            let geo = unproject(*p, &spec)?;
            let zone_label = if i == 0 {
                None
            } else {
                Some(cell_of(*p, SYNTH_LABEL_RESOLUTION, &spec)?.to_hex()?)
            };
            stops.push(Stop {
                id: format!("S{i:0stop_pad$}"),
                geo,
                zone_label,
                is_start: i == 0,
            });
        }
        let order = two_opt(&nearest_neighbor(&travel, 0)?, &travel)?;
        routes.push(Route {
            id: format!("R{k:0route_pad$}"),
            stops,
            travel,
            actual_order: Some(order),
        });
    }
    Ok(routes)
}

/// Seeded shuffle, then the first `round(fraction · N)` routes train.
pub fn split(routes: &[Route], train_fraction: f64, seed: u64) -> Result<(Vec<Route>, Vec<Route>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n_train = (train_fraction * routes.len() as f64).round() as usize;
    if n_train == 0 || n_train == routes.len() {
        return Err(Error::domain(format!(
            "fraction {train_fraction} leaves an empty fold of {} routes",
            routes.len()
        )));
    }
    let mut idx: Vec<usize> = (0..routes.len()).collect();
    idx.shuffle(&mut seeded(seed));
    let take = |ix: &[usize]| ix.iter().map(|&i| routes[i].clone()).collect();
    Ok((take(&idx[..n_train]), take(&idx[n_train..])))
}
