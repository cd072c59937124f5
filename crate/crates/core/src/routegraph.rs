//! Delivery routes and their graph encoding.
//!
//! A [`Route`] is what the loaders produce. [`build_graph`] turns it into a
//! [`RouteGraph`]: per-node geometric features, a hashed bucket for the
//! dataset's zone label and the normalised asymmetric travel-time matrix.

use std::collections::HashSet;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::hexgrid::{project, GeoPoint, GridSpec, ProjectedPoint};

/// Three distance scalars followed by the 16 positional-encoding dims.
pub const NODE_FEATURES: usize = 19;

/// Number of hash buckets for dataset zone labels.
pub const ZONE_LABEL_BUCKETS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Stop {
    pub id: String,
    pub geo: GeoPoint,
    pub zone_label: Option<String>,
    pub is_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub id: String,
    pub stops: Vec<Stop>,
    /// `travel[i][j]` is the travel time in seconds from stop `i` to stop `j`.
    pub travel: Vec<Vec<f64>>,
    pub actual_order: Option<Vec<usize>>,
}

impl Route {
    pub fn len(&self) -> usize {
        self.stops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stops.is_empty()
    }

    /// Index of the unique start stop.
    pub fn start(&self) -> Result<usize> {
        let mut starts = self.stops.iter().enumerate().filter(|(_, s)| s.is_start);
        match (starts.next(), starts.next()) {
            (Some((i, _)), None) => Ok(i),
            (None, _) => Err(Error::data(&self.id, "no start stop")),
            _ => Err(Error::data(&self.id, "more than one start stop")),
        }
    }

    /// Checks every structural invariant of a route.
    pub fn validate(&self) -> Result<()> {
        let n = self.stops.len();
        if n < 2 {
            return Err(Error::data(&self.id, format!("route has {n} stops, need at least 2")));
        }
        let mut ids = HashSet::with_capacity(n);
        for s in &self.stops {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::data(&self.id, format!("duplicate stop id {}", s.id)));
            }
            s.geo
                .validate()
                .map_err(|e| Error::data(&self.id, format!("stop {}: {e}", s.id)))?;
        }
        let start = self.start()?;
        validate_matrix(&self.id, &self.travel, n)?;
        if let Some(order) = &self.actual_order {
            check_permutation(order, n)
                .map_err(|e| Error::data(&self.id, format!("actual order: {e}")))?;
            if order[0] != start {
                return Err(Error::data(&self.id, "actual order does not begin at the start stop"));
            }
        }
        Ok(())
    }

    /// A route over a subset of stops, keeping their relative order.
    ///
    /// `start_pos` indexes into `indices` and marks the sub-route's start.
    pub fn sub_route(&self, id: impl Into<String>, indices: &[usize], start_pos: usize) -> Route {
        let stops = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| Stop {
                is_start: k == start_pos,
                ..self.stops[i].clone()
            })
            .collect();
        let travel = indices
            .iter()
            .map(|&i| indices.iter().map(|&j| self.travel[i][j]).collect())
            .collect();
        Route {
            id: id.into(),
            stops,
            travel,
            actual_order: None,
        }
    }

    /// Mean stop coordinate, used as a local projection origin.
    pub fn geo_center(&self) -> GeoPoint {
        let n = self.stops.len().max(1) as f64;
        let lat = self.stops.iter().map(|s| s.geo.lat).sum::<f64>() / n;
        let lng = self.stops.iter().map(|s| s.geo.lng).sum::<f64>() / n;
        GeoPoint { lat, lng }
    }
}

pub(crate) fn validate_matrix(route: &str, travel: &[Vec<f64>], n: usize) -> Result<()> {
    if travel.len() != n || travel.iter().any(|row| row.len() != n) {
        return Err(Error::data(route, format!("travel matrix is not {n}x{n}")));
    }
    for (i, row) in travel.iter().enumerate() {
        for (j, &t) in row.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::data(route, format!("travel[{i}][{j}] is not finite")));
            }
            if t < 0.0 {
                return Err(Error::data(route, format!("travel[{i}][{j}] = {t} is negative")));
            }
            if i == j && t != 0.0 {
                return Err(Error::data(route, format!("travel[{i}][{i}] = {t}, expected 0")));
            }
        }
    }
    Ok(())
}

pub(crate) fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::domain(format!(
            "order has {} entries for {n} stops",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::domain(format!("order is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Travel time along `order`, as an open path unless `closed` adds the
/// return arc to the first stop.
pub fn tour_length(order: &[usize], travel: &[Vec<f64>], closed: bool) -> Result<f64> {
    check_permutation(order, travel.len())?;
    let mut total: f64 = order.windows(2).map(|w| travel[w[0]][w[1]]).sum();
    if closed && order.len() > 1 {
        total += travel[order[order.len() - 1]][order[0]];
    }
    Ok(total)
}

/// Stable FNV-1a hash of a dataset zone label, reduced to a bucket.
pub fn zone_label_bucket(label: Option<&str>) -> usize {
    let Some(label) = label else { return 0 };
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % ZONE_LABEL_BUCKETS as u64) as usize
}

/// Complete directed graph for one route.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteGraph {
    pub n: usize,
    /// Row-major `n × NODE_FEATURES`.
    pub features: Vec<f64>,
    pub zone_label_idx: Vec<usize>,
    /// Row-major `n × n`; `edge_w[i * n + j]` is the normalised time `i → j`.
    pub edge_w: Vec<f64>,
    pub start: usize,
}

impl RouteGraph {
    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * NODE_FEATURES..(i + 1) * NODE_FEATURES]
    }

    pub fn edge(&self, from: usize, to: usize) -> f64 {
        self.edge_w[from * self.n + to]
    }

    /// Builds the graph from already projected stop positions.
    pub fn from_points(
        points: &[ProjectedPoint],
        zone_label_idx: Vec<usize>,
        travel: &[Vec<f64>],
        start: usize,
    ) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::domain(format!("graph needs at least 2 nodes, got {n}")));
        }
        if zone_label_idx.len() != n || start >= n {
            return Err(Error::domain("zone labels or start index inconsistent with node count"));
        }
        validate_matrix("<graph>", travel, n)?;

        let mut dmax = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                dmax = dmax.max(points[i].dist(&points[j]));
            }
        }
        let scale = if dmax > 0.0 { dmax } else { 1.0 };
        let center = ProjectedPoint::new(
            points.iter().map(|p| p.x).sum::<f64>() / n as f64,
            points.iter().map(|p| p.y).sum::<f64>() / n as f64,
        );
        let (xmin, xmax) = min_max(points.iter().map(|p| p.x));
        let (ymin, ymax) = min_max(points.iter().map(|p| p.y));
        let unit = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };

        let mut features = Vec::with_capacity(n * NODE_FEATURES);
        for (i, p) in points.iter().enumerate() {
            let (mut near, mut far) = (f64::INFINITY, 0.0f64);
            for (j, other) in points.iter().enumerate() {
                if i != j {
                    let d = p.dist(other);
                    near = near.min(d);
                    far = far.max(d);
                }
            }
            features.push(near / scale);
            features.push(far / scale);
            features.push(p.dist(&center) / scale);
            let xh = unit(p.x, xmin, xmax);
            let yh = unit(p.y, ymin, ymax);
            for k in 0..4 {
                let w = (1u32 << k) as f64 * PI;
                features.extend([(w * xh).sin(), (w * xh).cos(), (w * yh).sin(), (w * yh).cos()]);
            }
        }

        let mut tmax = 0.0f64;
        for (i, row) in travel.iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                if i != j {
                    tmax = tmax.max(t);
                }
            }
        }
        let edge_w = travel
            .iter()
            .flat_map(|row| row.iter().map(move |&t| if tmax > 0.0 { t / tmax } else { 0.0 }))
            .collect();

        Ok(RouteGraph {
            n,
            features,
            zone_label_idx,
            edge_w,
            start,
        })
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Projects every stop around the route's mean coordinate.
pub fn project_stops(route: &Route) -> Result<Vec<ProjectedPoint>> {
    let spec = GridSpec::new(route.geo_center());
    route.stops.iter().map(|s| project(s.geo, &spec)).collect()
}

pub fn build_graph(route: &Route) -> Result<RouteGraph> {
    let n = route.stops.len();
    if n < 2 {
        return Err(Error::domain(format!("route {} has {n} stops, need at least 2", route.id)));
    }
    validate_matrix(&route.id, &route.travel, n)?;
    let start = route.start()?;
    let points = project_stops(route)?;
    let labels = route
        .stops
        .iter()
        .map(|s| zone_label_bucket(s.zone_label.as_deref()))
        .collect();
    RouteGraph::from_points(&points, labels, &route.travel, start)
}
