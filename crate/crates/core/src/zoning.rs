//! Spatial zones: grid cells touched by training stops, clustered with
//! seeded k-means.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexgrid::{
    cell_of, centroid, project, GeoPoint, GridSpec, HexCellId, ProjectedPoint,
};
use crate::rng::seeded;
use crate::routegraph::{Route, Stop};

pub const DEFAULT_K: usize = 57;
pub const DEFAULT_RESOLUTION: u8 = 7;
pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct Zoning {
    pub spec: GridSpec,
    pub resolution: u8,
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<ProjectedPoint>,
    pub cell_to_zone: BTreeMap<HexCellId, usize>,
}

/// Every cell at `resolution` that holds at least one stop of `routes`.
pub fn collect_cells(
    routes: &[Route],
    resolution: u8,
    spec: &GridSpec,
) -> Result<BTreeSet<HexCellId>> {
    if routes.is_empty() {
        return Err(Error::domain("no routes to collect cells from"));
    }
    let mut cells = BTreeSet::new();
    for route in routes {
        for stop in &route.stops {
            cells.insert(cell_of(project(stop.geo, spec)?, resolution, spec)?);
        }
    }
    Ok(cells)
}

/// Index of the nearest point, lowest index on ties.
fn nearest(p: &ProjectedPoint, centers: &[ProjectedPoint]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = p.dist2(c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn inertia(points: &[ProjectedPoint], centers: &[ProjectedPoint], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| p.dist2(&centers[a]))
        .sum()
}

fn means(points: &[ProjectedPoint], assign: &[usize], k: usize, prev: &[ProjectedPoint]) -> Vec<ProjectedPoint> {
    let mut sum = vec![(0.0, 0.0, 0usize); k];
    for (p, &a) in points.iter().zip(assign) {
        sum[a].0 += p.x;
        sum[a].1 += p.y;
        sum[a].2 += 1;
    }
    sum.iter()
        .zip(prev)
        .map(|(&(x, y, c), old)| {
            if c == 0 {
                *old
            } else {
                ProjectedPoint::new(x / c as f64, y / c as f64)
            }
        })
        .collect()
}

fn plus_plus_init(points: &[ProjectedPoint], k: usize, seed: u64) -> Vec<ProjectedPoint> {
    let mut rng = seeded(seed);
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| p.dist2(&points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the final partial sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(p.dist2(&points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i]).collect()
}

/// Moves the farthest member of a multi-member cluster into each empty
/// cluster until none is empty.
fn reseed_empty(points: &[ProjectedPoint], centers: &mut [ProjectedPoint], assign: &mut Vec<usize>) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = p.dist2(&centers[assign[i]]);
            if counts[assign[i]] > 1 && d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        // k <= |points| guarantees some cluster holds two members
        let far = far.expect("an empty cluster implies a multi-member cluster");
        centers[empty] = points[far];
        *assign = points.iter().map(|p| nearest(p, centers)).collect();
    }
}

/// Lloyd iterations from k-means++ seeding; also returns the inertia after
/// every assignment step.
pub fn kmeans_traced(
    cells: &BTreeSet<HexCellId>,
    k: usize,
    seed: u64,
    spec: &GridSpec,
) -> Result<(Zoning, Vec<f64>)> {
    spec.validate()?;
    if cells.is_empty() {
        return Err(Error::domain("no cells to cluster"));
    }
    if k == 0 || k > cells.len() {
        return Err(Error::domain(format!(
            "k = {k} must lie in 1..={} (number of cells)",
            cells.len()
        )));
    }
    let resolution = cells.iter().next().unwrap().resolution;
    if cells.iter().any(|c| c.resolution != resolution) {
        return Err(Error::domain("cells mix several resolutions"));
    }
    let points: Vec<ProjectedPoint> = cells.iter().map(|&c| centroid(c, spec)).collect();

    let mut centers = plus_plus_init(&points, k, seed);
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    let mut trace = vec![inertia(&points, &centers, &assign)];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        reseed_empty(&points, &mut centers, &mut assign);
        centers = means(&points, &assign, k, &centers);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        trace.push(inertia(&points, &centers, &next));
        if next == assign {
            break;
        }
        assign = next;
    }

    let cell_to_zone = cells.iter().copied().zip(assign).collect();
    Ok((
        Zoning {
            spec: *spec,
            resolution,
            k,
            seed,
            centroids: centers,
            cell_to_zone,
        },
        trace,
    ))
}

pub fn kmeans(cells: &BTreeSet<HexCellId>, k: usize, seed: u64, spec: &GridSpec) -> Result<Zoning> {
    kmeans_traced(cells, k, seed, spec).map(|(z, _)| z)
}

/// Mean coordinate over every stop of `routes`; the default grid origin.
pub fn dataset_center(routes: &[Route]) -> Result<GeoPoint> {
    let (mut lat, mut lng, mut n) = (0.0, 0.0, 0usize);
    for s in routes.iter().flat_map(|r| &r.stops) {
        lat += s.geo.lat;
        lng += s.geo.lng;
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain("no stops to centre a grid on"));
    }
    GeoPoint::new(lat / n as f64, lng / n as f64)
}

impl Zoning {
    /// Collects the training cells and clusters them.
    pub fn fit(routes: &[Route], resolution: u8, k: usize, seed: u64, spec: &GridSpec) -> Result<Self> {
        let cells = collect_cells(routes, resolution, spec)?;
        kmeans(&cells, k, seed, spec)
    }

    pub fn zone_of_point(&self, p: ProjectedPoint) -> Result<usize> {
        let cell = cell_of(p, self.resolution, &self.spec)?;
        Ok(match self.cell_to_zone.get(&cell) {
            Some(&z) => z,
            None => nearest(&p, &self.centroids),
        })
    }

    pub fn zone_of_geo(&self, g: GeoPoint) -> Result<usize> {
        self.zone_of_point(project(g, &self.spec)?)
    }

    /// Zone of a stop, falling back to the nearest centroid for cells that
    /// never held a training stop.
    pub fn zone_of_stop(&self, s: &Stop) -> Result<usize> {
        self.zone_of_geo(s.geo)
    }

    pub fn zones_of_route(&self, route: &Route) -> Result<Vec<usize>> {
        route.stops.iter().map(|s| self.zone_of_stop(s)).collect()
    }

    /// Number of cells per zone.
    pub fn zone_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &z in self.cell_to_zone.values() {
            sizes[z] += 1;
        }
        sizes
    }

    pub fn to_file(&self) -> Result<ZonesFile> {
        let cells = self
            .cell_to_zone
            .iter()
            .map(|(c, &z)| Ok((c.to_hex()?, z)))
            .collect::<Result<_>>()?;
        Ok(ZonesFile {
            grid: GridFile {
                origin_lat: self.spec.origin.lat,
                origin_lng: self.spec.origin.lng,
                ref_resolution: self.spec.ref_resolution,
                ref_edge_m: self.spec.ref_edge_m,
            },
            resolution: self.resolution,
            k: self.k,
            seed: self.seed,
            centroids: self.centroids.iter().map(|p| [p.x, p.y]).collect(),
            cells,
        })
    }

    pub fn from_file(f: &ZonesFile) -> Result<Self> {
        let spec = GridSpec {
            origin: GeoPoint::new(f.grid.origin_lat, f.grid.origin_lng)?,
            ref_resolution: f.grid.ref_resolution,
            ref_edge_m: f.grid.ref_edge_m,
        };
        spec.validate()?;
        if f.k == 0 || f.centroids.len() != f.k {
            return Err(Error::domain(format!(
                "zones file declares k = {} but lists {} centroids",
                f.k,
                f.centroids.len()
            )));
        }
        if f.centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("zones file has non-finite centroids"));
        }
        let mut cell_to_zone = BTreeMap::new();
        for (hex, &z) in &f.cells {
            let cell = HexCellId::from_hex(hex)?;
            if z >= f.k || cell.resolution != f.resolution {
                return Err(Error::domain(format!("cell {hex} maps to invalid zone {z}")));
            }
            cell_to_zone.insert(cell, z);
        }
        Ok(Zoning {
            spec,
            resolution: f.resolution,
            k: f.k,
            seed: f.seed,
            centroids: f.centroids.iter().map(|&[x, y]| ProjectedPoint::new(x, y)).collect(),
            cell_to_zone,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_file()?)
            .map_err(|e| Error::json("<zones>", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ZonesFile = serde_json::from_str(text).map_err(|e| Error::json("<zones>", e))?;
        Self::from_file(&f)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: ZonesFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_file(&f)
    }
}

/// Number of distinct zones the route's stops fall in.
pub fn clusters_visited(route: &Route, z: &Zoning) -> Result<usize> {
    let zones: HashSet<usize> = z.zones_of_route(route)?.into_iter().collect();
    Ok(zones.len())
}

/// On-disk form of [`Zoning`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZonesFile {
    pub grid: GridFile,
    pub resolution: u8,
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<[f64; 2]>,
    pub cells: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub origin_lat: f64,
    pub origin_lng: f64,
    pub ref_resolution: u8,
    pub ref_edge_m: f64,
}
