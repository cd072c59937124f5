//! Evaluation: per-route length errors, MAPE, error statistics and the
//! grouped comparison of the two strategies.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::DecodeResult;
use crate::routegraph::{tour_length, Route};
use crate::zoning::{clusters_visited, Zoning};

/// Mean absolute percentage error, in percent.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return Err(Error::domain(format!(
            "mape needs equal non-empty inputs, got {} and {}",
            actual.len(),
            predicted.len()
        )));
    }
    let mut sum = 0.0;
    for (&a, &p) in actual.iter().zip(predicted) {
        if !(a > 0.0) {
            return Err(Error::domain(format!("actual length {a} is not positive")));
        }
        sum += (p - a).abs() / a;
    }
    Ok(100.0 * sum / actual.len() as f64)
}

/// Linear interpolation between order statistics at rank `(N−1)·p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
}

pub fn error_stats(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::domain("error statistics of an empty list"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::numeric("non-finite error value"));
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(ErrorStats {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        max: s[s.len() - 1],
        min: s[0],
        q25: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q75: quantile(&s, 0.75),
        q90: quantile(&s, 0.9),
    })
}

/// One evaluated route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub route_id: String,
    pub n_stops: usize,
    pub clusters_visited: usize,
    pub actual_s: f64,
    pub pred_general_s: f64,
    pub pred_zoned_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyBlock {
    /// Statistics of `|predicted − actual|` in seconds.
    pub errors: ErrorStats,
    pub mape: f64,
}

/// Aggregates over one bin; `None` when the bin is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBlock {
    pub bin: String,
    pub routes: usize,
    pub mean_actual_s: Option<f64>,
    pub mean_pred_general_s: Option<f64>,
    pub mean_pred_zoned_s: Option<f64>,
    pub mape_general: Option<f64>,
    pub mape_zoned: Option<f64>,
}

/// Mean lengths on routes that touch at least [`DIRECTIONAL_MIN_ZONES`]
/// zones, where zoned training is expected to help most.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalMetric {
    pub routes: usize,
    pub mean_general_s: Option<f64>,
    pub mean_zoned_s: Option<f64>,
    pub zoned_not_worse: Option<bool>,
}

pub const DIRECTIONAL_MIN_ZONES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub general: StrategyBlock,
    pub zoned: StrategyBlock,
    pub by_clusters: Vec<GroupBlock>,
    pub by_stops: Vec<GroupBlock>,
    pub directional: DirectionalMetric,
}

pub const CLUSTER_BINS: [&str; 4] = ["1", "2", "3", "4+"];
pub const STOP_BINS: [&str; 7] = ["<=100", "101-120", "121-140", "141-160", "161-180", "181-200", ">200"];

pub fn cluster_bin(clusters: usize) -> usize {
    clusters.clamp(1, 4) - 1
}

pub fn stop_bin(n: usize) -> usize {
    match n {
        0..=100 => 0,
        101..=200 => (n - 101) / 20 + 1,
        _ => 6,
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn group_block(bin: &str, rows: &[&ReportRow]) -> Result<GroupBlock> {
    let actual: Vec<f64> = rows.iter().map(|r| r.actual_s).collect();
    let general: Vec<f64> = rows.iter().map(|r| r.pred_general_s).collect();
    let zoned: Vec<f64> = rows.iter().map(|r| r.pred_zoned_s).collect();
    let m = |p: &[f64]| if rows.is_empty() { Ok(None) } else { mape(&actual, p).map(Some) };
    Ok(GroupBlock {
        bin: bin.to_string(),
        routes: rows.len(),
        mean_actual_s: mean(&actual),
        mean_pred_general_s: mean(&general),
        mean_pred_zoned_s: mean(&zoned),
        mape_general: m(&general)?,
        mape_zoned: m(&zoned)?,
    })
}

/// Cluster-count and stop-count groupings of `rows`.
pub fn group_reports(rows: &[ReportRow]) -> Result<(Vec<GroupBlock>, Vec<GroupBlock>)> {
    let mut by_c: Vec<Vec<&ReportRow>> = vec![Vec::new(); CLUSTER_BINS.len()];
    let mut by_s: Vec<Vec<&ReportRow>> = vec![Vec::new(); STOP_BINS.len()];
    for r in rows {
        by_c[cluster_bin(r.clusters_visited)].push(r);
        by_s[stop_bin(r.n_stops)].push(r);
    }
    let c = CLUSTER_BINS.iter().zip(&by_c).map(|(b, rs)| group_block(b, rs)).collect::<Result<_>>()?;
    let s = STOP_BINS.iter().zip(&by_s).map(|(b, rs)| group_block(b, rs)).collect::<Result<_>>()?;
    Ok((c, s))
}

fn strategy_block(actual: &[f64], predicted: &[f64]) -> Result<StrategyBlock> {
    let errors: Vec<f64> = actual.iter().zip(predicted).map(|(a, p)| (p - a).abs()).collect();
    Ok(StrategyBlock {
        errors: error_stats(&errors)?,
        mape: mape(actual, predicted)?,
    })
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ReportRow>) -> Result<Self> {
        let actual: Vec<f64> = rows.iter().map(|r| r.actual_s).collect();
        let general: Vec<f64> = rows.iter().map(|r| r.pred_general_s).collect();
        let zoned: Vec<f64> = rows.iter().map(|r| r.pred_zoned_s).collect();
        let (by_clusters, by_stops) = group_reports(&rows)?;
        let wide: Vec<&ReportRow> = rows.iter().filter(|r| r.clusters_visited >= DIRECTIONAL_MIN_ZONES).collect();
        let mg = mean(&wide.iter().map(|r| r.pred_general_s).collect::<Vec<_>>());
        let mz = mean(&wide.iter().map(|r| r.pred_zoned_s).collect::<Vec<_>>());
        Ok(EvalReport {
            general: strategy_block(&actual, &general)?,
            zoned: strategy_block(&actual, &zoned)?,
            by_clusters,
            by_stops,
            directional: DirectionalMetric {
                routes: wide.len(),
                mean_general_s: mg,
                mean_zoned_s: mz,
                zoned_not_worse: mg.zip(mz).map(|(g, z)| z <= g),
            },
            rows,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::json("<report>", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("<report>", e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Per-route rows in the fixed column order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Actual and predicted lengths per route, ordered by actual length,
    /// for plotting outside the tool.
    pub fn write_plot_data(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Point<'a> {
            index: usize,
            route_id: &'a str,
            actual_s: f64,
            pred_general_s: f64,
            pred_zoned_s: f64,
        }
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.actual_s.total_cmp(&b.actual_s).then_with(|| a.route_id.cmp(&b.route_id)));
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for (index, r) in rows.into_iter().enumerate() {
            let p = Point {
                index,
                route_id: &r.route_id,
                actual_s: r.actual_s,
                pred_general_s: r.pred_general_s,
                pred_zoned_s: r.pred_zoned_s,
            };
            w.serialize(p).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One predicted tour, by stop id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TourRecord {
    pub route_id: String,
    pub order: Vec<String>,
    pub length_s: f64,
    pub log_prob: f64,
}

/// Output of `infer`: every route's tour under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TourSet {
    pub strategy: String,
    pub tours: Vec<TourRecord>,
}

impl TourSet {
    pub fn from_results(strategy: &str, routes: &[Route], results: &[DecodeResult]) -> Self {
        let tours = routes
            .iter()
            .zip(results)
            .map(|(r, d)| TourRecord {
                route_id: r.id.clone(),
                order: d.tour.iter().map(|&i| r.stops[i].id.clone()).collect(),
                length_s: d.length,
                log_prob: d.log_prob,
            })
            .collect();
        TourSet {
            strategy: strategy.to_string(),
            tours,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Stop indices of `route`'s tour, checked to be a permutation that
    /// begins at the start stop.
    pub fn order_of(&self, route: &Route) -> Result<Vec<usize>> {
        let rec = self
            .tours
            .iter()
            .find(|t| t.route_id == route.id)
            .ok_or_else(|| Error::data(&route.id, format!("no {} tour", self.strategy)))?;
        let index: HashMap<&str, usize> = route.stops.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let order = rec
            .order
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::data(&route.id, format!("unknown stop {id} in {} tour", self.strategy)))
            })
            .collect::<Result<Vec<_>>>()?;
        crate::routegraph::check_permutation(&order, route.len())
            .map_err(|e| Error::data(&route.id, format!("{} tour: {e}", self.strategy)))?;
        if order[0] != route.start()? {
            return Err(Error::data(&route.id, format!("{} tour does not begin at the start stop", self.strategy)));
        }
        Ok(order)
    }
}

/// Report rows for `routes`, with every length recomputed from the stop
/// orders over the route's own matrix.
pub fn build_rows(
    routes: &[Route],
    general: &TourSet,
    zoned: &TourSet,
    zoning: &Zoning,
    closed: bool,
) -> Result<Vec<ReportRow>> {
    routes
        .iter()
        .map(|r| {
            let actual = r
                .actual_order
                .as_ref()
                .ok_or_else(|| Error::data(&r.id, "no actual sequence"))?;
            Ok(ReportRow {
                route_id: r.id.clone(),
                n_stops: r.len(),
                clusters_visited: clusters_visited(r, zoning)?,
                actual_s: tour_length(actual, &r.travel, closed)?,
                pred_general_s: tour_length(&general.order_of(r)?, &r.travel, closed)?,
                pred_zoned_s: tour_length(&zoned.order_of(r)?, &r.travel, closed)?,
            })
        })
        .collect()
}
