//! Classical reference tours: random, nearest neighbour, 2-opt and exact
//! enumeration for small instances. All work on open paths that start at a
//! fixed stop, with asymmetric travel times.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::routegraph::{check_permutation, tour_length};

/// Largest instance [`brute_force_optimal`] accepts.
pub const BRUTE_FORCE_MAX: usize = 10;

/// `start` followed by a uniform shuffle of the other stops.
pub fn random_tour(n: usize, start: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 || start >= n {
        return Err(Error::domain(format!("start {start} invalid for {n} stops")));
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| i != start).collect();
    rest.shuffle(rng);
    let mut tour = Vec::with_capacity(n);
    tour.push(start);
    tour.extend(rest);
    Ok(tour)
}

/// Always moves to the unvisited stop with the smallest outgoing travel
/// time; ties go to the lowest index.
pub fn nearest_neighbor(travel: &[Vec<f64>], start: usize) -> Result<Vec<usize>> {
    let n = travel.len();
    if n == 0 || start >= n {
        return Err(Error::domain(format!("start {start} invalid for {n} stops")));
    }
    let mut visited = vec![false; n];
    let mut tour = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    tour.push(cur);
    while tour.len() < n {
        let mut best = usize::MAX;
        let mut best_t = f64::INFINITY;
        for j in 0..n {
            if !visited[j] && (best == usize::MAX || travel[cur][j] < best_t) {
                best = j;
                best_t = travel[cur][j];
            }
        }
        visited[best] = true;
        tour.push(best);
        cur = best;
    }
    Ok(tour)
}

/// Cost change of reversing positions `i..=j` of an open path.
///
/// `fwd[k]` and `bwd[k]` are prefix sums of the arcs `o[m] → o[m+1]` and
/// `o[m+1] → o[m]` for `m < k`; the reversed segment is priced with the
/// backward arcs because the matrix is not symmetric.
fn reversal_delta(o: &[usize], t: &[Vec<f64>], fwd: &[f64], bwd: &[f64], i: usize, j: usize) -> f64 {
    let n = o.len();
    let mut delta = t[o[i - 1]][o[j]] - t[o[i - 1]][o[i]];
    delta += (bwd[j] - bwd[i]) - (fwd[j] - fwd[i]);
    if j + 1 < n {
        delta += t[o[i]][o[j + 1]] - t[o[j]][o[j + 1]];
    }
    delta
}

/// Best-improvement 2-opt on an open path with the first stop pinned.
pub fn two_opt(order: &[usize], travel: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = travel.len();
    check_permutation(order, n)?;
    let mut tour = order.to_vec();
    if n < 3 {
        return Ok(tour);
    }
    let mut current = tour_length(&tour, travel, false)?;
    let mut fwd = vec![0.0; n];
    let mut bwd = vec![0.0; n];
    loop {
        for k in 1..n {
            fwd[k] = fwd[k - 1] + travel[tour[k - 1]][tour[k]];
            bwd[k] = bwd[k - 1] + travel[tour[k]][tour[k - 1]];
        }
        let mut best = (0.0, 0, 0);
        for i in 1..n - 1 {
            for j in i + 1..n {
                let d = reversal_delta(&tour, travel, &fwd, &bwd, i, j);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (d, i, j) = best;
        if d >= -1e-12 * current.abs().max(1.0) {
            return Ok(tour);
        }
        let mut candidate = tour.clone();
        candidate[i..=j].reverse();
        let len = tour_length(&candidate, travel, false)?;
        // the prefix-sum delta can disagree with a fresh sum in the last ulp
        if len >= current {
            return Ok(tour);
        }
        tour = candidate;
        current = len;
    }
}

/// Rearranges `v` into the next lexicographic permutation; `false` when `v`
/// was the last one.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Exhaustive search over all `(n−1)!` orders that begin at `start`.
///
/// Returns the lexicographically smallest optimal order.
pub fn brute_force_optimal(travel: &[Vec<f64>], start: usize, closed: bool) -> Result<(Vec<usize>, f64)> {
    let n = travel.len();
    if n == 0 || start >= n {
        return Err(Error::domain(format!("start {start} invalid for {n} stops")));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::domain(format!(
            "brute force limited to {BRUTE_FORCE_MAX} stops, got {n}"
        )));
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| i != start).collect();
    let mut tour = vec![start; n];
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        tour[1..].copy_from_slice(&rest);
        let len = tour_length(&tour, travel, closed)?;
        if best.as_ref().map_or(true, |(_, b)| len < *b) {
            best = Some((tour.clone(), len));
        }
        if !next_permutation(&mut rest) {
            break;
        }
    }
    Ok(best.expect("at least one order"))
}
