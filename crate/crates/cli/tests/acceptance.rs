//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;

use zoneroute::autodiff::{grad_check, Tape, Tensor, Var};
use zoneroute::baselines::{brute_force_optimal, nearest_neighbor, random_tour, two_opt};
use zoneroute::dataio::{generate_synthetic, SynthConfig};
use zoneroute::hexgrid::{cell_of, centroid, parent, GeoPoint, GridSpec, HexCellId, ProjectedPoint, MAX_RESOLUTION};
use zoneroute::metrics::{build_rows, error_stats, group_reports, mape, EvalReport, ReportRow, TourSet};
use zoneroute::pipeline::{
    infer_general, infer_zoned, train_general, train_zone_models, zone_seed, TrainConfig,
};
use zoneroute::policy::{
    decode, encode, reinforce_loss, Bound, DecodeMode, Mode, ModelConfig, ModelParams, ZONE_EMBED, ZONE_EMBED_DIM,
};
use zoneroute::rng::{derive_seed, seeded};
use zoneroute::routegraph::{tour_length, Route, RouteGraph, ZONE_LABEL_BUCKETS};
use zoneroute::zoning::{dataset_center, Zoning};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: zoneroute::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn random_instance(n: usize, seed: u64) -> (RouteGraph, Vec<Vec<f64>>) {
    let mut rng = seeded(seed);
    let points: Vec<ProjectedPoint> = (0..n)
        .map(|_| ProjectedPoint::new(rng.random_range(-3000.0..3000.0), rng.random_range(-3000.0..3000.0)))
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..1024)).collect();
    let travel: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.random_range(1.0..10.0) }).collect())
        .collect();
    let start = rng.random_range(0..n);
    let g = RouteGraph::from_points(&points, labels, &travel, start).unwrap();
    (g, travel)
}

fn random_matrix(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.random_range(1.0..1000.0) }).collect())
        .collect()
}

fn is_tour_from(t: &[usize], n: usize, start: usize) -> bool {
    let mut seen = vec![false; n];
    t.len() == n && t.first() == Some(&start) && t.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

// ---------------------------------------------------------------- 1

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> zoneroute::Result<Var> {
    let (r, c) = t.value(y).shape();
    let mut rng = seeded(seed);
    let w = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = t.leaf(w)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

type Prim = Box<dyn Fn(&mut Tape, &[Var]) -> zoneroute::Result<Var>>;

fn primitive_errors() -> Result<Vec<(&'static str, f64)>, String> {
    let a = rand_tensor(3, 4, 1);
    let b = rand_tensor(4, 2, 2);
    let c = rand_tensor(3, 4, 3);
    let row = rand_tensor(1, 4, 4);
    let pos = Tensor::from_vec(3, 4, a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    let cases: Vec<(&'static str, Vec<Tensor>, Prim)> = vec![
        ("matmul", vec![a.clone(), b], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![a.clone(), c.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), c.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul", vec![a.clone(), c], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("concat_cols", vec![a.clone(), rand_tensor(3, 2, 5)], Box::new(|t, v| t.concat_cols(v[0], v[1]))),
        ("gather_rows", vec![a.clone()], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1]))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], 2, 6))),
        ("pick", vec![a.clone()], Box::new(|t, v| t.pick(v[0], 1, 3))),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        ("mean_rows", vec![a.clone()], Box::new(|t, v| t.mean_rows(v[0]))),
        ("relu", vec![a.clone()], Box::new(|t, v| t.relu(v[0]))),
        ("elu", vec![a.clone()], Box::new(|t, v| t.elu(v[0]))),
        ("leaky_relu", vec![a.clone()], Box::new(|t, v| t.leaky_relu(v[0], 0.2))),
        ("tanh", vec![a.clone()], Box::new(|t, v| t.tanh(v[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("log", vec![pos], Box::new(|t, v| t.log(v[0]))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        (
            "masked_log_softmax",
            vec![a.clone()],
            Box::new(move |t, v| {
                let y = t.masked_log_softmax(v[0], &mask)?;
                let keep = Tensor::from_vec(3, 4, (0..12).map(|i| if i % 3 != 1 { 1.0 } else { 0.0 }).collect())?;
                let k = t.leaf(keep)?;
                t.mul(y, k)
            }),
        ),
        (
            "layer_norm",
            vec![a.clone(), row, rand_tensor(1, 4, 9)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "dropout",
            vec![a],
            Box::new(|t, v| t.dropout(v[0], 0.3, true, &mut seeded(5))),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| {
            let r = lib(grad_check(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_sum(t, y, 17)
                },
                &params,
                1e-5,
                0,
            ))?;
            Ok((name, r.max_rel_error))
        })
        .collect()
}

/// Splits the comparison into coordinates whose tape and finite-difference
/// gradients both sit below 1e-7 (round-off dominated at ε = 1e-5) and the
/// rest, and also reports the worst coordinate re-checked at ε = 1e-7.
fn policy_grad_detail<F>(f: &F, params: &[Tensor]) -> String
where
    F: Fn(&mut Tape, &[Var]) -> zoneroute::Result<Var>,
{
    let eval = |ps: &[Tensor]| {
        let mut t = Tape::new();
        let v: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone()).unwrap()).collect();
        let l = f(&mut t, &v).unwrap();
        t.value(l).item()
    };
    let mut t = Tape::new();
    let v: Vec<Var> = params.iter().map(|p| t.leaf(p.clone()).unwrap()).collect();
    let l = f(&mut t, &v).unwrap();
    let grads = t.backward(l).unwrap();
    let mut work = params.to_vec();
    let (mut floor, mut above, mut worst_above, mut loose, mut worst_small_eps) = (0, 0, 0.0f64, 0, 0.0f64);
    for (pi, &var) in v.iter().enumerate() {
        let g = grads.get(var);
        for k in 0..work[pi].len() {
            let fd = |w: &mut Vec<Tensor>, eps: f64| {
                let o = w[pi].data()[k];
                w[pi].data_mut()[k] = o + eps;
                let up = eval(w);
                w[pi].data_mut()[k] = o - eps;
                let down = eval(w);
                w[pi].data_mut()[k] = o;
                (up - down) / (2.0 * eps)
            };
            let a = g.data()[k];
            let b = fd(&mut work, 1e-5);
            if a.abs() < 1e-7 && b.abs() < 1e-7 {
                floor += usize::from(a != b);
                continue;
            }
            above += 1;
            let rel = zoneroute::autodiff::rel_error(a, b);
            worst_above = worst_above.max(rel);
            if rel >= 1e-4 {
                loose += 1;
                worst_small_eps = worst_small_eps.max(zoneroute::autodiff::rel_error(a, fd(&mut work, 1e-7)));
            }
        }
    }
    let mut msg = format!(
        "{floor} coords with |g| < 1e-7 on both sides disagree (round-off floor); \
         worst of the {above} larger coords {worst_above:.2e}"
    );
    if loose > 0 {
        msg += &format!(", {loose} above 1e-4 agree to {worst_small_eps:.2e} at ε = 1e-7");
    }
    msg
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let prims = primitive_errors()?;
    let (worst_name, worst_prim) = prims.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure(worst_prim < 1e-6, || format!("primitive {worst_name} rel error {worst_prim:.2e}"))?;

    let config = ModelConfig { hidden_dim: 8, dropout: 0.1 };
    let params = lib(ModelParams::init(config, 101))?;
    let (g, travel) = random_instance(5, 202);
    let start = g.start;
    let others: Vec<usize> = (0..5).filter(|&i| i != start).collect();
    let tours = [
        [vec![start], others.clone()].concat(),
        [vec![start], others.iter().rev().copied().collect()].concat(),
        [vec![start], vec![others[2], others[0], others[3], others[1]]].concat(),
    ];
    let lengths: Vec<f64> = tours.iter().map(|t| tour_length(t, &travel, false).unwrap()).collect();
    let baseline = lengths.iter().sum::<f64>() / lengths.len() as f64 - 1.0;
    let loss = |t: &mut Tape, v: &[Var]| {
        let p = Bound { vars: v.to_vec(), config };
        // reseeding fixes the dropout masks across perturbations
        let mut rng = seeded(303);
        let e = encode(t, &p, &g, Mode::Train, &mut rng)?;
        let mut samples = Vec::new();
        for (tour, &len) in tours.iter().zip(&lengths) {
            let d = decode(t, &p, e, start, DecodeMode::Forced(tour), &mut rng)?;
            samples.push((d.log_prob, len));
        }
        reinforce_loss(t, &samples, baseline)
    };
    let report = lib(grad_check(loss, &params.tensors, 1e-5, 0))?;
    let detail = policy_grad_detail(&loss, &params.tensors);
    ensure(report.max_rel_error < 1e-4, || {
        format!(
            "policy loss max rel error {:.2e} at {:?} ({}); {detail}",
            report.max_rel_error,
            report.worst,
            params.names()[report.worst.0]
        )
    })?;
    within(Duration::from_secs(30), t0)?;
    Ok(format!(
        "policy loss max rel error {:.2e} over {} coords; worst primitive {worst_name} {worst_prim:.2e}; {:.1?}",
        report.max_rel_error,
        report.coords_checked,
        t0.elapsed()
    ))
}

// ---------------------------------------------------------------- 2

fn all_tours(n: usize, start: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for i in 0..n {
            if !prefix.contains(&i) {
                prefix.push(i);
                rec(prefix, n, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut vec![start], n, &mut out);
    out
}

/// Log-probabilities of every tour under deterministic (inference) encoding.
fn tour_log_probs(t: &mut Tape, vars: &[Var], config: ModelConfig, g: &RouteGraph, tours: &[Vec<usize>]) -> zoneroute::Result<Vec<Var>> {
    let p = Bound { vars: vars.to_vec(), config };
    let mut rng = seeded(0);
    let e = encode(t, &p, g, Mode::Infer, &mut rng)?;
    tours
        .iter()
        .map(|tour| Ok(decode(t, &p, e, g.start, DecodeMode::Forced(tour), &mut rng)?.log_prob))
        .collect()
}

fn expected_length(params: &[Tensor], config: ModelConfig, g: &RouteGraph, tours: &[Vec<usize>], lens: &[f64]) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone()).unwrap()).collect();
    let lp = tour_log_probs(&mut t, &vars, config, g, tours).unwrap();
    // Σ p·(L − c) has the same gradient as Σ p·L; centring keeps the
    // finite-difference round-off well below the policy-gradient signal
    let c = lens.iter().sum::<f64>() / lens.len() as f64;
    lp.iter().zip(lens).map(|(&v, &l)| t.value(v).item().exp() * (l - c)).sum()
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let config = ModelConfig { hidden_dim: 8, dropout: 0.1 };
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for s in 0..10u64 {
        let params = lib(ModelParams::init(config, 1000 + s))?;
        let (g, travel) = random_instance(4, 2000 + s);
        let tours = all_tours(4, g.start);
        let lens: Vec<f64> = tours.iter().map(|t| tour_length(t, &travel, false).unwrap()).collect();

        // estimator: Σ p(τ)(L(τ) − b) ∇log p(τ) with p held constant
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.tensors.iter().map(|p| tape.leaf(p.clone()).unwrap()).collect();
        let lp = lib(tour_log_probs(&mut tape, &vars, config, &g, &tours))?;
        let probs: Vec<f64> = lp.iter().map(|&v| tape.value(v).item().exp()).collect();
        let total: f64 = probs.iter().sum();
        ensure((total - 1.0).abs() < 1e-12, || format!("tour probabilities sum to {total}"))?;
        let b = lens.iter().sum::<f64>() / lens.len() as f64;
        let mut acc: Option<Var> = None;
        for ((&v, &p), &l) in lp.iter().zip(&probs).zip(&lens) {
            let term = lib(tape.scale(v, p * (l - b)))?;
            acc = Some(match acc {
                None => term,
                Some(a) => lib(tape.add(a, term))?,
            });
        }
        let grads = lib(tape.backward(acc.expect("tours")))?;
        let est: Vec<f64> = vars.iter().flat_map(|&v| grads.get(v).into_data()).collect();

        // zone-embedding rows the instance never gathers cannot move J; one
        // unused row is still differenced as a witness, the rest must carry
        // an exactly zero estimate
        let witness = (0..ZONE_LABEL_BUCKETS).find(|r| !g.zone_label_idx.contains(r)).unwrap();
        let needed = |pi: usize, k: usize| {
            let row = k / ZONE_EMBED_DIM;
            pi != ZONE_EMBED || row == witness || g.zone_label_idx.contains(&row)
        };
        let mut offset = 0;
        let mut coords: Vec<(usize, usize, usize)> = Vec::new();
        for (pi, t) in params.tensors.iter().enumerate() {
            for k in 0..t.len() {
                if needed(pi, k) {
                    coords.push((pi, k, offset + k));
                } else {
                    ensure(est[offset + k] == 0.0, || format!("seed {s}: unused embedding entry has gradient"))?;
                }
            }
            offset += t.len();
        }
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let chunk = coords.len().div_ceil(threads);
        let fd_needed: Vec<f64> = std::thread::scope(|scope| {
            let handles: Vec<_> = coords
                .chunks(chunk)
                .map(|part| {
                    let (params, g, tours, lens) = (&params, &g, &tours, &lens);
                    scope.spawn(move || {
                        let mut work = params.tensors.clone();
                        part.iter()
                            .map(|&(pi, k, _)| {
                                let orig = work[pi].data()[k];
                                work[pi].data_mut()[k] = orig + eps;
                                let up = expected_length(&work, config, g, tours, lens);
                                work[pi].data_mut()[k] = orig - eps;
                                let down = expected_length(&work, config, g, tours, lens);
                                work[pi].data_mut()[k] = orig;
                                (up - down) / (2.0 * eps)
                            })
                            .collect::<Vec<f64>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        let mut fd = vec![0.0; est.len()];
        for (&(.., flat), v) in coords.iter().zip(fd_needed) {
            fd[flat] = v;
        }
        let diff: f64 = est.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = est.iter().map(|a| a * a).sum::<f64>().sqrt();
        ensure(norm > 0.0, || format!("seed {s}: zero gradient"))?;
        let rel = diff / norm;
        worst = worst.max(rel);
        ensure(rel < 1e-4, || format!("seed {s}: relative error {rel:.2e}"))?;
    }
    within(Duration::from_secs(60), t0)?;
    Ok(format!("10 seeds, worst relative error {worst:.2e}; {:.1?}", t0.elapsed()))
}

// ---------------------------------------------------------------- 3

fn permute_graph(points: &[ProjectedPoint], labels: &[usize], travel: &[Vec<f64>], start: usize, perm: &[usize]) -> RouteGraph {
    // new node k is old node perm[k]
    let pts: Vec<ProjectedPoint> = perm.iter().map(|&i| points[i]).collect();
    let lab: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let tr: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| travel[i][j]).collect()).collect();
    let new_start = perm.iter().position(|&i| i == start).unwrap();
    RouteGraph::from_points(&pts, lab, &tr, new_start).unwrap()
}

fn criterion_3() -> Outcome {
    let config = ModelConfig { hidden_dim: 16, dropout: 0.1 };
    let mut decodes = 0;
    let mut max_sum_err: f64 = 0.0;
    let mut max_equiv: f64 = 0.0;
    let mut params = lib(ModelParams::init(config, 0))?;
    for i in 0..500u64 {
        if i % 50 == 0 {
            params = lib(ModelParams::init(config, 7 + i))?;
        }
        let mut rng = seeded(derive_seed(31, i));
        let n = rng.random_range(2..=15);
        let points: Vec<ProjectedPoint> = (0..n)
            .map(|_| ProjectedPoint::new(rng.random_range(-4000.0..4000.0), rng.random_range(-4000.0..4000.0)))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
        let travel: Vec<Vec<f64>> = (0..n)
            .map(|a| (0..n).map(|b| if a == b { 0.0 } else { rng.random_range(10.0..900.0) }).collect())
            .collect();
        let start = rng.random_range(0..n);
        let g = RouteGraph::from_points(&points, labels.clone(), &travel, start).unwrap();
        for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
            let mut tape = Tape::new();
            let p = lib(params.bind(&mut tape))?;
            let mut drng = seeded(derive_seed(32, i));
            let e = lib(encode(&mut tape, &p, &g, Mode::Infer, &mut drng))?;
            let d = lib(decode(&mut tape, &p, e, start, mode, &mut drng))?;
            decodes += 1;
            ensure(is_tour_from(&d.tour, n, start), || format!("instance {i}: invalid tour {:?}", d.tour))?;
            ensure(d.step_log_probs.len() == n - 1, || format!("instance {i}: {} steps", d.step_log_probs.len()))?;
            for (step, row) in d.step_log_probs.iter().enumerate() {
                let total: f64 = row.iter().map(|v| v.exp()).sum();
                max_sum_err = max_sum_err.max((total - 1.0).abs());
                ensure((total - 1.0).abs() <= 1e-9, || format!("instance {i} step {step}: mass {total}"))?;
                for &v in &d.tour[..=step] {
                    ensure(row[v].exp() == 0.0, || format!("instance {i} step {step}: visited {v} has mass"))?;
                }
            }
        }
        if n >= 3 && i < 200 {
            let mut perm: Vec<usize> = (0..n).collect();
            for k in (1..n).rev() {
                perm.swap(k, rng.random_range(0..=k));
            }
            let pg = permute_graph(&points, &labels, &travel, start, &perm);
            let embed = |graph: &RouteGraph| -> zoneroute::Result<Tensor> {
                let mut tape = Tape::new();
                let p = params.bind(&mut tape)?;
                let e = encode(&mut tape, &p, graph, Mode::Infer, &mut seeded(0))?;
                Ok(tape.value(e).clone())
            };
            let (e0, e1) = (lib(embed(&g))?, lib(embed(&pg))?);
            for (k, &old) in perm.iter().enumerate() {
                for (a, b) in e1.row(k).iter().zip(e0.row(old)) {
                    max_equiv = max_equiv.max((a - b).abs());
                }
            }
            ensure(max_equiv <= 1e-9, || format!("instance {i}: equivariance error {max_equiv:.2e}"))?;
        }
    }
    Ok(format!(
        "{decodes} decodes valid; max |Σp − 1| {max_sum_err:.1e}; max equivariance error {max_equiv:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

/// Depth-first enumeration with left-to-right partial sums; visits orders in
/// lexicographic order and keeps the first strict improvement.
fn dfs_optimal(travel: &[Vec<f64>], start: usize, closed: bool) -> (Vec<usize>, f64) {
    struct Search<'a> {
        t: &'a [Vec<f64>],
        closed: bool,
        start: usize,
        path: Vec<usize>,
        used: Vec<bool>,
        best: Option<(Vec<usize>, f64)>,
    }
    impl Search<'_> {
        fn go(&mut self, acc: f64) {
            let n = self.t.len();
            let last = *self.path.last().unwrap();
            if self.path.len() == n {
                let total = if self.closed { acc + self.t[last][self.start] } else { acc };
                if self.best.as_ref().is_none_or(|(_, b)| total < *b) {
                    self.best = Some((self.path.clone(), total));
                }
                return;
            }
            for next in 0..n {
                if !self.used[next] {
                    self.used[next] = true;
                    self.path.push(next);
                    self.go(acc + self.t[last][next]);
                    self.path.pop();
                    self.used[next] = false;
                }
            }
        }
    }
    let mut used = vec![false; travel.len()];
    used[start] = true;
    let mut s = Search {
        t: travel,
        closed,
        start,
        path: vec![start],
        used,
        best: None,
    };
    s.go(0.0);
    s.best.unwrap()
}

fn criterion_4() -> Outcome {
    let mut gap_sum = 0.0;
    for i in 0..200u64 {
        let mut rng = seeded(derive_seed(44, i));
        let n = rng.random_range(4..=8);
        let start = rng.random_range(0..n);
        let t = random_matrix(n, derive_seed(45, i));
        let (bf_tour, bf) = lib(brute_force_optimal(&t, start, false))?;
        let nn = lib(nearest_neighbor(&t, start))?;
        let nn_len = lib(tour_length(&nn, &t, false))?;
        let two = lib(two_opt(&nn, &t))?;
        let two_len = lib(tour_length(&two, &t, false))?;
        ensure(is_tour_from(&two, n, start), || format!("instance {i}: invalid 2-opt tour"))?;
        ensure(bf <= two_len && two_len <= nn_len, || {
            format!("instance {i}: chain broken {bf} / {two_len} / {nn_len}")
        })?;
        for closed in [false, true] {
            let (a_tour, a) = lib(brute_force_optimal(&t, start, closed))?;
            let (b_tour, b) = dfs_optimal(&t, start, closed);
            ensure(a.to_bits() == b.to_bits() && a_tour == b_tour, || {
                format!("instance {i} closed={closed}: enumerators disagree {a} vs {b}")
            })?;
        }
        ensure(lib(tour_length(&bf_tour, &t, false))? == bf, || format!("instance {i}: length mismatch"))?;
        gap_sum += nn_len / bf - 1.0;
    }
    Ok(format!("200 instances; mean NN gap to optimum {:.1}%", 100.0 * gap_sum / 200.0))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let routes = lib(generate_synthetic(&SynthConfig::default()))?;
    ensure(routes.len() == 500 && routes.iter().all(|r| r.len() == 10), || "unexpected synthetic set".into())?;
    let cfg = TrainConfig::default();
    let trained = lib(train_general(&routes, &cfg))?;
    let mut rng = seeded(derive_seed(cfg.seed, 0x5eed));
    let (mut greedy, mut random, mut nn) = (0.0, 0.0, 0.0);
    for r in &routes {
        let start = lib(r.start())?;
        greedy += lib(infer_general(r, &trained.params))?.length;
        random += lib(tour_length(&lib(random_tour(r.len(), start, &mut rng))?, &r.travel, false))?;
        nn += lib(tour_length(&lib(nearest_neighbor(&r.travel, start))?, &r.travel, false))?;
    }
    let (vs_random, vs_nn) = (greedy / random, greedy / nn);
    ensure(vs_random <= 0.85 && vs_nn <= 1.25, || {
        format!("greedy/random {vs_random:.4}, greedy/NN {vs_nn:.4}")
    })?;
    within(Duration::from_secs(600), t0)?;
    Ok(format!(
        "greedy/random {vs_random:.4} (≤ 0.85), greedy/NN {vs_nn:.4} (≤ 1.25); {} epochs in {:.1?}",
        cfg.epochs,
        t0.elapsed()
    ))
}

// ---------------------------------------------------------------- 6

/// Directional metric of the K = 5 run, pinned from the first verified run:
/// (routes spanning ≥ 3 zones, general mean length, zoned mean length).
const PINNED_DIRECTIONAL: (usize, f64, f64) = (50, 6141.738322922796, 5158.32341845734);

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        hidden_dim: 16,
        ..TrainConfig::default()
    }
}

fn fit_zoning(routes: &[Route], k: usize) -> Result<Zoning, String> {
    let spec = GridSpec::new(lib(dataset_center(routes))?);
    lib(Zoning::fit(routes, 7, k, 0, &spec))
}

fn criterion_6() -> Outcome {
    // K = 1 under matched seed derivation
    let routes = lib(generate_synthetic(&SynthConfig {
        n_routes: 24,
        stops_min: 6,
        stops_max: 12,
        seed: 9,
        ..SynthConfig::default()
    }))?;
    let cfg = small_cfg();
    let z1 = fit_zoning(&routes, 1)?;
    let zoned = lib(train_zone_models(&routes, &z1, &cfg))?;
    let general = lib(train_general(&routes, &TrainConfig { seed: zone_seed(cfg.seed, 0), ..cfg }))?;
    ensure(zoned.set.models.len() == 1 && zoned.set.models[&0] == general.params, || {
        "K = 1 parameters differ from general training".into()
    })?;
    ensure(zoned.logs[&0] == general.log, || "K = 1 training logs differ".into())?;
    for r in &routes {
        let a = lib(infer_zoned(r, &zoned.set))?;
        let b = lib(infer_general(r, &general.params))?;
        ensure(a.tour == b.tour && a.length.to_bits() == b.length.to_bits() && a.log_prob.to_bits() == b.log_prob.to_bits(), || {
            format!("K = 1 inference differs on {}", r.id)
        })?;
    }

    // K = 5 on a three-neighbourhood metro
    let routes = lib(generate_synthetic(&SynthConfig {
        n_routes: 60,
        stops_min: 8,
        stops_max: 16,
        n_neighborhoods: 3,
        seed: 5,
        ..SynthConfig::default()
    }))?;
    let z5 = fit_zoning(&routes, 5)?;
    ensure(z5.k == 5, || format!("expected 5 zones, got {}", z5.k))?;
    let zt = lib(train_zone_models(&routes, &z5, &cfg))?;
    let gt = lib(train_general(&routes, &cfg))?;
    let mut gen_results = Vec::new();
    let mut zon_results = Vec::new();
    for r in &routes {
        let start = lib(r.start())?;
        let z = lib(infer_zoned(r, &zt.set))?;
        let g = lib(infer_general(r, &gt.params))?;
        for (name, res) in [("zoned", &z), ("general", &g)] {
            ensure(is_tour_from(&res.tour, r.len(), start), || format!("{name} tour invalid on {}", r.id))?;
            let mut recomputed = 0.0;
            for w in res.tour.windows(2) {
                recomputed += r.travel[w[0]][w[1]];
            }
            ensure(recomputed.to_bits() == res.length.to_bits(), || {
                format!("{name} length {} != recomputed {recomputed} on {}", res.length, r.id)
            })?;
        }
        gen_results.push(g);
        zon_results.push(z);
    }
    let gs = TourSet::from_results("general", &routes, &gen_results);
    let zs = TourSet::from_results("zoned", &routes, &zon_results);
    let report = lib(EvalReport::from_rows(lib(build_rows(&routes, &gs, &zs, &z5, false))?))?;
    ensure(report.rows.len() == routes.len(), || "report row count".into())?;
    for (row, (g, z)) in report.rows.iter().zip(gen_results.iter().zip(&zon_results)) {
        ensure(row.pred_general_s == g.length && row.pred_zoned_s == z.length, || {
            format!("report lengths differ on {}", row.route_id)
        })?;
    }
    let by_c: usize = report.by_clusters.iter().map(|b| b.routes).sum();
    let by_s: usize = report.by_stops.iter().map(|b| b.routes).sum();
    ensure(by_c == routes.len() && by_s == routes.len(), || "grouped reports do not partition the routes".into())?;
    ensure(report.by_clusters.len() == 4 && report.by_stops.len() == 7, || "unexpected bin layout".into())?;

    let d = report.directional;
    let (mg, mz) = (d.mean_general_s.unwrap_or(f64::NAN), d.mean_zoned_s.unwrap_or(f64::NAN));
    println!(
        "  directional metric: routes={} mean_general_s={mg:?} mean_zoned_s={mz:?} zoned_not_worse={:?}",
        d.routes, d.zoned_not_worse
    );
    let (pr, pg, pz) = PINNED_DIRECTIONAL;
    ensure(d.routes == pr && mg == pg && mz == pz, || {
        format!("directional metric moved from pinned ({pr}, {pg:?}, {pz:?})")
    })?;
    Ok(format!(
        "K = 1 bit-exact; K = 5: {} routes valid, MAPE general {:.2}% zoned {:.2}%, directional {}/{:.1}/{:.1}",
        routes.len(),
        report.general.mape,
        report.zoned.mape,
        d.routes,
        mg,
        mz
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let errors: Vec<f64> = (1..=10).map(f64::from).collect();
    let s = lib(error_stats(&errors))?;
    ensure(s.median == 5.5 && s.q25 == 3.25 && s.q75 == 7.75 && s.mean == 5.5, || format!("{s:?}"))?;
    ensure(s.min == 1.0 && s.max == 10.0 && s.q90 == 9.1, || format!("{s:?}"))?;

    // |110−100|/100 = 0.1, |150−200|/200 = 0.25, |400−400|/400 = 0 → 35/3 %
    let m = lib(mape(&[100.0, 200.0, 400.0], &[110.0, 150.0, 400.0]))?;
    ensure(m == 35.0 / 3.0, || format!("mape {m}"))?;

    let row = |id: &str, n: usize, c: usize, a: f64, g: f64, z: f64| ReportRow {
        route_id: id.into(),
        n_stops: n,
        clusters_visited: c,
        actual_s: a,
        pred_general_s: g,
        pred_zoned_s: z,
    };
    let rows = vec![
        row("a", 90, 1, 100.0, 150.0, 120.0),
        row("b", 105, 1, 200.0, 100.0, 220.0),
        row("c", 130, 3, 400.0, 800.0, 500.0),
        row("d", 250, 6, 50.0, 50.0, 25.0),
    ];
    let (bc, bs) = lib(group_reports(&rows))?;
    let counts: Vec<usize> = bc.iter().map(|b| b.routes).collect();
    ensure(counts == [2, 0, 1, 1], || format!("cluster bins {counts:?}"))?;
    ensure(bc[0].mean_actual_s == Some(150.0) && bc[0].mean_pred_general_s == Some(125.0), || format!("{:?}", bc[0]))?;
    // (0.5 + 0.5) / 2
    ensure(bc[0].mape_general == Some(50.0), || format!("{:?}", bc[0]))?;
    ensure(bc[1].mape_general.is_none() && bc[1].mean_actual_s.is_none(), || format!("{:?}", bc[1]))?;
    ensure(bc[3].mape_zoned == Some(50.0), || format!("{:?}", bc[3]))?;
    let scounts: Vec<usize> = bs.iter().map(|b| b.routes).collect();
    ensure(scounts == [1, 1, 1, 0, 0, 0, 1], || format!("stop bins {scounts:?}"))?;
    ensure(bs[2].mape_general == Some(100.0) && bs[2].mape_zoned == Some(25.0), || format!("{:?}", bs[2]))?;

    // aggregate MAPE equals the route-weighted mean of the grouped MAPEs
    let mut rng = seeded(77);
    let big: Vec<ReportRow> = (0..100)
        .map(|i| {
            let a = rng.random_range(1_000.0..50_000.0);
            row(
                &format!("r{i}"),
                rng.random_range(20..260),
                rng.random_range(1..8),
                a,
                a * rng.random_range(0.2..3.0),
                a * rng.random_range(0.2..3.0),
            )
        })
        .collect();
    let report = lib(EvalReport::from_rows(big.clone()))?;
    let mut worst: f64 = 0.0;
    for groups in [&report.by_clusters, &report.by_stops] {
        for (pick, overall) in [(0, report.general.mape), (1, report.zoned.mape)] {
            let weighted: f64 = groups
                .iter()
                .filter_map(|b| {
                    let m = if pick == 0 { b.mape_general } else { b.mape_zoned };
                    m.map(|m| m * b.routes as f64)
                })
                .sum::<f64>()
                / big.len() as f64;
            worst = worst.max((weighted - overall).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("MAPE identity off by {worst:.2e}"))?;
    Ok(format!("fixtures exact; 100-route MAPE identity within {worst:.1e}"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let spec = GridSpec::new(GeoPoint { lat: 34.05, lng: -118.25 });
    let sqrt7 = 7f64.sqrt();
    for res in 1..=MAX_RESOLUTION {
        let ratio = spec.edge_m(res - 1) / spec.edge_m(res);
        ensure((ratio - sqrt7).abs() <= 4.0 * f64::EPSILON * sqrt7, || format!("edge ratio {ratio} at {res}"))?;
        let area = spec.cell_area_m2(res - 1) / spec.cell_area_m2(res);
        ensure((area - 7.0).abs() <= 8.0 * f64::EPSILON * 7.0, || format!("area ratio {area} at {res}"))?;
    }
    for ((q, r), want) in [((2, 1), (1, 0)), ((-1, 3), (0, 1))] {
        for res in 1..=MAX_RESOLUTION {
            let p = lib(parent(lib(HexCellId::new(res, q, r))?))?;
            ensure((p.q, p.r) == want && p.resolution == res - 1, || format!("parent of ({q},{r}) is {p:?}"))?;
        }
    }
    let mut rng = seeded(88);
    for i in 0..100_000 {
        let res = rng.random_range(0..=MAX_RESOLUTION);
        let q = rng.random_range(-100_000i64..=100_000);
        let r = rng.random_range(-100_000i64..=100_000);
        let c = lib(HexCellId::new(res, q, r))?;
        ensure(lib(HexCellId::unpack(lib(c.pack())?))? == c, || format!("pack round trip {c:?}"))?;
        ensure(lib(cell_of(centroid(c, &spec), res, &spec))? == c, || format!("centroid round trip {c:?}"))?;
        if res >= 1 {
            // every coarse cell (a, b) sits at M·(a, b) on the finer lattice
            let (a, b) = (q / 8, r / 8);
            let child = lib(HexCellId::new(res, 2 * a - b, a + 3 * b))?;
            let p = lib(parent(child))?;
            ensure((p.q, p.r) == (a, b), || format!("sample {i}: parent of {child:?} is {p:?}"))?;
            let d = centroid(c, &spec).dist(&centroid(lib(parent(c))?, &spec));
            ensure(d <= spec.edge_m(res - 1) * (1.0 + 1e-12), || format!("{c:?} is {d} m from its parent"))?;
        }
    }
    within(Duration::from_secs(10), t0)?;
    Ok(format!("10^5 random cells exact; {:.1?}", t0.elapsed()))
}

// ---------------------------------------------------------------- 9

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run_cli(args: &[&str]) -> Result<(Vec<u8>, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_zoneroute"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("zoneroute {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })?;
    Ok((out.stdout, out.stderr))
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs the whole pipeline into `dir`; `jobs` only affects zoned training.
fn pipeline_run(dir: &Path, zoned_jobs: &str) -> Result<Vec<(Vec<u8>, Vec<u8>)>, String> {
    let f = fixtures();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let routes = dir.join("routes");
    let zones = dir.join("zones.json");
    let general = dir.join("general");
    let zoned = dir.join("zoned");
    let synth_cfg = f.join("synth20.toml");
    let train_cfg = f.join("train_small.toml");
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--config".into(), s(&synth_cfg), "--out".into(), s(&routes)],
        vec!["zones".into(), "--routes".into(), s(&routes), "--k".into(), "4".into(), "--out".into(), s(&zones)],
        vec![
            "train".into(), "--strategy".into(), "general".into(), "--routes".into(), s(&routes),
            "--config".into(), s(&train_cfg), "--out".into(), s(&general),
        ],
        vec![
            "--jobs".into(), zoned_jobs.into(), "train".into(), "--strategy".into(), "zoned".into(),
            "--routes".into(), s(&routes), "--zones".into(), s(&zones), "--config".into(), s(&train_cfg),
            "--out".into(), s(&zoned),
        ],
        vec![
            "infer".into(), "--strategy".into(), "general".into(), "--routes".into(), s(&routes),
            "--ckpt".into(), s(&general), "--out".into(), s(&dir.join("tours_general.json")),
        ],
        vec![
            "infer".into(), "--strategy".into(), "zoned".into(), "--routes".into(), s(&routes),
            "--ckpt".into(), s(&zoned), "--zones".into(), s(&zones), "--out".into(), s(&dir.join("tours_zoned.json")),
        ],
        vec![
            "eval".into(), "--routes".into(), s(&routes), "--tours-general".into(), s(&dir.join("tours_general.json")),
            "--tours-zoned".into(), s(&dir.join("tours_zoned.json")), "--zones".into(), s(&zones),
            "--out".into(), s(&dir.join("report.json")), "--csv".into(), s(&dir.join("report.csv")),
            "--plot-data".into(), s(&dir.join("plot.csv")),
        ],
    ];
    steps
        .iter()
        .map(|a| {
            let args: Vec<&str> = a.iter().map(String::as_str).collect();
            let (out, err) = run_cli(&args)?;
            // stderr may mention output paths, which differ between runs
            let err = String::from_utf8_lossy(&err).replace(dir.to_str().unwrap(), "<dir>").into_bytes();
            Ok((out, err))
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_a = pipeline_run(a.path(), "1")?;
    let out_b = pipeline_run(b.path(), "4")?;
    let names = ["synth", "zones", "train general", "train zoned", "infer general", "infer zoned", "eval"];
    for (name, (x, y)) in names.iter().zip(out_a.iter().zip(&out_b)) {
        ensure(x == y, || format!("{name}: console output differs"))?;
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    ensure(sa.keys().eq(sb.keys()), || "output file sets differ".into())?;
    for (path, bytes) in &sa {
        ensure(&sb[path] == bytes, || format!("{} differs", path.display()))?;
    }
    Ok(format!(
        "{} output files byte-identical across runs (zoned training at --jobs 1 vs --jobs 4)",
        sa.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", criterion_1),
        ("exact policy gradient", criterion_2),
        ("permutation and masking", criterion_3),
        ("oracle chain", criterion_4),
        ("learning signal", criterion_5),
        ("zone pipeline consistency", criterion_6),
        ("metrics exactness", criterion_7),
        ("grid invariants", criterion_8),
        ("cli determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {} ({name})", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {label}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {label}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
