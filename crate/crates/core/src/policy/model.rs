use rand::Rng as _;

use super::params::*;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::routegraph::{tour_length, RouteGraph, NODE_FEATURES};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    Infer,
}

/// How [`decode`] picks the next stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode<'a> {
    /// Argmax, lowest index on ties.
    Greedy,
    /// Draw from the step distribution.
    Sample,
    /// Replay a given tour and score it.
    Forced(&'a [usize]),
}

/// Edge weights laid out per (target, source) pair: entry `i·n + j` holds
/// the weight of `j → i`, zero on the diagonal.
fn edge_column(g: &RouteGraph) -> Result<Tensor> {
    let n = g.n;
    let mut col = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            col.push(if i == j { 0.0 } else { g.edge(j, i) });
        }
    }
    Tensor::from_vec(n * n, 1, col)
}

/// One single-head GATv2 layer over the complete digraph with self-loops.
///
/// `s_ij = aᵀ LeakyReLU(W_dst h_i + W_src h_j + W_edge e_ji)`, softmax over
/// sources `j`, output `h_i' = Σ_j α_ij W_src h_j`.
pub fn gatv2_layer(tape: &mut Tape, p: &Bound, layer: usize, h: Var, edges: Var) -> Result<Var> {
    let n = tape.value(h).rows();
    if tape.value(edges).shape() != (n * n, 1) {
        return Err(Error::domain("edge column does not match node count"));
    }
    let dst = tape.matmul(h, p.gat(layer, GAT_W_DST))?;
    let src = tape.matmul(h, p.gat(layer, GAT_W_SRC))?;
    let targets: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(n)).collect();
    let sources: Vec<usize> = (0..n).flat_map(|_| 0..n).collect();
    let di = tape.gather_rows(dst, &targets)?;
    let sj = tape.gather_rows(src, &sources)?;
    let e = tape.matmul(edges, p.gat(layer, GAT_W_EDGE))?;
    let pre = tape.add(di, sj)?;
    let pre = tape.add(pre, e)?;
    let act = tape.leaky_relu(pre, LEAKY_SLOPE)?;
    let scores = tape.matmul(act, p.gat(layer, GAT_ATT))?;
    let scores = tape.reshape(scores, n, n)?;
    let log_alpha = tape.masked_log_softmax(scores, &vec![true; n * n])?;
    let alpha = tape.exp(log_alpha)?;
    tape.matmul(alpha, src)
}

/// Node embeddings, `n × hidden_dim`.
pub fn encode(tape: &mut Tape, p: &Bound, g: &RouteGraph, mode: Mode, rng: &mut Rng) -> Result<Var> {
    let feats = tape.leaf(Tensor::from_vec(g.n, NODE_FEATURES, g.features.clone())?)?;
    let zones = tape.gather_rows(p.get(ZONE_EMBED), &g.zone_label_idx)?;
    let mut h = tape.concat_cols(feats, zones)?;
    let edges = tape.leaf(edge_column(g)?)?;
    for layer in 0..GAT_LAYERS {
        if layer > 0 {
            h = tape.elu(h)?;
            h = tape.dropout(h, p.config.dropout, mode == Mode::Train, rng)?;
        }
        h = gatv2_layer(tape, p, layer, h, edges)?;
        h = tape.layer_norm(h, p.gat(layer, GAT_LN_GAIN), p.gat(layer, GAT_LN_BIAS))?;
    }
    Ok(h)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `LN(FC2(ReLU(FC1(x))))` for one pointer branch.
fn branch(tape: &mut Tape, p: &Bound, x: Var, fc1: (usize, usize), fc2: (usize, usize), ln: (usize, usize)) -> Result<Var> {
    let y = linear(tape, x, p.get(fc1.0), p.get(fc1.1))?;
    let y = tape.relu(y)?;
    let y = linear(tape, y, p.get(fc2.0), p.get(fc2.1))?;
    tape.layer_norm(y, p.get(ln.0), p.get(ln.1))
}

/// Key rows for every node; computed once per decode.
pub fn pointer_keys(tape: &mut Tape, p: &Bound, emb: Var) -> Result<Var> {
    branch(tape, p, emb, (FC1_K_W, FC1_K_B), (FC2_K_W, FC2_K_B), (LN_K_GAIN, LN_K_BIAS))
}

/// Log-probabilities (`1 × n`) of the next stop given GRU state `h`.
///
/// `u_j = vᵀ tanh(q + k_j)`; visited nodes get probability 0.
pub fn pointer_step(tape: &mut Tape, p: &Bound, h: Var, keys: Var, visited: &[bool]) -> Result<Var> {
    let n = tape.value(keys).rows();
    if visited.len() != n {
        return Err(Error::domain("visited mask does not match node count"));
    }
    if visited.iter().all(|&v| v) {
        return Err(Error::domain("pointer step with every node visited"));
    }
    let q = branch(tape, p, h, (FC1_Q_W, FC1_Q_B), (FC2_Q_W, FC2_Q_B), (LN_Q_GAIN, LN_Q_BIAS))?;
    let s = tape.add_row(keys, q)?;
    let s = tape.tanh(s)?;
    let logits = tape.matmul(s, p.get(SCORE_V))?;
    let logits = tape.reshape(logits, 1, n)?;
    let mask: Vec<bool> = visited.iter().map(|v| !v).collect();
    tape.masked_log_softmax(logits, &mask)
}

/// `h' = (1 − z) ∘ ñ + z ∘ h`.
pub fn gru_cell(tape: &mut Tape, p: &Bound, h: Var, x: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, w, u, b, hh: Var| -> Result<Var> {
        let a = tape.matmul(x, p.get(w))?;
        let c = tape.matmul(hh, p.get(u))?;
        let s = tape.add(a, c)?;
        tape.add_row(s, p.get(b))
    };
    let z = gate(tape, W_Z, U_Z, B_Z, h)?;
    let z = tape.sigmoid(z)?;
    let r = gate(tape, W_R, U_R, B_R, h)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let cand = gate(tape, W_H, U_H, B_H, rh)?;
    let cand = tape.tanh(cand)?;
    let diff = tape.sub(h, cand)?;
    let zd = tape.mul(z, diff)?;
    tape.add(cand, zd)
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub tour: Vec<usize>,
    /// Sum of the chosen stops' log-probabilities, on the tape.
    pub log_prob: Var,
    /// Full step distributions (log-probabilities), one row per choice.
    pub step_log_probs: Vec<Vec<f64>>,
}

/// Outcome of decoding one route.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tour: Vec<usize>,
    pub log_prob: f64,
    /// Open-path travel time in seconds.
    pub length: f64,
}

impl Decoded {
    pub fn result(&self, tape: &Tape, travel: &[Vec<f64>]) -> Result<DecodeResult> {
        Ok(DecodeResult {
            tour: self.tour.clone(),
            log_prob: tape.value(self.log_prob).item(),
            length: tour_length(&self.tour, travel, false)?,
        })
    }
}

fn sample_index(log_probs: &[f64], visited: &[bool], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &lp) in log_probs.iter().enumerate() {
        if visited[j] {
            continue;
        }
        acc += lp.exp();
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

/// Builds a tour from `start` one pointer step at a time.
pub fn decode(tape: &mut Tape, p: &Bound, emb: Var, start: usize, mode: DecodeMode<'_>, rng: &mut Rng) -> Result<Decoded> {
    let n = tape.value(emb).rows();
    if start >= n {
        return Err(Error::domain(format!("start {start} outside {n} nodes")));
    }
    if let DecodeMode::Forced(t) = mode {
        crate::routegraph::check_permutation(t, n)?;
        if t[0] != start {
            return Err(Error::domain("forced tour does not begin at the start node"));
        }
    }
    let mut log_prob = tape.leaf(Tensor::scalar(0.0))?;
    let mut tour = vec![start];
    let mut steps = Vec::with_capacity(n.saturating_sub(1));
    if n == 1 {
        return Ok(Decoded {
            tour,
            log_prob,
            step_log_probs: steps,
        });
    }
    let keys = pointer_keys(tape, p, emb)?;
    let pooled = tape.mean_rows(emb)?;
    let h0 = tape.matmul(pooled, p.get(W_INIT))?;
    let mut h = tape.tanh(h0)?;
    let mut visited = vec![false; n];
    visited[start] = true;
    let mut last = start;
    for step in 1..n {
        let x = tape.gather_rows(emb, &[last])?;
        h = gru_cell(tape, p, h, x)?;
        let lp = pointer_step(tape, p, h, keys, &visited)?;
        let row = tape.value(lp).data().to_vec();
        let next = match mode {
            DecodeMode::Greedy => {
                let mut best = usize::MAX;
                for j in 0..n {
                    if !visited[j] && (best == usize::MAX || row[j] > row[best]) {
                        best = j;
                    }
                }
                best
            }
            DecodeMode::Sample => sample_index(&row, &visited, rng),
            DecodeMode::Forced(t) => t[step],
        };
        let chosen = tape.pick(lp, 0, next)?;
        log_prob = tape.add(log_prob, chosen)?;
        visited[next] = true;
        tour.push(next);
        steps.push(row);
        last = next;
    }
    Ok(Decoded {
        tour,
        log_prob,
        step_log_probs: steps,
    })
}

/// `mean_i (L_i − b) · log p_i`, with the advantages held constant.
pub fn reinforce_loss(tape: &mut Tape, samples: &[(Var, f64)], baseline: f64) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::domain("REINFORCE loss of an empty batch"));
    }
    if !baseline.is_finite() || samples.iter().any(|(_, l)| !l.is_finite()) {
        return Err(Error::numeric("non-finite tour length or baseline"));
    }
    let k = 1.0 / samples.len() as f64;
    let mut loss = tape.leaf(Tensor::scalar(0.0))?;
    for &(lp, len) in samples {
        let term = tape.scale(lp, (len - baseline) * k)?;
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Greedy decode of a whole graph in inference mode.
pub fn greedy_decode(params: &ModelParams, g: &RouteGraph, travel: &[Vec<f64>]) -> Result<DecodeResult> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape)?;
    // inference mode never draws from the rng
    let mut rng = crate::rng::seeded(0);
    let emb = encode(&mut tape, &p, g, Mode::Infer, &mut rng)?;
    let d = decode(&mut tape, &p, emb, g.start, DecodeMode::Greedy, &mut rng)?;
    d.result(&tape, travel)
}
