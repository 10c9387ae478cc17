//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grad_suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sskd_core::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform values with magnitude in `[gap, hi)` and random sign, keeping
/// inputs away from the ReLU kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs `f` with every input as a trainable leaf; returns the scalar value
/// and the gradient of each input.
pub fn analytic<F>(inputs: &[Tensor], f: &F) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (tape.value(out).item().unwrap(), grads)
}

fn value_of<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item().unwrap()
}

/// Central differences of a scalar function of `inputs`.
pub fn numeric<F>(inputs: &[Tensor], f: &F, h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].numel())
                .map(|j| {
                    let x = inputs[i].data()[j];
                    work[i].data_mut()[j] = x + h;
                    let up = value_of(&work, f);
                    work[i].data_mut()[j] = x - h;
                    let down = value_of(&work, f);
                    work[i].data_mut()[j] = x;
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all gradient entries, 0 when both vanish.
pub fn rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.max(nb).sqrt();
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Relative error of the tape gradient against central differences.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, a) = analytic(inputs, &f);
    let n = numeric(inputs, &f, 1e-5);
    rel_err(&a, &n)
}

/// Reduces any output to a scalar with fixed weights so every output
/// element contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Brute-force retrieval scoring for one probe: each gallery item's rank is
/// the number of admissible items ordered before it (by distance, then
/// index), computed by pairwise comparison instead of sorting.
pub fn brute_force_query(
    dist: &[f64],
    pid: u64,
    pcam: u32,
    gids: &[u64],
    gcams: &[u32],
    filter: bool,
) -> Option<(usize, f64)> {
    let admissible = |g: usize| !(filter && gids[g] == pid && gcams[g] == pcam);
    let before = |a: usize, b: usize| dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
    let mut relevant: Vec<(usize, usize)> = (0..dist.len())
        .filter(|&g| admissible(g) && gids[g] == pid)
        .map(|g| {
            let rank = 1 + (0..dist.len()).filter(|&o| admissible(o) && before(o, g)).count();
            (rank, g)
        })
        .collect();
    if relevant.is_empty() {
        return None;
    }
    relevant.sort_unstable();
    let mut ap = 0.0;
    for (i, &(rank, _)) in relevant.iter().enumerate() {
        ap += (i + 1) as f64 / rank as f64;
    }
    Some((relevant[0].0, ap / relevant.len() as f64))
}

/// Brute-force CMC at `ks`, mAP, evaluated count and skipped count.
pub fn brute_force_eval(
    dist: &[Vec<f64>],
    pids: &[u64],
    pcams: &[u32],
    gids: &[u64],
    gcams: &[u32],
    filter: bool,
    ks: &[usize],
) -> (Vec<f64>, f64, usize, usize) {
    let scored: Vec<(usize, f64)> = dist
        .iter()
        .enumerate()
        .filter_map(|(q, row)| brute_force_query(row, pids[q], pcams[q], gids, gcams, filter))
        .collect();
    let n = scored.len();
    let cmc = ks
        .iter()
        .map(|&k| scored.iter().filter(|(r, _)| *r <= k).count() as f64 / n as f64)
        .collect();
    let map = scored.iter().map(|(_, ap)| ap).sum::<f64>() / n as f64;
    (cmc, map, n, dist.len() - n)
}

/// Small coarse embeddings with entries in {-1, 0, 1}, so exact distance
/// ties are common.
pub fn coarse_set(r: &mut ChaCha8Rng, n: usize, dim: usize, ids: u64, cams: u32) -> sskd_core::eval::EmbeddingSet {
    let rows = (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1i32..=1) as f64).collect();
            if v.iter().any(|&x| x != 0.0) {
                break v;
            }
        })
        .collect();
    let id = (0..n).map(|_| r.random_range(0..ids)).collect();
    let cam = (0..n).map(|_| r.random_range(0..cams)).collect();
    sskd_core::eval::EmbeddingSet::new(rows, id, cam).unwrap()
}

/// Runs `evaluate` against the brute-force oracle on `instances` random
/// problems with at most 8 probes and 8 gallery items. Returns the number
/// of instances with at least one scorable probe and a description of
/// every disagreement.
pub fn oracle_comparison(instances: u64) -> (usize, Vec<String>) {
    use sskd_core::eval::{distance_matrix, evaluate, RANKS};
    let mut evaluated = 0;
    let mut mismatches = Vec::new();
    for i in 0..instances {
        let mut r = rng(0xE7A1 + i);
        let (np, ng) = (r.random_range(1..=8), r.random_range(1..=8));
        let dim = r.random_range(2..=3);
        let ids = r.random_range(1..=4);
        let filter = r.random_bool(0.7);
        let p = coarse_set(&mut r, np, dim, ids, 2);
        let g = coarse_set(&mut r, ng, dim, ids, 3);
        let dist = distance_matrix(&p, &g).unwrap();
        let (cmc, map, n, skipped) =
            brute_force_eval(&dist, p.identities(), p.cameras(), g.identities(), g.cameras(), filter, &RANKS);
        match evaluate(&p, &g, filter) {
            Ok(res) => {
                evaluated += 1;
                let got: Vec<f64> = RANKS.iter().map(|k| res.rank_k[k]).collect();
                if got != cmc || res.map != map || (res.num_queries, res.skipped) != (n, skipped) {
                    mismatches.push(format!(
                        "instance {i}: cmc {got:?} vs {cmc:?}, mAP {} vs {map}, counts {:?} vs {:?}",
                        res.map,
                        (res.num_queries, res.skipped),
                        (n, skipped)
                    ));
                }
            }
            Err(_) if n == 0 => {}
            Err(e) => mismatches.push(format!("instance {i}: evaluate failed ({e}) but oracle scored {n} probes")),
        }
    }
    (evaluated, mismatches)
}

/// The retrieval example with true matches at ranks 1 and 3; its AP is
/// (1 + 2/3) / 2.
pub fn ap_hand_case() -> f64 {
    use sskd_core::eval::{evaluate, EmbeddingSet};
    let p = EmbeddingSet::new(vec![vec![1.0, 0.0]], vec![1], vec![0]).unwrap();
    let g = EmbeddingSet::new(
        vec![vec![1.0, 0.0], vec![0.9, 0.3], vec![0.5, 0.5], vec![0.0, 1.0]],
        vec![1, 2, 1, 2],
        vec![1, 1, 1, 1],
    )
    .unwrap();
    evaluate(&p, &g, true).unwrap().map
}
