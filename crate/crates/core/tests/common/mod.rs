//! Brute-force and finite-difference oracles shared by the integration tests.
#![allow(dead_code)]

use gtool_core::embed::AttrVector;
use gtool_core::gnn::{self, EncoderConfig, EncoderParams};
use gtool_core::lmbridge::{self, MockLm};
use gtool_core::toolgraph::{self, EdgeLabel, RequestToolGraph, ToolGraph};
use ndarray::{Array1, Array2};
use rand::Rng;

pub const FD_EPS: f64 = 1e-4;
/// Denominator floor so entries that are zero up to rounding do not blow up
/// the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Consecutive distinct pairs of every trajectory, sorted and deduplicated
/// without any set type.
pub fn brute_edges(trajectories: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in trajectories {
        for k in 0..t.len().saturating_sub(1) {
            if t[k] != t[k + 1] {
                out.push((t[k], t[k + 1]));
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn distinct<T: PartialEq + Clone>(v: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in v {
        if !out.contains(x) {
            out.push(x.clone());
        }
    }
    out
}

/// Set F1 computed by linear scans.
pub fn brute_set_f1<T: PartialEq + Clone>(pred: &[T], gt: &[T]) -> f64 {
    let p = distinct(pred);
    let g = distinct(gt);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let hits = p.iter().filter(|x| g.contains(x)).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (hits / p.len() as f64, hits / g.len() as f64);
    2.0 * precision * recall / (precision + recall)
}

pub fn brute_pairs<T: Clone>(t: &[T]) -> Vec<(T, T)> {
    t.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}

/// Full-table Levenshtein distance.
pub fn brute_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.gen_range(-scale..scale))
}

pub fn random_tool_graph<R: Rng>(rng: &mut R, n: usize, attr_dim: usize, p: f64) -> ToolGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    ToolGraph::new(random_matrix(rng, n, attr_dim, 1.0), edges).unwrap()
}

pub fn random_request_graph<R: Rng>(rng: &mut R, n: usize, attr_dim: usize) -> RequestToolGraph {
    let g = random_tool_graph(rng, n, attr_dim, 0.3);
    let q = AttrVector(random_vector(rng, attr_dim, 1.0).to_vec());
    toolgraph::augment_with_attr(&g, "request", &q).unwrap()
}

pub fn small_encoder(attr_dim: usize, hidden_dim: usize, lm_dim: usize, seed: u64) -> EncoderParams {
    let cfg = EncoderConfig { attr_dim, hidden_dim, lm_dim, layers: 3, seed };
    gnn::init_params(&cfg).unwrap()
}

/// Central-difference check of `sum(upstream ⊙ encode(gq))` against the
/// reverse-mode gradient for every parameter and attribute entry. Returns the
/// maximum relative error.
pub fn encoder_fd_error(gq: &RequestToolGraph, params: &EncoderParams, upstream: &Array2<f64>) -> f64 {
    let f = |p: &EncoderParams, g: &RequestToolGraph| -> f64 {
        (&gnn::encode(g, p).unwrap().h * upstream).sum()
    };
    let grads = gnn::backward(gq, params, upstream).unwrap();
    let mut worst = 0.0f64;

    let analytic: Vec<f64> = grads.params.flat().into_iter().flatten().copied().collect();
    let mut probe = params.clone();
    let mut k = 0;
    let sizes: Vec<usize> = params.flat().iter().map(|s| s.len()).collect();
    for (t, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let orig = probe.flat()[t][i];
            probe.flat_mut()[t][i] = orig + FD_EPS;
            let up = f(&probe, gq);
            probe.flat_mut()[t][i] = orig - FD_EPS;
            let down = f(&probe, gq);
            probe.flat_mut()[t][i] = orig;
            worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * FD_EPS)));
            k += 1;
        }
    }

    let attrs = gq.graph.attrs().clone();
    for ((r, c), &a) in grads.attrs.indexed_iter() {
        let bump = |delta: f64| {
            let mut m = attrs.clone();
            m[[r, c]] += delta;
            let g = RequestToolGraph {
                graph: ToolGraph::new(m, gq.graph.edges().iter().copied()).unwrap(),
                request_text: gq.request_text.clone(),
            };
            f(params, &g)
        };
        let numeric = (bump(FD_EPS) - bump(-FD_EPS)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(a, numeric));
    }
    worst
}

/// Central-difference check of both slot gradients of the yes/no loss.
pub fn label_fd_error(lm: &MockLm, a: &Array1<f64>, b: &Array1<f64>, names: (&str, &str), label: EdgeLabel) -> f64 {
    let loss = |a: &Array1<f64>, b: &Array1<f64>| {
        lm.label_loss(&lmbridge::render_mdpl_prompt(a.view(), b.view(), names), label)
            .unwrap()
            .loss
    };
    let score = lm
        .label_loss(&lmbridge::render_mdpl_prompt(a.view(), b.view(), names), label)
        .unwrap();
    let mut worst = 0.0f64;
    for slot in 0..2 {
        for i in 0..a.len() {
            let (mut ap, mut bp) = (a.clone(), b.clone());
            let (mut am, mut bm) = (a.clone(), b.clone());
            if slot == 0 {
                ap[i] += FD_EPS;
                am[i] -= FD_EPS;
            } else {
                bp[i] += FD_EPS;
                bm[i] -= FD_EPS;
            }
            let numeric = (loss(&ap, &bp) - loss(&am, &bm)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(score.slot_grads[slot][i], numeric));
        }
    }
    worst
}

/// Central-difference check of the graph-slot gradient of the sequence loss.
pub fn sequence_fd_error(lm: &MockLm, names: &[&str], request: &str, g: &Array1<f64>, target: &[String]) -> f64 {
    let loss = |g: &Array1<f64>| {
        lm.sequence_loss(&lmbridge::render_plan_prompt(names, request, g.view()), target)
            .unwrap()
            .loss
    };
    let score = lm
        .sequence_loss(&lmbridge::render_plan_prompt(names, request, g.view()), target)
        .unwrap();
    let mut worst = 0.0f64;
    for i in 0..g.len() {
        let (mut up, mut down) = (g.clone(), g.clone());
        up[i] += FD_EPS;
        down[i] -= FD_EPS;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(score.slot_grads[0][i], numeric));
    }
    worst
}
