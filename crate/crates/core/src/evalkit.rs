//! Inference pipeline, planning metrics, reports, robustness sweeps and
//! link-prediction accuracy.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Request, ToolCatalog};
use crate::embed::{AttrVector, Embedder};
use crate::error::{Error, Result};
use crate::gnn::{self, EncoderConfig, EncoderParams};
use crate::lmbridge::{self, LanguageModel, MockLm};
use crate::toolgraph::{self, EdgeLabel, MaskPlan, ToolGraph};
use crate::trainer::{self, Ablation, GraphToken, TrainConfig, TrainReport};

fn set_f1<T: Ord>(pred: &BTreeSet<T>, gt: &BTreeSet<T>) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hits = pred.intersection(gt).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let precision = hits / pred.len() as f64;
    let recall = hits / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// F1 over the sets of tools named by each trajectory.
pub fn node_f1<T: Ord + Clone>(pred: &[T], gt: &[T]) -> f64 {
    let p: BTreeSet<T> = pred.iter().cloned().collect();
    let g: BTreeSet<T> = gt.iter().cloned().collect();
    set_f1(&p, &g)
}

fn consecutive_pairs<T: Ord + Clone>(t: &[T]) -> BTreeSet<(T, T)> {
    t.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
}

/// F1 over consecutive-pair edges of each trajectory. Repeated calls of the
/// same tool count as a pair here, unlike in graph construction.
pub fn link_f1<T: Ord + Clone>(pred: &[T], gt: &[T]) -> f64 {
    set_f1(&consecutive_pairs(pred), &consecutive_pairs(gt))
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance divided by the longer length; lower is better.
pub fn ned<T: PartialEq>(pred: &[T], gt: &[T]) -> f64 {
    let longest = pred.len().max(gt.len());
    if longest == 0 {
        return 0.0;
    }
    edit_distance(pred, gt) as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub request_id: String,
    pub predicted: Vec<String>,
    pub ground_truth: Vec<String>,
    pub raw_text: String,
    pub prompt_tokens: usize,
    pub latency_secs: f64,
}

/// Everything needed to plan for a request.
pub struct Planner<'a> {
    pub catalog: &'a ToolCatalog,
    /// Tool graph built from training trajectories.
    pub graph: &'a ToolGraph,
    pub params: &'a EncoderParams,
    pub lm: &'a dyn LanguageModel,
    pub embedder: &'a dyn Embedder,
    pub ablation: Ablation,
    pub max_len: usize,
}

impl Planner<'_> {
    pub fn plan(&self, request: &Request) -> Result<PlanResult> {
        let started = Instant::now();
        let names = self.catalog.names();
        let prompt = match self.ablation.graph_token() {
            GraphToken::None => lmbridge::render_plain_plan_prompt(&names, &request.text),
            token => {
                let attr = self.embedder.embed_text(&request.text)?;
                let gq = toolgraph::augment_with_attr(self.graph, &request.text, &attr)?;
                let reps = gnn::encode(&gq, self.params)?;
                let rep = match token {
                    GraphToken::RequestNode => reps.graph_rep().to_owned(),
                    _ => reps.mean_tool_rep(),
                };
                let g = gnn::project_to_lm(rep.view(), self.params);
                lmbridge::render_plan_prompt(&names, &request.text, g.view())
            }
        };
        let raw_text = self.lm.generate(&prompt, self.max_len)?;
        Ok(PlanResult {
            request_id: request.id.clone(),
            predicted: lmbridge::parse_trajectory(&raw_text, self.catalog),
            ground_truth: request.trajectory.clone(),
            raw_text,
            prompt_tokens: lmbridge::count_tokens(&prompt),
            latency_secs: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub request_id: String,
    pub n_f1: f64,
    pub l_f1: f64,
    pub ned: f64,
    pub prompt_tokens: usize,
    pub latency_secs: f64,
    pub predicted: Vec<String>,
    pub ground_truth: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ablation: Ablation,
    pub mask_ratio: f64,
    pub n_f1: f64,
    pub l_f1: f64,
    pub ned: f64,
    pub mean_prompt_tokens: f64,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    fn from_rows(mut rows: Vec<MetricsRow>, ablation: Ablation, mask_ratio: f64) -> Self {
        rows.sort_by(|a, b| a.request_id.cmp(&b.request_id));
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            ablation,
            mask_ratio,
            n_f1: mean(|r| r.n_f1),
            l_f1: mean(|r| r.l_f1),
            ned: mean(|r| r.ned),
            mean_prompt_tokens: mean(|r| r.prompt_tokens as f64),
            rows,
        }
    }

    /// Zeroes timing fields so reruns produce identical files.
    pub fn without_timings(mut self) -> Self {
        self.rows.iter_mut().for_each(|r| r.latency_secs = 0.0);
        self
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tn_f1\tl_f1\tned\tprompt_tokens\tlatency\n");
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}",
                r.request_id, r.n_f1, r.l_f1, r.ned, r.prompt_tokens, r.latency_secs
            )
            .unwrap();
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.tsv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        std::fs::write(dir.join(format!("{stem}.tsv")), self.to_tsv())?;
        Ok(())
    }
}

fn score_row(result: PlanResult) -> MetricsRow {
    MetricsRow {
        n_f1: node_f1(&result.predicted, &result.ground_truth),
        l_f1: link_f1(&result.predicted, &result.ground_truth),
        ned: ned(&result.predicted, &result.ground_truth),
        request_id: result.request_id,
        prompt_tokens: result.prompt_tokens,
        latency_secs: result.latency_secs,
        predicted: result.predicted,
        ground_truth: result.ground_truth,
        error: None,
    }
}

fn failed_row(request: &Request, err: &Error) -> MetricsRow {
    let empty: Vec<String> = Vec::new();
    MetricsRow {
        request_id: request.id.clone(),
        n_f1: node_f1(&empty, &request.trajectory),
        l_f1: link_f1(&empty, &request.trajectory),
        ned: ned(&empty, &request.trajectory),
        prompt_tokens: 0,
        latency_secs: 0.0,
        predicted: empty,
        ground_truth: request.trajectory.clone(),
        error: Some(err.to_string()),
    }
}

/// Plans every request (in parallel) and aggregates the metrics. Failures
/// become rows scored against an empty prediction.
pub fn evaluate(split: &[Request], planner: &Planner<'_>) -> MetricsReport {
    evaluate_with_ratio(split, planner, 0.0)
}

pub fn evaluate_with_ratio(split: &[Request], planner: &Planner<'_>, mask_ratio: f64) -> MetricsReport {
    let rows: Vec<MetricsRow> = split
        .par_iter()
        .map(|r| match planner.plan(r) {
            Ok(result) => score_row(result),
            Err(e) => failed_row(r, &e),
        })
        .collect();
    MetricsReport::from_rows(rows, planner.ablation, mask_ratio)
}

/// One point of a robustness sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub removed_edges: usize,
    pub report: MetricsReport,
    pub train: TrainReport,
}

/// Seed of the edge-deletion draw for a sweep ratio.
pub fn deletion_seed(run_seed: u64, ratio: f64) -> u64 {
    trainer::epoch_seed(run_seed, (ratio * 1e6).round() as usize, 0x6465_6c65)
}

/// For each ratio, deletes that fraction of train-graph edges, trains on the
/// incomplete graph and evaluates the test split on it.
pub fn robustness_sweep(
    ds: &Dataset,
    cfg: &TrainConfig,
    encoder: &EncoderConfig,
    embedder: &dyn Embedder,
    lm: &MockLm,
    ratios: &[f64],
) -> Result<Vec<SweepPoint>> {
    let trajectories: Vec<Vec<String>> = ds.train.iter().map(|r| r.trajectory.clone()).collect();
    let full = toolgraph::build_tool_graph(&ds.catalog, &trajectories, embedder)?;
    ratios
        .iter()
        .map(|&ratio| {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(deletion_seed(cfg.seed, ratio));
            let removed = MaskPlan::fraction(&full, ratio, &mut rng);
            let graph = full.without_edges(&removed.masked);
            let (params, train) = trainer::train_on_graph(ds, &graph, cfg, encoder, embedder, lm)?;
            let planner = Planner {
                catalog: &ds.catalog,
                graph: &graph,
                params: &params,
                lm,
                embedder,
                ablation: cfg.ablation,
                max_len: cfg.max_len,
            };
            Ok(SweepPoint {
                ratio,
                removed_edges: removed.masked.len(),
                report: evaluate_with_ratio(&ds.test, &planner, ratio),
                train,
            })
        })
        .collect()
}

/// Link-prediction outcome over a balanced candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl LinkAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn merge(self, other: LinkAccuracy) -> LinkAccuracy {
        LinkAccuracy {
            correct: self.correct + other.correct,
            total: self.total + other.total,
        }
    }
}

/// Masks `plan` out of `graph`, samples a balanced candidate set of up to
/// `alpha_eval` pairs per label, and scores argmax yes/no predictions.
pub fn mdpl_accuracy<R: Rng + ?Sized>(
    catalog: &ToolCatalog,
    graph: &ToolGraph,
    plan: &MaskPlan,
    params: &EncoderParams,
    lm: &MockLm,
    alpha_eval: usize,
    rng: &mut R,
) -> Result<LinkAccuracy> {
    let sample = toolgraph::sample_candidates(graph, plan, alpha_eval, rng)?;
    let masked = graph.without_edges(&plan.masked);
    // Tool-node representations never depend on the request node.
    let blank = AttrVector(vec![0.0; graph.attr_dim()]);
    let gq = toolgraph::augment_with_attr(&masked, "", &blank)?;
    let reps = gnn::encode(&gq, params)?;
    let names = catalog.names();
    let mut correct = 0;
    for c in sample.iter() {
        let pi = gnn::project_to_lm(reps.h.row(c.source), params);
        let pj = gnn::project_to_lm(reps.h.row(c.target), params);
        let prompt = lmbridge::render_mdpl_prompt(pi.view(), pj.view(), (names[c.source], names[c.target]));
        let (yes, no) = lm.label_probs(&prompt)?;
        let predicted = if yes >= no { EdgeLabel::Yes } else { EdgeLabel::No };
        correct += usize::from(predicted == c.label);
    }
    Ok(LinkAccuracy {
        correct,
        total: sample.len(),
    })
}

/// Pools [`mdpl_accuracy`] over `rounds` fresh masks drawn with `rho`.
/// Rounds whose mask is empty are skipped.
#[allow(clippy::too_many_arguments)]
pub fn mdpl_accuracy_rounds(
    catalog: &ToolCatalog,
    graph: &ToolGraph,
    params: &EncoderParams,
    lm: &MockLm,
    rho: f64,
    alpha_eval: usize,
    rounds: usize,
    seed: u64,
) -> Result<LinkAccuracy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = LinkAccuracy { correct: 0, total: 0 };
    for _ in 0..rounds {
        let plan = MaskPlan::sample(graph, rho, &mut rng);
        match mdpl_accuracy(catalog, graph, &plan, params, lm, alpha_eval, &mut rng) {
            Ok(a) => acc = acc.merge(a),
            Err(Error::NoPositives) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(acc)
}
