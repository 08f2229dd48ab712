//! Joint training of the encoder on the planning loss and the
//! missing-dependency loss, `L = L_plan + lambda * L_mdpl`.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Request};
use crate::embed::{AttrVector, Embedder};
use crate::error::{Error, Result};
use crate::evalkit::{self, Planner};
use crate::gnn::{self, EncoderConfig, EncoderParams};
use crate::lmbridge::{self, MockLm};
use crate::toolgraph::{self, CandidateSample, MaskPlan, ToolGraph};

pub use crate::gnn::{load_checkpoint, load_checkpoint_for, save_checkpoint};

/// The five model variants compared in ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Graph token is the mean of tool-node representations.
    NoRs,
    /// No masking and no missing-dependency loss.
    NoMdpl,
    NoBoth,
    /// No graph token at all.
    NoAll,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoRs,
        Ablation::NoMdpl,
        Ablation::NoBoth,
        Ablation::NoAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRs => "no_rs",
            Ablation::NoMdpl => "no_mdpl",
            Ablation::NoBoth => "no_both",
            Ablation::NoAll => "no_all",
        }
    }

    pub fn uses_mdpl(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoRs)
    }

    pub fn graph_token(self) -> GraphToken {
        match self {
            Ablation::Full | Ablation::NoMdpl => GraphToken::RequestNode,
            Ablation::NoRs | Ablation::NoBoth => GraphToken::MeanOfTools,
            Ablation::NoAll => GraphToken::None,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphToken {
    RequestNode,
    MeanOfTools,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: usize,
    pub rho: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Consecutive epochs with validation n-F1 below the best so far before
    /// stopping. A tie replaces the kept snapshot with the newer parameters.
    pub patience: usize,
    /// Early stopping is not considered before this many epochs.
    pub min_epochs: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 4,
            rho: 0.1,
            epochs: 120,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            ablation: Ablation::Full,
            patience: 3,
            min_epochs: 90,
            max_len: lmbridge::DEFAULT_MAX_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.alpha < 1 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Masking and the missing-dependency loss only run when they can matter.
    pub fn mdpl_active(&self) -> bool {
        self.ablation.uses_mdpl() && self.lambda > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_plan_loss: f64,
    pub mean_mdpl_loss: f64,
    pub mean_total_loss: f64,
    pub masked_edges: usize,
    pub mdpl_steps: usize,
    pub val_n_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub ablation: Ablation,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLoss {
    pub plan: f64,
    pub mdpl: f64,
    pub total: f64,
    /// False when no candidate sample was available (loss term is zero).
    pub mdpl_used: bool,
}

/// Everything one gradient step needs about a request.
pub struct StepInput<'a> {
    pub request: &'a Request,
    pub request_attr: &'a AttrVector,
    /// Tool graph with the epoch's masked edges removed.
    pub graph: &'a ToolGraph,
    pub sample: Option<&'a CandidateSample>,
}

/// Loss and exact gradient of one step, without updating anything.
pub fn step_loss_and_grads(
    input: &StepInput<'_>,
    tool_names: &[&str],
    params: &EncoderParams,
    cfg: &TrainConfig,
    lm: &MockLm,
) -> Result<(StepLoss, EncoderParams)> {
    let mut grads = params.zeros_like();
    let text = input.request.text.as_str();

    let token = cfg.ablation.graph_token();
    if token == GraphToken::None {
        let prompt = lmbridge::render_plain_plan_prompt(tool_names, text);
        let score = lm.sequence_loss(&prompt, &input.request.trajectory)?;
        let loss = StepLoss {
            plan: score.loss,
            mdpl: 0.0,
            total: score.loss,
            mdpl_used: false,
        };
        return Ok((loss, grads));
    }

    let gq = toolgraph::augment_with_attr(input.graph, text, input.request_attr)?;
    let trace = gnn::encode_traced(&gq, params)?;
    let h = &trace.reps().h;
    let n = gq.n_tools();
    let mut d_h = Array2::<f64>::zeros(h.raw_dim());

    let rep = match token {
        GraphToken::RequestNode => h.row(n).to_owned(),
        _ => trace.reps().mean_tool_rep(),
    };
    let g = gnn::project_to_lm(rep.view(), params);
    let prompt = lmbridge::render_plan_prompt(tool_names, text, g.view());
    let plan = lm.sequence_loss(&prompt, &input.request.trajectory)?;
    let d_rep = gnn::project_backward(rep.view(), plan.slot_grads[0].view(), params, &mut grads);
    match token {
        GraphToken::RequestNode => d_h.row_mut(n).scaled_add(1.0, &d_rep),
        _ if n > 0 => {
            for i in 0..n {
                d_h.row_mut(i).scaled_add(1.0 / n as f64, &d_rep);
            }
        }
        _ => {}
    }

    let mut mdpl = 0.0;
    let mut mdpl_used = false;
    if let (true, Some(sample)) = (cfg.mdpl_active(), input.sample) {
        if !sample.is_empty() {
            mdpl_used = true;
            let weight = cfg.lambda / sample.len() as f64;
            for c in sample.iter() {
                let (ri, rj) = (h.row(c.source), h.row(c.target));
                let pi = gnn::project_to_lm(ri, params);
                let pj = gnn::project_to_lm(rj, params);
                let prompt = lmbridge::render_mdpl_prompt(
                    pi.view(),
                    pj.view(),
                    (tool_names[c.source], tool_names[c.target]),
                );
                let score = lm.label_loss(&prompt, c.label)?;
                mdpl += score.loss / sample.len() as f64;
                let gi = &score.slot_grads[0] * weight;
                let gj = &score.slot_grads[1] * weight;
                let di = gnn::project_backward(ri, gi.view(), params, &mut grads);
                let dj = gnn::project_backward(rj, gj.view(), params, &mut grads);
                d_h.row_mut(c.source).scaled_add(1.0, &di);
                d_h.row_mut(c.target).scaled_add(1.0, &dj);
            }
        }
    }

    let enc = trace.backward(params, &d_h)?;
    grads.add_scaled(&enc.params, 1.0);
    let loss = StepLoss {
        plan: plan.loss,
        mdpl,
        total: plan.loss + cfg.lambda * mdpl,
        mdpl_used,
    };
    Ok((loss, grads))
}

/// Adam optimizer state over the full parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    m: EncoderParams,
    v: EncoderParams,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &EncoderParams, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .flat_mut()
            .into_iter()
            .zip(grads.flat())
            .zip(self.m.flat_mut())
            .zip(self.v.flat_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Parameters plus optimizer state.
pub struct TrainState {
    pub params: EncoderParams,
    pub adam: Adam,
}

/// One optimizer step on a single request.
pub fn train_step(
    state: &mut TrainState,
    input: &StepInput<'_>,
    tool_names: &[&str],
    cfg: &TrainConfig,
    lm: &MockLm,
) -> Result<StepLoss> {
    let (loss, grads) = step_loss_and_grads(input, tool_names, &state.params, cfg, lm)?;
    if cfg.ablation.graph_token() != GraphToken::None {
        state.adam.step(&mut state.params, &grads);
    }
    Ok(loss)
}

const MASK_STREAM: u64 = 0x6d61_736b;
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const SAMPLE_STREAM: u64 = 0x7361_6d70;

/// Seed of one epoch's random stream.
pub fn epoch_seed(run_seed: u64, epoch: usize, stream: u64) -> u64 {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&run_seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    bytes[16..].copy_from_slice(&stream.to_le_bytes());
    xxhash_rust::xxh3::xxh3_64(&bytes)
}

/// Trains on `ds.train` over the given tool graph. Validation n-F1 drives
/// early stopping; the best validation snapshot is returned.
pub fn train_on_graph(
    ds: &Dataset,
    graph: &ToolGraph,
    cfg: &TrainConfig,
    encoder: &EncoderConfig,
    embedder: &dyn Embedder,
    lm: &MockLm,
) -> Result<(EncoderParams, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let names = ds.catalog.names();
    let params = gnn::init_params(encoder)?;
    let mut state = TrainState {
        adam: Adam::new(&params, cfg),
        params,
    };
    let attrs: Vec<AttrVector> = ds
        .train
        .iter()
        .map(|r| embedder.embed_text(&r.text))
        .collect::<Result<_>>()?;
    for r in &ds.train {
        ds.catalog.resolve(&r.id, &r.trajectory)?;
    }

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let plan = if cfg.mdpl_active() {
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch, MASK_STREAM));
            MaskPlan::sample(graph, cfg.rho, &mut rng)
        } else {
            MaskPlan::empty()
        };
        log::debug!("epoch {epoch}: masked {:?}", plan.masked);
        let masked = graph.without_edges(&plan.masked);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch, SHUFFLE_STREAM)));
        let mut sample_rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch, SAMPLE_STREAM));

        let (mut sum_plan, mut sum_mdpl, mut sum_total, mut mdpl_steps) = (0.0, 0.0, 0.0, 0usize);
        for &idx in &order {
            let sample = if cfg.mdpl_active() {
                match toolgraph::sample_candidates(graph, &plan, cfg.alpha, &mut sample_rng) {
                    Ok(s) => Some(s),
                    Err(Error::NoPositives | Error::NoNegatives) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let input = StepInput {
                request: &ds.train[idx],
                request_attr: &attrs[idx],
                graph: &masked,
                sample: sample.as_ref(),
            };
            let loss = train_step(&mut state, &input, &names, cfg, lm)?;
            sum_plan += loss.plan;
            sum_mdpl += loss.mdpl;
            sum_total += loss.total;
            mdpl_steps += usize::from(loss.mdpl_used);
        }
        let steps = ds.train.len().max(1) as f64;

        let val_n_f1 = if ds.val.is_empty() {
            None
        } else {
            let planner = Planner {
                catalog: &ds.catalog,
                graph,
                params: &state.params,
                lm,
                embedder,
                ablation: cfg.ablation,
                max_len: cfg.max_len,
            };
            Some(evalkit::evaluate(&ds.val, &planner).n_f1)
        };

        let report = EpochReport {
            epoch,
            mean_plan_loss: sum_plan / steps,
            mean_mdpl_loss: if mdpl_steps > 0 { sum_mdpl / mdpl_steps as f64 } else { 0.0 },
            mean_total_loss: sum_total / steps,
            masked_edges: plan.masked.len(),
            mdpl_steps,
            val_n_f1,
        };
        log::info!(
            "epoch {epoch}: total={:.4} plan={:.4} mdpl={:.4} val_n_f1={:?}",
            report.mean_total_loss,
            report.mean_plan_loss,
            report.mean_mdpl_loss,
            report.val_n_f1
        );
        epochs.push(report);

        if let Some(score) = val_n_f1 {
            match &best {
                Some((b, _, _)) if score < *b => stale += 1,
                _ => {
                    best = Some((score, epoch, state.params.clone()));
                    stale = 0;
                }
            }
            if epoch + 1 >= cfg.min_epochs && stale >= cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }

    let (params, best_epoch) = match best {
        Some((_, epoch, params)) => (params, Some(epoch)),
        None => (state.params, None),
    };
    let report = TrainReport {
        ablation: cfg.ablation,
        epochs,
        best_epoch,
        stopped_early,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((params, report))
}

/// Builds the tool graph from the train split and trains on it.
pub fn train(
    ds: &Dataset,
    cfg: &TrainConfig,
    encoder: &EncoderConfig,
    embedder: &dyn Embedder,
    lm: &MockLm,
) -> Result<(EncoderParams, TrainReport)> {
    let graph = toolgraph::build_tool_graph(
        &ds.catalog,
        &ds.train.iter().map(|r| r.trajectory.clone()).collect::<Vec<_>>(),
        embedder,
    )?;
    train_on_graph(ds, &graph, cfg, encoder, embedder, lm)
}
