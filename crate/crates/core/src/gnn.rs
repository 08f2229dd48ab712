//! Attention-based message-passing encoder over a request-tool graph.
//!
//! Each layer is a single-head graph transformer convolution:
//!
//! ```text
//! q_i = h_i Wq      k_j = h_j Wk      m_j = h_j Wmsg
//! a_ji = softmax_{j in N_in(i)} (q_i . k_j / sqrt(d_h))
//! h_i' = relu(h_i Wroot + sum_j a_ji m_j + b)
//! ```
//!
//! Vectors are rows; every weight matrix is stored `fan_in x fan_out`. The
//! representation of the request node (last row) is the graph representation.
//! Gradients are computed by hand in [`EncoderTrace::backward`].

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toolgraph::RequestToolGraph;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Attribute (text embedding) width `d_f`.
    pub attr_dim: usize,
    /// Hidden width `d_h`.
    pub hidden_dim: usize,
    /// Language-model embedding width `d_lm`.
    pub lm_dim: usize,
    /// Number of message-passing layers `n_l`.
    pub layers: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            attr_dim: 256,
            hidden_dim: 64,
            lm_dim: 64,
            layers: 3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for (name, d) in [
            ("attr_dim", self.attr_dim),
            ("hidden_dim", self.hidden_dim),
            ("lm_dim", self.lm_dim),
        ] {
            if d < 8 {
                return Err(Error::Config(format!("{name} = {d} is below 8")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_root: Array2<f64>,
    pub w_msg: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_query: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Trainable encoder weights θ, including the projection into LM space.
/// The same type carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub input_proj: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lm_proj: Array2<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let s = glorot_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-s, s);
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_params(cfg: &EncoderConfig) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.hidden_dim;
    let input_proj = glorot(&mut rng, cfg.attr_dim, d);
    let layers = (0..cfg.layers)
        .map(|_| LayerParams {
            w_root: glorot(&mut rng, d, d),
            w_msg: glorot(&mut rng, d, d),
            w_key: glorot(&mut rng, d, d),
            w_query: glorot(&mut rng, d, d),
            bias: Array1::zeros(d),
        })
        .collect();
    let lm_proj = glorot(&mut rng, d, cfg.lm_dim);
    Ok(EncoderParams {
        config: *cfg,
        input_proj,
        layers,
        lm_proj,
    })
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        let d = self.config.hidden_dim;
        Self {
            config: self.config,
            input_proj: Array2::zeros(self.input_proj.raw_dim()),
            layers: (0..self.layers.len())
                .map(|_| LayerParams {
                    w_root: Array2::zeros((d, d)),
                    w_msg: Array2::zeros((d, d)),
                    w_key: Array2::zeros((d, d)),
                    w_query: Array2::zeros((d, d)),
                    bias: Array1::zeros(d),
                })
                .collect(),
            lm_proj: Array2::zeros(self.lm_proj.raw_dim()),
        }
    }

    /// Named tensors in a fixed order, with their shapes.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![(
            "input_proj".to_string(),
            self.input_proj.shape().to_vec(),
            self.input_proj.as_slice().expect("standard layout"),
        )];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("w_root", &layer.w_root),
                ("w_msg", &layer.w_msg),
                ("w_key", &layer.w_key),
                ("w_query", &layer.w_query),
            ] {
                out.push((
                    format!("layers.{l}.{name}"),
                    m.shape().to_vec(),
                    m.as_slice().expect("standard layout"),
                ));
            }
            out.push((
                format!("layers.{l}.bias"),
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out.push((
            "lm_proj".to_string(),
            self.lm_proj.shape().to_vec(),
            self.lm_proj.as_slice().expect("standard layout"),
        ));
        out
    }

    /// Mutable flat views in the same order as [`Self::named_tensors`].
    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.input_proj.as_slice_mut().expect("standard layout")];
        for layer in &mut self.layers {
            out.push(layer.w_root.as_slice_mut().expect("standard layout"));
            out.push(layer.w_msg.as_slice_mut().expect("standard layout"));
            out.push(layer.w_key.as_slice_mut().expect("standard layout"));
            out.push(layer.w_query.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.lm_proj.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().map(|(_, _, v)| v).collect()
    }

    pub fn num_params(&self) -> usize {
        self.flat().iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for (dst, src) in self.flat_mut().into_iter().zip(other.flat()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.flat_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Final node representations; the last row is the graph representation.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeReps {
    pub h: Array2<f64>,
}

impl NodeReps {
    pub fn graph_rep(&self) -> ArrayView1<'_, f64> {
        self.h.row(self.h.nrows() - 1)
    }

    pub fn n_tools(&self) -> usize {
        self.h.nrows() - 1
    }

    /// Mean of the tool-node rows (request node excluded).
    pub fn mean_tool_rep(&self) -> Array1<f64> {
        let n = self.n_tools();
        if n == 0 {
            return Array1::zeros(self.h.ncols());
        }
        self.h
            .slice(ndarray::s![..n, ..])
            .mean_axis(Axis(0))
            .expect("non-empty")
    }
}

struct LayerCache {
    input: Array2<f64>,
    query: Array2<f64>,
    key: Array2<f64>,
    msg: Array2<f64>,
    /// Attention weights per target node, aligned with `in_neighbors[i]`.
    attention: Vec<Vec<f64>>,
    pre: Array2<f64>,
}

/// Forward pass with everything needed for an exact backward pass.
pub struct EncoderTrace {
    attrs: Array2<f64>,
    in_neighbors: Vec<Vec<usize>>,
    layers: Vec<LayerCache>,
    reps: NodeReps,
}

/// Gradients produced by [`EncoderTrace::backward`].
pub struct EncoderGrads {
    pub params: EncoderParams,
    pub attrs: Array2<f64>,
}

fn check_shapes(gq: &RequestToolGraph, params: &EncoderParams) -> Result<()> {
    if gq.graph.attr_dim() != params.input_proj.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "graph attributes have width {}, encoder expects {}",
            gq.graph.attr_dim(),
            params.input_proj.nrows()
        )));
    }
    Ok(())
}

pub fn encode(gq: &RequestToolGraph, params: &EncoderParams) -> Result<NodeReps> {
    Ok(encode_traced(gq, params)?.reps)
}

/// Exact reverse-mode gradients of `sum(upstream ⊙ h)` for every parameter
/// and the input attributes.
pub fn backward(
    gq: &RequestToolGraph,
    params: &EncoderParams,
    upstream: &Array2<f64>,
) -> Result<EncoderGrads> {
    encode_traced(gq, params)?.backward(params, upstream)
}

pub fn encode_traced(gq: &RequestToolGraph, params: &EncoderParams) -> Result<EncoderTrace> {
    check_shapes(gq, params)?;
    let attrs = gq.graph.attrs().clone();
    let in_neighbors = gq.graph.in_neighbors();
    let scale = 1.0 / (params.config.hidden_dim as f64).sqrt();
    let mut h = attrs.dot(&params.input_proj);
    let mut caches = Vec::with_capacity(params.layers.len());

    for layer in &params.layers {
        let query = h.dot(&layer.w_query);
        let key = h.dot(&layer.w_key);
        let msg = h.dot(&layer.w_msg);
        let mut pre = h.dot(&layer.w_root);
        let mut attention = Vec::with_capacity(h.nrows());
        for (i, nbrs) in in_neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                attention.push(Vec::new());
            } else {
                let q = query.row(i);
                let scores: Vec<f64> = nbrs.iter().map(|&j| q.dot(&key.row(j)) * scale).collect();
                let weights = softmax(&scores);
                let mut row = pre.row_mut(i);
                for (&j, &w) in nbrs.iter().zip(&weights) {
                    row.scaled_add(w, &msg.row(j));
                }
                attention.push(weights);
            }
        }
        pre += &layer.bias;
        let out = pre.mapv(|v| v.max(0.0));
        caches.push(LayerCache {
            input: std::mem::replace(&mut h, out),
            query,
            key,
            msg,
            attention,
            pre,
        });
    }

    Ok(EncoderTrace {
        attrs,
        in_neighbors,
        layers: caches,
        reps: NodeReps { h },
    })
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl EncoderTrace {
    pub fn reps(&self) -> &NodeReps {
        &self.reps
    }

    pub fn into_reps(self) -> NodeReps {
        self.reps
    }

    /// Attention weights of layer `layer` for each node's in-neighborhood.
    pub fn attention(&self, layer: usize) -> &[Vec<f64>] {
        &self.layers[layer].attention
    }

    pub fn in_neighbors(&self) -> &[Vec<usize>] {
        &self.in_neighbors
    }

    pub fn backward(&self, params: &EncoderParams, upstream: &Array2<f64>) -> Result<EncoderGrads> {
        if upstream.dim() != self.reps.h.dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} does not match node reps {:?}",
                upstream.dim(),
                self.reps.h.dim()
            )));
        }
        let mut grads = params.zeros_like();
        let scale = 1.0 / (params.config.hidden_dim as f64).sqrt();
        let mut d_h = upstream.clone();

        for (l, cache) in self.layers.iter().enumerate().rev() {
            let layer = &params.layers[l];
            let g = &mut grads.layers[l];
            let d_pre = &d_h * &cache.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            g.bias = d_pre.sum_axis(Axis(0));

            let mut d_query = Array2::<f64>::zeros(cache.query.raw_dim());
            let mut d_key = Array2::<f64>::zeros(cache.key.raw_dim());
            let mut d_msg = Array2::<f64>::zeros(cache.msg.raw_dim());
            for (i, nbrs) in self.in_neighbors.iter().enumerate() {
                if nbrs.is_empty() {
                    continue;
                }
                let weights = &cache.attention[i];
                let dz = d_pre.row(i);
                let d_weights: Vec<f64> = nbrs.iter().map(|&j| dz.dot(&cache.msg.row(j))).collect();
                let mean: f64 = weights.iter().zip(&d_weights).map(|(w, d)| w * d).sum();
                let q = cache.query.row(i);
                for ((&j, &w), &dw) in nbrs.iter().zip(weights).zip(&d_weights) {
                    d_msg.row_mut(j).scaled_add(w, &dz);
                    let d_score = w * (dw - mean) * scale;
                    d_query.row_mut(i).scaled_add(d_score, &cache.key.row(j));
                    d_key.row_mut(j).scaled_add(d_score, &q);
                }
            }

            let input_t = cache.input.t();
            g.w_root = input_t.dot(&d_pre);
            g.w_msg = input_t.dot(&d_msg);
            g.w_key = input_t.dot(&d_key);
            g.w_query = input_t.dot(&d_query);
            d_h = d_pre.dot(&layer.w_root.t())
                + d_msg.dot(&layer.w_msg.t())
                + d_key.dot(&layer.w_key.t())
                + d_query.dot(&layer.w_query.t());
        }

        grads.input_proj = self.attrs.t().dot(&d_h);
        let attrs = d_h.dot(&params.input_proj.t());
        Ok(EncoderGrads {
            params: grads,
            attrs,
        })
    }
}

/// Maps a hidden representation into the language-model embedding space.
pub fn project_to_lm(rep: ArrayView1<'_, f64>, params: &EncoderParams) -> Array1<f64> {
    rep.dot(&params.lm_proj)
}

/// Backward of [`project_to_lm`]: accumulates into `grads.lm_proj` and
/// returns the gradient with respect to `rep`.
pub fn project_backward(
    rep: ArrayView1<'_, f64>,
    d_out: ArrayView1<'_, f64>,
    params: &EncoderParams,
    grads: &mut EncoderParams,
) -> Array1<f64> {
    let outer = rep
        .insert_axis(Axis(1))
        .dot(&d_out.insert_axis(Axis(0)));
    grads.lm_proj += &outer;
    params.lm_proj.dot(&d_out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    d_f: usize,
    d_h: usize,
    d_lm: usize,
    n_l: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    header: CheckpointHeader,
    arrays: Vec<NamedArray>,
}

impl EncoderParams {
    /// Serializes as JSON: a header plus named flat arrays in a fixed order.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let cfg = &self.config;
        let file = CheckpointFile {
            header: CheckpointHeader {
                format_version: CHECKPOINT_FORMAT_VERSION,
                d_f: cfg.attr_dim,
                d_h: cfg.hidden_dim,
                d_lm: cfg.lm_dim,
                n_l: cfg.layers,
                seed: cfg.seed,
            },
            arrays: self
                .named_tensors()
                .into_iter()
                .map(|(name, shape, data)| NamedArray {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string(&file)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::VersionMismatch(format!("unreadable checkpoint: {e}")))?;
        let header: CheckpointHeader = value
            .get("header")
            .cloned()
            .ok_or_else(|| Error::VersionMismatch("missing header".into()))
            .and_then(|h| {
                serde_json::from_value(h)
                    .map_err(|e| Error::VersionMismatch(format!("corrupted header: {e}")))
            })?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let file: CheckpointFile = serde_json::from_value(value)
            .map_err(|e| Error::VersionMismatch(format!("malformed arrays: {e}")))?;
        let config = EncoderConfig {
            attr_dim: header.d_f,
            hidden_dim: header.d_h,
            lm_dim: header.d_lm,
            layers: header.n_l,
            seed: header.seed,
        };
        config
            .validate()
            .map_err(|e| Error::VersionMismatch(e.to_string()))?;
        let mut params = init_params(&config)?.zeros_like();
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != file.arrays.len() {
            return Err(Error::VersionMismatch(format!(
                "expected {} arrays, found {}",
                expected.len(),
                file.arrays.len()
            )));
        }
        for ((dst, (name, shape)), array) in params.flat_mut().into_iter().zip(&expected).zip(&file.arrays) {
            if &array.name != name || &array.shape != shape || array.data.len() != dst.len() {
                return Err(Error::VersionMismatch(format!(
                    "array `{}` {:?} does not match `{name}` {shape:?}",
                    array.name, array.shape
                )));
            }
            dst.copy_from_slice(&array.data);
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, params.to_checkpoint_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams> {
    EncoderParams::from_checkpoint_json(&fs::read_to_string(path)?)
}

/// Loads a checkpoint and rejects it unless its shapes match `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<EncoderParams> {
    let params = load_checkpoint(path)?;
    let got = params.config;
    if (got.attr_dim, got.hidden_dim, got.lm_dim, got.layers)
        != (expected.attr_dim, expected.hidden_dim, expected.lm_dim, expected.layers)
    {
        return Err(Error::VersionMismatch(format!(
            "checkpoint shape (d_f={}, d_h={}, d_lm={}, n_l={}) does not match run (d_f={}, d_h={}, d_lm={}, n_l={})",
            got.attr_dim,
            got.hidden_dim,
            got.lm_dim,
            got.layers,
            expected.attr_dim,
            expected.hidden_dim,
            expected.lm_dim,
            expected.layers
        )));
    }
    Ok(params)
}
