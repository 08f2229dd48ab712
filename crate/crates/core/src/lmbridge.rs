//! Prompt assembly with embedding slots, the frozen language-model interface,
//! and extraction of tool trajectories from generated text.
//!
//! Templates live in `templates/*.txt` and use `{placeholder}` markers. Text
//! placeholders are substituted; `*_embed*` placeholders become [`Segment::Slot`]
//! pseudo-tokens carrying one vector each.

use std::time::Duration;

use ndarray::{Array1, Array2, ArrayView1};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::corpus::ToolCatalog;
use crate::error::{Error, Result};
use crate::toolgraph::EdgeLabel;

pub const MDPL_TEMPLATE: &str = include_str!("../templates/mdpl.txt");
pub const PLAN_TEMPLATE: &str = include_str!("../templates/plan.txt");
pub const PLAN_PLAIN_TEMPLATE: &str = include_str!("../templates/plan_plain.txt");
pub const PLAN_INLINE_TEMPLATE: &str = include_str!("../templates/plan_inline.txt");

pub const NODE_MARKER: &str = "[/node]";
pub const GRAPH_MARKER: &str = "[/graph]";
pub const LM_ENDPOINT_ENV: &str = "GTOOL_LM_ENDPOINT";
pub const DEFAULT_MAX_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Text(String),
    Slot { name: String, vector: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Mdpl,
    Plan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptWithSlots {
    pub segments: Vec<Segment>,
    pub kind: TemplateKind,
}

impl PromptWithSlots {
    pub fn slots(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot { name, vector } => Some((name.as_str(), vector.as_slice())),
            Segment::Text(_) => None,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.slots().count()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Text(t) => Some(t.as_str()),
            Segment::Slot { .. } => None,
        })
    }

    /// Text with every slot shown as `<name>`.
    pub fn render_text(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.clone(),
                Segment::Slot { name, .. } => format!("<{name}>"),
            })
            .collect()
    }

    /// Checks slot count and that each slot is followed by its marker.
    pub fn check(&self, kind: TemplateKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::BadTemplate(format!(
                "expected a {kind:?} prompt, got {:?}",
                self.kind
            )));
        }
        let (allowed, marker): (&[usize], &str) = match kind {
            TemplateKind::Mdpl => (&[2], NODE_MARKER),
            TemplateKind::Plan => (&[0, 1], GRAPH_MARKER),
        };
        let n = self.num_slots();
        if !allowed.contains(&n) {
            return Err(Error::BadTemplate(format!("{kind:?} prompt has {n} slots")));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if let Segment::Slot { name, .. } = seg {
                match self.segments.get(i + 1) {
                    Some(Segment::Text(t)) if t.starts_with(marker) => {}
                    _ => {
                        return Err(Error::BadTemplate(format!(
                            "slot `{name}` is not terminated by {marker}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn template_pieces(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        match rest[start..].find('}') {
            Some(len) => {
                if start > 0 {
                    out.push(Piece::Literal(&rest[..start]));
                }
                out.push(Piece::Placeholder(&rest[start + 1..start + len]));
                rest = &rest[start + len + 1..];
            }
            None => break,
        }
    }
    if !rest.is_empty() {
        out.push(Piece::Literal(rest));
    }
    out
}

fn push_text(segments: &mut Vec<Segment>, text: &str) {
    if text.is_empty() {
        return;
    }
    if let Some(Segment::Text(last)) = segments.last_mut() {
        last.push_str(text);
    } else {
        segments.push(Segment::Text(text.to_string()));
    }
}

/// Fills `template`. Placeholders absent from both maps are left verbatim.
pub fn render_template(
    template: &str,
    kind: TemplateKind,
    text_values: &[(&str, &str)],
    slot_values: &[(&str, &[f64])],
) -> PromptWithSlots {
    let mut segments = Vec::new();
    for piece in template_pieces(template) {
        match piece {
            Piece::Literal(t) => push_text(&mut segments, t),
            Piece::Placeholder(name) => {
                if let Some((_, v)) = text_values.iter().find(|(k, _)| *k == name) {
                    push_text(&mut segments, v);
                } else if let Some((_, v)) = slot_values.iter().find(|(k, _)| *k == name) {
                    segments.push(Segment::Slot {
                        name: name.to_string(),
                        vector: v.to_vec(),
                    });
                } else {
                    push_text(&mut segments, &format!("{{{name}}}"));
                }
            }
        }
    }
    PromptWithSlots { segments, kind }
}

pub fn render_mdpl_prompt(
    rep_i: ArrayView1<'_, f64>,
    rep_j: ArrayView1<'_, f64>,
    names: (&str, &str),
) -> PromptWithSlots {
    let a = rep_i.to_vec();
    let b = rep_j.to_vec();
    render_template(
        MDPL_TEMPLATE,
        TemplateKind::Mdpl,
        &[("node_name_1", names.0), ("node_name_2", names.1)],
        &[("node_embed_1", &a), ("node_embed_2", &b)],
    )
}

pub fn render_plan_prompt(
    tool_names: &[&str],
    request: &str,
    graph_rep: ArrayView1<'_, f64>,
) -> PromptWithSlots {
    let list = tool_names.join(", ");
    let g = graph_rep.to_vec();
    render_template(
        PLAN_TEMPLATE,
        TemplateKind::Plan,
        &[("tool_list", &list), ("user_query", request)],
        &[("graph_embed", &g)],
    )
}

/// Plan prompt with no graph token.
pub fn render_plain_plan_prompt(tool_names: &[&str], request: &str) -> PromptWithSlots {
    let list = tool_names.join(", ");
    render_template(
        PLAN_PLAIN_TEMPLATE,
        TemplateKind::Plan,
        &[("tool_list", &list), ("user_query", request)],
        &[],
    )
}

/// Plan prompt that spells out every tool description in text instead of
/// encoding them in a graph token.
pub fn render_inline_plan_prompt(catalog: &ToolCatalog, request: &str) -> PromptWithSlots {
    let descriptions: Vec<String> = catalog
        .tools()
        .iter()
        .map(|t| format!("{}: {}", t.name, t.document))
        .collect();
    let descriptions = descriptions.join("\n");
    render_template(
        PLAN_INLINE_TEMPLATE,
        TemplateKind::Plan,
        &[("tool_descriptions", &descriptions), ("user_query", request)],
        &[],
    )
}

/// Whitespace-delimited words of the text segments plus one per slot.
pub fn count_tokens(prompt: &PromptWithSlots) -> usize {
    prompt
        .segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => t.split_whitespace().count(),
            Segment::Slot { .. } => 1,
        })
        .sum()
}

/// Scans `text` left to right, taking the longest catalog name
/// (case-insensitive, on word boundaries) at each position. Unmatched text is
/// skipped and consecutive repeats collapse.
pub fn parse_trajectory(text: &str, catalog: &ToolCatalog) -> Vec<String> {
    let lower = |c: char| c.to_lowercase().next().unwrap_or(c);
    let hay: Vec<char> = text.chars().map(lower).collect();
    let mut names: Vec<(Vec<char>, &str)> = catalog
        .tools()
        .iter()
        .filter(|t| !t.name.is_empty())
        .map(|t| (t.name.chars().map(lower).collect(), t.name.as_str()))
        .collect();
    names.sort_by(|a, b| b.0.len().cmp(&a.0.len()));

    let boundary = |idx: usize| idx == 0 || idx >= hay.len() || !hay[idx - 1].is_alphanumeric();
    let end_boundary = |idx: usize| idx >= hay.len() || !hay[idx].is_alphanumeric();

    let mut out: Vec<String> = Vec::new();
    let mut pos = 0;
    while pos < hay.len() {
        if boundary(pos) {
            let hit = names.iter().find(|(chars, _)| {
                hay.len() - pos >= chars.len()
                    && hay[pos..pos + chars.len()] == chars[..]
                    && end_boundary(pos + chars.len())
            });
            if let Some((chars, name)) = hit {
                if out.last().map(String::as_str) != Some(*name) {
                    out.push(name.to_string());
                }
                pos += chars.len();
                continue;
            }
        }
        pos += 1;
    }
    out
}

/// Negative log-likelihood plus the exact gradient for each slot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LmScore {
    pub loss: f64,
    pub slot_grads: Vec<Array1<f64>>,
}

/// Anything that can turn a plan prompt into text.
pub trait LanguageModel: Send + Sync {
    fn generate(&self, prompt: &PromptWithSlots, max_len: usize) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockLmConfig {
    pub dim: usize,
    pub seed: u64,
    pub text_buckets: usize,
    /// Scale of the readout weights; larger means sharper token distributions.
    pub out_gain: f64,
    /// Scale of the previous-token recurrence.
    pub recur_gain: f64,
    pub pair_gain: f64,
}

impl Default for MockLmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 17,
            text_buckets: 4096,
            out_gain: 8.0,
            recur_gain: 4.0,
            pair_gain: 1.0,
        }
    }
}

const YES: usize = 0;
const NO: usize = 1;
const EOS: usize = 2;
const TOOL_BASE: usize = 3;

/// Frozen stand-in for a language model.
///
/// Vocabulary: `yes`, `no`, `eos`, one token per tool, then hashed text buckets.
/// A prompt is pooled as the mean of its text-token embeddings plus the mean
/// of its slot vectors, each slot after a fixed per-position sign flip, plus
/// `pair_gain` times the elementwise product of each adjacent slot pair.
/// `state = tanh(W_h · pooled)` drives a yes/no head, and
/// `state_k = tanh(W_h · pooled + W_r · embed(prev))` drives greedy decoding
/// over tools and `eos`. Nothing here is ever updated.
#[derive(Debug, Clone)]
pub struct MockLm {
    config: MockLmConfig,
    tool_names: Vec<String>,
    token_embeds: Array2<f64>,
    w_h: Array2<f64>,
    w_r: Array2<f64>,
    w_out: Array2<f64>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let half = std * 3f64.sqrt();
    let dist = Uniform::new_inclusive(-half, half);
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl MockLm {
    pub fn new(tool_names: &[&str], config: MockLmConfig) -> Self {
        let d = config.dim;
        let vocab = TOOL_BASE + tool_names.len() + config.text_buckets;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let inv = 1.0 / (d as f64).sqrt();
        let token_embeds = uniform_matrix(&mut rng, vocab, d, inv);
        let w_h = uniform_matrix(&mut rng, d, d, inv);
        let w_r = uniform_matrix(&mut rng, d, d, inv * config.recur_gain);
        let w_out = uniform_matrix(&mut rng, vocab, d, inv * config.out_gain);
        Self {
            config,
            tool_names: tool_names.iter().map(|s| s.to_string()).collect(),
            token_embeds,
            w_h,
            w_r,
            w_out,
        }
    }

    pub fn for_catalog(catalog: &ToolCatalog, config: MockLmConfig) -> Self {
        Self::new(&catalog.names(), config)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn config(&self) -> &MockLmConfig {
        &self.config
    }

    pub fn tool_names(&self) -> &[String] {
        &self.tool_names
    }

    /// Hash of every frozen matrix; equal before and after training.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for m in [&self.token_embeds, &self.w_h, &self.w_r, &self.w_out] {
            for v in m.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        xxh3_64_with_seed(&bytes, 0)
    }

    fn text_token(&self, word: &str) -> usize {
        let h = xxh3_64_with_seed(word.to_lowercase().as_bytes(), self.config.seed);
        TOOL_BASE + self.tool_names.len() + (h % self.config.text_buckets as u64) as usize
    }

    fn tool_token(&self, name: &str) -> Option<usize> {
        self.tool_names.iter().position(|t| t == name).map(|i| TOOL_BASE + i)
    }

    /// Pooled input vector plus the sign-flipped slot vectors that fed it.
    fn pool(&self, prompt: &PromptWithSlots) -> Result<(Array1<f64>, Vec<Array1<f64>>)> {
        let d = self.dim();
        let mut text = Array1::zeros(d);
        let mut n_words = 0usize;
        for t in prompt.texts() {
            for w in t.split_whitespace() {
                text += &self.token_embeds.row(self.text_token(w));
                n_words += 1;
            }
        }
        if n_words > 0 {
            text /= n_words as f64;
        }
        let mut slots = Vec::new();
        for (name, v) in prompt.slots() {
            if v.len() != d {
                return Err(Error::BadTemplate(format!(
                    "slot `{name}` has width {}, model expects {d}",
                    v.len()
                )));
            }
            slots.push(&ArrayView1::from(v) * &self.slot_signs(slots.len()));
        }
        let mut pooled = text;
        if !slots.is_empty() {
            let n = slots.len() as f64;
            for u in &slots {
                pooled.scaled_add(1.0 / n, u);
            }
            for w in slots.windows(2) {
                pooled.scaled_add(self.config.pair_gain, &(&w[0] * &w[1]));
            }
        }
        Ok((pooled, slots))
    }

    /// Fixed sign pattern applied to the slot at `position`, so that swapping
    /// two slots changes the pooled input. The first slot is left as is.
    fn slot_signs(&self, position: usize) -> Array1<f64> {
        Array1::from_shape_fn(self.dim(), |i| {
            if position == 0 {
                return 1.0;
            }
            let key = ((position as u64) << 32) | i as u64;
            if xxh3_64_with_seed(&key.to_le_bytes(), self.config.seed) >> 63 == 1 {
                -1.0
            } else {
                1.0
            }
        })
    }

    fn slot_grads(&self, d_pooled: &Array1<f64>, slots: &[Array1<f64>]) -> Vec<Array1<f64>> {
        let n = slots.len() as f64;
        let pg = self.config.pair_gain;
        (0..slots.len())
            .map(|k| {
                let mut du = d_pooled / n;
                if k > 0 { du += &(d_pooled * &slots[k - 1] * pg); }
                if k + 1 < slots.len() { du += &(d_pooled * &slots[k + 1] * pg); }
                du * &self.slot_signs(k)
            })
            .collect()
    }

    /// Probabilities of `(yes, no)` for an edge-query prompt.
    pub fn label_probs(&self, prompt: &PromptWithSlots) -> Result<(f64, f64)> {
        prompt.check(TemplateKind::Mdpl)?;
        let (pooled, _) = self.pool(prompt)?;
        let state = self.w_h.dot(&pooled).mapv(f64::tanh);
        let p = crate::gnn::softmax(&[self.w_out.row(YES).dot(&state), self.w_out.row(NO).dot(&state)]);
        Ok((p[0], p[1]))
    }

    pub fn label_loss(&self, prompt: &PromptWithSlots, label: EdgeLabel) -> Result<LmScore> {
        prompt.check(TemplateKind::Mdpl)?;
        let (pooled, slots) = self.pool(prompt)?;
        let state = self.w_h.dot(&pooled).mapv(f64::tanh);
        let rows = [YES, NO];
        let logits: Vec<f64> = rows.iter().map(|&r| self.w_out.row(r).dot(&state)).collect();
        let p = crate::gnn::softmax(&logits);
        let target = match label {
            EdgeLabel::Yes => 0,
            EdgeLabel::No => 1,
        };
        let loss = -p[target].ln();

        let mut d_state = Array1::zeros(self.dim());
        for (k, &r) in rows.iter().enumerate() {
            let g = p[k] - if k == target { 1.0 } else { 0.0 };
            d_state.scaled_add(g, &self.w_out.row(r));
        }
        let d_pre = d_state * state.mapv(|s| 1.0 - s * s);
        let d_pooled = self.w_h.t().dot(&d_pre);
        Ok(LmScore {
            loss,
            slot_grads: self.slot_grads(&d_pooled, &slots),
        })
    }

    fn decode_rows(&self) -> Vec<usize> {
        std::iter::once(EOS)
            .chain((0..self.tool_names.len()).map(|i| TOOL_BASE + i))
            .collect()
    }

    /// Mean per-token NLL of `target` followed by `eos`, under teacher forcing.
    pub fn sequence_loss(&self, prompt: &PromptWithSlots, target: &[String]) -> Result<LmScore> {
        prompt.check(TemplateKind::Plan)?;
        let mut ids = target
            .iter()
            .map(|t| self.tool_token(t).ok_or_else(|| Error::UnknownTargetToken(t.clone())))
            .collect::<Result<Vec<_>>>()?;
        ids.push(EOS);

        let (pooled, slots) = self.pool(prompt)?;
        let base = self.w_h.dot(&pooled);
        let rows = self.decode_rows();
        let k_total = ids.len() as f64;
        let mut loss = 0.0;
        let mut d_base = Array1::<f64>::zeros(self.dim());
        let mut prev: Option<usize> = None;
        for &y in &ids {
            let mut pre = base.clone();
            if let Some(p) = prev {
                pre += &self.w_r.dot(&self.token_embeds.row(p));
            }
            let state = pre.mapv(f64::tanh);
            let logits: Vec<f64> = rows.iter().map(|&r| self.w_out.row(r).dot(&state)).collect();
            let probs = crate::gnn::softmax(&logits);
            let target_pos = rows.iter().position(|&r| r == y).expect("target in decode rows");
            loss -= probs[target_pos].ln();

            let mut d_state = Array1::zeros(self.dim());
            for (k, &r) in rows.iter().enumerate() {
                let g = probs[k] - if k == target_pos { 1.0 } else { 0.0 };
                d_state.scaled_add(g / k_total, &self.w_out.row(r));
            }
            d_base += &(d_state * state.mapv(|s| 1.0 - s * s));
            prev = Some(y);
        }
        let d_pooled = self.w_h.t().dot(&d_base);
        Ok(LmScore {
            loss: loss / k_total,
            slot_grads: self.slot_grads(&d_pooled, &slots),
        })
    }

    /// Greedy decoding; returns the chosen tool names (without `eos`).
    pub fn generate_tools(&self, prompt: &PromptWithSlots, max_len: usize) -> Result<Vec<String>> {
        prompt.check(TemplateKind::Plan)?;
        let (pooled, _) = self.pool(prompt)?;
        let base = self.w_h.dot(&pooled);
        let rows = self.decode_rows();
        let mut out = Vec::new();
        let mut prev: Option<usize> = None;
        for _ in 0..max_len {
            let mut pre = base.clone();
            if let Some(p) = prev {
                pre += &self.w_r.dot(&self.token_embeds.row(p));
            }
            let state = pre.mapv(f64::tanh);
            let best = rows
                .iter()
                .copied()
                .map(|r| (r, self.w_out.row(r).dot(&state)))
                .fold((EOS, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
                .0;
            if best == EOS {
                break;
            }
            out.push(self.tool_names[best - TOOL_BASE].clone());
            prev = Some(best);
        }
        Ok(out)
    }
}

impl LanguageModel for MockLm {
    fn generate(&self, prompt: &PromptWithSlots, max_len: usize) -> Result<String> {
        Ok(self.generate_tools(prompt, max_len)?.join(", "))
    }
}

pub fn lm_label_loss(prompt: &PromptWithSlots, label: EdgeLabel, lm: &MockLm) -> Result<LmScore> {
    lm.label_loss(prompt, label)
}

pub fn lm_sequence_loss(prompt: &PromptWithSlots, target: &[String], lm: &MockLm) -> Result<LmScore> {
    lm.sequence_loss(prompt, target)
}

pub fn lm_generate(prompt: &PromptWithSlots, lm: &dyn LanguageModel, max_len: usize) -> Result<String> {
    lm.generate(prompt, max_len)
}

#[derive(Serialize)]
#[serde(rename_all = "snake_case")]
enum WireSegment<'a> {
    Text(&'a str),
    Slot(&'a str),
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt_segments: Vec<WireSegment<'a>>,
    slot_vectors: Vec<&'a [f64]>,
    max_len: usize,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// HTTP-backed generator: `POST {"prompt_segments", "slot_vectors", "max_len"}`
/// returning `{"text": str}`. Generation only; there is no gradient path.
pub struct RemoteLm {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteLm {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }

    /// Uses `GTOOL_LM_ENDPOINT`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(LM_ENDPOINT_ENV)
            .map_err(|_| Error::Config(format!("{LM_ENDPOINT_ENV} is not set")))?;
        Ok(Self::new(endpoint, Duration::from_secs(60)))
    }
}

impl LanguageModel for RemoteLm {
    fn generate(&self, prompt: &PromptWithSlots, max_len: usize) -> Result<String> {
        prompt.check(TemplateKind::Plan)?;
        let body = GenerateRequest {
            prompt_segments: prompt
                .segments
                .iter()
                .map(|s| match s {
                    Segment::Text(t) => WireSegment::Text(t),
                    Segment::Slot { name, .. } => WireSegment::Slot(name),
                })
                .collect(),
            slot_vectors: prompt.slots().map(|(_, v)| v).collect(),
            max_len,
        };
        let response: GenerateResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(|e| Error::RemoteUnavailable(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::RemoteUnavailable(e.to_string()))?;
        Ok(response.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names() -> Vec<&'static str> {
        vec!["alpha", "beta", "gamma"]
    }

    fn lm(dim: usize) -> MockLm {
        MockLm::new(
            &names(),
            MockLmConfig {
                dim,
                ..Default::default()
            },
        )
    }

    #[test]
    fn mdpl_prompt_shape() {
        let a = array![1.0, 2.0];
        let p = render_mdpl_prompt(a.view(), a.view(), ("x", "y"));
        assert_eq!(p.kind, TemplateKind::Mdpl);
        assert_eq!(p.num_slots(), 2);
        p.check(TemplateKind::Mdpl).unwrap();
        let text = p.render_text();
        assert_eq!(text.matches(NODE_MARKER).count(), 2);
        assert!(text.contains("<node_embed_1>[/node]"));
        assert!(text.contains("<node_embed_2>[/node]"));
    }

    #[test]
    fn plan_prompt_lists_tools_once() {
        let g = Array1::from_elem(4, 0.5);
        let p = render_plan_prompt(&names(), "do things", g.view());
        p.check(TemplateKind::Plan).unwrap();
        assert_eq!(p.num_slots(), 1);
        let text = p.render_text();
        assert!(text.contains("alpha, beta, gamma"));
        for n in names() {
            assert_eq!(text.matches(n).count(), 1);
        }
        assert!(text.contains("<graph_embed>[/graph]"));
        let empty = render_plan_prompt(&names(), "", g.view());
        empty.check(TemplateKind::Plan).unwrap();
        assert_eq!(render_plain_plan_prompt(&names(), "q").num_slots(), 0);
    }

    #[test]
    fn token_counting() {
        let empty = PromptWithSlots {
            segments: vec![],
            kind: TemplateKind::Plan,
        };
        assert_eq!(count_tokens(&empty), 0);
        let p = PromptWithSlots {
            segments: vec![
                Segment::Text("a b c".into()),
                Segment::Slot {
                    name: "graph_embed".into(),
                    vector: vec![0.0],
                },
            ],
            kind: TemplateKind::Plan,
        };
        assert_eq!(count_tokens(&p), 4);
    }

    #[test]
    fn parse_longest_match() {
        let cat = ToolCatalog::new([("generation", ""), ("text generation", ""), ("Depth Estimation", "")]);
        assert_eq!(parse_trajectory("text generation", &cat), vec!["text generation"]);
        assert_eq!(parse_trajectory("nothing here", &cat), Vec::<String>::new());
        assert_eq!(
            parse_trajectory("Tool1: depth estimation, Tool2: DEPTH ESTIMATION; then generation", &cat),
            vec!["Depth Estimation", "generation"]
        );
        // no partial-word matches
        assert!(parse_trajectory("regenerations", &cat).is_empty());
    }

    #[test]
    fn label_probabilities_are_normalized() {
        let m = lm(16);
        let a = Array1::from_iter((0..16).map(|i| (i as f64 * 0.37).sin()));
        let b = Array1::from_iter((0..16).map(|i| (i as f64 * 0.11).cos()));
        let p = render_mdpl_prompt(a.view(), b.view(), ("alpha", "beta"));
        let yes = m.label_loss(&p, EdgeLabel::Yes).unwrap();
        let no = m.label_loss(&p, EdgeLabel::No).unwrap();
        assert!(yes.loss >= 0.0 && no.loss >= 0.0);
        assert!(((-yes.loss).exp() + (-no.loss).exp() - 1.0).abs() < 1e-6);
        let (py, pn) = m.label_probs(&p).unwrap();
        assert!((py + pn - 1.0).abs() < 1e-12);
        assert_eq!(yes.slot_grads.len(), 2);
    }

    #[test]
    fn wrong_template_kind_is_rejected() {
        let m = lm(8);
        let g = Array1::zeros(8);
        let plan = render_plan_prompt(&names(), "q", g.view());
        assert!(matches!(m.label_loss(&plan, EdgeLabel::Yes), Err(Error::BadTemplate(_))));
        let mdpl = render_mdpl_prompt(g.view(), g.view(), ("alpha", "beta"));
        assert!(matches!(m.sequence_loss(&mdpl, &[]), Err(Error::BadTemplate(_))));
        assert!(matches!(
            m.sequence_loss(&plan, &["delta".to_string()]),
            Err(Error::UnknownTargetToken(_))
        ));
    }

    #[test]
    fn single_step_sequence_loss_is_mean_of_two() {
        let m = lm(8);
        let g = Array1::from_elem(8, 0.3);
        let p = render_plan_prompt(&names(), "q", g.view());
        let one = m.sequence_loss(&p, &["beta".to_string()]).unwrap();
        let again = m.sequence_loss(&p.clone(), &["beta".to_string()]).unwrap();
        assert_eq!(one, again);
        assert!(one.loss > 0.0 && one.loss.is_finite());
    }

    #[test]
    fn generation_is_deterministic() {
        let m = lm(16);
        let g = Array1::from_iter((0..16).map(|i| i as f64 / 8.0 - 1.0));
        let p = render_plan_prompt(&names(), "go", g.view());
        assert_eq!(m.generate(&p, 8).unwrap(), m.generate(&p, 8).unwrap());
        assert_eq!(m.generate(&p, 0).unwrap(), "");
    }
}
