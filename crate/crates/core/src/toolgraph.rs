//! Tool dependency graphs, the request-augmented graph, edge masking and
//! balanced candidate sampling for missing-dependency prediction.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{trajectory_edges, ToolCatalog};
use crate::embed::{AttrVector, Embedder};
use crate::error::{Error, Result};

/// Directed edge `(source, target)`.
pub type Edge = (usize, usize);

/// Attributed directed graph without self-loops or parallel edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolGraph {
    attrs: Array2<f64>,
    edges: BTreeSet<Edge>,
}

impl ToolGraph {
    pub fn new(attrs: Array2<f64>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let n = attrs.nrows();
        let edges: BTreeSet<Edge> = edges.into_iter().collect();
        for &(i, j) in &edges {
            if i == j {
                return Err(Error::ShapeMismatch(format!("self-loop on node {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::ShapeMismatch(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
        }
        Ok(Self { attrs, edges })
    }

    pub fn n(&self) -> usize {
        self.attrs.nrows()
    }

    pub fn attr_dim(&self) -> usize {
        self.attrs.ncols()
    }

    pub fn attrs(&self) -> &Array2<f64> {
        &self.attrs
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i, j))
    }

    /// In-neighbors of every node, each list in ascending source order.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n()];
        for &(i, j) in &self.edges {
            adj[j].push(i);
        }
        adj
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.edges.range((i, 0)..(i + 1, 0)).count()
    }

    /// Copy with `removed` edges dropped.
    pub fn without_edges(&self, removed: &BTreeSet<Edge>) -> ToolGraph {
        ToolGraph {
            attrs: self.attrs.clone(),
            edges: self.edges.difference(removed).copied().collect(),
        }
    }

    /// Writes `edges.tsv` (`i<TAB>j` per line) and `attrs.tsv` (one row per node).
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut edges = String::new();
        for (i, j) in &self.edges {
            writeln!(edges, "{i}\t{j}").unwrap();
        }
        fs::write(dir.join("edges.tsv"), edges)?;
        let mut attrs = String::new();
        for row in self.attrs.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            attrs.push_str(&line.join("\t"));
            attrs.push('\n');
        }
        fs::write(dir.join("attrs.tsv"), attrs)?;
        Ok(())
    }
}

/// Tool graph plus the request super-node, which receives an edge from every tool.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestToolGraph {
    pub graph: ToolGraph,
    pub request_text: String,
}

impl RequestToolGraph {
    /// Index of the request node (`n` for a catalog of `n` tools).
    pub fn request_index(&self) -> usize {
        self.graph.n() - 1
    }

    pub fn n_tools(&self) -> usize {
        self.graph.n() - 1
    }
}

/// Embeds each tool document; row `i` is the attribute of tool `i`.
pub fn catalog_attrs(catalog: &ToolCatalog, embedder: &dyn Embedder) -> Result<Array2<f64>> {
    let vectors = embedder.embed_batch(&catalog.documents())?;
    Ok(stack_rows(&vectors, embedder.dim()))
}

fn stack_rows(vectors: &[AttrVector], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((vectors.len(), dim));
    for (i, v) in vectors.iter().enumerate() {
        m.row_mut(i).assign(&ArrayView1::from(v.as_slice()));
    }
    m
}

/// Deduplicated consecutive-pair edges over all trajectories, self-pairs dropped.
pub fn edges_from_trajectories(trajectories: &[Vec<usize>]) -> BTreeSet<Edge> {
    trajectories.iter().flat_map(|t| trajectory_edges(t)).collect()
}

pub fn build_tool_graph<S: AsRef<str>>(
    catalog: &ToolCatalog,
    trajectories: &[Vec<S>],
    embedder: &dyn Embedder,
) -> Result<ToolGraph> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let ids = trajectories
        .iter()
        .enumerate()
        .map(|(k, t)| {
            t.iter()
                .map(|name| {
                    catalog.id_of(name.as_ref()).ok_or_else(|| Error::UnknownTool {
                        request: format!("#{k}"),
                        tool: name.as_ref().to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ToolGraph::new(catalog_attrs(catalog, embedder)?, edges_from_trajectories(&ids))
}

pub fn augment_with_request(
    graph: &ToolGraph,
    request: &str,
    embedder: &dyn Embedder,
) -> Result<RequestToolGraph> {
    let attr = embedder.embed_text(request)?;
    augment_with_attr(graph, request, &attr)
}

/// Same as [`augment_with_request`] with a precomputed request attribute.
pub fn augment_with_attr(
    graph: &ToolGraph,
    request: &str,
    attr: &AttrVector,
) -> Result<RequestToolGraph> {
    let n = graph.n();
    if attr.dim() != graph.attr_dim() {
        return Err(Error::DimensionMismatch {
            expected: graph.attr_dim(),
            actual: attr.dim(),
        });
    }
    let mut attrs = Array2::zeros((n + 1, graph.attr_dim()));
    attrs.slice_mut(s![..n, ..]).assign(graph.attrs());
    attrs.row_mut(n).assign(&ArrayView1::from(attr.as_slice()));
    let edges = graph
        .edges()
        .iter()
        .copied()
        .chain((0..n).map(|i| (i, n)))
        .collect();
    Ok(RequestToolGraph {
        graph: ToolGraph { attrs, edges },
        request_text: request.to_string(),
    })
}

/// Tool-tool edges hidden for one round of missing-dependency prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: BTreeSet<Edge>,
    pub rho: f64,
}

impl MaskPlan {
    pub fn empty() -> Self {
        Self {
            masked: BTreeSet::new(),
            rho: 0.0,
        }
    }

    /// Masks each edge of `graph` independently with probability `rho`.
    pub fn sample<R: Rng + ?Sized>(graph: &ToolGraph, rho: f64, rng: &mut R) -> Self {
        let rho = rho.clamp(0.0, 1.0);
        let masked = graph
            .edges()
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(rho))
            .collect();
        Self { masked, rho }
    }

    /// Masks a seeded uniform `ratio` fraction (rounded) of the edges.
    pub fn fraction<R: Rng + ?Sized>(graph: &ToolGraph, ratio: f64, rng: &mut R) -> Self {
        let ratio = ratio.clamp(0.0, 1.0);
        let edges: Vec<Edge> = graph.edges().iter().copied().collect();
        let k = (edges.len() as f64 * ratio).round() as usize;
        let masked = edges.choose_multiple(rng, k).copied().collect();
        Self { masked, rho: ratio }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGraphs {
    pub graph: ToolGraph,
    pub request_graph: RequestToolGraph,
}

/// Drops the sampled edges from both `graph` and `request_graph`. Request
/// fan-in edges are never candidates.
pub fn mask_edges<R: Rng + ?Sized>(
    graph: &ToolGraph,
    request_graph: &RequestToolGraph,
    rho: f64,
    rng: &mut R,
) -> (MaskedGraphs, MaskPlan) {
    let plan = MaskPlan::sample(graph, rho, rng);
    let masked = MaskedGraphs {
        graph: graph.without_edges(&plan.masked),
        request_graph: RequestToolGraph {
            graph: request_graph.graph.without_edges(&plan.masked),
            request_text: request_graph.request_text.clone(),
        },
    };
    (masked, plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeLabel {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub source: usize,
    pub target: usize,
    pub label: EdgeLabel,
}

/// Balanced draw from masked edges (positives) and original non-edges (negatives).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSample {
    pub positives: Vec<Candidate>,
    pub negatives: Vec<Candidate>,
}

impl CandidateSample {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Candidate> {
        self.positives.iter().chain(&self.negatives)
    }
}

pub fn sample_candidates<R: Rng + ?Sized>(
    original: &ToolGraph,
    plan: &MaskPlan,
    alpha: usize,
    rng: &mut R,
) -> Result<CandidateSample> {
    if alpha == 0 {
        return Err(Error::Config("alpha must be at least 1".into()));
    }
    if plan.masked.is_empty() {
        return Err(Error::NoPositives);
    }
    let n = original.n();
    let n_non_edges = n * n.saturating_sub(1) - original.edges().len();
    if n_non_edges == 0 {
        return Err(Error::NoNegatives);
    }
    let k = alpha.min(plan.masked.len()).min(n_non_edges);

    let masked: Vec<Edge> = plan.masked.iter().copied().collect();
    let positives = masked
        .choose_multiple(rng, k)
        .map(|&(source, target)| Candidate {
            source,
            target,
            label: EdgeLabel::Yes,
        })
        .collect();

    let is_negative = |i: usize, j: usize| i != j && !original.has_edge(i, j);
    let negative_pairs: Vec<Edge> = if n_non_edges * 4 >= n * n {
        // Dense non-edge set: rejection sampling over ordered pairs.
        let mut chosen = Vec::with_capacity(k);
        let mut seen = HashSet::with_capacity(k);
        while chosen.len() < k {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if is_negative(i, j) && seen.insert((i, j)) {
                chosen.push((i, j));
            }
        }
        chosen
    } else {
        let all: Vec<Edge> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| is_negative(i, j))
            .collect();
        all.choose_multiple(rng, k).copied().collect()
    };
    let negatives = negative_pairs
        .into_iter()
        .map(|(source, target)| Candidate {
            source,
            target,
            label: EdgeLabel::No,
        })
        .collect();
    Ok(CandidateSample {
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashedEmbedder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn catalog(names: &[&str]) -> ToolCatalog {
        ToolCatalog::new(names.iter().map(|n| (n.to_string(), format!("{n} tool"))))
    }

    fn graph(n: usize, edges: &[Edge]) -> ToolGraph {
        ToolGraph::new(Array2::zeros((n, 8)), edges.iter().copied()).unwrap()
    }

    #[test]
    fn edges_follow_consecutive_pairs() {
        let cat = catalog(&["t1", "t2", "t3", "t4"]);
        let e = HashedEmbedder::new(16, 0);
        let g = build_tool_graph(&cat, &[vec!["t1", "t2", "t3"], vec!["t2", "t4"]], &e).unwrap();
        let want: BTreeSet<Edge> = [(0, 1), (1, 2), (1, 3)].into_iter().collect();
        assert_eq!(g.edges(), &want);
        assert_eq!(g.attrs().row(2).to_vec(), e.embed_text("t3 tool").unwrap().0);

        let g = build_tool_graph(&cat, &[vec!["t1"]], &e).unwrap();
        assert!(g.edges().is_empty());
        let g = build_tool_graph(&cat, &[vec!["t1", "t1", "t2"]], &e).unwrap();
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn unknown_tool_and_empty_catalog() {
        let e = HashedEmbedder::new(16, 0);
        let err = build_tool_graph(&catalog(&["a"]), &[vec!["zz"]], &e).unwrap_err();
        assert!(matches!(err, Error::UnknownTool { .. }));
        let err = build_tool_graph(&catalog(&[]), &[] as &[Vec<String>], &e).unwrap_err();
        assert!(matches!(err, Error::EmptyCatalog));
    }

    #[test]
    fn rejects_self_loops() {
        assert!(ToolGraph::new(Array2::zeros((2, 4)), [(1, 1)]).is_err());
        assert!(ToolGraph::new(Array2::zeros((2, 4)), [(0, 2)]).is_err());
    }

    #[test]
    fn augmentation_adds_fan_in() {
        let e = HashedEmbedder::new(8, 0);
        let g = graph(3, &[(0, 1), (1, 2)]);
        let gq = augment_with_request(&g, "find it", &e).unwrap();
        assert_eq!(gq.graph.n(), 4);
        assert_eq!(gq.graph.edges().len(), 5);
        assert_eq!(gq.request_index(), 3);
        assert_eq!(gq.graph.out_degree(3), 0);
        for i in 0..3 {
            assert!(gq.graph.has_edge(i, 3));
        }
        assert_eq!(gq.graph.attrs().row(3).to_vec(), e.embed_text("find it").unwrap().0);
    }

    #[test]
    fn mask_extremes() {
        let e = HashedEmbedder::new(8, 0);
        let g = graph(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let gq = augment_with_request(&g, "q", &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let (m, plan) = mask_edges(&g, &gq, 0.0, &mut rng);
        assert!(plan.masked.is_empty());
        assert_eq!(m.graph, g);
        assert_eq!(m.request_graph, gq);

        let (m, plan) = mask_edges(&g, &gq, 1.0, &mut rng);
        assert_eq!(plan.masked.len(), 4);
        assert!(m.graph.edges().is_empty());
        assert_eq!(m.request_graph.graph.edges().len(), 4);
        assert!((0..4).all(|i| m.request_graph.graph.has_edge(i, 4)));
    }

    #[test]
    fn balanced_sample_sizes() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = MaskPlan {
            masked: [(0, 1), (3, 4)].into_iter().collect(),
            rho: 0.5,
        };
        let s = sample_candidates(&g, &plan, 4, &mut rng).unwrap();
        assert_eq!(s.positives.len(), 2);
        assert_eq!(s.negatives.len(), 2);
        for c in &s.negatives {
            assert!(c.source != c.target && !g.has_edge(c.source, c.target));
        }

        assert!(matches!(
            sample_candidates(&g, &MaskPlan::empty(), 4, &mut rng),
            Err(Error::NoPositives)
        ));
        let complete = graph(3, &[(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        let plan = MaskPlan {
            masked: [(0, 1)].into_iter().collect(),
            rho: 1.0,
        };
        assert!(matches!(
            sample_candidates(&complete, &plan, 4, &mut rng),
            Err(Error::NoNegatives)
        ));
    }

    #[test]
    fn sparse_negative_pool_is_enumerated() {
        // 3 nodes, 5 of 6 ordered pairs are edges: only (2, 0) is a non-edge.
        let g = graph(3, &[(0, 1), (0, 2), (1, 0), (1, 2), (2, 1)]);
        let plan = MaskPlan {
            masked: [(0, 1), (1, 2)].into_iter().collect(),
            rho: 1.0,
        };
        let s = sample_candidates(&g, &plan, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.positives.len(), 1);
        assert_eq!(
            s.negatives,
            vec![Candidate {
                source: 2,
                target: 0,
                label: EdgeLabel::No
            }]
        );
    }

    #[test]
    fn fraction_masks_exact_count() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 4), (0, 2), (2, 4), (1, 3), (0, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(MaskPlan::fraction(&g, 0.3, &mut rng).masked.len(), 3);
        assert_eq!(MaskPlan::fraction(&g, 1.0, &mut rng).masked.len(), 10);
    }

    #[test]
    fn export_writes_edge_list() {
        let dir = tempfile::tempdir().unwrap();
        let g = graph(3, &[(0, 1), (1, 2)]);
        g.export(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("edges.tsv")).unwrap();
        assert_eq!(text, "0\t1\n1\t2\n");
        let attrs = fs::read_to_string(dir.path().join("attrs.tsv")).unwrap();
        assert_eq!(attrs.lines().count(), 3);
    }
}
