//! Seeded synthetic tool universes: a random DAG over tools, requests that
//! follow source-to-sink paths, and tool documents that name their parents.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Dataset, Request, ToolCatalog};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_tools: usize,
    /// Probability of each forward edge `i -> j`, `i < j`.
    pub edge_prob: f64,
    pub n_requests: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seeds tool names and filler words.
    pub vocab_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tools: 20,
            edge_prob: 0.15,
            n_requests: 200,
            min_len: 1,
            max_len: 5,
            vocab_seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tools < 2 {
            return Err(Error::Config("synthetic universe needs at least 2 tools".into()));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob <= 1.0) {
            return Err(Error::Config(format!("edge probability {} outside (0, 1]", self.edge_prob)));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "bad trajectory length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

const HEADS: &[&str] = &[
    "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "indigo", "jasper",
    "kelp", "lumen", "marble", "nectar", "onyx", "pebble", "quartz", "russet", "saffron", "tundra",
    "umber", "velvet", "willow", "xenon", "yarrow", "zephyr",
];

const TAILS: &[&str] = &[
    "parser", "router", "scanner", "weaver", "ledger", "forge", "lens", "mixer", "sorter", "vault",
    "beacon", "sketcher", "tagger", "reader", "painter", "compass", "sifter", "binder",
];

const FILLER: &[&str] = &[
    "please", "quickly", "kindly", "today", "for", "me", "the", "my", "project", "files", "data",
    "now", "report", "team", "carefully", "again", "soon", "notes",
];

/// Generated dataset plus the DAG it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUniverse {
    pub dataset: Dataset,
    pub dag: BTreeSet<(usize, usize)>,
}

fn tool_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(n);
    while names.len() < n {
        let name = if seen.len() < HEADS.len() * TAILS.len() {
            format!("{}-{}", HEADS.choose(rng).unwrap(), TAILS.choose(rng).unwrap())
        } else {
            format!("tool-{}", names.len())
        };
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }
    names
}

fn paths_from(
    start: usize,
    children: &[Vec<usize>],
    max_len: usize,
    path: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    path.push(start);
    if children[start].is_empty() {
        out.push(path.clone());
    } else if path.len() < max_len {
        for &c in &children[start] {
            paths_from(c, children, max_len, path, out);
        }
    }
    path.pop();
}

fn request_text(src: &str, sink: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = Vec::new();
    let n = rng.gen_range(1..=3);
    for _ in 0..n {
        words.push(FILLER.choose(rng).unwrap());
    }
    if src == sink {
        format!("run {src} {}", words.join(" "))
    } else {
        format!("start with {src} and end with {sink} {}", words.join(" "))
    }
}

/// Samples a universe. Each request follows the canonical path of a randomly
/// chosen (source, sink) pair, so its text determines its trajectory.
pub fn generate_universe(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticUniverse> {
    spec.validate()?;
    let n = spec.n_tools;
    let mut vocab_rng = ChaCha8Rng::seed_from_u64(spec.vocab_seed);
    let names = tool_names(n, &mut vocab_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut dag = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(spec.edge_prob) {
                dag.insert((i, j));
            }
        }
    }
    let mut children = vec![Vec::new(); n];
    let mut parents = vec![Vec::new(); n];
    for &(i, j) in &dag {
        children[i].push(j);
        parents[j].push(i);
    }

    let mut by_pair: BTreeMap<(usize, usize), Vec<Vec<usize>>> = BTreeMap::new();
    for src in (0..n).filter(|&i| parents[i].is_empty()) {
        let mut found = Vec::new();
        paths_from(src, &children, spec.max_len, &mut Vec::new(), &mut found);
        for p in found.into_iter().filter(|p| p.len() >= spec.min_len) {
            by_pair.entry((p[0], *p.last().unwrap())).or_default().push(p);
        }
    }
    if by_pair.is_empty() {
        return Err(Error::Config(format!(
            "no source-to-sink path of length {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let canonical: Vec<Vec<usize>> = by_pair
        .into_values()
        .map(|paths| paths.choose(&mut rng).unwrap().clone())
        .collect();

    let documents: Vec<String> = (0..n)
        .map(|i| {
            let own = format!("{} is a {} utility.", names[i], names[i].replace('-', " "));
            if parents[i].is_empty() {
                format!("{own} It works directly on the user input.")
            } else {
                let ps: Vec<&str> = parents[i].iter().map(|&p| names[p].as_str()).collect();
                format!("{own} It consumes the output of {}.", ps.join(", "))
            }
        })
        .collect();
    let catalog = ToolCatalog::new(names.iter().cloned().zip(documents));

    let requests: Vec<Request> = (0..spec.n_requests)
        .map(|k| {
            let path = canonical.choose(&mut rng).unwrap();
            let src = &names[path[0]];
            let sink = &names[*path.last().unwrap()];
            Request {
                id: format!("syn-{k:04}"),
                text: request_text(src, sink, &mut vocab_rng),
                trajectory: path.iter().map(|&i| names[i].clone()).collect(),
            }
        })
        .collect();
    let (train, val, test) = corpus::synthesize_split(requests, seed ^ corpus::SPLIT_SEED);
    Ok(SyntheticUniverse {
        dataset: Dataset {
            catalog,
            train,
            val,
            test,
        },
        dag,
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    generate_universe(spec, seed).map(|u| u.dataset)
}
