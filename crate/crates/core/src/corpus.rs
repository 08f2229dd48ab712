//! Tool catalogs, requests with ground-truth trajectories, and dataset splits.
//!
//! The native on-disk layout is a single JSON object:
//!
//! ```text
//! {
//!   "tools":    [{"name": str, "description": str}, ...],
//!   "requests": [{"id": str, "text": str, "trajectory": [str, ...]}, ...],
//!   "split":    {"train": [id, ...], "val": [id, ...], "test": [id, ...]}   // optional
//! }
//! ```
//!
//! TaskBench and ToolE directories are converted into the same structures by
//! adapters; see [`DatasetFormat`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed of the deterministic shuffle used when a source carries no split.
pub const SPLIT_SEED: u64 = 0x5eed_0001;

/// Train/val/test fractions used for synthesized splits (2178/726/726 ratio).
pub const SPLIT_FRACTIONS: (f64, f64) = (0.6, 0.2);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tool {
    pub id: usize,
    pub name: String,
    pub document: String,
}

/// The tool set, indexed by position. Lookup is by exact (case-sensitive) name.
#[derive(Debug, Clone, Default)]
pub struct ToolCatalog {
    tools: Vec<Tool>,
    by_name: HashMap<String, usize>,
}

impl PartialEq for ToolCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.tools == other.tools
    }
}

impl ToolCatalog {
    /// Builds a catalog from `(name, document)` pairs. Duplicate names are kept
    /// (so that [`validate_dataset`] can report them); lookups resolve to the first.
    pub fn new<I, N, D>(entries: I) -> Self
    where
        I: IntoIterator<Item = (N, D)>,
        N: Into<String>,
        D: Into<String>,
    {
        let tools: Vec<Tool> = entries
            .into_iter()
            .enumerate()
            .map(|(id, (name, document))| Tool {
                id,
                name: name.into(),
                document: document.into(),
            })
            .collect();
        let mut by_name = HashMap::with_capacity(tools.len());
        for tool in &tools {
            by_name.entry(tool.name.clone()).or_insert(tool.id);
        }
        Self { tools, by_name }
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn tools(&self) -> &[Tool] {
        &self.tools
    }

    pub fn get(&self, id: usize) -> Option<&Tool> {
        self.tools.get(id)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn documents(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.document.as_str()).collect()
    }

    /// Maps a trajectory of names onto catalog ids.
    pub fn resolve(&self, request_id: &str, trajectory: &[String]) -> Result<Vec<usize>> {
        trajectory
            .iter()
            .map(|name| {
                self.id_of(name).ok_or_else(|| Error::UnknownTool {
                    request: request_id.to_string(),
                    tool: name.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: String,
    pub text: String,
    pub trajectory: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub catalog: ToolCatalog,
    pub train: Vec<Request>,
    pub val: Vec<Request>,
    pub test: Vec<Request>,
}

impl Dataset {
    pub fn all_requests(&self) -> impl Iterator<Item = &Request> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn split(&self, which: Split) -> &[Request] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Train-split trajectories as catalog ids.
    pub fn train_trajectories(&self) -> Result<Vec<Vec<usize>>> {
        self.train
            .iter()
            .map(|r| self.catalog.resolve(&r.id, &r.trajectory))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_tools: usize,
    pub n_edges: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tools={} edges={} train={} val={} test={}",
            self.n_tools, self.n_edges, self.n_train, self.n_val, self.n_test
        )
    }
}

/// A single broken invariant. `request` is empty for catalog-level problems.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub request: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.request.is_empty() {
            write!(f, "catalog: {}", self.reason)
        } else {
            write!(f, "request `{}`: {}", self.request, self.reason)
        }
    }
}

/// On-disk source layouts understood by [`load_dataset`].
///
/// * `Native`: one JSON file, see the module docs.
/// * `TaskBench`: a directory holding `tool_desc.json` (`{"nodes": [{"id", "desc"}]}`)
///   and `data.json` (JSON lines with `id`, `user_request` or `instruction`, and
///   `task_nodes`/`tool_nodes` as `[{"task": name}]` in invocation order).
/// * `ToolE`: a directory holding `plugin_des.json` (`{name: description}`) and
///   `queries.json` (`[{"query": str, "tool": str | [str]}]`).
///
/// Both adapters accept an optional `split.json` (`{"train", "val", "test"}` id
/// lists); without it the split is synthesized with [`SPLIT_SEED`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Native,
    TaskBench,
    ToolE,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(DatasetFormat::Native),
            "taskbench" => Ok(DatasetFormat::TaskBench),
            "toole" => Ok(DatasetFormat::ToolE),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeTool {
    name: String,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct NativeSplit {
    #[serde(default)]
    train: Vec<String>,
    #[serde(default)]
    val: Vec<String>,
    #[serde(default)]
    test: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeFile {
    tools: Vec<NativeTool>,
    requests: Vec<Request>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<NativeSplit>,
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let (tools, requests, split) = match format {
        DatasetFormat::Native => read_native(path)?,
        DatasetFormat::TaskBench => read_taskbench(path)?,
        DatasetFormat::ToolE => read_toole(path)?,
    };
    assemble(path, tools, requests, split)
}

/// Writes `ds` in the native layout with an explicit split.
pub fn save_native(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = NativeFile {
        tools: ds
            .catalog
            .tools()
            .iter()
            .map(|t| NativeTool {
                name: t.name.clone(),
                description: t.document.clone(),
            })
            .collect(),
        requests: ds.all_requests().cloned().collect(),
        split: Some(NativeSplit {
            train: ds.train.iter().map(|r| r.id.clone()).collect(),
            val: ds.val.iter().map(|r| r.id.clone()).collect(),
            test: ds.test.iter().map(|r| r.id.clone()).collect(),
        }),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn parse_err(path: &Path, reason: impl fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

type Parts = (Vec<NativeTool>, Vec<Request>, Option<NativeSplit>);

fn read_native(path: &Path) -> Result<Parts> {
    let file: NativeFile = read_json(path)?;
    Ok((file.tools, file.requests, file.split))
}

fn read_optional_split(dir: &Path) -> Result<Option<NativeSplit>> {
    let path = dir.join("split.json");
    if path.exists() {
        read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn read_taskbench(dir: &Path) -> Result<Parts> {
    #[derive(Deserialize)]
    struct Node {
        id: String,
        #[serde(default)]
        desc: String,
    }
    #[derive(Deserialize)]
    struct ToolDesc {
        nodes: Vec<Node>,
    }
    #[derive(Deserialize)]
    struct TaskNode {
        task: String,
    }
    #[derive(Deserialize)]
    struct Row {
        id: serde_json::Value,
        #[serde(default)]
        user_request: Option<String>,
        #[serde(default)]
        instruction: Option<String>,
        #[serde(default)]
        task_nodes: Option<Vec<TaskNode>>,
        #[serde(default)]
        tool_nodes: Option<Vec<TaskNode>>,
    }

    let desc: ToolDesc = read_json(&dir.join("tool_desc.json"))?;
    let data_path = dir.join("data.json");
    let data = fs::read_to_string(&data_path)?;
    let mut requests = Vec::new();
    for (lineno, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line)
            .map_err(|e| parse_err(&data_path, format!("line {}: {e}", lineno + 1)))?;
        let id = match row.id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        let text = row
            .user_request
            .or(row.instruction)
            .ok_or_else(|| parse_err(&data_path, format!("line {}: no request text", lineno + 1)))?;
        let nodes = row.task_nodes.or(row.tool_nodes).unwrap_or_default();
        requests.push(Request {
            id,
            text,
            trajectory: nodes.into_iter().map(|n| n.task).collect(),
        });
    }
    let tools = desc
        .nodes
        .into_iter()
        .map(|n| NativeTool {
            name: n.id,
            description: n.desc,
        })
        .collect();
    Ok((tools, requests, read_optional_split(dir)?))
}

fn read_toole(dir: &Path) -> Result<Parts> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    #[derive(Deserialize)]
    struct Row {
        query: String,
        tool: OneOrMany,
    }

    let plugins: serde_json::Map<String, serde_json::Value> =
        read_json(&dir.join("plugin_des.json"))?;
    let rows: Vec<Row> = read_json(&dir.join("queries.json"))?;
    let tools = plugins
        .into_iter()
        .map(|(name, desc)| NativeTool {
            name,
            description: match desc {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            },
        })
        .collect();
    let requests = rows
        .into_iter()
        .enumerate()
        .map(|(i, row)| Request {
            id: format!("toole-{i}"),
            text: row.query,
            trajectory: match row.tool {
                OneOrMany::One(t) => vec![t],
                OneOrMany::Many(ts) => ts,
            },
        })
        .collect();
    Ok((tools, requests, read_optional_split(dir)?))
}

fn assemble(
    path: &Path,
    tools: Vec<NativeTool>,
    requests: Vec<Request>,
    split: Option<NativeSplit>,
) -> Result<Dataset> {
    if tools.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let catalog = ToolCatalog::new(
        tools
            .into_iter()
            .map(|t| (t.name.trim().to_string(), t.description)),
    );
    let requests: Vec<Request> = requests
        .into_iter()
        .map(|r| Request {
            trajectory: r.trajectory.iter().map(|t| t.trim().to_string()).collect(),
            ..r
        })
        .collect();

    for r in &requests {
        catalog.resolve(&r.id, &r.trajectory)?;
    }

    let (train, val, test) = match split {
        Some(split) => apply_split(path, requests, split)?,
        None => synthesize_split(requests, SPLIT_SEED),
    };
    let ds = Dataset {
        catalog,
        train,
        val,
        test,
    };
    let violations = validate_dataset(&ds);
    if violations.is_empty() {
        Ok(ds)
    } else {
        Err(Error::Invalid(violations))
    }
}

fn apply_split(
    path: &Path,
    requests: Vec<Request>,
    split: NativeSplit,
) -> Result<(Vec<Request>, Vec<Request>, Vec<Request>)> {
    let by_id: HashMap<&str, &Request> = requests.iter().map(|r| (r.id.as_str(), r)).collect();
    let take = |ids: &[String]| -> Result<Vec<Request>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| parse_err(path, format!("split references unknown request `{id}`")))
            })
            .collect()
    };
    Ok((take(&split.train)?, take(&split.val)?, take(&split.test)?))
}

/// Seeded shuffle into train/val/test with [`SPLIT_FRACTIONS`].
pub fn synthesize_split(
    mut requests: Vec<Request>,
    seed: u64,
) -> (Vec<Request>, Vec<Request>, Vec<Request>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    requests.shuffle(&mut rng);
    let n = requests.len();
    let n_train = (n as f64 * SPLIT_FRACTIONS.0).round() as usize;
    let n_val = ((n as f64 * SPLIT_FRACTIONS.1).round() as usize).min(n - n_train);
    let test = requests.split_off(n_train + n_val);
    let val = requests.split_off(n_train);
    (requests, val, test)
}

/// Consecutive-pair edges of one trajectory, self-pairs dropped.
pub fn trajectory_edges<T: Clone + Ord>(trajectory: &[T]) -> BTreeSet<(T, T)> {
    trajectory
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect()
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let edges: HashSet<(&str, &str)> = ds
        .train
        .iter()
        .flat_map(|r| {
            r.trajectory
                .windows(2)
                .filter(|w| w[0] != w[1])
                .map(|w| (w[0].as_str(), w[1].as_str()))
        })
        .collect();
    DatasetStats {
        n_tools: ds.catalog.len(),
        n_edges: edges.len(),
        n_train: ds.train.len(),
        n_val: ds.val.len(),
        n_test: ds.test.len(),
    }
}

pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let catalog_issue = |reason: String| Violation {
        request: String::new(),
        reason,
    };

    if ds.catalog.is_empty() {
        out.push(catalog_issue("catalog has no tools".into()));
    }
    let mut seen = HashSet::new();
    for tool in ds.catalog.tools() {
        if tool.name.is_empty() {
            out.push(catalog_issue(format!("tool #{} has an empty name", tool.id)));
        } else if !seen.insert(tool.name.as_str()) {
            out.push(catalog_issue(format!("duplicate tool name `{}`", tool.name)));
        }
    }

    let mut ids = HashSet::new();
    for r in ds.all_requests() {
        if !ids.insert(r.id.as_str()) {
            out.push(Violation {
                request: r.id.clone(),
                reason: "request id appears more than once across splits".into(),
            });
        }
        if r.trajectory.is_empty() {
            out.push(Violation {
                request: r.id.clone(),
                reason: "trajectory is empty".into(),
            });
        }
        for name in &r.trajectory {
            if ds.catalog.id_of(name).is_none() {
                out.push(Violation {
                    request: r.id.clone(),
                    reason: format!("unknown tool `{name}`"),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn req(id: &str, traj: &[&str]) -> Request {
        Request {
            id: id.into(),
            text: format!("request {id}"),
            trajectory: traj.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn ds(train: Vec<Request>) -> Dataset {
        Dataset {
            catalog: ToolCatalog::new([("A", "a"), ("B", "b"), ("C", "c"), ("D", "d")]),
            train,
            ..Default::default()
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_native_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "ds.json",
            r#"{"tools":[{"name":"A","description":"first"},{"name":"B","description":"second"}],
                "requests":[{"id":"r1","text":"do it","trajectory":["A","B"]}],
                "split":{"train":["r1"]}}"#,
        );
        let ds = load_dataset(&p, DatasetFormat::Native).unwrap();
        assert_eq!(ds.catalog.len(), 2);
        assert_eq!(ds.train.len(), 1);
        assert!(ds.val.is_empty() && ds.test.is_empty());
    }

    #[test]
    fn unknown_tool_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "ds.json",
            r#"{"tools":[{"name":"A","description":""}],
                "requests":[{"id":"r1","text":"x","trajectory":["X"]}]}"#,
        );
        match load_dataset(&p, DatasetFormat::Native) {
            Err(Error::UnknownTool { tool, .. }) => assert_eq!(tool, "X"),
            other => panic!("expected UnknownTool, got {other:?}"),
        }
    }

    #[test]
    fn empty_catalog_and_malformed_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.json", r#"{"tools":[],"requests":[]}"#);
        assert!(matches!(
            load_dataset(&p, DatasetFormat::Native),
            Err(Error::EmptyCatalog)
        ));
        let p = write(dir.path(), "m.json", "{not json");
        assert!(matches!(
            load_dataset(&p, DatasetFormat::Native),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn names_are_trimmed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "ds.json",
            r#"{"tools":[{"name":" A ","description":""}],
                "requests":[{"id":"r1","text":"x","trajectory":["A  "]}]}"#,
        );
        let ds = load_dataset(&p, DatasetFormat::Native).unwrap();
        assert_eq!(ds.catalog.id_of("A"), Some(0));
        assert_eq!(ds.catalog.id_of("a"), None);
    }

    #[test]
    fn stats_count_train_edges() {
        let d = ds(vec![req("1", &["A", "B", "C"]), req("2", &["B", "D"])]);
        let s = dataset_stats(&d);
        assert_eq!(s.n_edges, 3);
        assert_eq!(s.n_tools, 4);
        assert_eq!(dataset_stats(&ds(vec![])).n_edges, 0);
        let d = ds(vec![req("1", &["A", "A", "B"])]);
        assert_eq!(dataset_stats(&d).n_edges, 1);
    }

    #[test]
    fn validation_reports_each_problem() {
        assert!(validate_dataset(&ds(vec![req("1", &["A"])])).is_empty());

        let mut d = ds(vec![req("1", &["A"])]);
        d.catalog = ToolCatalog::new([("A", ""), ("A", "dup")]);
        let v = validate_dataset(&d);
        assert_eq!(v.len(), 1);
        assert!(v[0].reason.contains("`A`"));

        let v = validate_dataset(&ds(vec![req("r9", &[])]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].request, "r9");
    }

    #[test]
    fn synthesized_split_is_seeded_and_disjoint() {
        let reqs: Vec<Request> = (0..50).map(|i| req(&i.to_string(), &["A"])).collect();
        let a = synthesize_split(reqs.clone(), 7);
        let b = synthesize_split(reqs, 7);
        assert_eq!(a, b);
        assert_eq!((a.0.len(), a.1.len(), a.2.len()), (30, 10, 10));
        let ids: HashSet<_> = a.0.iter().chain(&a.1).chain(&a.2).map(|r| &r.id).collect();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn taskbench_and_toole_adapters() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "tool_desc.json",
            r#"{"nodes":[{"id":"Image Segmentation","desc":"segments"},{"id":"Depth Estimation","desc":"depth"}]}"#,
        );
        write(
            dir.path(),
            "data.json",
            "{\"id\":\"1\",\"user_request\":\"segment then depth\",\"task_nodes\":[{\"task\":\"Image Segmentation\"},{\"task\":\"Depth Estimation\"}]}\n\
             {\"id\":2,\"instruction\":\"depth\",\"tool_nodes\":[{\"task\":\"Depth Estimation\"}]}\n",
        );
        write(dir.path(), "split.json", r#"{"train":["1"],"test":["2"]}"#);
        let d = load_dataset(dir.path(), DatasetFormat::TaskBench).unwrap();
        assert_eq!(d.train[0].trajectory, vec!["Image Segmentation", "Depth Estimation"]);
        assert_eq!(d.test[0].id, "2");
        assert_eq!(dataset_stats(&d).n_edges, 1);

        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "plugin_des.json", r#"{"weather":"forecasts","maps":"routes"}"#);
        write(
            dir.path(),
            "queries.json",
            r#"[{"query":"rain?","tool":"weather"},{"query":"route in rain","tool":["maps","weather"]}]"#,
        );
        let d = load_dataset(dir.path(), DatasetFormat::ToolE).unwrap();
        assert_eq!(d.catalog.len(), 2);
        assert_eq!(d.all_requests().count(), 2);
    }
}
