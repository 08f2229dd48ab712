use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use gtool_core::corpus::{self, Dataset, Split};
use gtool_core::embed::Embedder;
use gtool_core::evalkit::{self, MetricsReport, Planner};
use gtool_core::gnn::{self, EncoderParams};
use gtool_core::lmbridge::{LanguageModel, MockLm, RemoteLm};
use gtool_core::synth::{self, SyntheticSpec};
use gtool_core::toolgraph::{self, MaskPlan, ToolGraph};
use gtool_core::trainer::{self, Ablation, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command, EvalArgs, MissingFlag, PlanArgs, RunArgs, SweepArgs, SynthArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx {
        timestamps: !cli.no_timestamps,
    };
    match &cli.command {
        Command::BuildGraph(args) => build_graph(args),
        Command::Train(args) => ctx.train(args),
        Command::Plan(args) => plan(args),
        Command::Eval(args) => ctx.eval(args),
        Command::Ablate(args) => ctx.ablate(args),
        Command::Sweep(args) => ctx.sweep(args),
        Command::Synth(args) => synth_cmd(args),
    }
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(p) = &args.dataset {
        cfg.dataset.path = Some(p.clone());
    }
    if let Some(f) = args.format {
        cfg.dataset.format = f;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(k) = args.embedder {
        cfg.embedder.kind = k;
    }
    if let Some(d) = args.embed_dim {
        cfg.embedder.dim = d;
    }
    if let Some(e) = &args.embed_endpoint {
        cfg.embedder.endpoint = Some(e.clone());
    }
    if let Some(l) = args.layers {
        cfg.encoder.layers = l;
    }
    if let Some(h) = args.hidden_dim {
        cfg.encoder.hidden_dim = h;
    }
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.lambda {
        t.lambda = v;
    }
    if let Some(v) = args.alpha {
        t.alpha = v;
    }
    if let Some(v) = args.rho {
        t.rho = v;
    }
    if let Some(v) = args.patience {
        t.patience = v;
    }
    if let Some(v) = args.min_epochs {
        t.min_epochs = v;
    }
    if let Some(v) = args.ablation {
        t.ablation = v;
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    cfg.finish()
}

/// Dataset, embedder, frozen LM and train-split tool graph for one run.
struct Loaded {
    ds: Dataset,
    embedder: Box<dyn Embedder>,
    lm: MockLm,
    graph: ToolGraph,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let path = cfg.dataset_path()?;
    let ds = corpus::load_dataset(path, cfg.dataset.format)?;
    let embedder = cfg.embedder.build()?;
    let trajectories: Vec<Vec<String>> = ds.train.iter().map(|r| r.trajectory.clone()).collect();
    let graph = toolgraph::build_tool_graph(&ds.catalog, &trajectories, embedder.as_ref())?;
    let lm = MockLm::for_catalog(&ds.catalog, cfg.lm);
    Ok(Loaded {
        ds,
        embedder,
        lm,
        graph,
    })
}

fn load_params(path: Option<&Path>, cfg: &RunConfig) -> Result<EncoderParams> {
    let path = path.ok_or(MissingFlag("--checkpoint"))?;
    let params = gnn::load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let c = params.config;
    if c.attr_dim != cfg.embedder.dim || c.lm_dim != cfg.lm.dim {
        return Err(gtool_core::Error::ShapeMismatch(format!(
            "checkpoint expects attr_dim {} and lm_dim {}, run has {} and {}",
            c.attr_dim, c.lm_dim, cfg.embedder.dim, cfg.lm.dim
        ))
        .into());
    }
    Ok(params)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn build_graph(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let loaded = load(&cfg)?;
    let out = cfg.ensure_out_dir()?;
    loaded.graph.export(out)?;
    println!("{}", corpus::dataset_stats(&loaded.ds));
    println!("edge list: {}", out.join("edges.tsv").display());
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_tools: args.tools,
        edge_prob: args.edge_prob,
        n_requests: args.requests,
        min_len: args.min_len,
        max_len: args.max_len,
        vocab_seed: args.vocab_seed,
    };
    let ds = synth::generate_synthetic(&spec, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    corpus::save_native(&ds, &args.out)?;
    println!("{}", corpus::dataset_stats(&ds));
    Ok(())
}

fn plan(args: &PlanArgs) -> Result<()> {
    let cfg = resolve(&args.run)?;
    let params = load_params(args.checkpoint.as_deref(), &cfg)?;
    let loaded = load(&cfg)?;
    let remote;
    let lm: &dyn LanguageModel = if args.remote_lm {
        remote = RemoteLm::from_env()?;
        &remote
    } else {
        &loaded.lm
    };
    let planner = Planner {
        catalog: &loaded.ds.catalog,
        graph: &loaded.graph,
        params: &params,
        lm,
        embedder: loaded.embedder.as_ref(),
        ablation: cfg.train.ablation,
        max_len: cfg.train.max_len,
    };
    let request = corpus::Request {
        id: "cli".into(),
        text: args.request.clone(),
        trajectory: Vec::new(),
    };
    let result = planner.plan(&request)?;
    println!("{}", result.predicted.join(", "));
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    started_unix: Option<u64>,
}

struct AblationRow {
    ablation: Ablation,
    report: MetricsReport,
}

struct Ctx {
    timestamps: bool,
}

impl Ctx {
    fn manifest(&self, command: &str, cfg: &RunConfig, out: &Path) -> Result<()> {
        let started_unix = self.timestamps.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .unwrap_or(Duration::ZERO)
                .as_secs()
        });
        write_json(
            &out.join("run.json"),
            &RunManifest {
                command,
                config: cfg,
                started_unix,
            },
        )
    }

    fn train_report(&self, mut r: TrainReport) -> TrainReport {
        if !self.timestamps {
            r.wall_time_secs = 0.0;
        }
        r
    }

    fn metrics(&self, r: MetricsReport) -> MetricsReport {
        if self.timestamps {
            r
        } else {
            r.without_timings()
        }
    }

    fn train(&self, args: &RunArgs) -> Result<()> {
        let cfg = resolve(args)?;
        let loaded = load(&cfg)?;
        let out = cfg.ensure_out_dir()?;
        self.manifest("train", &cfg, out)?;
        let (params, report) = trainer::train_on_graph(
            &loaded.ds,
            &loaded.graph,
            &cfg.train,
            &cfg.encoder,
            loaded.embedder.as_ref(),
            &loaded.lm,
        )?;
        let ckpt = out.join("checkpoint.json");
        gnn::save_checkpoint(&params, &ckpt)?;
        let mut report = self.train_report(report);
        report.checkpoint = Some(ckpt.clone());
        report.write_json(&out.join("train_report.json"))?;
        println!(
            "trained {} epochs (best {:?}); checkpoint {}",
            report.epochs.len(),
            report.best_epoch,
            ckpt.display()
        );
        Ok(())
    }

    fn eval(&self, args: &EvalArgs) -> Result<()> {
        let cfg = resolve(&args.run)?;
        let params = load_params(args.checkpoint.as_deref(), &cfg)?;
        if !(0.0..=1.0).contains(&args.mask_ratio) {
            return Err(gtool_core::Error::Config(format!("mask ratio {} outside [0, 1]", args.mask_ratio)).into());
        }
        let loaded = load(&cfg)?;
        let out = cfg.ensure_out_dir()?;
        let mut rng = ChaCha8Rng::seed_from_u64(evalkit::deletion_seed(cfg.train.seed, args.mask_ratio));
        let removed = MaskPlan::fraction(&loaded.graph, args.mask_ratio, &mut rng);
        let graph = loaded.graph.without_edges(&removed.masked);
        let planner = Planner {
            catalog: &loaded.ds.catalog,
            graph: &graph,
            params: &params,
            lm: &loaded.lm,
            embedder: loaded.embedder.as_ref(),
            ablation: cfg.train.ablation,
            max_len: cfg.train.max_len,
        };
        let split = loaded.ds.split(args.split);
        let report = self.metrics(evalkit::evaluate_with_ratio(split, &planner, args.mask_ratio));
        let stem = format!("eval_{}", split_name(args.split));
        report.write(out, &stem)?;
        println!(
            "{} requests: n_f1={:.4} l_f1={:.4} ned={:.4}",
            report.rows.len(),
            report.n_f1,
            report.l_f1,
            report.ned
        );
        Ok(())
    }

    fn ablate(&self, args: &RunArgs) -> Result<()> {
        let cfg = resolve(args)?;
        let loaded = load(&cfg)?;
        let out = cfg.ensure_out_dir()?.to_path_buf();
        self.manifest("ablate", &cfg, &out)?;
        let mut rows = Vec::new();
        for ablation in Ablation::ALL {
            let train_cfg = trainer::TrainConfig {
                ablation,
                ..cfg.train.clone()
            };
            let (params, report) = trainer::train_on_graph(
                &loaded.ds,
                &loaded.graph,
                &train_cfg,
                &cfg.encoder,
                loaded.embedder.as_ref(),
                &loaded.lm,
            )?;
            let dir = out.join(ablation.name());
            std::fs::create_dir_all(&dir)?;
            gnn::save_checkpoint(&params, dir.join("checkpoint.json"))?;
            self.train_report(report).write_json(&dir.join("train_report.json"))?;
            let planner = Planner {
                catalog: &loaded.ds.catalog,
                graph: &loaded.graph,
                params: &params,
                lm: &loaded.lm,
                embedder: loaded.embedder.as_ref(),
                ablation,
                max_len: train_cfg.max_len,
            };
            let metrics = self.metrics(evalkit::evaluate(&loaded.ds.test, &planner));
            metrics.write(&dir, "eval_test")?;
            log::info!("{ablation}: n_f1={:.4}", metrics.n_f1);
            rows.push(AblationRow {
                ablation,
                report: metrics,
            });
        }
        let table = ablation_table(&rows);
        std::fs::write(out.join("ablation.tsv"), &table)?;
        print!("{table}");
        Ok(())
    }

    fn sweep(&self, args: &SweepArgs) -> Result<()> {
        let cfg = resolve(&args.run)?;
        let loaded = load(&cfg)?;
        let out = cfg.ensure_out_dir()?.to_path_buf();
        self.manifest("sweep", &cfg, &out)?;
        let points = evalkit::robustness_sweep(
            &loaded.ds,
            &cfg.train,
            &cfg.encoder,
            loaded.embedder.as_ref(),
            &loaded.lm,
            &args.ratios,
        )?;
        let mut table = String::from("ratio\tremoved_edges\tn_f1\tl_f1\tned\n");
        for p in points {
            let report = self.metrics(p.report);
            report.write(&out, &format!("sweep_{}", p.ratio))?;
            writeln!(
                table,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                p.ratio, p.removed_edges, report.n_f1, report.l_f1, report.ned
            )?;
        }
        std::fs::write(out.join("sweep.tsv"), &table)?;
        print!("{table}");
        Ok(())
    }
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut t = String::from("variant\tn_f1\tl_f1\tned\n");
    for r in rows {
        writeln!(
            t,
            "{}\t{:.4}\t{:.4}\t{:.4}",
            r.ablation, r.report.n_f1, r.report.l_f1, r.report.ned
        )
        .unwrap();
    }
    t
}
