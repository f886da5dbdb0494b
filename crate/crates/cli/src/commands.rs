use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use tabbin_core::composite::{numeric_composite, range_composite};
use tabbin_core::config::{init_threads, RunConfig};
use tabbin_core::corpus::{read_tables, read_truth, write_corpus, TRUTH_FILES};
use tabbin_core::eval::{cell_id, random_baseline, score_task, table_id, task_vectors, VectorPool};
use tabbin_core::gradcheck::{pipeline_grad_check, PipelineCheck};
use tabbin_core::persist::{bundle_from_bytes, load_bundle, read_manifest, save_bundle, save_embeddings};
use tabbin_core::pretrain::SegmentModel;
use tabbin_core::table::{is_relational, CellValue};
use tabbin_core::{
    generate_corpus, AblationFlags, Error, Featurizer, ModelBundle, Recipe, Report, SegmentKind, Table,
    Task, Vocabulary,
};

use crate::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    match path {
        Some(p) => tabbin_core::persist::write_atomic(p, format!("{text}\n").as_bytes()).map_err(CliError::from),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.out.is_some() {
        cfg.paths.out = cli.out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = resolve_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Ingest { inputs } => ingest(&inputs, out.as_deref()),
        Command::Gen { spec, tables } => {
            if let Some(p) = spec {
                let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                cfg.corpus = serde_json::from_str(&text)
                    .map_err(|e| CliError::Core(Error::Config(format!("{}: {e}", p.display()))))?;
                if cli.seed.is_none() {
                    cfg.seed = cfg.corpus.seed;
                }
            }
            if let Some(n) = tables {
                cfg.corpus.n_tables = n;
            }
            let cfg = cfg.resolve()?;
            gen(&cfg, &out.unwrap_or_else(|| PathBuf::from("corpus")))
        }
        Command::Pretrain {
            corpus,
            segment,
            steps,
            bundle,
        } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let corpus = required(corpus, &cfg.paths.corpus, "corpus")?;
            let cfg = cfg.resolve()?;
            let segments = if segment.is_empty() { SegmentKind::ALL.to_vec() } else { segment };
            let out = out.unwrap_or_else(|| PathBuf::from("bundle.tbbn"));
            pretrain(&cfg, &corpus, &segments, bundle.as_deref(), &out)
        }
        Command::Embed { corpus, bundle, recipe } => {
            let corpus = required(corpus, &cfg.paths.corpus, "corpus")?;
            let bundle = required(bundle, &cfg.paths.bundle, "bundle")?;
            let cfg = cfg.resolve()?;
            embed(&cfg, &corpus, &bundle, recipe, &out.unwrap_or_else(|| PathBuf::from("embeddings.json")))
        }
        Command::Eval {
            corpus,
            bundle,
            task,
            truth,
            k,
            random_baseline,
        } => {
            if let Some(k) = k {
                cfg.eval.k = k;
            }
            let corpus = required(corpus, &cfg.paths.corpus, "corpus")?;
            let bundle = required(bundle, &cfg.paths.bundle, "bundle")?;
            let truth = truth.or_else(|| cfg.paths.truth.clone()).unwrap_or_else(|| truth_path(&corpus, task));
            let cfg = cfg.resolve()?;
            eval(&cfg, &corpus, &bundle, task, &truth, random_baseline, out.as_deref())
        }
        Command::Ablate {
            corpus,
            drop,
            task,
            steps,
        } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let corpus = required(corpus, &cfg.paths.corpus, "corpus")?;
            let mut variants = Vec::new();
            for d in &drop {
                if d == "all" {
                    for name in ["visibility", "type", "units", "coords"] {
                        variants.push((name.to_string(), AblationFlags::drop(name)?));
                    }
                } else {
                    variants.push((d.clone(), AblationFlags::drop(d)?));
                }
            }
            let tasks = if task.is_empty() { vec![Task::Tc, Task::Cc] } else { task };
            let cfg = cfg.resolve()?;
            ablate(&cfg, &corpus, &variants, &tasks, out.as_deref())
        }
        Command::Gradcheck { samples, tolerance } => {
            let cfg = cfg.resolve()?;
            gradcheck(&cfg, samples, tolerance, out.as_deref())
        }
    }
}

fn truth_path(corpus: &Path, task: Task) -> PathBuf {
    let file = TRUTH_FILES
        .iter()
        .find(|(t, _)| *t == task.name())
        .map(|(_, f)| *f)
        .expect("every task has a truth file");
    corpus.join(file)
}

fn ingest(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut tables = Vec::new();
    for input in inputs {
        if input.is_dir() {
            tables.extend(read_tables(input)?);
        } else {
            let text = fs::read_to_string(input).map_err(|e| io_err(input, e))?;
            let t = tabbin_core::table::parse_table(&text).map_err(|e| {
                let msg = format!("{}: {e}", input.display());
                if e.is_validation() {
                    CliError::Core(Error::Schema(msg))
                } else {
                    CliError::Failed(msg)
                }
            })?;
            let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            tables.push(if t.source_id.is_empty() { t.with_source_id(stem) } else { t });
        }
    }
    let nested = tables
        .iter()
        .filter(|t| t.cells().any(|(_, _, c)| c.nested_table().is_some()))
        .count();
    let relational = tables.iter().filter(|t| is_relational(t)).count();
    let summary = json!({
        "tables": tables.len(),
        "relational": relational,
        "nonrelational": tables.len() - relational,
        "nested": nested,
        "cells": tables.iter().map(|t| t.n_rows() * t.n_cols()).sum::<usize>(),
    });
    if let Some(dir) = out {
        write_corpus(dir, &tables, None)?;
    }
    write_json(None, &summary)
}

fn gen(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (tables, truth) = generate_corpus(&cfg.corpus)?;
    write_corpus(dir, &tables, Some(&truth))?;
    write_json(Some(&dir.join("corpus.json")), &json!({ "config": cfg.to_json(), "seed": cfg.seed }))?;
    eprintln!("wrote {} tables to {}", tables.len(), dir.display());
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<Table>> {
    let tables = read_tables(dir)?;
    if tables.is_empty() {
        return Err(CliError::Usage(format!("{} holds no tables", dir.display())));
    }
    Ok(tables)
}

/// Trains `segments` and fills any other segment with fresh weights.
fn train_bundle(
    cfg: &RunConfig,
    tables: &[Table],
    segments: &[SegmentKind],
    base: Option<ModelBundle>,
    log: &mut dyn FnMut(SegmentKind, &tabbin_core::pretrain::LogRecord),
) -> Result<(ModelBundle, BTreeMap<SegmentKind, (f64, f64)>)> {
    let featurizer = match &base {
        Some(b) => b.featurizer.clone(),
        None => Featurizer::new(Vocabulary::build(tables.iter(), &cfg.vocab)),
    };
    let bundle_cfg = match &base {
        Some(b) => b.config.clone(),
        None => cfg.bundle_config(),
    };
    let train = tabbin_core::TrainConfig {
        ablations: bundle_cfg.ablations,
        ..cfg.train
    };
    let (mut bundle, outcomes) =
        ModelBundle::train_segments(bundle_cfg, featurizer, tables, &train, segments, log)?;
    let probes = outcomes
        .iter()
        .map(|(s, o)| (*s, (o.probe_initial, o.probe_final)))
        .collect();
    let fresh = ModelBundle::initialized(bundle.config.clone(), bundle.featurizer.clone(), cfg.seed ^ 0x5eed)?;
    for seg in SegmentKind::ALL {
        if bundle.models.contains_key(&seg) {
            continue;
        }
        let model: SegmentModel<f32> = match base.as_ref().and_then(|b| b.models.get(&seg)) {
            Some(m) => m.clone(),
            None => {
                log::warn!("segment {seg} is untrained; using initial weights");
                fresh.models[&seg].clone()
            }
        };
        bundle.models.insert(seg, model);
    }
    Ok((bundle, probes))
}

fn pretrain(cfg: &RunConfig, corpus: &Path, segments: &[SegmentKind], base: Option<&Path>, out: &Path) -> Result<()> {
    let tables = load_corpus(corpus)?;
    let mut trained: Vec<String> = segments.iter().map(|s| s.name().to_string()).collect();
    let base = match base {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
            let (manifest, _) = read_manifest(&bytes)?;
            if let Some(list) = manifest.provenance.get("trained").and_then(|t| t.as_array()) {
                trained.extend(list.iter().filter_map(|s| s.as_str().map(String::from)));
            }
            Some(bundle_from_bytes(&bytes)?)
        }
        None => None,
    };
    trained.sort();
    trained.dedup();

    let log_path = out.with_extension("log.jsonl");
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut log_file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    writeln!(log_file, "{}", json!({ "config": cfg.to_json(), "seed": cfg.seed })).map_err(|e| io_err(&log_path, e))?;
    let mut write_err = None;
    let mut on_log = |seg: SegmentKind, r: &tabbin_core::pretrain::LogRecord| {
        let line = json!({"segment": seg, "step": r.step, "mlm_loss": r.mlm_loss, "clc_loss": r.clc_loss, "lr": r.lr, "wall_ms": r.wall_ms});
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
        if r.step % 100 == 0 {
            log::info!("{seg} step {} mlm {:.4} clc {:.4}", r.step, r.mlm_loss, r.clc_loss);
        }
    };
    let (bundle, probes) = train_bundle(cfg, &tables, segments, base, &mut on_log)?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path, e));
    }
    let probe_json: BTreeMap<String, serde_json::Value> = probes
        .iter()
        .map(|(s, (a, b))| (s.name().to_string(), json!({"initial": a, "final": b})))
        .collect();
    save_bundle(
        &bundle,
        out,
        json!({ "run": cfg.to_json(), "seed": cfg.seed, "trained": trained, "probe_mlm_loss": probe_json }),
    )?;
    for (s, (a, b)) in &probes {
        eprintln!("{s}: probe MLM loss {a:.4} -> {b:.4}");
    }
    eprintln!("saved bundle to {}", out.display());
    Ok(())
}

fn embed(cfg: &RunConfig, corpus: &Path, bundle_path: &Path, recipe: Recipe, out: &Path) -> Result<()> {
    let tables = load_corpus(corpus)?;
    let bundle = load_bundle(bundle_path)?;
    let vectors: VectorPool = match recipe {
        Recipe::Colcomp => tabbin_core::eval::column_vectors(&tables, &bundle)?.0,
        Recipe::Tblcomp1 | Recipe::Tblcomp2 => tabbin_core::eval::table_vectors(&tables, &bundle, recipe)?,
        Recipe::Numeric | Recipe::Range => value_vectors(&tables, &bundle, recipe)?,
    };
    if vectors.is_empty() {
        return Err(CliError::Usage(format!("the corpus has no items for recipe {recipe}")));
    }
    save_embeddings(
        out,
        &vectors,
        &recipe.to_string(),
        bundle.hidden(),
        json!({ "run": cfg.to_json(), "bundle": bundle.config, "seed": cfg.seed }),
    )?;
    eprintln!("wrote {} {recipe} embeddings to {}", vectors.len(), out.display());
    Ok(())
}

/// Numeric or range composites of every matching data cell, keyed by cell id
/// and labelled with the column's leaf header.
fn value_vectors(tables: &[Table], bundle: &ModelBundle, recipe: Recipe) -> Result<VectorPool> {
    let mut out = VectorPool::new();
    for (ti, t) in tables.iter().enumerate() {
        let tid = table_id(t, ti);
        let leaves: Vec<String> = t.hmd.leaves().iter().map(|v| v.node.label.clone()).collect();
        for (i, j, cell) in t.cells() {
            let attr = leaves.get(j).map_or("", String::as_str);
            let v = match (&cell.value, recipe) {
                (CellValue::Number(x), Recipe::Numeric) => numeric_composite(attr, x, cell.unit, bundle)?,
                (CellValue::Range { lo, hi }, Recipe::Range) => range_composite(attr, cell.unit, lo, hi, bundle)?,
                _ => continue,
            };
            out.insert(cell_id(&tid, i, j), v.vector);
        }
    }
    Ok(out)
}

fn eval(
    cfg: &RunConfig,
    corpus: &Path,
    bundle_path: &Path,
    task: Task,
    truth: &Path,
    baseline: bool,
    out: Option<&Path>,
) -> Result<()> {
    let tables = load_corpus(corpus)?;
    let bundle = load_bundle(bundle_path)?;
    let truth = read_truth(truth)?;
    let vectors = task_vectors(task, &tables, &bundle, &truth, &cfg.eval)?;
    let mut strata = score_task(task, &vectors, &truth, &cfg.eval)?;
    if baseline {
        for mut s in random_baseline(task, &vectors, &truth, &cfg.eval, cfg.seed)? {
            s.name = format!("random_baseline/{}", s.name);
            strata.push(s);
        }
    }
    let report = Report {
        task,
        strata,
        config: json!({ "run": cfg.to_json(), "bundle": bundle.config }),
        seed: cfg.seed,
    };
    write_json(out, &serde_json::to_value(&report).expect("report serializes"))
}

fn ablate(
    cfg: &RunConfig,
    corpus: &Path,
    variants: &[(String, AblationFlags)],
    tasks: &[Task],
    out: Option<&Path>,
) -> Result<()> {
    let tables = load_corpus(corpus)?;
    let truths: BTreeMap<Task, _> = tasks
        .iter()
        .map(|t| Ok((*t, read_truth(&truth_path(corpus, *t))?)))
        .collect::<Result<_>>()?;
    let score = |flags: AblationFlags| -> Result<BTreeMap<Task, (f64, f64)>> {
        let run = RunConfig {
            ablations: flags,
            ..cfg.clone()
        }
        .resolve()?;
        let (bundle, _) = train_bundle(&run, &tables, &SegmentKind::ALL, None, &mut |_, _| {})?;
        let mut scores = BTreeMap::new();
        for task in tasks {
            let vectors = task_vectors(*task, &tables, &bundle, &truths[task], &run.eval)?;
            let all = score_task(*task, &vectors, &truths[task], &run.eval)?;
            scores.insert(*task, (all[0].map, all[0].mrr));
        }
        Ok(scores)
    };
    let full = score(AblationFlags::none())?;
    let mut rows = Vec::new();
    for task in tasks {
        let (m, r) = full[task];
        rows.push(json!({"variant": "full", "task": task, "map": m, "mrr": r, "delta_map": 0.0, "delta_mrr": 0.0}));
    }
    for (name, flags) in variants {
        let s = score(*flags)?;
        for task in tasks {
            let (m, r) = s[task];
            let (fm, fr) = full[task];
            rows.push(json!({"variant": format!("-{name}"), "task": task, "map": m, "mrr": r, "delta_map": m - fm, "delta_mrr": r - fr}));
        }
    }
    println!("{:<12} {:<4} {:>7} {:>7} {:>8} {:>8}", "variant", "task", "map", "mrr", "d_map", "d_mrr");
    for row in &rows {
        println!(
            "{:<12} {:<4} {:>7.4} {:>7.4} {:>+8.4} {:>+8.4}",
            row["variant"].as_str().unwrap_or(""),
            row["task"].as_str().unwrap_or(""),
            row["map"].as_f64().unwrap_or(f64::NAN),
            row["mrr"].as_f64().unwrap_or(f64::NAN),
            row["delta_map"].as_f64().unwrap_or(f64::NAN),
            row["delta_mrr"].as_f64().unwrap_or(f64::NAN),
        );
    }
    if let Some(p) = out {
        write_json(Some(p), &json!({ "config": cfg.to_json(), "seed": cfg.seed, "rows": rows }))?;
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, samples: usize, tolerance: f64, out: Option<&Path>) -> Result<()> {
    let check = PipelineCheck {
        seed: cfg.seed,
        mask_mode: cfg.encoder.mask_mode,
        flags: cfg.ablations,
        ..Default::default()
    };
    let report = pipeline_grad_check(&check, samples)?;
    for t in &report.tensors {
        println!("{:<28} {:>5} {:.3e}", t.name, t.checked, t.max_rel_error);
    }
    println!("max relative error {:.3e} (tolerance {tolerance:.0e})", report.max_rel_error);
    if let Some(p) = out {
        write_json(Some(p), &json!({ "config": cfg.to_json(), "check": check, "seed": cfg.seed, "report": report }))?;
    }
    if report.max_rel_error < tolerance {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: {:.3e} exceeds {tolerance:.0e}",
            report.max_rel_error
        )))
    }
}
