//! Subcommand implementations. Each returns whether every sample succeeded.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use anyhow::{anyhow, Context as _};
use rapo_core::corpus::{load_corpus, Corpus, PromptRecord, PromptSource};
use rapo_core::export::{self, InstructionPair, PairMeta};
use rapo_core::graph::{self, BuildOptions, RelationGraph};
use rapo_core::providers::{CallEntry, CallRecorder, ProviderSet};
use rapo_core::refine::{self, Branch, CandidatePrompt, SelectionExample, Stage1Config, Stage1Result};
use rapo_core::sspo::{self, FeedbackMemory, StopReason};
use rapo_core::templates;
use serde::{Deserialize, Serialize};

use crate::config::{build_providers, ResolvedConfig};
use crate::store::{sample_key, SampleStatus, StageStatus, State, RunStore};
use crate::{CliError, Exit};

pub const STAGE1_RESULTS: &str = "stage1/results.jsonl";
pub const PAIRS_FILE: &str = "sspo/pairs.jsonl";
pub const TRAJECTORY_FILE: &str = "sspo/trajectory.tsv";
pub const EXPORT_FILE: &str = "export/finetune.jsonl";

fn startup(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Startup(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn stage1_rel(id: &str) -> String {
    format!("stage1/samples/{}.json", sample_key(id))
}

fn memory_rel(id: &str) -> String {
    format!("sspo/memory/{}.mem", sample_key(id))
}

fn outcome_rel(id: &str) -> String {
    format!("sspo/outcomes/{}.json", sample_key(id))
}

fn calls_rel(stage: &str, id: &str) -> String {
    format!("calls/{stage}/{}.jsonl", sample_key(id))
}

/// Runs `work` over `items` on a pool of `workers` threads. Results reach
/// `sink` on the calling thread, which is the only writer of shared state.
pub fn run_pool<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    work: impl Fn(&T) -> R + Sync,
    mut sink: impl FnMut(usize, R) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() || tx.send((i, work(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut result = Ok(());
        for (i, r) in rx.iter() {
            if let Err(e) = sink(i, r) {
                result = Err(e);
                break;
            }
        }
        drop(rx);
        result
    })
}

fn load_input(cfg: &ResolvedConfig, rel: Option<&String>, key: &str, source: PromptSource) -> Result<Corpus, CliError> {
    let rel = rel.ok_or_else(|| startup(anyhow!("paths.{key} is not set in the config")))?;
    let path = cfg.resolve(rel);
    let loaded = load_corpus(&path, source).map_err(startup)?;
    if !loaded.rejects.is_empty() {
        let at = loaded.rejects.write_beside(&path).map_err(runtime)?;
        tracing::warn!(rejected = loaded.rejects.len(), report = %at.display(), "some corpus lines were rejected");
    }
    let mut corpus = loaded.corpus;
    corpus.origin = rel.clone();
    if corpus.is_empty() {
        return Err(startup(anyhow!("{}: no usable prompts", path.display())));
    }
    Ok(corpus)
}

fn training_corpus(cfg: &ResolvedConfig) -> Result<Corpus, CliError> {
    load_input(cfg, cfg.file.paths.corpus.as_ref(), "corpus", PromptSource::TrainingCorpus)
}

fn user_prompts(cfg: &ResolvedConfig) -> Result<Corpus, CliError> {
    load_input(cfg, cfg.file.paths.prompts.as_ref(), "prompts", PromptSource::User)
}

fn open_graph(cfg: &ResolvedConfig) -> Result<RelationGraph, CliError> {
    let path = cfg.graph_path();
    if !path.exists() {
        return Err(startup(anyhow!(
            "graph file {} not found; run `rapo graph build` first",
            path.display()
        )));
    }
    graph::load_graph(&path).map_err(startup)
}

fn providers(cfg: &ResolvedConfig) -> Result<ProviderSet, CliError> {
    build_providers(cfg).map_err(startup)
}

fn stage_status(completed: usize, failed: usize) -> StageStatus {
    let state = match (completed, failed) {
        (_, 0) => State::Done,
        (0, _) => State::Failed,
        _ => State::Partial,
    };
    StageStatus {
        state,
        completed,
        failed,
    }
}

/// Call log in a worker-count independent order.
fn sorted_log(mut entries: Vec<CallEntry>) -> String {
    entries.sort_by(|a, b| (&a.request_hash, &a.role).cmp(&(&b.request_hash, &b.role)));
    entries
        .into_iter()
        .enumerate()
        .map(|(i, mut e)| {
            e.seq = i as u64;
            serde_json::to_string(&e).expect("call entry serializes") + "\n"
        })
        .collect()
}

fn append_log(store: &RunStore, rel: &str, log: &str) -> Result<(), CliError> {
    let mut content = std::fs::read(store.path(rel)).unwrap_or_default();
    content.extend_from_slice(log.as_bytes());
    store.write(rel, &content).map_err(runtime)
}

pub fn graph_build(cfg: &ResolvedConfig, store: &mut RunStore, now: u64, out: &mut dyn Write) -> Result<Exit, CliError> {
    let corpus = training_corpus(cfg)?;
    let providers = providers(cfg)?;
    let recorder = CallRecorder::new();
    let inst = providers.instrumented(&recorder, cfg.retry_policy());
    let options = BuildOptions {
        workers: cfg.workers,
        timestamp: now,
        seed: Some(cfg.seed()),
    };
    let built = graph::build_graph(&corpus, inst.llm.as_ref(), inst.embedder.as_ref(), &options);
    store
        .write("calls/graph-build.jsonl", sorted_log(recorder.entries()).as_bytes())
        .map_err(runtime)?;
    let (g, report) = built.map_err(runtime)?;
    let path = cfg.graph_path();
    graph::save_graph(&g, &path).map_err(runtime)?;
    if !report.skipped.is_empty() {
        let tsv: String = report.skipped.iter().map(|s| format!("{}\t{}\n", s.id, s.reason)).collect();
        store.write("graph-build.skipped.tsv", tsv.as_bytes()).map_err(runtime)?;
    }
    store
        .set_stage("graph_build", stage_status(report.extracted, report.skipped.len()))
        .map_err(runtime)?;
    let modifiers: usize = g.scenes().map(|s| s.all_modifiers().count()).sum();
    let _ = writeln!(
        out,
        "graph: {} scenes, {modifiers} modifiers from {} prompts ({} skipped) -> {}",
        g.len(),
        report.extracted,
        report.skipped.len(),
        path.display()
    );
    Ok(if report.skipped.is_empty() { Exit::Success } else { Exit::Partial })
}

pub fn graph_query(
    cfg: &ResolvedConfig,
    prompt: &str,
    k_scene: Option<usize>,
    k_mod: Option<usize>,
    out: &mut dyn Write,
) -> Result<Exit, CliError> {
    let g = open_graph(cfg)?;
    let providers = providers(cfg)?;
    let r = graph::retrieve(
        &g,
        prompt,
        providers.embedder.as_ref(),
        k_scene.unwrap_or(cfg.file.graph.k_scene),
        k_mod.unwrap_or(cfg.file.graph.k_mod),
    )
    .map_err(runtime)?;
    for s in &r.scenes {
        let _ = writeln!(out, "scene\t{}\t{}", s.id, export::format_sig6(s.score));
    }
    for m in &r.modifiers {
        let _ = writeln!(
            out,
            "modifier\t{}\t{}\t{}\t{}",
            m.modifier.category,
            m.modifier.text,
            m.scene,
            export::format_sig6(m.score)
        );
    }
    Ok(Exit::Success)
}

pub fn optimize(cfg: &ResolvedConfig, store: &mut RunStore, out: &mut dyn Write) -> Result<Exit, CliError> {
    let g = open_graph(cfg)?;
    let prompts = user_prompts(cfg)?;
    let providers = providers(cfg)?;
    let merge_examples = match &cfg.file.paths.merge_examples {
        Some(p) => templates::load_merge_examples(&cfg.resolve(p)).map_err(|e| startup(anyhow!(e)))?,
        None => templates::default_merge_examples(),
    };
    let s1 = Stage1Config {
        k_scene: cfg.file.graph.k_scene,
        k_mod: cfg.file.graph.k_mod,
        seed: Some(cfg.seed()),
        merge_examples,
    };
    let policy = cfg.retry_policy();
    let todo: Vec<&PromptRecord> = prompts.iter().filter(|r| !store.exists(&stage1_rel(&r.id))).collect();
    let skipped = prompts.len() - todo.len();
    let (mut done, mut failed) = (0, 0);
    run_pool(
        &todo,
        cfg.workers,
        |rec| {
            let recorder = CallRecorder::new();
            let inst = providers.instrumented(&recorder, policy);
            (refine::run_stage1(rec, &g, &inst, &s1), recorder.render())
        },
        |i, (result, log)| {
            let id = &todo[i].id;
            let calls = calls_rel("optimize", id);
            append_log(store, &calls, &log)?;
            let status = match result {
                Ok(r) => {
                    let json = serde_json::to_string(&r).expect("stage-1 result serializes") + "\n";
                    store.write(&stage1_rel(id), json.as_bytes()).map_err(runtime)?;
                    done += 1;
                    SampleStatus {
                        state: State::Done,
                        error: None,
                        calls: Some(calls),
                    }
                }
                Err(e) => {
                    tracing::error!(sample = %id, error = %e, "stage 1 failed");
                    failed += 1;
                    SampleStatus {
                        state: State::Failed,
                        error: Some(e.to_string()),
                        calls: Some(calls),
                    }
                }
            };
            store.set_sample("optimize", id, status);
            store.persist().map_err(runtime)
        },
    )?;

    let mut results = String::new();
    for rec in prompts.iter() {
        if let Ok(text) = std::fs::read_to_string(store.path(&stage1_rel(&rec.id))) {
            results.push_str(&text);
        }
    }
    store.write(STAGE1_RESULTS, results.as_bytes()).map_err(runtime)?;
    store
        .set_stage("optimize", stage_status(done + skipped, failed))
        .map_err(runtime)?;
    let _ = writeln!(out, "optimize: {done} done, {skipped} already complete, {failed} failed");
    Ok(if failed == 0 { Exit::Success } else { Exit::Partial })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SspoInput {
    /// Seed each loop with the Stage-1 selected prompt.
    Stage1,
    /// Seed each loop with the raw user prompt.
    Prompts,
}

/// One finished loop, as stored in `sspo/outcomes/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SspoOutcome {
    pub sample_id: String,
    pub user: String,
    pub best: String,
    pub best_iteration: u32,
    pub rounds: u32,
    pub final_s: f64,
    pub mean_ranks: Vec<f64>,
    pub stop: StopReason,
}

/// A line of `sspo/pairs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLine {
    pub sample_id: String,
    pub user: String,
    pub best: String,
    pub rounds: u32,
    pub final_s: f64,
}

pub fn read_stage1_results(path: &Path) -> Result<Vec<Stage1Result>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        startup(anyhow!(
            "{}: {e}; run `rapo optimize` first or pass --from prompts",
            path.display()
        ))
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {i}", path.display())))
        .collect::<Result<_, _>>()
        .map_err(startup)
}

fn resume_memory(path: &Path) -> Result<Option<FeedbackMemory>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let rec = sspo::load_memory(path, true).map_err(runtime)?;
    if rec.dropped_tail > 0 {
        tracing::warn!(memory = %path.display(), "dropping an incomplete trailing record");
        rec.memory.save(path).map_err(runtime)?;
    }
    Ok(Some(rec.memory))
}

pub fn run_sspo(cfg: &ResolvedConfig, store: &mut RunStore, from: SspoInput, out: &mut dyn Write) -> Result<Exit, CliError> {
    let prompts = user_prompts(cfg)?;
    let seeds: Vec<(PromptRecord, CandidatePrompt)> = match from {
        SspoInput::Prompts => prompts
            .iter()
            .map(|r| (r.clone(), CandidatePrompt::from_record(r)))
            .collect(),
        SspoInput::Stage1 => {
            let results = read_stage1_results(&store.path(STAGE1_RESULTS))?;
            let by_id: HashMap<&str, &Stage1Result> = results.iter().map(|r| (r.sample_id.as_str(), r)).collect();
            prompts
                .iter()
                .filter_map(|r| {
                    by_id.get(r.id.as_str()).map(|s1| {
                        let seed = CandidatePrompt::from_record(r).derive(Branch::Selected, s1.selected_text.clone());
                        (r.clone(), seed)
                    })
                })
                .collect()
        }
    };
    if seeds.is_empty() {
        return Err(startup(anyhow!("no samples to refine")));
    }
    let providers = providers(cfg)?;
    let loop_cfg = cfg.loop_config();
    let policy = cfg.retry_policy();
    let todo: Vec<&(PromptRecord, CandidatePrompt)> =
        seeds.iter().filter(|(r, _)| !store.exists(&outcome_rel(&r.id))).collect();
    let skipped = seeds.len() - todo.len();
    let (mut done, mut failed) = (0, 0);
    let root = store.root().to_path_buf();
    run_pool(
        &todo,
        cfg.workers,
        |(user, seed)| {
            let mem_path = root.join(memory_rel(&user.id));
            let recorder = CallRecorder::new();
            let result = resume_memory(&mem_path).and_then(|resume| {
                if let Some(dir) = mem_path.parent() {
                    std::fs::create_dir_all(dir).map_err(runtime)?;
                }
                let inst = providers.instrumented(&recorder, policy);
                let mut persist = |m: &FeedbackMemory, r: &sspo::FeedbackRecord| {
                    m.append_to_file(&mem_path, r).map_err(|e| e.to_string())
                };
                sspo::run_loop(user, seed, &loop_cfg, &inst, resume, &mut persist).map_err(runtime)
            });
            (result, recorder.render())
        },
        |i, (result, log)| {
            let user = &todo[i].0;
            let calls = calls_rel("sspo", &user.id);
            append_log(store, &calls, &log)?;
            let status = match result {
                Ok(o) => {
                    store
                        .write(&format!("sspo/reports/{}.tsv", sample_key(&user.id)), sspo::loop_report(&o.memory).as_bytes())
                        .map_err(runtime)?;
                    let outcome = SspoOutcome {
                        sample_id: user.id.clone(),
                        user: user.text.clone(),
                        best: o.best.text.clone(),
                        best_iteration: o.best_iteration,
                        rounds: o.memory.len() as u32,
                        final_s: o.memory.records()[o.best_iteration as usize].aggregate_s,
                        mean_ranks: o.table.mean_ranks(),
                        stop: o.stop,
                    };
                    let json = serde_json::to_string(&outcome).expect("outcome serializes") + "\n";
                    store.write(&outcome_rel(&user.id), json.as_bytes()).map_err(runtime)?;
                    done += 1;
                    SampleStatus {
                        state: State::Done,
                        error: None,
                        calls: Some(calls),
                    }
                }
                Err(e) => {
                    tracing::error!(sample = %user.id, error = %e, "refinement loop failed");
                    failed += 1;
                    SampleStatus {
                        state: State::Failed,
                        error: Some(format!("{e}")),
                        calls: Some(calls),
                    }
                }
            };
            store.set_sample("sspo", &user.id, status);
            store.persist().map_err(runtime)
        },
    )?;

    let mut pairs = String::new();
    let mut memories = Vec::new();
    for (user, _) in &seeds {
        let Ok(text) = std::fs::read_to_string(store.path(&outcome_rel(&user.id))) else {
            continue;
        };
        let o: SspoOutcome = serde_json::from_str(text.trim()).map_err(runtime)?;
        let line = PairLine {
            sample_id: o.sample_id,
            user: o.user,
            best: o.best,
            rounds: o.rounds,
            final_s: o.final_s,
        };
        pairs.push_str(&(serde_json::to_string(&line).expect("pair serializes") + "\n"));
        memories.push(sspo::load_memory(&store.path(&memory_rel(&user.id)), false).map_err(runtime)?.memory);
    }
    store.write(PAIRS_FILE, pairs.as_bytes()).map_err(runtime)?;
    if let Ok(t) = export::trajectory_report(&memories) {
        store
            .write(TRAJECTORY_FILE, export::render_trajectory(&t).as_bytes())
            .map_err(runtime)?;
    }
    store
        .set_stage("sspo", stage_status(done + skipped, failed))
        .map_err(runtime)?;
    let _ = writeln!(out, "sspo: {done} done, {skipped} already complete, {failed} failed");
    Ok(if failed == 0 { Exit::Success } else { Exit::Partial })
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairLine>, CliError> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let pairs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad pair line in {}", path.display())))
        .collect::<Result<Vec<PairLine>, _>>()
        .map_err(startup)?;
    if pairs.is_empty() {
        return Err(startup(anyhow!("no pairs found in {}; run `rapo sspo` first", path.display())));
    }
    Ok(pairs)
}

pub fn run_export(
    cfg: &ResolvedConfig,
    store: &mut RunStore,
    refactor: bool,
    discriminator: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Exit, CliError> {
    let lines = read_pairs(&store.path(PAIRS_FILE))?;
    let pairs: Vec<InstructionPair> = lines
        .iter()
        .map(|p| {
            InstructionPair::new(p.sample_id.clone(), &p.user, &p.best, PairMeta {
                rounds: p.rounds,
                final_s: p.final_s,
            })
        })
        .collect();
    let path = store.path(EXPORT_FILE);
    std::fs::create_dir_all(path.parent().expect("export path has a parent")).map_err(runtime)?;
    export::export_pairs(&pairs, &path).map_err(runtime)?;
    let _ = writeln!(out, "export: {} pairs -> {}", pairs.len(), path.display());

    if refactor {
        let corpus = training_corpus(cfg)?;
        let recorder = CallRecorder::new();
        let inst = providers(cfg)?.instrumented(&recorder, cfg.retry_policy());
        let ds = refine::build_refactor_dataset(&corpus, inst.llm.as_ref(), Some(cfg.seed()));
        store.write("calls/export-refactor.jsonl", recorder.render().as_bytes()).map_err(runtime)?;
        let records: Vec<_> = ds.pairs.iter().map(|p| p.to_record()).collect();
        export::write_records(&records, &store.path("export/refactor.jsonl")).map_err(runtime)?;
        let _ = writeln!(out, "export: {} refactor records ({} skipped)", records.len(), ds.skipped.len());
    }
    if let Some(src) = discriminator {
        let text = std::fs::read_to_string(src).with_context(|| src.display().to_string()).map_err(startup)?;
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<SelectionExample>, _>>()
            .with_context(|| format!("bad selection example in {}", src.display()))
            .map_err(startup)?;
        let ds = refine::build_discriminator_dataset(&examples).map_err(startup)?;
        export::write_records(&ds.records, &store.path("export/discriminator.jsonl")).map_err(runtime)?;
        let counts: String = std::iter::once("dimension\tcount\n".to_string())
            .chain(ds.counts.iter().map(|(d, n)| format!("{d}\t{n}\n")))
            .collect();
        store.write("export/discriminator_counts.tsv", counts.as_bytes()).map_err(runtime)?;
        let _ = writeln!(out, "export: {} discriminator records", ds.records.len());
    }
    store
        .set_stage("export", stage_status(pairs.len(), 0))
        .map_err(runtime)?;
    Ok(Exit::Success)
}

pub fn run_stats(cfg: &ResolvedConfig, store: &mut RunStore, out: &mut dyn Write) -> Result<Exit, CliError> {
    let training = training_corpus(cfg)?;
    let mut sets: Vec<(&str, Vec<String>)> = vec![("training", training.iter().map(|r| r.text.clone()).collect())];
    if cfg.file.paths.prompts.is_some() {
        sets.push(("user", user_prompts(cfg)?.iter().map(|r| r.text.clone()).collect()));
    }
    if store.exists(STAGE1_RESULTS) {
        let s1 = read_stage1_results(&store.path(STAGE1_RESULTS))?;
        if !s1.is_empty() {
            sets.push(("stage1", s1.into_iter().map(|r| r.selected_text).collect()));
        }
    }
    if store.exists(PAIRS_FILE) {
        if let Ok(pairs) = read_pairs(&store.path(PAIRS_FILE)) {
            sets.push(("optimized", pairs.into_iter().map(|p| p.best).collect()));
        }
    }
    let mut hists = BTreeMap::new();
    let mut order = Vec::new();
    for (name, texts) in &sets {
        let h = export::length_stats_of(texts.iter().map(String::as_str)).map_err(runtime)?;
        store
            .write(&format!("stats/{name}.hist.tsv"), export::render_histogram(&h).as_bytes())
            .map_err(runtime)?;
        order.push(*name);
        hists.insert(*name, h);
    }
    let rows: Vec<_> = order.iter().map(|n| (*n, &hists[n])).collect();
    let summary = export::render_summary(&rows);
    store.write("stats/summary.tsv", summary.as_bytes()).map_err(runtime)?;
    let comparisons: Vec<_> = order[1..]
        .iter()
        .map(|n| ("training", *n, export::compare_distributions(&hists["training"], &hists[n])))
        .collect();
    let comparison = export::render_comparison(&comparisons);
    store.write("stats/comparison.tsv", comparison.as_bytes()).map_err(runtime)?;
    let _ = write!(out, "{summary}{comparison}");
    Ok(Exit::Success)
}
