//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails. Thresholds here are fixed; do not loosen them.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapo_core::corpus::{parse_corpus, render_corpus, Corpus, PromptRecord, PromptSource};
use rapo_core::embedding::{cosine, embed, top_k, Embedder, EmbeddingVector, HashEmbedder, VectorIndex};
use rapo_core::export::{
    compare_distributions, length_stats, length_stats_of, parse_pairs, render_pairs, InstructionPair, PairMeta,
};
use rapo_core::graph::{
    build_graph, load_graph, retrieve_modifiers, save_graph, BuildMeta, BuildOptions, ModifierCategory, RelationGraph,
    SceneNode,
};
use rapo_core::providers::ProviderSet;
use rapo_core::refine::{run_stage1, Branch, CandidatePrompt, Stage1Config};
use rapo_core::sspo::{
    average_rank_select, load_memory, parse_memory, run_loop, FeedbackMemory, FeedbackRecord, LoopConfig,
    RankingTable,
};
use rapo_core::text::content_set;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

const NOUNS: &[&str] = &[
    "dog", "cat", "woman", "man", "child", "horse", "bird", "car", "boat", "robot", "chef", "dancer", "fox", "whale",
    "kite", "lantern", "violin", "train", "tree", "cloud",
];
const ADJECTIVES: &[&str] = &[
    "golden", "misty", "bright", "dark", "rainy", "snowy", "calm", "busy", "red", "blue", "old", "young", "tall",
    "small", "fluffy", "shiny", "wooden", "quiet",
];
const VERBS: &[&str] = &["runs", "jumps", "walks", "flies", "swims", "dances", "sleeps", "reads", "cooks", "plays"];
const PLACES: &[&str] = &[
    "forest", "beach", "city", "street", "kitchen", "mountain", "river", "desert", "garden", "studio", "harbor",
    "meadow",
];

type Check = fn(&mut Ctx) -> Result<String, String>;

/// State shared across checks: every FeedbackRecord any check produced.
#[derive(Default)]
struct Ctx {
    records: Vec<FeedbackRecord>,
}

impl Ctx {
    fn collect(&mut self, memory: &FeedbackMemory) {
        self.records.extend(memory.records().iter().cloned());
    }
}

fn main() {
    let checks: &[(&str, Check)] = &[
        ("ranking oracle", ranking_oracle),
        ("rank invariance", rank_invariance),
        ("retrieval oracle", retrieval_oracle),
        ("sspo monotonic improvement", sspo_monotonic),
        ("end-to-end determinism", end_to_end_determinism),
        ("round-trips", round_trips),
        ("stats correctness", stats_correctness),
        ("stage-1 structural laws", stage1_laws),
        // last, so it sees the records of every check above
        ("aggregate-S law", aggregate_law),
    ];
    let mut ctx = Ctx::default();
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut ctx)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || format!("{what} took {elapsed:?}, limit {limit:?}"))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

// ---- ranking ----

/// Scores in [0,1]; half of the tables draw from a coarse grid to force ties.
fn random_scores(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    if coarse {
                        f64::from(rng.random_range(0..=4u8)) / 4.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        })
        .collect()
}

/// Fractional rank by counting: 1 + #strictly better + (#equal others) / 2.
fn oracle_rank(column: &[f64], i: usize) -> f64 {
    let better = column.iter().filter(|&&v| v > column[i]).count();
    let equal = column.iter().filter(|&&v| v == column[i]).count() - 1;
    1.0 + better as f64 + equal as f64 / 2.0
}

fn oracle_select(scores: &[Vec<f64>], iterations: &[u32]) -> usize {
    let (n, m) = (scores.len(), scores[0].len());
    let sums: Vec<f64> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| oracle_rank(&scores.iter().map(|r| r[j]).collect::<Vec<_>>(), i))
                .sum()
        })
        .collect();
    (0..n)
        .min_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(iterations[a].cmp(&iterations[b])))
        .expect("non-empty")
}

fn table(scores: Vec<Vec<f64>>, iterations: &[u32]) -> RankingTable {
    let m = scores[0].len();
    RankingTable::new(
        iterations.iter().map(|t| format!("it{t}")).collect(),
        (0..m).map(|j| format!("m{j}")).collect(),
        scores,
    )
    .expect("valid table")
}

fn shuffled_iterations(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(rng);
    ids
}

fn ranking_oracle(_: &mut Ctx) -> Result<String, String> {
    let start = Instant::now();
    let mut rng = rng(11);
    let mut ties = 0;
    for case in 0..1000 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=4));
        let scores = random_scores(&mut rng, n, m);
        let iterations = shuffled_iterations(&mut rng, n);
        let expected = oracle_select(&scores, &iterations);
        let distinct: HashSet<u64> = scores.iter().flatten().map(|v| v.to_bits()).collect();
        if distinct.len() < n * m {
            ties += 1;
        }
        let t = table(scores, &iterations);
        let got = average_rank_select(&t, &iterations).map_err(|e| e.to_string())?;
        ensure(got == t.candidates()[expected], || {
            format!("case {case}: selected {got}, oracle {}", t.candidates()[expected])
        })?;
    }
    within(start.elapsed(), Duration::from_secs(5), "1000 tables")?;
    Ok(format!("1000/1000 tables agree ({ties} with ties) in {:?}", start.elapsed()))
}

fn rank_invariance(_: &mut Ctx) -> Result<String, String> {
    let transforms: [fn(f64) -> f64; 3] = [|x| 3.5 * x - 2.0, |x| x * x * x, f64::exp];
    let mut rng = rng(12);
    for case in 0..200 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=4));
        let scores = random_scores(&mut rng, n, m);
        let iterations = shuffled_iterations(&mut rng, n);
        let chosen: Vec<usize> = (0..m).map(|_| rng.random_range(0..transforms.len())).collect();
        let mapped: Vec<Vec<f64>> = scores
            .iter()
            .map(|row| row.iter().zip(&chosen).map(|(&v, &f)| transforms[f](v)).collect())
            .collect();
        let (a, b) = (table(scores, &iterations), table(mapped, &iterations));
        let before = average_rank_select(&a, &iterations).map_err(|e| e.to_string())?;
        let after = average_rank_select(&b, &iterations).map_err(|e| e.to_string())?;
        ensure(before == after, || format!("case {case}: {before} became {after}"))?;
    }
    Ok("200/200 tables keep their selection".into())
}

// ---- retrieval ----

fn random_graph(rng: &mut ChaCha8Rng, embedder: &dyn Embedder) -> RelationGraph {
    let scenes = rng.random_range(1..=50);
    let mut map = IndexMap::new();
    while map.len() < scenes {
        let label = format!("{} {}", pick(rng, ADJECTIVES), pick(rng, PLACES));
        if map.contains_key(&label) {
            // small vocabulary: fall back to a numbered variant
            let label = format!("{label} {}", map.len());
            map.insert(label.clone(), SceneNode::new(label));
            continue;
        }
        map.insert(label.clone(), SceneNode::new(label));
    }
    for node in map.values_mut() {
        for _ in 0..rng.random_range(1..=20) {
            let cat = ModifierCategory::ALL[rng.random_range(0..3)];
            let text = match cat {
                ModifierCategory::Subject => format!("{} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS)),
                ModifierCategory::Action => format!("{} {}", pick(rng, VERBS), pick(rng, ADJECTIVES)),
                ModifierCategory::Atmosphere => pick(rng, ADJECTIVES).to_string(),
            };
            node.add(&text, cat, rng.random_range(1..4));
        }
    }
    RelationGraph::from_scenes(map, embedder, meta(embedder, 0)).expect("graph builds")
}

fn meta(embedder: &dyn Embedder, timestamp: u64) -> BuildMeta {
    BuildMeta {
        corpus_origin: "synthetic".into(),
        extractor: "synthetic".into(),
        embedder: embedder.name().into(),
        timestamp,
    }
}

/// Stable descending full sort, truncated.
fn sorted_truncate<T: Clone>(mut items: Vec<(T, f64)>, k: usize) -> Vec<(T, f64)> {
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
    items.truncate(k);
    items
}

fn retrieval_oracle(_: &mut Ctx) -> Result<String, String> {
    let embedder = HashEmbedder::default();
    let mut rng = rng(13);
    for case in 0..200 {
        let graph = random_graph(&mut rng, &embedder);
        let query = format!(
            "a {} {} {} near the {}",
            pick(&mut rng, ADJECTIVES),
            pick(&mut rng, NOUNS),
            pick(&mut rng, VERBS),
            pick(&mut rng, PLACES)
        );
        let (k_scene, k_mod) = (rng.random_range(1..=8), rng.random_range(1..=12));
        let q = embed(&query, &embedder).map_err(|e| e.to_string())?;

        let scene_scores: Vec<(&SceneNode, f64)> = graph
            .scenes()
            .map(|s| (s, cosine(&q, &embed(&s.scene, &embedder).unwrap()).unwrap()))
            .collect();
        let mut seen = BTreeSet::new();
        let mut pool = Vec::new();
        for (scene, _) in sorted_truncate(scene_scores, k_scene) {
            for m in scene.all_modifiers() {
                if seen.insert((m.text.clone(), m.category)) {
                    let s = cosine(&q, &embed(&m.text, &embedder).unwrap()).unwrap();
                    pool.push(((m.text.clone(), m.category, scene.scene.clone()), s));
                }
            }
        }
        let expected = sorted_truncate(pool, k_mod);
        let got = retrieve_modifiers(&graph, &query, &embedder, k_scene, k_mod).map_err(|e| e.to_string())?;
        let got: Vec<_> = got
            .into_iter()
            .map(|r| ((r.modifier.text, r.modifier.category, r.scene), r.score))
            .collect();
        ensure(got == expected, || format!("case {case}: {got:?} != {expected:?}"))?;
    }

    for case in 0..1000 {
        let dim = rng.random_range(2..=16);
        let n = rng.random_range(1..=60);
        let mut index = VectorIndex::new(dim);
        let mut pool: Vec<EmbeddingVector> = Vec::new();
        for i in 0..n {
            // reuse earlier vectors now and then so ties occur
            let v = if !pool.is_empty() && rng.random_bool(0.2) {
                pool.choose(&mut rng).unwrap().clone()
            } else {
                let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                EmbeddingVector::normalized(raw).map_err(|e| e.to_string())?
            };
            pool.push(v.clone());
            index.insert(format!("e{i}"), v).map_err(|e| e.to_string())?;
        }
        let q = pool.choose(&mut rng).unwrap().clone();
        let k = rng.random_range(1..=n + 3);
        let all: Vec<(String, f64)> = index
            .entries()
            .iter()
            .map(|(id, v)| (id.clone(), cosine(&q, v).unwrap()))
            .collect();
        let expected = sorted_truncate(all, k);
        let got: Vec<(String, f64)> = top_k(&q, &index, k)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|e| (e.id, e.score))
            .collect();
        ensure(got == expected, || format!("top_k case {case} differs"))?;
    }
    Ok("200 graphs and 1000 indexes match the brute-force oracles".into())
}

// ---- sspo ----

fn sspo_monotonic(ctx: &mut Ctx) -> Result<String, String> {
    let start = Instant::now();
    let providers = ProviderSet::mock();
    let cfg = LoopConfig {
        max_iterations: 4,
        seed: Some(5),
        ..LoopConfig::default()
    };
    let mut rng = rng(14);
    let mut reached = 0;
    for i in 0..50 {
        let mut pool: Vec<&str> = NOUNS.iter().chain(ADJECTIVES).chain(VERBS).chain(PLACES).copied().collect();
        pool.shuffle(&mut rng);
        let tokens = &pool[..rng.random_range(2..=6)];
        let omit = rng.random_range(1..=3).min(tokens.len() - 1);
        let kept: Vec<&str> = tokens.iter().copied().skip(omit).collect();
        let user = PromptRecord::new(format!("s{i}"), format!("a {}", tokens.join(" ")), PromptSource::User);
        let seed_text = format!("the {}", kept.join(" "));
        let seed = CandidatePrompt::user(user.id.clone(), user.text.clone()).derive(Branch::Selected, seed_text);

        let outcome = run_loop(&user, &seed, &cfg, &providers, None, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
        let records = outcome.memory.records();
        let alignment: Vec<f64> = records.iter().map(|r| r.score("alignment").expect("alignment scored")).collect();
        let iterations: Vec<u32> = records.iter().map(|r| r.iteration).collect();

        // best-so-far: the average-rank choice among the first t+1 rounds
        let mut best_so_far = Vec::new();
        for t in 0..records.len() {
            let sub = table(
                records[..=t]
                    .iter()
                    .map(|r| vec![r.score("alignment").unwrap(), r.score("concision").unwrap()])
                    .collect(),
                &iterations[..=t],
            );
            let id = average_rank_select(&sub, &iterations[..=t]).map_err(|e| e.to_string())?;
            let idx = sub.candidates().iter().position(|c| c == id).unwrap();
            best_so_far.push(alignment[idx]);
        }
        let running_max: Vec<f64> = alignment
            .iter()
            .scan(f64::NEG_INFINITY, |m, &a| {
                *m = m.max(a);
                Some(*m)
            })
            .collect();
        ensure(running_max.windows(2).all(|w| w[0] <= w[1]), || {
            format!("sample {i}: running max {running_max:?} decreases")
        })?;
        ensure(best_so_far.windows(2).all(|w| w[0] <= w[1]), || {
            format!("sample {i}: best-so-far alignment {best_so_far:?} decreases")
        })?;
        if alignment.contains(&1.0) {
            reached += 1;
        }
        ctx.collect(&outcome.memory);
    }
    within(start.elapsed(), Duration::from_secs(30), "50-sample suite")?;
    ensure(reached * 100 >= 90 * 50, || format!("only {reached}/50 samples reached alignment 1.0"))?;
    Ok(format!("50/50 non-decreasing, {reached}/50 reach 1.0 in {:?}", start.elapsed()))
}

fn aggregate_law(ctx: &mut Ctx) -> Result<String, String> {
    ensure(!ctx.records.is_empty(), || "no records were produced".into())?;
    for r in &ctx.records {
        let mean = r.scores.iter().map(|s| s.value).sum::<f64>() / r.scores.len() as f64;
        ensure((mean - r.aggregate_s).abs() <= 1e-12, || {
            format!("{} iteration {}: S {} vs mean {mean}", r.prompt.sample_id, r.iteration, r.aggregate_s)
        })?;
    }
    Ok(format!("{} records satisfy S = mean(scores)", ctx.records.len()))
}

// ---- end to end ----

fn run_pipeline(dir: &Path, workers: &str) -> Result<Duration, String> {
    for f in ["corpus.txt", "prompts.txt", "rapo.toml"] {
        fs::copy(Path::new(FIXTURES).join(f), dir.join(f)).map_err(|e| e.to_string())?;
    }
    let start = Instant::now();
    for args in [&["graph", "build"][..], &["optimize"], &["sspo"], &["export"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_rapo"))
            .arg("--config")
            .arg(dir.join("rapo.toml"))
            .args(["--workers", workers])
            .args(args)
            .env("SOURCE_DATE_EPOCH", "1700000000")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("rapo {args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
        })?;
    }
    Ok(start.elapsed())
}

fn artifacts(run: &Path) -> Result<Vec<PathBuf>, String> {
    let mut files: Vec<PathBuf> = ["graph.rgf", "graph.rgf.idx", "stage1/results.jsonl", "export/finetune.jsonl"]
        .iter()
        .map(PathBuf::from)
        .collect();
    let mut mems: Vec<PathBuf> = fs::read_dir(run.join("sspo/memory"))
        .map_err(|e| e.to_string())?
        .map(|e| PathBuf::from("sspo/memory").join(e.unwrap().file_name()))
        .collect();
    mems.sort();
    files.extend(mems);
    Ok(files)
}

fn end_to_end_determinism(ctx: &mut Ctx) -> Result<String, String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = run_pipeline(a.path(), "1")?;
    let tb = run_pipeline(b.path(), "3")?;
    within(ta, Duration::from_secs(60), "first run")?;
    within(tb, Duration::from_secs(60), "second run")?;
    let (ra, rb) = (a.path().join("run"), b.path().join("run"));
    let files = artifacts(&ra)?;
    ensure(files.len() == 4 + 5, || format!("expected 5 memories, found {}", files.len() - 4))?;
    ensure(files == artifacts(&rb)?, || "the runs produced different file sets".into())?;
    for f in &files {
        let (x, y) = (fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap());
        ensure(x == y, || format!("{} differs", f.display()))?;
    }
    for f in files.iter().filter(|f| f.starts_with("sspo/memory")) {
        ctx.collect(&load_memory(&ra.join(f), false).map_err(|e| e.to_string())?.memory);
    }
    Ok(format!("{} artifacts byte-identical; runs took {ta:?} and {tb:?}", files.len()))
}

// ---- round-trips ----

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let extras = ["\"quoted\"", "naïve", "tab\there", "back\\slash", "emoji 🎥", "comma,", "{brace}"];
    let mut words: Vec<String> = (0..rng.random_range(1..10))
        .map(|_| pick(rng, NOUNS).to_string())
        .collect();
    if rng.random_bool(0.5) {
        words.push(pick(rng, &extras).to_string());
    }
    words.join(" ")
}

fn round_trips(ctx: &mut Ctx) -> Result<String, String> {
    let mut rng = rng(15);
    let dir = tempfile::tempdir().unwrap();
    let embedder = HashEmbedder::default();
    let providers = ProviderSet::mock();
    let sources = [PromptSource::TrainingCorpus, PromptSource::User, PromptSource::Benchmark, PromptSource::Generated];
    for case in 0..100 {
        // corpus
        let records: Vec<PromptRecord> = (0..rng.random_range(1..20))
            .map(|i| {
                let mut r = PromptRecord::new(format!("c{case}-{i}"), random_text(&mut rng), *sources.choose(&mut rng).unwrap());
                if rng.random_bool(0.3) {
                    r.tags = Some(vec![pick(&mut rng, ADJECTIVES).to_string()]);
                }
                r
            })
            .collect();
        let corpus = Corpus::new("rt", records);
        let parsed = parse_corpus(&render_corpus(&corpus), "rt", "rt", PromptSource::User);
        ensure(parsed.rejects.is_empty() && parsed.corpus == corpus, || format!("corpus case {case}"))?;

        // graph
        let mut graph = random_graph(&mut rng, &embedder);
        graph.meta = meta(&embedder, rng.random_range(0..u64::from(u32::MAX)));
        let path = dir.path().join(format!("g{case}.rgf"));
        save_graph(&graph, &path).map_err(|e| e.to_string())?;
        ensure(load_graph(&path).map_err(|e| e.to_string())? == graph, || format!("graph case {case}"))?;

        // memory
        let user = PromptRecord::new(format!("m{case}"), random_text(&mut rng), PromptSource::User);
        let seed = CandidatePrompt::from_record(&user).derive(Branch::Selected, user.text.clone());
        let cfg = LoopConfig {
            max_iterations: rng.random_range(1..4),
            ..LoopConfig::default()
        };
        let memory = run_loop(&user, &seed, &cfg, &providers, None, &mut |_, _| Ok(()))
            .map_err(|e| e.to_string())?
            .memory;
        let reparsed = parse_memory(&memory.render(), Path::new("mem"), false).map_err(|e| e.to_string())?;
        ensure(reparsed.memory == memory && reparsed.dropped_tail == 0, || format!("memory case {case}"))?;
        ctx.collect(&memory);

        // export
        let pairs: Vec<InstructionPair> = (0..rng.random_range(1..10))
            .map(|i| {
                let meta = PairMeta {
                    rounds: rng.random_range(1..6),
                    final_s: rng.random::<f64>(),
                };
                InstructionPair::new(format!("p{i}"), &random_text(&mut rng), &random_text(&mut rng), meta)
            })
            .collect();
        let text = render_pairs(&pairs).map_err(|e| e.to_string())?;
        let (_, back) = parse_pairs(&text, Path::new("export")).map_err(|e| e.to_string())?;
        ensure(back == pairs, || format!("export case {case}"))?;
    }
    Ok("100 cases each for corpus, graph, memory and export".into())
}

// ---- stats ----

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn stats_correctness(_: &mut Ctx) -> Result<String, String> {
    let corpus = Corpus::new(
        "fixture",
        vec![
            PromptRecord::new("a", "a b c", PromptSource::User),
            PromptRecord::new("b", "a b", PromptSource::User),
        ],
    );
    let h = length_stats(&corpus).map_err(|e| e.to_string())?;
    ensure(h.bins.iter().map(|(k, v)| (*k, *v)).eq([(2, 1), (3, 1)]), || format!("bins {:?}", h.bins))?;
    ensure(close(h.mean, 2.5) && close(h.std, 0.5), || format!("mean {} std {}", h.mean, h.std))?;

    let single = length_stats_of(["one two three four"]).map_err(|e| e.to_string())?;
    ensure(close(single.std, 0.0), || format!("single std {}", single.std))?;
    ensure(length_stats_of([]).is_err(), || "empty corpus accepted".into())?;

    let identical = compare_distributions(&h, &h);
    ensure(close(identical.l1, 0.0), || format!("identical L1 {}", identical.l1))?;
    let disjoint = compare_distributions(&length_stats_of(["a"]).unwrap(), &length_stats_of(["a b"]).unwrap());
    ensure(close(disjoint.l1, 2.0), || format!("disjoint L1 {}", disjoint.l1))?;
    let partial = compare_distributions(&length_stats_of(["a b"]).unwrap(), &length_stats_of(["a b", "a b c d"]).unwrap());
    ensure(close(partial.l1, 1.0), || format!("partial-overlap L1 {}", partial.l1))?;
    Ok("histogram, mean, std and L1 fixtures match to 1e-9".into())
}

// ---- stage 1 ----

fn stage1_laws(_: &mut Ctx) -> Result<String, String> {
    let providers = ProviderSet::mock();
    let mut rng = rng(16);
    let lines: Vec<String> = (0..40)
        .map(|_| {
            format!(
                "a {} {} {} in the {}",
                pick(&mut rng, ADJECTIVES),
                pick(&mut rng, NOUNS),
                pick(&mut rng, VERBS),
                pick(&mut rng, PLACES)
            )
        })
        .collect();
    let corpus = parse_corpus(&lines.join("\n"), "train", "train", PromptSource::TrainingCorpus).corpus;
    let (graph, _) = build_graph(&corpus, providers.llm.as_ref(), providers.embedder.as_ref(), &BuildOptions::default())
        .map_err(|e| e.to_string())?;
    let mut chosen = [0; 2];
    for i in 0..100 {
        let mut text = format!("{} {} at the {}", pick(&mut rng, NOUNS), pick(&mut rng, VERBS), pick(&mut rng, PLACES));
        if i % 5 == 0 {
            // long enough that the refactor truncates user tokens, so N should win
            let tail: Vec<String> = (0..64).map(|j| format!("detail{j}")).collect();
            text = format!("{text} {}", tail.join(" "));
        }
        let user = PromptRecord::new(format!("u{i}"), text, PromptSource::User);
        let cfg = Stage1Config {
            k_scene: rng.random_range(1..=3),
            k_mod: rng.random_range(0..=4),
            ..Stage1Config::default()
        };
        let r = run_stage1(&user, &graph, &providers, &cfg).map_err(|e| e.to_string())?;
        let chained = r.trace.first().is_none_or(|s| s.before == r.user)
            && r.trace.windows(2).all(|w| w[0].after == w[1].before)
            && r.trace.last().is_none_or(|s| s.after == r.augmented);
        ensure(chained, || format!("run {i}: trace is not chained"))?;
        let in_pair = (r.selected_branch == Branch::Refactored && r.selected_text == r.refactored)
            || (r.selected_branch == Branch::Naive && r.selected_text == r.naive);
        ensure(in_pair, || format!("run {i}: selected text is neither candidate"))?;
        chosen[usize::from(r.selected_branch == Branch::Naive)] += 1;
        ensure(content_set(&r.augmented).is_superset(&content_set(&r.user)), || {
            format!("run {i}: augmentation dropped user tokens")
        })?;
    }
    Ok(format!("100 runs hold all laws ({} refactored, {} naive)", chosen[0], chosen[1]))
}
