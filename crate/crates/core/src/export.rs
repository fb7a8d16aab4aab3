//! Stage 3 dataset files plus length statistics and trajectory tables.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::sspo::FeedbackMemory;
use crate::templates;
use crate::text::token_count;

pub const EXPORT_FORMAT: &str = "rapo-finetune";
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("nothing to export")]
    Empty,
    #[error("duplicate sample ids: {}", .0.join(", "))]
    DuplicateSamples(Vec<String>),
    #[error("sample {0} has an empty output")]
    EmptyOutput(String),
    #[error("sample {0}: instruction does not contain the user prompt")]
    MissingUserPrompt(String),
    #[error("no records to summarize")]
    NoData,
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path, source: std::io::Error) -> ExportError {
    ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Bare `{instruction, output}` record used by the Stage-1 datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub output: String,
}

pub fn render_records(records: &[InstructionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn write_records(records: &[InstructionRecord], path: &Path) -> Result<(), ExportError> {
    if records.is_empty() {
        return Err(ExportError::Empty);
    }
    write_atomic(path, &render_records(records))
}

pub(crate) fn write_atomic(path: &Path, content: &str) -> Result<(), ExportError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub rounds: u32,
    pub final_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub instruction: String,
    pub output: String,
    pub sample_id: String,
    pub meta: PairMeta,
}

impl InstructionPair {
    pub fn new(sample_id: impl Into<String>, user: &str, best: &str, meta: PairMeta) -> Self {
        Self {
            instruction: templates::render_finetune(user),
            output: best.to_string(),
            sample_id: sample_id.into(),
            meta,
        }
    }
}

/// Training settings recorded in the export header. Not interpreted here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lora_rank: u32,
    pub batch_size: u32,
    /// Kept verbatim; which model gets which count is unspecified.
    pub epochs: String,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lora_rank: 64,
            batch_size: 32,
            epochs: "8 and 3".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub format: String,
    pub version: u32,
    pub hyperparameters: Hyperparameters,
}

impl Default for ExportHeader {
    fn default() -> Self {
        Self {
            format: EXPORT_FORMAT.into(),
            version: EXPORT_VERSION,
            hyperparameters: Hyperparameters::default(),
        }
    }
}

fn check_pairs(pairs: &[InstructionPair]) -> Result<(), ExportError> {
    if pairs.is_empty() {
        return Err(ExportError::Empty);
    }
    let mut seen = HashSet::new();
    let mut dups: Vec<String> = pairs
        .iter()
        .filter(|p| !seen.insert(p.sample_id.as_str()))
        .map(|p| p.sample_id.clone())
        .collect();
    if !dups.is_empty() {
        dups.sort();
        dups.dedup();
        return Err(ExportError::DuplicateSamples(dups));
    }
    if let Some(p) = pairs.iter().find(|p| p.output.trim().is_empty()) {
        return Err(ExportError::EmptyOutput(p.sample_id.clone()));
    }
    Ok(())
}

pub fn render_pairs(pairs: &[InstructionPair]) -> Result<String, ExportError> {
    check_pairs(pairs)?;
    let mut s = serde_json::to_string(&ExportHeader::default()).expect("header serializes");
    s.push('\n');
    for p in pairs {
        s.push_str(&serde_json::to_string(p).expect("pair serializes"));
        s.push('\n');
    }
    Ok(s)
}

pub fn export_pairs(pairs: &[InstructionPair], path: &Path) -> Result<(), ExportError> {
    let content = render_pairs(pairs)?;
    write_atomic(path, &content)
}

pub fn parse_pairs(content: &str, path: &Path) -> Result<(ExportHeader, Vec<InstructionPair>), ExportError> {
    let err = |line: usize, message: String| ExportError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| err(0, "missing header".into()))?;
    let header: ExportHeader = serde_json::from_str(head).map_err(|e| err(0, format!("bad header: {e}")))?;
    if header.format != EXPORT_FORMAT || header.version != EXPORT_VERSION {
        return Err(err(0, format!("unsupported format {} v{}", header.format, header.version)));
    }
    let pairs = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i, e.to_string())))
        .collect::<Result<Vec<InstructionPair>, _>>()?;
    Ok((header, pairs))
}

pub fn load_pairs(path: &Path) -> Result<(ExportHeader, Vec<InstructionPair>), ExportError> {
    let content = fs::read_to_string(path).map_err(|e| io(path, e))?;
    parse_pairs(&content, path)
}

/// Decimal rendering at 6 significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0.00000".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding can carry into a new leading digit (9.999996 -> 10.00000)
    let rounded: f64 = s.parse().expect("formatted float parses");
    if rounded != 0.0 && (rounded.abs().log10().floor() as i32) > magnitude && decimals > 0 {
        format!("{x:.*}", decimals - 1)
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bins: BTreeMap<usize, u64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub total: u64,
}

/// Whitespace token-count histogram.
pub fn length_stats_of<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<LengthHistogram, ExportError> {
    let mut bins = BTreeMap::new();
    let counts: Vec<usize> = texts.into_iter().map(token_count).collect();
    if counts.is_empty() {
        return Err(ExportError::NoData);
    }
    for &c in &counts {
        *bins.entry(c).or_insert(0) += 1;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(LengthHistogram {
        bins,
        mean,
        std: var.sqrt(),
        total: counts.len() as u64,
    })
}

pub fn length_stats(corpus: &Corpus) -> Result<LengthHistogram, ExportError> {
    length_stats_of(corpus.iter().map(|r| r.text.as_str()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionComparison {
    /// b.mean - a.mean
    pub mean_delta: f64,
    /// b.std - a.std
    pub std_delta: f64,
    /// L1 distance between the normalized histograms, in [0, 2].
    pub l1: f64,
}

pub fn compare_distributions(a: &LengthHistogram, b: &LengthHistogram) -> DistributionComparison {
    let keys: std::collections::BTreeSet<usize> = a.bins.keys().chain(b.bins.keys()).copied().collect();
    let frac = |h: &LengthHistogram, k: usize| h.bins.get(&k).copied().unwrap_or(0) as f64 / h.total as f64;
    let l1 = keys.into_iter().map(|k| (frac(a, k) - frac(b, k)).abs()).sum::<f64>();
    DistributionComparison {
        mean_delta: b.mean - a.mean,
        std_delta: b.std - a.std,
        l1: l1.min(2.0),
    }
}

pub fn render_histogram(h: &LengthHistogram) -> String {
    let mut s = String::from("tokens\tcount\tfraction\n");
    for (&k, &c) in &h.bins {
        s.push_str(&format!("{k}\t{c}\t{}\n", format_sig6(c as f64 / h.total as f64)));
    }
    s
}

pub fn render_summary(rows: &[(&str, &LengthHistogram)]) -> String {
    let mut s = String::from("corpus\ttotal\tmean\tstd\n");
    for (name, h) in rows {
        s.push_str(&format!("{name}\t{}\t{}\t{}\n", h.total, format_sig6(h.mean), format_sig6(h.std)));
    }
    s
}

pub fn render_comparison(rows: &[(&str, &str, DistributionComparison)]) -> String {
    let mut s = String::from("a\tb\tmean_delta\tstd_delta\tl1\n");
    for (a, b, c) in rows {
        s.push_str(&format!(
            "{a}\t{b}\t{}\t{}\t{}\n",
            format_sig6(c.mean_delta),
            format_sig6(c.std_delta),
            format_sig6(c.l1)
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryCell {
    pub mean: f64,
    pub n: usize,
}

/// Per-iteration means of each metric over the samples that reached the
/// iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub metrics: Vec<String>,
    /// `rows[t][m]`; a cell with n = 0 means no sample reported that metric.
    pub rows: Vec<Vec<TrajectoryCell>>,
}

pub fn trajectory_report(memories: &[FeedbackMemory]) -> Result<TrajectoryTable, ExportError> {
    let mut metrics: Vec<String> = Vec::new();
    for m in memories {
        for r in m.records() {
            for s in r.scores.iter().chain(r.task_o.as_ref()) {
                if !metrics.contains(&s.verifier_name) {
                    metrics.push(s.verifier_name.clone());
                }
            }
        }
    }
    let depth = memories.iter().map(FeedbackMemory::len).max().unwrap_or(0);
    if depth == 0 {
        return Err(ExportError::NoData);
    }
    metrics.push("S".into());
    let mut rows = Vec::with_capacity(depth);
    for t in 0..depth {
        let row = metrics
            .iter()
            .map(|name| {
                let vals: Vec<f64> = memories
                    .iter()
                    .filter_map(|m| m.records().get(t))
                    .filter_map(|r| r.score(name))
                    .collect();
                TrajectoryCell {
                    mean: if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 },
                    n: vals.len(),
                }
            })
            .collect();
        rows.push(row);
    }
    Ok(TrajectoryTable { metrics, rows })
}

pub fn render_trajectory(t: &TrajectoryTable) -> String {
    let mut s = String::from("iteration");
    for m in &t.metrics {
        s.push_str(&format!("\t{m}\t{m}_n"));
    }
    s.push('\n');
    for (i, row) in t.rows.iter().enumerate() {
        s.push_str(&i.to_string());
        for c in row {
            if c.n == 0 {
                s.push_str("\t\t0");
            } else {
                s.push_str(&format!("\t{}\t{}", format_sig6(c.mean), c.n));
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PromptRecord, PromptSource};
    use crate::providers::{MisalignmentReport, VerifierScore, VideoRef};
    use crate::refine::{Branch, CandidatePrompt};
    use crate::sspo::FeedbackRecord;
    use proptest::prelude::*;

    fn pair(id: &str, user: &str, best: &str) -> InstructionPair {
        InstructionPair::new(id, user, best, PairMeta { rounds: 5, final_s: 0.75 })
    }

    #[test]
    fn export_single_pair() {
        let p = pair("u:0", "a cat", "a cat, fluffy fur, sitting");
        assert!(p.instruction.contains("a cat"));
        let text = render_pairs(std::slice::from_ref(&p)).unwrap();
        let (header, back) = parse_pairs(&text, Path::new("x")).unwrap();
        assert_eq!(header.hyperparameters.lora_rank, 64);
        assert_eq!(header.hyperparameters.batch_size, 32);
        assert_eq!(header.hyperparameters.epochs, "8 and 3");
        assert_eq!(back, [p]);
    }

    #[test]
    fn export_errors() {
        assert!(matches!(render_pairs(&[]), Err(ExportError::Empty)));
        match render_pairs(&[pair("a", "x", "y"), pair("b", "x", "y"), pair("a", "x", "z")]) {
            Err(ExportError::DuplicateSamples(d)) => assert_eq!(d, ["a"]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(render_pairs(&[pair("a", "x", " ")]), Err(ExportError::EmptyOutput(_))));
    }

    #[test]
    fn length_stats_examples() {
        let h = length_stats_of(["a b c", "a b"]).unwrap();
        assert_eq!(h.bins, BTreeMap::from([(2, 1), (3, 1)]));
        assert_eq!((h.mean, h.std, h.total), (2.5, 0.5, 2));
        assert_eq!(length_stats_of(["one two"]).unwrap().std, 0.0);
        assert!(length_stats(&Corpus::default()).is_err());
    }

    fn hist(bins: &[(usize, u64)]) -> LengthHistogram {
        let texts: Vec<String> = bins
            .iter()
            .flat_map(|&(k, c)| std::iter::repeat_n(vec!["w"; k].join(" "), c as usize))
            .collect();
        length_stats_of(texts.iter().map(String::as_str)).unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = hist(&[(2, 1)]);
        assert_eq!(compare_distributions(&a, &a).l1, 0.0);
        assert_eq!(compare_distributions(&a, &hist(&[(5, 3)])).l1, 2.0);
        assert_eq!(compare_distributions(&a, &hist(&[(2, 1), (4, 1)])).l1, 1.0);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.5), "0.500000");
        assert_eq!(format_sig6(2.5), "2.50000");
        assert_eq!(format_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(9.999996), "10.0000");
        assert_eq!(format_sig6(-0.25), "-0.250000");
    }

    fn memory(id: &str, rows: &[(f64, f64)]) -> FeedbackMemory {
        let mut m = FeedbackMemory::new(id);
        for (t, &(a, c)) in rows.iter().enumerate() {
            let prompt = CandidatePrompt::user(id, "p").derive(Branch::SspoIter(t as u32), "p");
            let video = VideoRef {
                id: "v".into(),
                descriptor: Default::default(),
                uri: None,
                prompt_tokens: 1,
            };
            let scores = vec![VerifierScore::new("alignment", a).unwrap(), VerifierScore::new("concision", c).unwrap()];
            m.append(FeedbackRecord::assemble(t as u32, prompt, video, MisalignmentReport::default(), scores, None).unwrap())
                .unwrap();
        }
        m
    }

    #[test]
    fn trajectory_hand_computed() {
        let t = trajectory_report(&[memory("a", &[(0.5, 1.0), (1.0, 1.0)]), memory("b", &[(0.25, 0.5), (0.75, 1.0), (1.0, 1.0)])]).unwrap();
        assert_eq!(t.metrics, ["alignment", "concision", "S"]);
        assert_eq!(t.rows[0][0], TrajectoryCell { mean: 0.375, n: 2 });
        assert_eq!(t.rows[1][0], TrajectoryCell { mean: 0.875, n: 2 });
        assert_eq!(t.rows[0][2].mean, (0.75 + 0.375) / 2.0);
        assert_eq!(t.rows[2][0], TrajectoryCell { mean: 1.0, n: 1 });
        let tsv = render_trajectory(&t);
        assert!(tsv.starts_with("iteration\talignment\talignment_n\tconcision\tconcision_n\tS\tS_n\n"));
        assert!(trajectory_report(&[]).is_err());
    }

    #[test]
    fn corpus_stats_total() {
        let c = Corpus::new("t", vec![PromptRecord::new("a", "x y", PromptSource::User)]);
        assert_eq!(length_stats(&c).unwrap().total, 1);
    }

    proptest! {
        #[test]
        fn l1_is_symmetric_and_bounded(a in prop::collection::vec(1usize..8, 1..20), b in prop::collection::vec(1usize..8, 1..20)) {
            let ta: Vec<String> = a.iter().map(|&k| vec!["w"; k].join(" ")).collect();
            let tb: Vec<String> = b.iter().map(|&k| vec!["w"; k].join(" ")).collect();
            let ha = length_stats_of(ta.iter().map(String::as_str)).unwrap();
            let hb = length_stats_of(tb.iter().map(String::as_str)).unwrap();
            prop_assert_eq!(ha.total as usize, a.len());
            prop_assert_eq!(ha.bins.values().sum::<u64>(), ha.total);
            let ab = compare_distributions(&ha, &hb).l1;
            prop_assert!((ab - compare_distributions(&hb, &ha).l1).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&ab));
        }

        #[test]
        fn pairs_round_trip(items in prop::collection::vec(("[a-z ,.\"]{1,30}", "[a-z ,]{1,30}", 0u32..6, 0.0f64..1.0), 1..10)) {
            let pairs: Vec<InstructionPair> = items
                .iter()
                .enumerate()
                .filter(|(_, (_, b, _, _))| !b.trim().is_empty())
                .map(|(i, (u, b, r, s))| InstructionPair::new(format!("s{i}"), u, b, PairMeta { rounds: *r, final_s: *s }))
                .collect();
            prop_assume!(!pairs.is_empty());
            let text = render_pairs(&pairs).unwrap();
            let (_, back) = parse_pairs(&text, Path::new("x")).unwrap();
            prop_assert_eq!(back, pairs);
        }
    }
}
