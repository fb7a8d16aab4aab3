//! Stage 2: the closed feedback loop. Each iteration renders a video from the
//! current prompt, collects misalignment and verifier feedback, stores it,
//! and asks the rewriter for the next prompt. The best prompt over all
//! evaluated iterations is chosen by average rank.

pub mod memory;
pub mod ranking;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::PromptRecord;
use crate::export::format_sig6;
use crate::providers::{self, ChatRequest, LlmProvider, ProviderError, ProviderSet};
use crate::refine::{Branch, CandidatePrompt};
use crate::templates::{self, RewriteContext};
use crate::text::normalize_ws;

pub use memory::{aggregate, load_memory, parse_memory, FeedbackMemory, FeedbackRecord, MemoryError, RecoveredMemory};
pub use ranking::{average_rank_select, average_rank_select_index, fractional_ranks, RankingError, RankingTable};

#[derive(Debug, thiserror::Error)]
pub enum SspoError {
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error("{0}")]
    Precondition(String),
    #[error("iteration {iteration}: {source}")]
    Provider {
        iteration: u32,
        #[source]
        source: ProviderError,
    },
    #[error("iteration {iteration}: rewriter returned an empty prompt")]
    EmptyRewrite { iteration: u32 },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error("ranking metric {metric} missing from iteration {iteration}")]
    UnknownMetric { metric: String, iteration: u32 },
    #[error("record callback failed: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Rewrite rounds after the seed evaluation; records = max_iterations + 1.
    pub max_iterations: u32,
    pub patience: Option<u32>,
    /// Empty means every verifier, in verifier order.
    pub metrics_for_ranking: Vec<String>,
    pub include_task_metric: bool,
    /// Per-metric orientation; metrics not listed are higher-is-better.
    pub higher_is_better: BTreeMap<String, bool>,
    pub seed: Option<u64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iterations: 4,
            patience: None,
            metrics_for_ranking: Vec::new(),
            include_task_metric: true,
            higher_is_better: BTreeMap::new(),
            seed: None,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), SspoError> {
        if self.max_iterations < 1 {
            return Err(SspoError::Config("max_iterations must be at least 1".into()));
        }
        match self.patience {
            Some(0) => Err(SspoError::Config("patience must be at least 1".into())),
            Some(p) if p >= self.max_iterations => Err(SspoError::Config(format!(
                "patience {p} must be below max_iterations {}",
                self.max_iterations
            ))),
            _ => Ok(()),
        }
    }
}

/// One generate → assess → verify → task-assess cycle. The record is only
/// appended once every provider call has succeeded.
pub fn run_iteration<'m>(
    memory: &'m mut FeedbackMemory,
    current: &CandidatePrompt,
    providers: &ProviderSet,
    user_prompt: &str,
    seed: Option<u64>,
) -> Result<&'m FeedbackRecord, SspoError> {
    let iteration = memory.len() as u32;
    if current.text.trim().is_empty() {
        return Err(SspoError::Precondition("current prompt is empty".into()));
    }
    if current.branch != Branch::SspoIter(iteration) {
        return Err(SspoError::Precondition(format!(
            "candidate {} is on branch {}, expected sspo-{iteration}",
            current.id, current.branch
        )));
    }
    let wrap = |source| SspoError::Provider { iteration, source };
    let video = providers::generate_video(&current.text, seed, providers.t2v.as_ref()).map_err(wrap)?;
    let misalignment = providers::assess_misalignment(user_prompt, &video, providers.vlm.as_ref()).map_err(wrap)?;
    let scores = providers::verify(&video, user_prompt, &providers.verifiers).map_err(wrap)?;
    let task = match &providers.task_assessor {
        Some(p) => Some(providers::task_assess(&video, p.as_ref()).map_err(wrap)?),
        None => None,
    };
    let record = FeedbackRecord::assemble(iteration, current.clone(), video, misalignment, scores, task)?;
    memory.append(record)?;
    Ok(memory.last().expect("just appended"))
}

/// Feedback-driven rewrite of the latest evaluated prompt.
pub fn rewrite(
    current: &CandidatePrompt,
    memory: &FeedbackMemory,
    user_prompt: &str,
    llm: &dyn LlmProvider,
    seed: Option<u64>,
) -> Result<CandidatePrompt, SspoError> {
    let latest = memory
        .last()
        .ok_or_else(|| SspoError::Precondition("rewrite needs at least one feedback record".into()))?;
    let next = latest.iteration + 1;
    let history: Vec<_> = memory.records().iter().map(FeedbackRecord::history_line).collect();
    let task = latest.task_o.as_ref().map(|s| (s.verifier_name.as_str(), s.value));
    let message = templates::render_sspo_rewrite(&RewriteContext {
        user_prompt,
        history: &history,
        current: &current.text,
        score: latest.aggregate_s,
        task,
    });
    let reply = providers::chat(&ChatRequest::new(message).with_seed(seed), llm)
        .map_err(|source| SspoError::Provider { iteration: next, source })?;
    let text = normalize_ws(&reply);
    if text.is_empty() {
        return Err(SspoError::EmptyRewrite { iteration: next });
    }
    Ok(current.derive(Branch::SspoIter(next), text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum StopReason {
    MaxIterations,
    Patience,
    /// A later iteration failed; selection used the completed records.
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub best: CandidatePrompt,
    pub best_iteration: u32,
    pub memory: FeedbackMemory,
    pub table: RankingTable,
    pub stop: StopReason,
    /// (user prompt, best prompt)
    pub pair: (String, String),
}

/// Metric columns used for ranking, resolved against the first record.
pub fn ranking_metrics(cfg: &LoopConfig, first: &FeedbackRecord) -> Vec<String> {
    let mut metrics = if cfg.metrics_for_ranking.is_empty() {
        first.scores.iter().map(|s| s.verifier_name.clone()).collect()
    } else {
        cfg.metrics_for_ranking.clone()
    };
    if cfg.include_task_metric {
        if let Some(t) = &first.task_o {
            if !metrics.contains(&t.verifier_name) {
                metrics.push(t.verifier_name.clone());
            }
        }
    }
    metrics
}

pub fn ranking_table(memory: &FeedbackMemory, cfg: &LoopConfig) -> Result<RankingTable, SspoError> {
    let first = memory.records().first().ok_or(RankingError::NoCandidates)?;
    let metrics = ranking_metrics(cfg, first);
    let mut scores = Vec::with_capacity(memory.len());
    for r in memory.records() {
        let row = metrics
            .iter()
            .map(|m| {
                let v = r.score(m).ok_or_else(|| SspoError::UnknownMetric {
                    metric: m.clone(),
                    iteration: r.iteration,
                })?;
                Ok(if cfg.higher_is_better.get(m).copied().unwrap_or(true) {
                    v
                } else {
                    -v
                })
            })
            .collect::<Result<Vec<_>, SspoError>>()?;
        scores.push(row);
    }
    let ids = memory.records().iter().map(|r| r.prompt.id.clone()).collect();
    Ok(RankingTable::new(ids, metrics, scores)?)
}

/// Iterations since S last improved on its best earlier value.
fn stalled_rounds(memory: &FeedbackMemory) -> u32 {
    let mut best = f64::NEG_INFINITY;
    let mut stall = 0;
    for (t, r) in memory.records().iter().enumerate() {
        if t > 0 && r.aggregate_s <= best {
            stall += 1;
        } else {
            stall = 0;
        }
        best = best.max(r.aggregate_s);
    }
    stall
}

/// Runs the loop for one sample. `resume` continues from a persisted memory;
/// `on_record` sees every newly appended record (used for persistence).
pub fn run_loop(
    user: &PromptRecord,
    seed_prompt: &CandidatePrompt,
    cfg: &LoopConfig,
    providers: &ProviderSet,
    resume: Option<FeedbackMemory>,
    on_record: &mut dyn FnMut(&FeedbackMemory, &FeedbackRecord) -> Result<(), String>,
) -> Result<LoopOutcome, SspoError> {
    cfg.validate()?;
    if seed_prompt.sample_id != user.id {
        return Err(SspoError::Precondition(format!(
            "seed prompt belongs to {}, not {}",
            seed_prompt.sample_id, user.id
        )));
    }
    let mut memory = match resume {
        Some(m) if m.sample_id != user.id => {
            return Err(SspoError::Precondition(format!(
                "resumed memory is for {}, not {}",
                m.sample_id, user.id
            )))
        }
        Some(m) => m,
        None => FeedbackMemory::new(user.id.clone()),
    };
    if memory.is_empty() {
        let x0 = seed_prompt.derive(Branch::SspoIter(0), seed_prompt.text.clone());
        run_iteration(&mut memory, &x0, providers, &user.text, cfg.seed)?;
        on_record(&memory, memory.last().expect("just appended")).map_err(SspoError::Callback)?;
    }

    let budget = cfg.max_iterations as usize + 1;
    let mut stop = StopReason::MaxIterations;
    while memory.len() < budget {
        if let Some(p) = cfg.patience {
            if stalled_rounds(&memory) >= p {
                stop = StopReason::Patience;
                break;
            }
        }
        let current = memory.last().expect("non-empty").prompt.clone();
        let step = rewrite(&current, &memory, &user.text, providers.llm_rewriter.as_ref(), cfg.seed)
            .and_then(|next| run_iteration(&mut memory, &next, providers, &user.text, cfg.seed).map(|_| ()));
        match step {
            Ok(()) => {
                let rec = memory.last().expect("just appended");
                on_record(&memory, rec).map_err(SspoError::Callback)?;
            }
            Err(e @ (SspoError::Provider { .. } | SspoError::EmptyRewrite { .. })) => {
                tracing::warn!(sample = %user.id, error = %e, "loop stopped early");
                stop = StopReason::Failed(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let table = ranking_table(&memory, cfg)?;
    let iterations: Vec<u32> = memory.records().iter().map(|r| r.iteration).collect();
    let idx = average_rank_select_index(&table, &iterations)?;
    let best = memory.records()[idx].prompt.clone();
    Ok(LoopOutcome {
        pair: (user.text.clone(), best.text.clone()),
        best_iteration: iterations[idx],
        best,
        memory,
        table,
        stop,
    })
}

/// Iteration × (each verifier, S, O) table for one sample, tab separated.
pub fn loop_report(memory: &FeedbackMemory) -> String {
    let Some(first) = memory.records().first() else {
        return "iteration\tS\n".into();
    };
    let names: Vec<&str> = first.scores.iter().map(|s| s.verifier_name.as_str()).collect();
    let task = first.task_o.as_ref().map(|t| t.verifier_name.as_str());
    let mut out = String::from("iteration");
    for n in &names {
        out.push('\t');
        out.push_str(n);
    }
    out.push_str("\tS");
    if task.is_some() {
        out.push_str("\tO");
    }
    out.push('\n');
    for r in memory.records() {
        out.push_str(&r.iteration.to_string());
        for n in &names {
            out.push('\t');
            out.push_str(&r.score(n).map(format_sig6).unwrap_or_default());
        }
        out.push('\t');
        out.push_str(&format_sig6(r.aggregate_s));
        if task.is_some() {
            out.push('\t');
            out.push_str(&r.task_o.as_ref().map(|t| format_sig6(t.value)).unwrap_or_default());
        }
        out.push('\n');
    }
    out
}
