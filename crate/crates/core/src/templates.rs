//! Instruction templates sent to the language-model roles, and the slot
//! readers the mock providers use to recover their inputs.
//!
//! Slot values are whitespace-normalized before rendering so each one sits on
//! a single labeled line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text::normalize_ws;

pub const MERGE_INSTRUCTION: &str = "Suppose you are a Text Merger. You receive two inputs from the user: a description body and a relevant modifier. Your task is to enrich the description body with relevant modifiers while retaining the description body. You should ensure that the output text is coherent, contextually relevant, and follows the same structure as the examples provided.";

pub const REFACTOR_PREFIX: &str = "Instruction. Refine format and word length of the sentence: ";
pub const REFACTOR_SUFFIX: &str = ". Maintain the original subject descriptions, actions, scene descriptions. Append additional straightforward actions to make the sentence more dynamic if necessary.";

pub const SELECT_INSTRUCTION: &str = "Instruction. Given user-provided prompt x_i, select the better optimized prompt from x_r and x_n. The chosen prompt is required to contain multiple, straightforward, and relevant modifiers about x_i while involving the semantics of x_i.";
pub const SELECT_ANSWER_RULE: &str = "Answer with the single letter R to choose x_r or N to choose x_n.";

pub const SSPO_INSTRUCTION: &str = "You are a prompt engineering expert using a diffusion-based Text-to-Video (T2V) model. Your task is to refine the current refined prompt to improve the alignment between the generated video and the input textual semantics. You should consider both the historical and current feedback signals stored in the Feedback Memory, including the raw user prompt, the historical feedback records, overall video scores, and task-specific assessments. Please analyze these feedbacks together with the previous optimized prompts and their evaluation results to propose a new, improved prompt. The goal is to generate a refined prompt that minimizes semantic misalignment, enhances temporal and spatial coherence, and improves overall perceptual fidelity.";

pub const FINETUNE_INSTRUCTION: &str = "You are a prompt engineering expert and using a diffusion model to generate video by giving a prompt. Your task is to refine the prompt to add more related and vivid descriptions (Optional: camera language, light and shadow, atmosphere) for better generative performance. Conceive some additional actions to make the sentence more dynamic. Make sure it is a fluent sentence, not nonsense.";

pub const EXTRACT_INSTRUCTION: &str = "Extract the scene and its related modifiers from the video caption below. The scene is the place where the caption happens. Modifiers are short phrases describing the subject, the action, or the atmosphere.";
pub const EXTRACT_FORMAT: &str = "Reply with exactly one line \"scene: <scene>\" followed by any number of lines \"subject: <text>\", \"action: <text>\" or \"atmosphere: <text>\". Write nothing else.";

pub const NAIVE_INSTRUCTION: &str = "Rewrite the following prompt for a text-to-video model. Add related and vivid details about its subject, action and scene while keeping its meaning.";

pub const CORPUS_REWRITE_INSTRUCTION: &str = "Rewrite the following video caption so that it no longer follows the unified caption format and length, while maintaining its original semantics. Reorder or rephrase its clauses freely.";

pub const SYSTEM_ROLE: &str = "You are a careful assistant for text-to-video prompt writing.";

/// One few-shot pair for the merge instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeExample {
    pub body: String,
    pub modifier: String,
    pub merged: String,
}

const DEFAULT_MERGE_EXAMPLES: &str = include_str!("../fixtures/merge_examples.json");

pub fn default_merge_examples() -> Vec<MergeExample> {
    serde_json::from_str(DEFAULT_MERGE_EXAMPLES).expect("bundled merge examples are valid")
}

pub fn load_merge_examples(path: &Path) -> Result<Vec<MergeExample>, String> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
}

pub const LABEL_BODY: &str = "Description body: ";
pub const LABEL_MODIFIER: &str = "Modifier: ";
pub const LABEL_CAPTION: &str = "Caption: ";
pub const LABEL_PROMPT: &str = "Prompt: ";
pub const LABEL_XI: &str = "x_i: ";
pub const LABEL_XR: &str = "x_r: ";
pub const LABEL_XN: &str = "x_n: ";
pub const LABEL_HISTORY: &str = "Historical Feedback Records:";
pub const LABEL_ROUND: &str = "Round ";
pub const LABEL_RAW_USER: &str = "Raw User Prompt: ";
pub const LABEL_CURRENT: &str = "Current Refined Prompt: ";
pub const LABEL_SCORE: &str = "Overall Video Score: ";
pub const LABEL_TASK: &str = "Task-Specific Assessment: ";
pub const LABEL_FINAL: &str = "Final Output (Updated Refined Prompt):";

pub fn render_merge(examples: &[MergeExample], body: &str, modifier: &str) -> String {
    let mut s = String::new();
    s.push_str(MERGE_INSTRUCTION);
    s.push_str("\nExamples of prompt-pairs provided:\n");
    for (i, e) in examples.iter().enumerate() {
        s.push_str(&format!(
            "Example {}: {{{}, {}}} -> {}\n",
            i + 1,
            normalize_ws(&e.body),
            normalize_ws(&e.modifier),
            normalize_ws(&e.merged)
        ));
    }
    s.push_str("Input description body and modifier are:\n");
    s.push_str(&format!("{LABEL_BODY}{}\n", normalize_ws(body)));
    s.push_str(&format!("{LABEL_MODIFIER}{}\n", normalize_ws(modifier)));
    s.push_str("The merged prompt is:");
    s
}

/// Tab-II style refactor instruction; also the `instruction` field of refactor dataset records.
pub fn render_refactor(sentence: &str) -> String {
    format!("{REFACTOR_PREFIX}{}{REFACTOR_SUFFIX}", normalize_ws(sentence))
}

/// Selection instruction; also the `instruction` field of discriminator dataset records.
pub fn render_select(x_i: &str, x_r: &str, x_n: &str) -> String {
    format!(
        "{SELECT_INSTRUCTION} {SELECT_ANSWER_RULE}\n{LABEL_XI}{}\n{LABEL_XR}{}\n{LABEL_XN}{}",
        normalize_ws(x_i),
        normalize_ws(x_r),
        normalize_ws(x_n)
    )
}

pub fn render_extract(caption: &str) -> String {
    format!(
        "{EXTRACT_INSTRUCTION}\n{EXTRACT_FORMAT}\n{LABEL_CAPTION}{}",
        normalize_ws(caption)
    )
}

pub fn render_naive(prompt: &str) -> String {
    format!("{NAIVE_INSTRUCTION}\n{LABEL_PROMPT}{}\nRewritten prompt:", normalize_ws(prompt))
}

pub fn render_corpus_rewrite(caption: &str) -> String {
    format!(
        "{CORPUS_REWRITE_INSTRUCTION}\n{LABEL_CAPTION}{}\nRewritten caption:",
        normalize_ws(caption)
    )
}

/// Fine-tuning instruction with the raw user prompt inserted verbatim.
pub fn render_finetune(user_prompt: &str) -> String {
    format!("{FINETUNE_INSTRUCTION}\nInitial Prompt: {user_prompt}.\nTarget Optimized Prompt:")
}

/// One memory entry as rendered into the feedback-driven rewrite instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryLine {
    pub prompt: String,
    pub missing_elements: Vec<String>,
    pub contradictions: Vec<String>,
    pub assessment: String,
    #[serde(rename = "S")]
    pub aggregate: f64,
    #[serde(rename = "O", default, skip_serializing_if = "Option::is_none")]
    pub task: Option<f64>,
}

pub struct RewriteContext<'a> {
    pub user_prompt: &'a str,
    pub history: &'a [HistoryLine],
    pub current: &'a str,
    pub score: f64,
    pub task: Option<(&'a str, f64)>,
}

pub fn render_sspo_rewrite(ctx: &RewriteContext<'_>) -> String {
    let mut s = String::new();
    s.push_str(SSPO_INSTRUCTION);
    s.push_str("\n\n");
    s.push_str(LABEL_HISTORY);
    s.push('\n');
    for (t, line) in ctx.history.iter().enumerate() {
        s.push_str(&format!(
            "{LABEL_ROUND}{t}: {}\n",
            serde_json::to_string(line).expect("history line serializes")
        ));
    }
    s.push_str(&format!("{LABEL_RAW_USER}{}\n", normalize_ws(ctx.user_prompt)));
    s.push_str(&format!("{LABEL_CURRENT}{}\n", normalize_ws(ctx.current)));
    s.push_str(&format!("{LABEL_SCORE}{:.6}\n", ctx.score));
    match ctx.task {
        Some((name, v)) => s.push_str(&format!("{LABEL_TASK}{name}={v:.6}\n")),
        None => s.push_str(&format!("{LABEL_TASK}none\n")),
    }
    s.push_str(LABEL_FINAL);
    s
}

/// Value of the first line starting with `label`.
pub fn read_field<'a>(message: &'a str, label: &str) -> Option<&'a str> {
    message
        .lines()
        .find_map(|l| l.strip_prefix(label))
        .map(str::trim)
}

/// The sentence slot of a refactor instruction.
pub fn read_refactor_sentence(message: &str) -> Option<&str> {
    let rest = message.strip_prefix(REFACTOR_PREFIX)?;
    let end = rest.rfind(REFACTOR_SUFFIX)?;
    Some(&rest[..end])
}

/// History records of a rewrite instruction, in round order.
pub fn read_history(message: &str) -> Result<Vec<HistoryLine>, String> {
    let mut lines = message.lines().skip_while(|l| *l != LABEL_HISTORY);
    if lines.next().is_none() {
        return Err("no history section".into());
    }
    let mut out = Vec::new();
    for line in lines {
        let Some(rest) = line.strip_prefix(LABEL_ROUND) else {
            break;
        };
        let (_, json) = rest.split_once(": ").ok_or("malformed round line")?;
        out.push(serde_json::from_str(json).map_err(|e| format!("bad history record: {e}"))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_examples_have_four_pairs() {
        let e = default_merge_examples();
        assert_eq!(e.len(), 4);
        assert_eq!(e[0].merged, "a woman dressed in a black suit representing a funeral");
    }

    #[test]
    fn merge_slots_are_readable() {
        let m = render_merge(&default_merge_examples(), "a woman\nrepresenting a funeral", "a black suit");
        assert!(m.starts_with(MERGE_INSTRUCTION));
        assert_eq!(read_field(&m, LABEL_BODY), Some("a woman representing a funeral"));
        assert_eq!(read_field(&m, LABEL_MODIFIER), Some("a black suit"));
    }

    #[test]
    fn refactor_sentence_survives_embedded_periods() {
        let m = render_refactor("a cat. Maintain calm");
        assert_eq!(read_refactor_sentence(&m), Some("a cat. Maintain calm"));
    }

    #[test]
    fn finetune_contains_user_prompt_verbatim() {
        let m = render_finetune("a  cat");
        assert!(m.contains("Initial Prompt: a  cat."));
    }

    #[test]
    fn history_round_trip() {
        let history = vec![
            HistoryLine {
                prompt: "a red fox".into(),
                missing_elements: vec!["runs".into()],
                contradictions: vec![],
                assessment: "missing: runs".into(),
                aggregate: 0.5,
                task: Some(0.25),
            },
            HistoryLine {
                prompt: "a red fox, runs".into(),
                missing_elements: vec![],
                contradictions: vec![],
                assessment: "ok".into(),
                aggregate: 1.0,
                task: None,
            },
        ];
        let m = render_sspo_rewrite(&RewriteContext {
            user_prompt: "a red fox runs",
            history: &history,
            current: "a red fox, runs",
            score: 1.0,
            task: None,
        });
        assert_eq!(read_history(&m).unwrap(), history);
        assert_eq!(read_field(&m, LABEL_CURRENT), Some("a red fox, runs"));
        assert_eq!(read_field(&m, LABEL_RAW_USER), Some("a red fox runs"));
    }
}
