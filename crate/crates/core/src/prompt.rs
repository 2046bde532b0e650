//! Prompt rendering for comment updating and self-ranking, and cleanup of
//! raw model replies.
//!
//! Template text lives in versioned resource files under `resources/prompts`
//! so rendered prompts are reproducible byte for byte; [`PROMPT_VERSION`]
//! goes into every cache key and report.

use serde::{Deserialize, Serialize};

use crate::augment::CandidateComment;
use crate::error::{Error, Result};
use crate::normalize::{clean_response, NormalizeOptions};
use crate::sample::CommentUpdateSample;

pub const PROMPT_VERSION: &str = "update-v1/self-rank-v1";

const UPDATE_TEMPLATE: &str = include_str!("../resources/prompts/update_v1.txt");
const DEMO_TEMPLATE: &str = include_str!("../resources/prompts/update_demo_v1.txt");
const SELF_RANK_TEMPLATE: &str = include_str!("../resources/prompts/self_rank_v1.txt");

const DEMO_HEADER: &str = "\n### Demonstrations\nThe following examples show how comments were updated for similar method changes.\n";
const DEMO_MARKER: &str = "\n#### Example ";
const QUERY_MARKER: &str = "### Old Method\n";

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_SHOTS: [usize; 4] = [0, 1, 3, 5];

/// One prompting configuration: `shots` retrieved demonstrations at a given
/// temperature against one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub shots: usize,
    pub temperature: f64,
    pub model_id: String,
}

impl PromptStrategy {
    pub fn new(model_id: impl Into<String>, shots: usize, temperature: f64) -> Result<Self> {
        let s = Self {
            shots,
            temperature,
            model_id: model_id.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(Error::Contract(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// The default 0/1/3/5-shot strategies at temperature 0.2.
    pub fn defaults(model_id: &str) -> Vec<Self> {
        DEFAULT_SHOTS
            .iter()
            .map(|&k| Self {
                shots: k,
                temperature: DEFAULT_TEMPERATURE,
                model_id: model_id.to_string(),
            })
            .collect()
    }
}

/// Single-pass `{name}` substitution; substituted text is never rescanned.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Renders the comment-update prompt. `demonstrations` must already be in
/// display order (closest last) and number exactly `strategy.shots`.
pub fn build_update_prompt(
    sample: &CommentUpdateSample,
    demonstrations: &[&CommentUpdateSample],
    strategy: &PromptStrategy,
) -> Result<String> {
    if demonstrations.len() != strategy.shots {
        return Err(Error::Contract(format!(
            "strategy asks for {} demonstrations, got {}",
            strategy.shots,
            demonstrations.len()
        )));
    }
    let mut block = String::new();
    if !demonstrations.is_empty() {
        block.push_str(DEMO_HEADER);
        for (i, demo) in demonstrations.iter().enumerate() {
            let gt = demo.new_comment.as_deref().ok_or_else(|| {
                Error::Contract(format!("demonstration `{}` has no new comment", demo.id))
            })?;
            let index = (i + 1).to_string();
            block.push_str(&render(
                DEMO_TEMPLATE,
                &[
                    ("index", &index),
                    ("old_method", &demo.old_code),
                    ("new_method", &demo.new_code),
                    ("old_comment", &demo.old_comment),
                    ("new_comment", gt),
                ],
            ));
        }
    }
    block.push('\n');
    Ok(render(
        UPDATE_TEMPLATE,
        &[
            ("demonstrations", &block),
            ("old_method", &sample.old_code),
            ("new_method", &sample.new_code),
            ("old_comment", &sample.old_comment),
        ],
    ))
}

/// Number of demonstration sections in a rendered update prompt.
pub fn count_demonstrations(prompt: &str) -> usize {
    let head = prompt.rfind(QUERY_MARKER).map_or(prompt, |i| &prompt[..i]);
    head.matches(DEMO_MARKER).count()
}

/// The query part of a rendered update prompt (old method onwards).
pub fn query_section(prompt: &str) -> &str {
    prompt.rfind(QUERY_MARKER).map_or(prompt, |i| &prompt[i..])
}

pub fn expert_name(i: usize) -> String {
    format!("Expert {i}")
}

pub fn build_self_rank_prompt(
    sample: &CommentUpdateSample,
    candidates: &[CandidateComment],
) -> Result<String> {
    if candidates.len() < 2 {
        return Err(Error::Contract(format!(
            "self-ranking needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    let experts = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "\"{}\": {{\"comment\": {}}}",
                expert_name(i + 1),
                serde_json::Value::String(c.text.clone())
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    let format = (1..=candidates.len())
        .map(|i| format!("\"top-{i}\": \"here_is_Expert_Name\""))
        .collect::<Vec<_>>()
        .join(", ");
    let k = candidates.len().to_string();
    Ok(render(
        SELF_RANK_TEMPLATE,
        &[
            ("old_method", &sample.old_code),
            ("new_method", &sample.new_code),
            ("old_comment", &sample.old_comment),
            ("candidates", &format!("{{{experts}}}")),
            ("k", &k),
            ("format", &format!("{{{format}}}")),
        ],
    ))
}

pub fn normalize_llm_response(raw: &str) -> Result<String> {
    normalize_llm_response_with(raw, &NormalizeOptions::default())
}

pub fn normalize_llm_response_with(raw: &str, opts: &NormalizeOptions) -> Result<String> {
    let text = clean_response(raw, opts);
    if text.is_empty() {
        return Err(Error::EmptyResponse);
    }
    Ok(text)
}
