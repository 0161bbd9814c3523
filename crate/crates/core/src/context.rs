//! Prompt rendering and token-budgeted context assembly.

use serde::Serialize;
use thiserror::Error;

use crate::retrieval::PassageHit;

pub const DEFAULT_TOKEN_BUDGET: usize = 2048;

const PROMPT_HEAD: &str = "<IMAGE>\nGiven the following context:\n";
const PROMPT_TAIL: &str = "\nGive a short answer. ASSISTANT:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error(
        "token budget {budget} cannot fit the prompt template and question ({required} tokens)"
    )]
    BudgetTooSmall { budget: usize, required: usize },
}

pub trait Tokenizer: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

/// Counts whitespace-separated tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssembledContext {
    pub prompt: String,
    pub token_count: usize,
    pub included_passages: Vec<PassageHit>,
    pub dropped_passages: Vec<PassageHit>,
}

pub fn render_prompt<'a>(question: &str, passages: impl IntoIterator<Item = &'a str>) -> String {
    let mut prompt = String::from(PROMPT_HEAD);
    for (i, p) in passages.into_iter().enumerate() {
        if i > 0 {
            prompt.push('\n');
        }
        prompt.push_str(p);
    }
    prompt.push('\n');
    prompt.push_str(question);
    prompt.push_str(PROMPT_TAIL);
    prompt
}

/// Adds passages in order while the rendered prompt stays within `budget`.
/// The first passage that does not fit is dropped together with every
/// passage after it; passages are never cut.
pub fn assemble_context(
    question: &str,
    passages: &[PassageHit],
    budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<AssembledContext, ContextError> {
    let base = render_prompt(question, std::iter::empty());
    let required = tokenizer.count_tokens(&base);
    if required >= budget {
        return Err(ContextError::BudgetTooSmall { budget, required });
    }
    let mut prompt = base;
    let mut token_count = required;
    let mut included = 0;
    for count in 1..=passages.len() {
        let candidate = render_prompt(question, passages[..count].iter().map(|p| p.text.as_str()));
        let tokens = tokenizer.count_tokens(&candidate);
        if tokens > budget {
            break;
        }
        prompt = candidate;
        token_count = tokens;
        included = count;
    }
    Ok(AssembledContext {
        prompt,
        token_count,
        included_passages: passages[..included].to_vec(),
        dropped_passages: passages[included..].to_vec(),
    })
}
