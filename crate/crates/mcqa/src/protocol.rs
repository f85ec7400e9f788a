//! Protocol drivers: render, score, select, with exact call accounting.
//!
//! One MCP question costs a single symbol-distribution call. One CP question
//! costs N completion calls for the Raw/LN strategies and 2N (conditional
//! plus unconditional per option) when UN is needed; Raw and LN reuse the
//! same N conditionals, so a sweep over all three strategies still costs 2N.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{completion_logprobs, next_symbol_distribution, BackendError, ModelBackend};
use crate::dataset::Question;
use crate::prompt::{
    render_cp_prompts, render_mcp_prompt, AnswerBinding, PromptError, DEFAULT_ANSWER_CONTEXT,
};
use crate::scorer::{
    score_cloze, score_cloze_conditional, score_mcp, select_answer, ClozeScore, ScoreError,
    SymbolDistribution,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Surface form sent to the model for each answer symbol. After `Answer:`
/// most tokenizers emit the space-prefixed letter, so that is the default;
/// `SumVariants` sums probability over the bare and space-prefixed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolMode {
    #[default]
    LeadingSpace,
    Plain,
    SumVariants,
}

impl SymbolMode {
    fn surfaces(self, symbol: char) -> Vec<String> {
        match self {
            SymbolMode::LeadingSpace => vec![format!(" {symbol}")],
            SymbolMode::Plain => vec![symbol.to_string()],
            SymbolMode::SumVariants => vec![format!(" {symbol}"), symbol.to_string()],
        }
    }
}

/// ln(e^a + e^b) without leaving log space.
fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Outcome of scoring one question under one protocol pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceOutcome {
    /// Chosen option index, in the question's stored option order.
    pub chosen: usize,
    /// Per-option scores in stored option order.
    pub scores: Vec<f64>,
    /// Backend calls made.
    pub calls: u64,
    /// Symbols that fell back to the floor logprob.
    pub floored: u64,
}

/// Multiple-choice prompting: one call, symbol scores mapped back to option
/// indices. Exemplar bindings are fixed at construction; only the target
/// question's binding varies between calls.
#[derive(Clone)]
pub struct McpProtocol {
    pub model_id: String,
    pub symbol_mode: SymbolMode,
    pub exemplars: Vec<(Question, AnswerBinding)>,
}

impl McpProtocol {
    pub fn new(model_id: impl Into<String>) -> Self {
        McpProtocol {
            model_id: model_id.into(),
            symbol_mode: SymbolMode::default(),
            exemplars: Vec::new(),
        }
    }

    pub fn with_exemplars(mut self, exemplars: Vec<(Question, AnswerBinding)>) -> Self {
        self.exemplars = exemplars;
        self
    }

    pub fn with_symbol_mode(mut self, mode: SymbolMode) -> Self {
        self.symbol_mode = mode;
        self
    }

    /// Fetches the symbol distribution for a rendered prompt in one call,
    /// merging surface variants per symbol when configured.
    pub fn symbol_distribution(
        &self,
        backend: &dyn ModelBackend,
        context: &str,
        binding: &AnswerBinding,
    ) -> Result<(SymbolDistribution, u64), ProtocolError> {
        let mut candidates = Vec::new();
        for &symbol in binding.symbols() {
            candidates.extend(self.symbol_mode.surfaces(symbol));
        }
        let response = next_symbol_distribution(backend, &self.model_id, context, &candidates)?;
        let mut entries = std::collections::BTreeMap::new();
        for &symbol in binding.symbols() {
            let mut merged: Option<f64> = None;
            for surface in self.symbol_mode.surfaces(symbol) {
                let lp = response
                    .logprob_of(&surface)
                    .expect("next_symbol_distribution covers every candidate");
                merged = Some(match merged {
                    None => lp,
                    Some(existing) => log_add(existing, lp),
                });
            }
            entries.insert(symbol, merged.expect("at least one surface per symbol"));
        }
        Ok((
            SymbolDistribution::new(entries),
            response.floored.len() as u64,
        ))
    }

    /// Renders, scores and selects for one target binding. Exactly one
    /// backend call.
    pub fn choose(
        &self,
        backend: &dyn ModelBackend,
        question: &Question,
        binding: &AnswerBinding,
    ) -> Result<ChoiceOutcome, ProtocolError> {
        let prompt = render_mcp_prompt(question, binding, &self.exemplars)?;
        let (distribution, floored) = self.symbol_distribution(backend, &prompt.text, binding)?;
        let scores = score_mcp(&distribution, binding)?;
        Ok(ChoiceOutcome {
            chosen: select_answer(&scores),
            scores,
            calls: 1,
            floored,
        })
    }
}

/// Cloze prompting: every option scored as a completion.
#[derive(Clone)]
pub struct CpProtocol {
    pub model_id: String,
    pub answer_context: String,
    pub exemplars: Vec<Question>,
}

impl CpProtocol {
    pub fn new(model_id: impl Into<String>) -> Self {
        CpProtocol {
            model_id: model_id.into(),
            answer_context: DEFAULT_ANSWER_CONTEXT.to_string(),
            exemplars: Vec::new(),
        }
    }

    pub fn with_exemplars(mut self, exemplars: Vec<Question>) -> Self {
        self.exemplars = exemplars;
        self
    }

    /// Scores every option. `with_unconditional` adds the second pass per
    /// option that the UN strategy needs.
    pub fn score_options(
        &self,
        backend: &dyn ModelBackend,
        question: &Question,
        with_unconditional: bool,
    ) -> Result<(Vec<ClozeScore>, u64), ProtocolError> {
        let mut scores = Vec::with_capacity(question.num_options());
        let mut calls = 0u64;
        for option_index in 0..question.num_options() {
            let (conditional, unconditional) = render_cp_prompts(
                question,
                option_index,
                &self.exemplars,
                &self.answer_context,
            )?;
            let completion = conditional
                .completion
                .as_deref()
                .expect("cloze prompts carry a completion");
            let conditional_tokens =
                completion_logprobs(backend, &self.model_id, &conditional.text, completion)?;
            calls += 1;
            let score = if with_unconditional {
                let unconditional_tokens = completion_logprobs(
                    backend,
                    &self.model_id,
                    &unconditional.text,
                    completion,
                )?;
                calls += 1;
                score_cloze(&conditional_tokens, &unconditional_tokens)?
            } else {
                score_cloze_conditional(&conditional_tokens)?
            };
            scores.push(score);
        }
        Ok((scores, calls))
    }
}
