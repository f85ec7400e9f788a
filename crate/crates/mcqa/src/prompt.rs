//! Prompt construction for the two protocols.
//!
//! Multiple-choice prompts list every answer option behind a letter symbol
//! and end with `Answer:`; the model is scored on the single symbol token it
//! would emit next. Cloze prompts omit the option list and score each
//! option's text as a completion of `Answer:`. Phrasing is fixed: stems are
//! prefixed `Question: `, options are listed as `A. <text>`, passages are
//! prefixed `Passage: ` (`Story: ` / `Dialogue: ` per dataset kind).
//!
//! Option texts are inserted verbatim, with no whitespace normalization:
//! preserving spacing artifacts in the source data is part of the job.

use thiserror::Error;

use crate::dataset::Question;

/// Display symbols bound to answer options, in order.
pub const SYMBOL_ALPHABET: [char; 26] = [
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R',
    'S', 'T', 'U', 'V', 'W', 'X', 'Y', 'Z',
];

/// The unconditional context used by the UN scoring strategy. Note the
/// trailing space.
pub const DEFAULT_ANSWER_CONTEXT: &str = "Answer: ";

/// Cloze completions carry a single leading space so the option text follows
/// `Answer:` with a separator; tokenizers fold that space into the first
/// completion token.
pub const COMPLETION_SEPARATOR: &str = " ";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("binding covers {binding} options but question {id:?} has {options}")]
    BindingMismatch {
        id: String,
        binding: usize,
        options: usize,
    },
    #[error("option index {index} out of range for question {id:?} with {options} options")]
    OptionIndexOutOfRange {
        id: String,
        index: usize,
        options: usize,
    },
    #[error("invalid answer binding: {0}")]
    InvalidBinding(String),
    #[error("question {id:?} alone renders to {cost} tokens, over the {budget}-token budget")]
    OverBudget { id: String, cost: usize, budget: usize },
}

/// A permutation binding display symbols to answer options for one prompt
/// rendering. Display position `i` shows option `permutation()[i]` labelled
/// `symbols()[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerBinding {
    permutation: Vec<usize>,
    symbols: Vec<char>,
}

impl AnswerBinding {
    /// The identity binding: options shown in their stored order, labelled
    /// A, B, C, ...
    pub fn identity(n: usize) -> Self {
        Self::from_permutation((0..n).collect()).expect("identity permutation is valid")
    }

    /// Binding with the default A.. symbol prefix.
    pub fn from_permutation(permutation: Vec<usize>) -> Result<Self, PromptError> {
        let n = permutation.len();
        if n > SYMBOL_ALPHABET.len() {
            return Err(PromptError::InvalidBinding(format!(
                "{n} options exceed the symbol alphabet"
            )));
        }
        Self::with_symbols(permutation, SYMBOL_ALPHABET[..n].to_vec())
    }

    /// Binding with explicit symbols; checks that the permutation is a
    /// bijection and the symbols are distinct.
    pub fn with_symbols(permutation: Vec<usize>, symbols: Vec<char>) -> Result<Self, PromptError> {
        let n = permutation.len();
        if symbols.len() != n {
            return Err(PromptError::InvalidBinding(format!(
                "{} symbols for {n} options",
                symbols.len()
            )));
        }
        let mut seen = vec![false; n];
        for &index in &permutation {
            if index >= n || seen[index] {
                return Err(PromptError::InvalidBinding(format!(
                    "permutation {permutation:?} is not a bijection on 0..{n}"
                )));
            }
            seen[index] = true;
        }
        for (i, a) in symbols.iter().enumerate() {
            if symbols[i + 1..].contains(a) {
                return Err(PromptError::InvalidBinding(format!(
                    "duplicate symbol {a:?}"
                )));
            }
        }
        Ok(Self {
            permutation,
            symbols,
        })
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    /// Option index shown at display position `pos`.
    pub fn option_at(&self, pos: usize) -> usize {
        self.permutation[pos]
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Display position of a given option index (inverse permutation).
    pub fn display_position_of(&self, option_index: usize) -> Option<usize> {
        self.permutation.iter().position(|&i| i == option_index)
    }

    /// Symbol labelling a given option under this binding.
    pub fn symbol_for_option(&self, option_index: usize) -> Option<char> {
        self.display_position_of(option_index)
            .map(|pos| self.symbols[pos])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Mcp,
    CpConditional,
    CpUnconditional,
}

/// A fully rendered prompt, plus the completion to score for cloze prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub kind: PromptKind,
    /// Present for MCP prompts: the binding used for the target question.
    pub binding: Option<AnswerBinding>,
    /// Present for cloze prompts: the candidate text to score, including its
    /// leading space.
    pub completion: Option<String>,
    pub exemplar_count: usize,
}

fn push_passage_line(out: &mut String, question: &Question) {
    if let (Some(passage), Some(prefix)) = (&question.passage, question.passage_kind.prefix()) {
        out.push_str(prefix);
        out.push(' ');
        out.push_str(passage);
        out.push('\n');
    }
}

/// One MCP block: passage line, stem line, one `X. <option>` line per option
/// in binding order, then `Answer:` (plus ` <gold symbol>` for exemplars).
fn mcp_block(
    question: &Question,
    binding: &AnswerBinding,
    with_answer: bool,
) -> Result<String, PromptError> {
    if binding.len() != question.num_options() {
        return Err(PromptError::BindingMismatch {
            id: question.id.clone(),
            binding: binding.len(),
            options: question.num_options(),
        });
    }
    let mut block = String::new();
    push_passage_line(&mut block, question);
    block.push_str("Question: ");
    block.push_str(&question.stem);
    block.push('\n');
    for (pos, &option_index) in binding.permutation().iter().enumerate() {
        block.push(binding.symbols()[pos]);
        block.push_str(". ");
        block.push_str(&question.options[option_index]);
        block.push('\n');
    }
    block.push_str("Answer:");
    if with_answer {
        let symbol = binding
            .symbol_for_option(question.gold_index)
            .expect("gold index is covered by a valid binding");
        block.push(' ');
        block.push(symbol);
    }
    Ok(block)
}

/// One cloze block: passage line, stem line, then `Answer:` bare for the
/// target or `Answer: <gold text>` for exemplars.
fn cp_block(question: &Question, with_answer: bool) -> String {
    let mut block = String::new();
    push_passage_line(&mut block, question);
    block.push_str("Question: ");
    block.push_str(&question.stem);
    block.push('\n');
    block.push_str("Answer:");
    if with_answer {
        block.push(' ');
        block.push_str(question.gold_text());
    }
    block
}

/// Renders a multiple-choice prompt: exemplar blocks then the target block,
/// separated by one blank line, ending with the exact suffix `Answer:`.
pub fn render_mcp_prompt(
    question: &Question,
    binding: &AnswerBinding,
    exemplars: &[(Question, AnswerBinding)],
) -> Result<RenderedPrompt, PromptError> {
    let mut blocks = Vec::with_capacity(exemplars.len() + 1);
    for (exemplar, exemplar_binding) in exemplars {
        blocks.push(mcp_block(exemplar, exemplar_binding, true)?);
    }
    blocks.push(mcp_block(question, binding, false)?);
    Ok(RenderedPrompt {
        text: blocks.join("\n\n"),
        kind: PromptKind::Mcp,
        binding: Some(binding.clone()),
        completion: None,
        exemplar_count: exemplars.len(),
    })
}

/// Renders the conditional and unconditional cloze prompts for one candidate
/// option. Both share the same completion: a leading space plus the option
/// text. The conditional context is independent of which option is scored;
/// the unconditional context is exactly `answer_context`.
pub fn render_cp_prompts(
    question: &Question,
    option_index: usize,
    exemplars: &[Question],
    answer_context: &str,
) -> Result<(RenderedPrompt, RenderedPrompt), PromptError> {
    if option_index >= question.num_options() {
        return Err(PromptError::OptionIndexOutOfRange {
            id: question.id.clone(),
            index: option_index,
            options: question.num_options(),
        });
    }
    let mut blocks = Vec::with_capacity(exemplars.len() + 1);
    for exemplar in exemplars {
        blocks.push(cp_block(exemplar, true));
    }
    blocks.push(cp_block(question, false));
    let completion = format!("{COMPLETION_SEPARATOR}{}", question.options[option_index]);
    let conditional = RenderedPrompt {
        text: blocks.join("\n\n"),
        kind: PromptKind::CpConditional,
        binding: None,
        completion: Some(completion.clone()),
        exemplar_count: exemplars.len(),
    };
    let unconditional = RenderedPrompt {
        text: answer_context.to_string(),
        kind: PromptKind::CpUnconditional,
        binding: None,
        completion: Some(completion),
        exemplar_count: exemplars.len(),
    };
    Ok((conditional, unconditional))
}

/// Deterministic token count used for budget packing.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(chars / chars_per_token)` fallback counter; four characters per
/// token approximates byte-pair tokenizers well enough for budgeting.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicCounter {
    pub chars_per_token: usize,
}

impl Default for HeuristicCounter {
    fn default() -> Self {
        HeuristicCounter { chars_per_token: 4 }
    }
}

impl TokenCounter for HeuristicCounter {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(self.chars_per_token)
    }
}

/// Token cost of evaluating `target` with the given exemplar prefix: the
/// costlier of the MCP rendering and the costliest cloze rendering
/// (conditional context plus completion, maximized over options). Using the
/// max of both protocols yields one exemplar count that fits either prompt
/// style, measured with identity bindings.
pub fn prompt_cost(
    exemplars: &[Question],
    target: &Question,
    counter: &dyn TokenCounter,
) -> Result<usize, PromptError> {
    let bound: Vec<(Question, AnswerBinding)> = exemplars
        .iter()
        .map(|q| (q.clone(), AnswerBinding::identity(q.num_options())))
        .collect();
    let mcp = render_mcp_prompt(target, &AnswerBinding::identity(target.num_options()), &bound)?;
    let mut cost = counter.count(&mcp.text);
    for option_index in 0..target.num_options() {
        let (conditional, _) =
            render_cp_prompts(target, option_index, exemplars, DEFAULT_ANSWER_CONTEXT)?;
        let completion = conditional.completion.as_deref().unwrap_or_default();
        let full = format!("{}{completion}", conditional.text);
        cost = cost.max(counter.count(&full));
    }
    Ok(cost)
}

/// Returns the longest prefix of `pool` (already in seeded order) whose full
/// rendering with `target` fits the token budget. Errors when even the bare
/// target is over budget.
pub fn pack_exemplars(
    pool: &[Question],
    target: &Question,
    token_budget: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<Question>, PromptError> {
    let mut best: Option<usize> = None;
    for k in 0..=pool.len() {
        if prompt_cost(&pool[..k], target, counter)? <= token_budget {
            best = Some(k);
        }
    }
    match best {
        Some(k) => Ok(pool[..k].to_vec()),
        None => {
            let cost = prompt_cost(&[], target, counter)?;
            Err(PromptError::OverBudget {
                id: target.id.clone(),
                cost,
                budget: token_budget,
            })
        }
    }
}
