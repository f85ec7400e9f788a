//! Evaluation harness for multiple-choice question answering with
//! completion-style language models.
//!
//! Two prompting protocols are supported. Cloze prompting (CP) presents only
//! the question and scores each candidate answer's text as a completion,
//! under three normalization strategies (raw sum, length normalization,
//! unconditional normalization). Multiple-choice prompting (MCP) presents
//! the question together with symbol-labelled options and scores the single
//! symbol token the model would emit after `Answer:`.
//!
//! Beyond accuracy, the harness measures answer-order invariance as the
//! Proportion of Plurality Agreement ([`ppa`]), and ships the answer-text
//! corruptions and gold-moving shuffle ([`perturb`]) used to probe how much
//! each strategy leans on surface form. Backends include deterministic mocks
//! for offline verification and a rate-limited, cached client for
//! completions-style HTTP APIs ([`backend`]).

pub mod backend;
pub mod dataset;
pub mod perturb;
pub mod ppa;
pub mod prompt;
pub mod protocol;
pub mod report;
pub mod runner;
pub mod scorer;
pub mod seed;

pub use backend::{BackendError, BackendRequest, BackendResponse, ModelBackend};
pub use dataset::{
    load_dataset, load_dataset_with_pool, load_questions, sample_instances, validate_dataset,
    write_questions, DataError, Dataset, PassageKind, Question, Split,
};
pub use perturb::{corrupt_caps, corrupt_space, strong_shuffle, CorruptionKind, CorruptionSpec};
pub use ppa::{orderings_for, ppa_for_dataset, ppa_for_question, PpaResult, QuestionPpa};
pub use prompt::{
    pack_exemplars, render_cp_prompts, render_mcp_prompt, AnswerBinding, HeuristicCounter,
    PromptError, RenderedPrompt, TokenCounter, DEFAULT_ANSWER_CONTEXT,
};
pub use protocol::{CpProtocol, McpProtocol, SymbolMode};
pub use report::{emit_report, parse_report, render_comparison, write_report, ReportFormat};
pub use runner::{
    build_backend, compute_metrics, evaluate_dataset, run_evaluation, BackendConfig, CpStrategy,
    EvalConfig, EvalRecord, EvalReport, Metrics, Protocol, RunError, Shots,
};
pub use scorer::{
    score_cloze, score_mcp, select_answer, ClozeScore, ScoreError, Strategy, SymbolDistribution,
    TokenLogProbs,
};
pub use seed::derive_seed;
