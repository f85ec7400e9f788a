//! Answer scoring.
//!
//! Cloze candidates are ranked by summed token log-probabilities under three
//! strategies: Raw (the sum), LN (length normalization: the nth root of the
//! probability product, computed as the mean log-probability) and UN
//! (unconditional normalization: the conditional probability divided by the
//! completion's probability after the bare answer context). Multiple-choice
//! prompts are ranked by the log-probability of each option's symbol token.
//!
//! Everything stays in log space; probability-space products and roots
//! underflow for long completions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::AnswerBinding;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("conditional token list is empty")]
    EmptyConditional,
    #[error("logprob {value} for token {token:?} is not a finite non-positive number")]
    InvalidLogProb { token: String, value: f64 },
    #[error("symbol {0:?} missing from the scored distribution")]
    MissingSymbol(char),
    #[error("binding is empty")]
    EmptyBinding,
}

/// Per-token log-probabilities for one scored span. Token texts concatenate
/// to the completion string they describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    tokens: Vec<(String, f64)>,
}

impl TokenLogProbs {
    /// Validates that every logprob is finite and non-positive.
    pub fn new(tokens: Vec<(String, f64)>) -> Result<Self, ScoreError> {
        for (token, value) in &tokens {
            if !value.is_finite() || *value > 0.0 {
                return Err(ScoreError::InvalidLogProb {
                    token: token.clone(),
                    value: *value,
                });
            }
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[(String, f64)] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sum of token log-probabilities: the completion's log-probability.
    pub fn total(&self) -> f64 {
        self.tokens.iter().map(|(_, lp)| lp).sum()
    }

    /// The completion text these tokens cover.
    pub fn text(&self) -> String {
        self.tokens.iter().map(|(t, _)| t.as_str()).collect()
    }
}

/// Cloze scores for one candidate under all strategies. `un` is present only
/// when the unconditional pass was made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClozeScore {
    /// Sum of conditional token logprobs.
    pub raw: f64,
    /// Mean conditional token logprob; exp(ln) is the nth root of the
    /// probability product.
    pub ln: f64,
    /// Conditional minus unconditional log-probability: the log of the
    /// probability ratio.
    pub un: Option<f64>,
}

impl ClozeScore {
    pub fn for_strategy(&self, strategy: Strategy) -> Option<f64> {
        match strategy {
            Strategy::Raw => Some(self.raw),
            Strategy::Ln => Some(self.ln),
            Strategy::Un => self.un,
            Strategy::Mcp => None,
        }
    }
}

/// Scores one cloze candidate from its conditional and unconditional passes.
pub fn score_cloze(
    conditional: &TokenLogProbs,
    unconditional: &TokenLogProbs,
) -> Result<ClozeScore, ScoreError> {
    let partial = score_cloze_conditional(conditional)?;
    Ok(ClozeScore {
        un: Some(partial.raw - unconditional.total()),
        ..partial
    })
}

/// Raw and LN only, for runs that skip the unconditional pass.
pub fn score_cloze_conditional(conditional: &TokenLogProbs) -> Result<ClozeScore, ScoreError> {
    if conditional.is_empty() {
        return Err(ScoreError::EmptyConditional);
    }
    let raw = conditional.total();
    Ok(ClozeScore {
        raw,
        ln: raw / conditional.len() as f64,
        un: None,
    })
}

/// Log-probabilities of the candidate symbols at the answer position, keyed
/// by symbol label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolDistribution {
    pub entries: BTreeMap<char, f64>,
}

impl SymbolDistribution {
    pub fn new(entries: BTreeMap<char, f64>) -> Self {
        Self { entries }
    }
}

/// Maps symbol logprobs back to option-index space: the option shown at
/// display position `i` receives the logprob of the symbol labelling it.
pub fn score_mcp(
    distribution: &SymbolDistribution,
    binding: &AnswerBinding,
) -> Result<Vec<f64>, ScoreError> {
    if binding.is_empty() {
        return Err(ScoreError::EmptyBinding);
    }
    let mut scores = vec![f64::NAN; binding.len()];
    for (pos, &option_index) in binding.permutation().iter().enumerate() {
        let symbol = binding.symbols()[pos];
        let logprob = distribution
            .entries
            .get(&symbol)
            .ok_or(ScoreError::MissingSymbol(symbol))?;
        scores[option_index] = *logprob;
    }
    Ok(scores)
}

/// Scoring strategy names as they appear in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Raw,
    Ln,
    Un,
    Mcp,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Raw => "raw",
            Strategy::Ln => "ln",
            Strategy::Un => "un",
            Strategy::Mcp => "mcp",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Smallest index achieving the maximum score. Ties break to the lowest
/// index so runs are deterministic.
pub fn select_answer(scores: &[f64]) -> usize {
    assert!(!scores.is_empty(), "select_answer needs at least one score");
    let mut best = 0;
    for (index, &score) in scores.iter().enumerate().skip(1) {
        if score > scores[best] {
            best = index;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logprobs(values: &[f64]) -> TokenLogProbs {
        TokenLogProbs::new(values.iter().map(|&v| ("t".to_string(), v)).collect()).unwrap()
    }

    #[test]
    fn equal_probability_tokens() {
        // Two tokens each with probability 0.5.
        let half = 0.5f64.ln();
        let cond = logprobs(&[half, half]);
        let score = score_cloze_conditional(&cond).unwrap();
        assert!((score.raw - 2.0 * half).abs() < 1e-15);
        assert!((score.ln - half).abs() < 1e-15);
        // Geometric mean is 0.5.
        assert!((score.ln.exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn un_is_the_log_ratio() {
        // Conditional probability 0.2, unconditional 0.1 -> un = ln 2.
        let cond = logprobs(&[0.2f64.ln()]);
        let uncond = logprobs(&[0.1f64.ln()]);
        let score = score_cloze(&cond, &uncond).unwrap();
        assert!((score.un.unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn un_ignores_token_count_mismatch() {
        // Different tokenizations of the same completion: UN is defined on
        // span sums, not per-token alignment.
        let cond = logprobs(&[-0.5, -0.5, -0.5, -0.5]);
        let uncond = logprobs(&[-1.0, -2.0]);
        let score = score_cloze(&cond, &uncond).unwrap();
        assert!((score.un.unwrap() - (-2.0 + 3.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_conditional_is_an_error() {
        let empty = TokenLogProbs::new(vec![]).unwrap();
        let uncond = logprobs(&[-1.0]);
        assert!(matches!(
            score_cloze(&empty, &uncond),
            Err(ScoreError::EmptyConditional)
        ));
    }

    #[test]
    fn positive_or_non_finite_logprobs_rejected() {
        assert!(TokenLogProbs::new(vec![("t".into(), 0.1)]).is_err());
        assert!(TokenLogProbs::new(vec![("t".into(), f64::NAN)]).is_err());
        assert!(TokenLogProbs::new(vec![("t".into(), f64::NEG_INFINITY)]).is_err());
        assert!(TokenLogProbs::new(vec![("t".into(), 0.0)]).is_ok());
    }

    #[test]
    fn ln_matches_product_space_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let cond = logprobs(&probs.iter().map(|p| p.ln()).collect::<Vec<_>>());
            let score = score_cloze_conditional(&cond).unwrap();
            // Oracle: nth root of the probability product, in probability space.
            let product: f64 = probs.iter().product();
            let nth_root = product.powf(1.0 / n as f64);
            let rel = (score.ln.exp() - nth_root).abs() / nth_root;
            assert!(rel < 1e-12, "rel error {rel}");
        }
    }

    #[test]
    fn log_space_survives_extreme_magnitudes() {
        // 100 tokens at logprob -700 each: any probability-space intermediate
        // would underflow to zero, so finiteness here means the path stayed
        // in log space.
        let cond = logprobs(&vec![-700.0; 100]);
        let uncond = logprobs(&vec![-700.0; 80]);
        let score = score_cloze(&cond, &uncond).unwrap();
        assert!(score.raw.is_finite());
        assert!(score.ln.is_finite());
        assert!(score.un.unwrap().is_finite());
        assert!((score.ln - -700.0).abs() < 1e-9);
    }

    fn distribution(pairs: &[(char, f64)]) -> SymbolDistribution {
        SymbolDistribution::new(pairs.iter().cloned().collect())
    }

    #[test]
    fn identity_binding_keeps_option_order() {
        let dist = distribution(&[('A', -0.1), ('B', -2.0), ('C', -3.0), ('D', -4.0)]);
        let scores = score_mcp(&dist, &AnswerBinding::identity(4)).unwrap();
        assert_eq!(scores, vec![-0.1, -2.0, -3.0, -4.0]);
        assert_eq!(select_answer(&scores), 0);
    }

    #[test]
    fn reversed_binding_relabels_scores() {
        let dist = distribution(&[('A', -0.1), ('B', -2.0), ('C', -3.0), ('D', -4.0)]);
        let reversed = AnswerBinding::from_permutation(vec![3, 2, 1, 0]).unwrap();
        let scores = score_mcp(&dist, &reversed).unwrap();
        // Symbol A now labels option 3.
        assert_eq!(scores[3], -0.1);
        assert_eq!(select_answer(&scores), 3);
    }

    #[test]
    fn first_symbol_bias_follows_the_reordering() {
        // A model that always favors symbol A picks whichever option is
        // listed first: Pizza under the identity order, French beans once
        // the options are reordered.
        let options = ["Pizza", "Lollipops", "Candles", "French beans"];
        let dist = distribution(&[('A', -0.1), ('B', -2.0), ('C', -3.0), ('D', -4.0)]);
        let identity = AnswerBinding::identity(4);
        let chosen = select_answer(&score_mcp(&dist, &identity).unwrap());
        assert_eq!(options[chosen], "Pizza");
        let beans_first = AnswerBinding::from_permutation(vec![3, 1, 2, 0]).unwrap();
        let chosen = select_answer(&score_mcp(&dist, &beans_first).unwrap());
        assert_eq!(options[chosen], "French beans");
    }

    #[test]
    fn missing_symbol_is_identified() {
        let dist = distribution(&[('A', -0.1)]);
        let err = score_mcp(&dist, &AnswerBinding::identity(2)).unwrap_err();
        assert!(matches!(err, ScoreError::MissingSymbol('B')));
    }

    #[test]
    fn inverse_binding_reproduces_identity_scores() {
        let dist = distribution(&[('A', -0.3), ('B', -0.7), ('C', -1.5), ('D', -0.2)]);
        let identity_scores = score_mcp(&dist, &AnswerBinding::identity(4)).unwrap();
        let perm = vec![2, 0, 3, 1];
        let binding = AnswerBinding::from_permutation(perm.clone()).unwrap();
        let permuted_scores = score_mcp(&dist, &binding).unwrap();
        for (pos, &option_index) in perm.iter().enumerate() {
            assert_eq!(permuted_scores[option_index], identity_scores[pos]);
        }
    }

    #[test]
    fn ties_break_to_the_lowest_index() {
        assert_eq!(select_answer(&[-1.0, -0.5, -3.0]), 1);
        assert_eq!(select_answer(&[-1.0, -1.0]), 0);
        assert_eq!(select_answer(&[-2.0]), 0);
    }

    #[test]
    fn equal_token_counts_align_raw_and_ln() {
        // With a constant token count, LN = Raw / n preserves the argmax.
        let per_option = [
            vec![-1.0, -2.0, -0.5],
            vec![-0.2, -0.4, -0.9],
            vec![-3.0, -0.1, -0.1],
        ];
        let scores: Vec<ClozeScore> = per_option
            .iter()
            .map(|lps| score_cloze_conditional(&logprobs(lps)).unwrap())
            .collect();
        let raw: Vec<f64> = scores.iter().map(|s| s.raw).collect();
        let ln: Vec<f64> = scores.iter().map(|s| s.ln).collect();
        assert_eq!(select_answer(&raw), select_answer(&ln));
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_shift_and_monotone_transform(
            scores in proptest::collection::vec(-50.0f64..0.0, 1..8),
            shift in -10.0f64..10.0,
        ) {
            let base = select_answer(&scores);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert_eq!(select_answer(&shifted), base);
            // exp is strictly increasing; ties are broken identically because
            // equal inputs stay equal.
            let transformed: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert_eq!(select_answer(&transformed), base);
        }

        #[test]
        fn raw_is_sum_and_ln_is_mean(
            lps in proptest::collection::vec(-5.0f64..-1e-6, 1..60),
        ) {
            let cond = logprobs(&lps);
            let score = score_cloze_conditional(&cond).unwrap();
            let sum: f64 = lps.iter().sum();
            prop_assert!((score.raw - sum).abs() < 1e-9);
            prop_assert!((score.ln - sum / lps.len() as f64).abs() < 1e-9);
        }
    }
}
