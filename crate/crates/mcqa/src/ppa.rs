//! Proportion of Plurality Agreement: how often a model picks the same
//! answer when the options are presented in different orders.
//!
//! A question with n options has n! symbol orderings. Each ordering is
//! rendered as its own multiple-choice prompt; the per-question PPA is the
//! share of orderings that selected the plurality answer, and the dataset
//! PPA is the unweighted mean over questions. The random baseline is 1/n;
//! under full enumeration PPA can never fall below it.

use std::collections::{BTreeMap, HashSet};

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ModelBackend;
use crate::dataset::Dataset;
use crate::dataset::Question;
use crate::prompt::AnswerBinding;
use crate::protocol::{McpProtocol, ProtocolError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum PpaError {
    #[error("option count {0} outside the supported range 2..=26")]
    BadOptionCount(usize),
    #[error("permutation cap must be at least 1")]
    BadCap,
    #[error("no orderings supplied")]
    NoOrderings,
    #[error("question {id:?}, ordering {ordering_index}: {source}")]
    Backend {
        id: String,
        ordering_index: usize,
        #[source]
        source: ProtocolError,
    },
    #[error("dataset {0:?} has no questions to measure")]
    EmptyDataset(String),
    #[error("every question failed and was skipped")]
    AllSkipped,
}

/// Checked factorial, `None` when n! exceeds `cap` (or overflows).
fn factorial_at_most(n: usize, cap: usize) -> Option<usize> {
    let mut factorial: usize = 1;
    for i in 2..=n {
        factorial = factorial.checked_mul(i)?;
        if factorial > cap {
            return None;
        }
    }
    Some(factorial)
}

/// All n! orderings in lexicographic order when n! fits under `cap`;
/// otherwise `cap` distinct orderings sampled uniformly without replacement,
/// deterministic in `seed`.
pub fn orderings_for(n: usize, cap: usize, seed: u64) -> Result<Vec<AnswerBinding>, PpaError> {
    if !(2..=26).contains(&n) {
        return Err(PpaError::BadOptionCount(n));
    }
    if cap == 0 {
        return Err(PpaError::BadCap);
    }
    if factorial_at_most(n, cap).is_some() {
        return Ok((0..n)
            .permutations(n)
            .map(|p| AnswerBinding::from_permutation(p).expect("generated permutation is valid"))
            .collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(cap);
    let mut orderings = Vec::with_capacity(cap);
    while orderings.len() < cap {
        let mut permutation: Vec<usize> = (0..n).collect();
        permutation.shuffle(&mut rng);
        if seen.insert(permutation.clone()) {
            orderings.push(
                AnswerBinding::from_permutation(permutation)
                    .expect("shuffled permutation is valid"),
            );
        }
    }
    Ok(orderings)
}

/// Per-question agreement entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionPpa {
    pub n_options: usize,
    pub orderings_used: usize,
    /// Multiplicity of the most frequently selected option. Plurality ties
    /// do not matter: the proportion is count-based.
    pub plurality_count: usize,
    pub ppa: f64,
    /// Whether every one of the n! orderings was presented.
    pub full_enumeration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpaResult {
    pub per_question: BTreeMap<String, QuestionPpa>,
    /// Unweighted mean of per-question PPA.
    pub dataset_ppa: f64,
    pub cap: usize,
    pub seed: u64,
    /// Questions skipped on error, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Presents one question under every supplied ordering and counts how often
/// the plurality answer is chosen. Backend failures carry the ordering index.
pub fn ppa_for_question(
    question: &Question,
    backend: &dyn ModelBackend,
    protocol: &McpProtocol,
    orderings: &[AnswerBinding],
) -> Result<QuestionPpa, PpaError> {
    if orderings.is_empty() {
        return Err(PpaError::NoOrderings);
    }
    let n = question.num_options();
    let mut counts = vec![0usize; n];
    for (ordering_index, binding) in orderings.iter().enumerate() {
        let outcome = protocol
            .choose(backend, question, binding)
            .map_err(|source| PpaError::Backend {
                id: question.id.clone(),
                ordering_index,
                source,
            })?;
        counts[outcome.chosen] += 1;
    }
    let plurality_count = counts.iter().copied().max().unwrap_or(0);
    let full_enumeration = factorial_at_most(n, orderings.len())
        .map(|f| f == orderings.len())
        .unwrap_or(false);
    if full_enumeration {
        // Pigeonhole: the plurality of n! draws over n bins is at least n!/n.
        assert!(
            plurality_count * n >= orderings.len(),
            "plurality {plurality_count} below n!/n for question {:?}",
            question.id
        );
    }
    Ok(QuestionPpa {
        n_options: n,
        orderings_used: orderings.len(),
        plurality_count,
        ppa: plurality_count as f64 / orderings.len() as f64,
        full_enumeration,
    })
}

/// Measures PPA over a whole dataset. Per-question orderings derive from
/// `(seed, "orderings", question id)`, so results are stable as questions
/// are added or removed. With `skip_errors`, failing questions are recorded
/// and excluded from the mean instead of aborting.
pub fn ppa_for_dataset(
    dataset: &Dataset,
    backend: &dyn ModelBackend,
    protocol: &McpProtocol,
    cap: usize,
    seed: u64,
    skip_errors: bool,
) -> Result<PpaResult, PpaError> {
    if dataset.is_empty() {
        return Err(PpaError::EmptyDataset(dataset.name.clone()));
    }
    let outcomes: Vec<(String, Result<QuestionPpa, PpaError>)> = dataset
        .questions
        .par_iter()
        .map(|question| {
            let result = orderings_for(
                question.num_options(),
                cap,
                derive_seed(seed, "orderings", &question.id),
            )
            .and_then(|orderings| ppa_for_question(question, backend, protocol, &orderings));
            (question.id.clone(), result)
        })
        .collect();

    let mut per_question = BTreeMap::new();
    let mut skipped = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(entry) => {
                per_question.insert(id, entry);
            }
            Err(e) if skip_errors => skipped.push((id, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if per_question.is_empty() {
        return Err(PpaError::AllSkipped);
    }
    let dataset_ppa =
        per_question.values().map(|q| q.ppa).sum::<f64>() / per_question.len() as f64;
    skipped.sort();
    Ok(PpaResult {
        per_question,
        dataset_ppa,
        cap,
        seed,
        skipped,
    })
}

/// Tab-separated agreement table: one row per question plus a dataset
/// summary row.
pub fn render_ppa_table(result: &PpaResult) -> String {
    let mut out = String::from("id\tn\torderings_used\tplurality_count\tppa\n");
    for (id, entry) in &result.per_question {
        out.push_str(&format!(
            "{id}\t{}\t{}\t{}\t{:.6}\n",
            entry.n_options, entry.orderings_used, entry.plurality_count, entry.ppa
        ));
    }
    out.push_str(&format!(
        "ALL\t-\t-\t-\t{:.6}\n",
        result.dataset_ppa
    ));
    for (id, reason) in &result.skipped {
        out.push_str(&format!("# skipped {id}: {reason}\n"));
    }
    out
}
