//! Word error rate, relative reduction and corpus evaluation.
//!
//! Error rates are computed on token ids: one synthetic token stands for
//! one word.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{transcript_ids, Utterance};
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Edit {
    Match,
    Sub,
    Ins,
    Del,
}

/// Levenshtein alignment with unit costs. Returns the edit script from the
/// start; ties prefer match/substitution, then deletion, then insertion.
fn align(hyp: &[usize], reference: &[usize]) -> Vec<Edit> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            ops.push(if reference[i - 1] == hyp[j - 1] { Edit::Match } else { Edit::Sub });
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(Edit::Del);
            i -= 1;
        } else {
            ops.push(Edit::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Substitutions + insertions + deletions.
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> usize {
    align(hyp, reference).iter().filter(|&&e| e != Edit::Match).count()
}

pub fn wer(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("wer", "empty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// `100 · (baseline − candidate) / baseline`.
pub fn rwerr(baseline: f64, candidate: f64) -> Result<f64> {
    if baseline <= 0.0 || !baseline.is_finite() {
        return Err(Error::invalid("rwerr", format!("baseline error rate must be positive, got {baseline}")));
    }
    Ok(100.0 * (baseline - candidate) / baseline)
}

/// Error and reference-token counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub errors: usize,
    pub tokens: usize,
}

impl Counts {
    pub fn rate(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.errors as f64 / self.tokens as f64
        }
    }

    fn add(&mut self, o: Counts) {
        self.errors += o.errors;
        self.tokens += o.tokens;
    }
}

/// Per-utterance scoring. Ambiguous reference tokens count as wrong when
/// aligned to a substitution or deletion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub hypothesis: Vec<usize>,
    pub reference: Vec<usize>,
    pub has_context: bool,
    pub all: Counts,
    pub ambiguous: Counts,
}

pub fn score(
    id: &str,
    hyp: Vec<usize>,
    reference: Vec<usize>,
    has_context: bool,
    is_ambiguous: impl Fn(usize) -> bool,
) -> Scored {
    let ops = align(&hyp, &reference);
    let mut amb = Counts::default();
    let mut r = 0;
    for op in &ops {
        match op {
            Edit::Ins => {}
            e => {
                if is_ambiguous(reference[r]) {
                    amb.tokens += 1;
                    amb.errors += usize::from(*e != Edit::Match);
                }
                r += 1;
            }
        }
    }
    Scored {
        id: id.to_string(),
        all: Counts {
            errors: ops.iter().filter(|&&e| e != Edit::Match).count(),
            tokens: reference.len(),
        },
        ambiguous: amb,
        hypothesis: hyp,
        reference,
        has_context,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    AsLabeled,
    ForceEmpty,
}

/// Corpus-level counts. `with_context`/`without_context` partition the
/// utterances by whether the corpus labels them with context, independent
/// of the evaluation mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub utterances_with_context: usize,
    pub all: Counts,
    pub with_context: Counts,
    pub without_context: Counts,
    pub ambiguous: Counts,
    pub ambiguous_with_context: Counts,
}

impl EvalReport {
    pub fn from_scored(scored: &[Scored]) -> Self {
        let mut r = EvalReport::default();
        for s in scored {
            r.utterances += 1;
            r.all.add(s.all);
            r.ambiguous.add(s.ambiguous);
            if s.has_context {
                r.utterances_with_context += 1;
                r.with_context.add(s.all);
                r.ambiguous_with_context.add(s.ambiguous);
            } else {
                r.without_context.add(s.all);
            }
        }
        r
    }

    pub fn wer_all(&self) -> f64 {
        self.all.rate()
    }

    pub fn wer_with_context(&self) -> f64 {
        self.with_context.rate()
    }

    pub fn wer_without_context(&self) -> f64 {
        self.without_context.rate()
    }

    pub fn wer_ambiguous(&self) -> f64 {
        self.ambiguous.rate()
    }
}

/// Token ids of an utterance's context under `mode`.
pub fn context_ids(vocab: &Vocabulary, utt: &Utterance, mode: ContextMode) -> Vec<usize> {
    match mode {
        ContextMode::ForceEmpty => Vec::new(),
        ContextMode::AsLabeled => vocab.tokenize(&utt.context_text),
    }
}

/// Greedy-decodes every utterance (in parallel, results in input order).
pub fn decode_all(
    model: &Model,
    utts: &[Utterance],
    vocab: &Vocabulary,
    mode: ContextMode,
    is_ambiguous: &(dyn Fn(usize) -> bool + Sync),
) -> Result<Vec<Scored>> {
    utts.par_iter()
        .map(|u| {
            let ctx = context_ids(vocab, u, mode);
            let hyp = model.decode(&u.features, &ctx)?;
            let reference = transcript_ids(vocab, &u.transcript);
            Ok(score(&u.id, hyp, reference, !u.context_text.is_empty(), is_ambiguous))
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    utts: &[Utterance],
    vocab: &Vocabulary,
    mode: ContextMode,
    is_ambiguous: &(dyn Fn(usize) -> bool + Sync),
) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::invalid("evaluate", "empty corpus"));
    }
    Ok(EvalReport::from_scored(&decode_all(model, utts, vocab, mode, is_ambiguous)?))
}
