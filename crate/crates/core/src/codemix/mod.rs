//! Matrix-language-frame code-mixing.
//!
//! An aligner learns where each English word lands in the foreign (matrix)
//! sentence. Tagged English segments whose foreign counterpart is a clean
//! contiguous span are then substituted into the matrix sentence, named
//! entities first, then noun phrases, then adjectives.

mod aligner;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use aligner::{train_aligner, AlignerConfig, Alignment, AlignmentModel};

use crate::corpus::{Origin, Tag};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelPair {
    pub lang: String,
    pub en_tokens: Vec<String>,
    pub en_tags: Vec<Tag>,
    pub xx_tokens: Vec<String>,
    /// Known English index per foreign token, for oracle corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<Option<usize>>>,
}

impl ParallelPair {
    pub fn validate(&self) -> Result<()> {
        if self.en_tokens.is_empty() || self.xx_tokens.is_empty() {
            return Err(Error::Data("parallel pair has an empty side".into()));
        }
        if self.en_tags.len() != self.en_tokens.len() {
            return Err(Error::Data(format!(
                "{} tags for {} English tokens",
                self.en_tags.len(),
                self.en_tokens.len()
            )));
        }
        if let Some(g) = &self.gold {
            if g.len() != self.xx_tokens.len()
                || g.iter().flatten().any(|&i| i >= self.en_tokens.len())
            {
                return Err(Error::Data("gold alignment does not fit the pair".into()));
            }
        }
        Ok(())
    }
}

/// An English segment and the foreign span it can replace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub en_span: Range<usize>,
    pub xx_span: Range<usize>,
    pub tag: Tag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeMixResult {
    pub tokens: Vec<String>,
    pub origin: Vec<Origin>,
    pub applied: Vec<Candidate>,
}

/// Maximal runs of one non-`O` tag.
fn segments(tags: &[Tag]) -> Vec<(Range<usize>, Tag)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let tag = tags[i];
        let mut end = i + 1;
        while end < tags.len() && tags[end] == tag {
            end += 1;
        }
        if tag.tier().is_some() {
            out.push((i..end, tag));
        }
        i = end;
    }
    out
}

/// Substitutable segments in priority order (tier, then left to right).
///
/// A segment qualifies when the foreign tokens aligned to it form a nonempty
/// span and every token of that span aligns inside the segment.
pub fn extract_substitutable_spans(pair: &ParallelPair, alignment: &Alignment) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (seg, tag) in segments(&pair.en_tags) {
        let inside = |l: &Option<usize>| l.is_some_and(|i| seg.contains(&i));
        let Some(lo) = alignment.links.iter().position(inside) else {
            continue;
        };
        let hi = alignment.links.iter().rposition(inside).expect("lo exists");
        if alignment.links[lo..=hi].iter().all(inside) {
            out.push(Candidate {
                en_span: seg,
                xx_span: lo..hi + 1,
                tag,
            });
        }
    }
    out.sort_by_key(|c| (c.tag.tier(), c.en_span.start));
    out
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Replaces foreign spans with their English segments. Candidates are taken
/// in priority order; one that overlaps an applied span is skipped.
pub fn generate_codemixed(pair: &ParallelPair, candidates: &[Candidate]) -> CodeMixResult {
    let mut ordered: Vec<&Candidate> = candidates.iter().collect();
    ordered.sort_by_key(|c| (c.tag.tier(), c.en_span.start));
    let mut applied: Vec<Candidate> = Vec::new();
    for c in ordered {
        let fits = c.xx_span.end <= pair.xx_tokens.len() && c.en_span.end <= pair.en_tokens.len();
        if fits && !applied.iter().any(|a| overlaps(&a.xx_span, &c.xx_span)) {
            applied.push(c.clone());
        }
    }
    let mut tokens = Vec::with_capacity(pair.xx_tokens.len());
    let mut origin = Vec::with_capacity(pair.xx_tokens.len());
    let mut j = 0;
    while j < pair.xx_tokens.len() {
        match applied.iter().find(|a| a.xx_span.start == j) {
            Some(a) => {
                for t in &pair.en_tokens[a.en_span.clone()] {
                    tokens.push(t.clone());
                    origin.push(Origin::Embedded);
                }
                j = a.xx_span.end;
            }
            None => {
                tokens.push(pair.xx_tokens[j].clone());
                origin.push(Origin::Matrix);
                j += 1;
            }
        }
    }
    CodeMixResult {
        tokens,
        origin,
        applied,
    }
}

/// True when dropping embedded tokens leaves a subsequence of `matrix`.
pub fn satisfies_mlf(result: &CodeMixResult, matrix: &[String]) -> bool {
    let mut it = matrix.iter();
    result
        .tokens
        .iter()
        .zip(&result.origin)
        .filter(|(_, o)| **o == Origin::Matrix)
        .all(|(t, _)| it.any(|m| m == t))
}

/// Fraction of foreign tokens whose decoded link matches the gold link.
pub fn alignment_accuracy(model: &AlignmentModel, pairs: &[ParallelPair]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in pairs {
        let gold = p
            .gold
            .as_ref()
            .ok_or_else(|| Error::Data("alignment accuracy needs gold alignments".into()))?;
        let a = model.decode(p);
        hit += a.links.iter().zip(gold).filter(|(x, y)| x == y).count();
        total += gold.len();
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

/// Aligns every pair, extracts spans and generates one code-mixed sentence
/// per pair.
pub fn codemix_corpus(
    pairs: &[ParallelPair],
    cfg: &AlignerConfig,
) -> Result<(AlignmentModel, Vec<CodeMixResult>)> {
    for p in pairs {
        p.validate()?;
    }
    let model = train_aligner(pairs, cfg)?;
    let out = pairs
        .iter()
        .map(|p| {
            let a = model.decode(p);
            generate_codemixed(p, &extract_substitutable_spans(p, &a))
        })
        .collect();
    Ok((model, out))
}
