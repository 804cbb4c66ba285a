//! Code-mixing complexity, text similarity, VQA accuracy and cross-language
//! representation alignment.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Origin;
use crate::error::{Error, Result};

/// Tokens with a language label each; neutral tokens (digits, punctuation)
/// belong to no language.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub langs: Vec<String>,
    pub neutral: Vec<bool>,
}

/// Digits and punctuation carry no language.
pub fn is_language_independent(token: &str) -> bool {
    !token.is_empty()
        && token
            .chars()
            .all(|c| c.is_ascii_digit() || c.is_ascii_punctuation())
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, langs: Vec<String>) -> Result<Self> {
        if tokens.len() != langs.len() {
            return Err(Error::Data(format!(
                "{} labels for {} tokens",
                langs.len(),
                tokens.len()
            )));
        }
        let neutral = tokens.iter().map(|t| is_language_independent(t)).collect();
        Ok(LabeledSentence {
            tokens,
            langs,
            neutral,
        })
    }

    /// Labels from code-mixer origins: `matrix` or `embedded`.
    pub fn from_origin(tokens: &[String], origin: &[Origin]) -> Result<Self> {
        let langs = origin
            .iter()
            .map(|o| match o {
                Origin::Matrix => "matrix".to_string(),
                Origin::Embedded => "embedded".to_string(),
            })
            .collect();
        Self::new(tokens.to_vec(), langs)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    /// Code-mixing index, percent.
    pub cmi: f64,
    /// Switch-point fraction, percent.
    pub spf: f64,
}

/// `CMI = 100·(1 − max_w/(n−u))` and `SPF = 100·switches/(n−1)`.
pub fn codemix_complexity(s: &LabeledSentence) -> Result<Complexity> {
    let n = s.tokens.len();
    if n == 0 {
        return Err(Error::Data(
            "code-mixing complexity of an empty sentence".into(),
        ));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut labeled = Vec::with_capacity(n);
    for (l, &neutral) in s.langs.iter().zip(&s.neutral) {
        if !neutral {
            *counts.entry(l.as_str()).or_insert(0) += 1;
            labeled.push(l.as_str());
        }
    }
    let u = n - labeled.len();
    let cmi = match counts.values().max() {
        Some(&max_w) if n > u => 100.0 * (1.0 - max_w as f64 / (n - u) as f64),
        _ => 0.0,
    };
    let switches = labeled.windows(2).filter(|w| w[0] != w[1]).count();
    let spf = if n == 1 {
        0.0
    } else {
        100.0 * switches as f64 / (n - 1) as f64
    };
    Ok(Complexity { cmi, spf })
}

/// Unweighted mean over sentences.
pub fn corpus_complexity(sentences: &[LabeledSentence]) -> Result<Complexity> {
    if sentences.is_empty() {
        return Ok(Complexity::default());
    }
    let mut acc = Complexity::default();
    for s in sentences {
        let c = codemix_complexity(s)?;
        acc.cmi += c.cmi;
        acc.spf += c.spf;
    }
    let n = sentences.len() as f64;
    Ok(Complexity {
        cmi: acc.cmi / n,
        spf: acc.spf / n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub bleu: f64,
    pub rouge_l: f64,
    pub ter: f64,
}

const BLEU_SMOOTH: f64 = 1e-9;
const BLEU_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over `(candidate, reference)` pairs, percent.
pub fn corpus_bleu(pairs: &[(&[String], &[String])]) -> f64 {
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in pairs {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=BLEU_ORDER {
            let rc = ngram_counts(reference, n);
            for (g, &c) in &ngram_counts(cand, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..BLEU_ORDER)
        .map(|i| ((matches[i] as f64 + BLEU_SMOOTH) / (totals[i] as f64 + BLEU_SMOOTH)).ln())
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level Levenshtein distance.
pub fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// BLEU-4, ROUGE-L F1 and shift-free TER, all in percent.
pub fn text_similarity(candidate: &[String], reference: &[String]) -> Result<Similarity> {
    if reference.is_empty() {
        return Err(Error::Data(
            "text similarity needs a nonempty reference".into(),
        ));
    }
    let bleu = corpus_bleu(&[(candidate, reference)]);
    let l = lcs(candidate, reference) as f64;
    let rouge_l = if l == 0.0 {
        0.0
    } else {
        let p = l / candidate.len() as f64;
        let r = l / reference.len() as f64;
        100.0 * 2.0 * p * r / (p + r)
    };
    let ter = 100.0 * edit_distance(candidate, reference) as f64 / reference.len() as f64;
    Ok(Similarity { bleu, rouge_l, ter })
}

/// Gold answer in single-label or multi-annotator form.
#[derive(Clone, Debug, PartialEq)]
pub enum Gold {
    Single(String),
    Annotators(Vec<String>),
}

/// `min(#matching annotators / 3, 1)`, or exact match for a single gold.
pub fn vqa_accuracy(predicted: &str, gold: &Gold) -> f64 {
    match gold {
        Gold::Single(a) => f64::from(u8::from(a == predicted)),
        Gold::Annotators(v) => {
            let n = v.iter().filter(|a| *a == predicted).count();
            (n as f64 / 3.0).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    /// Mean over groups of the mean pairwise cosine.
    pub score: f64,
    pub groups: usize,
    /// Groups with fewer than two members.
    pub skipped: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Per question, the mean cosine over all unordered pairs of its vectors;
/// then the mean over questions.
pub fn repr_alignment_score(groups: &BTreeMap<String, Vec<Vec<f64>>>) -> AlignmentScore {
    let mut out = AlignmentScore::default();
    let mut total = 0.0;
    for vecs in groups.values() {
        if vecs.len() < 2 {
            out.skipped += 1;
            continue;
        }
        let mut s = 0.0;
        let mut pairs = 0usize;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                s += cosine(&vecs[i], &vecs[j]);
                pairs += 1;
            }
        }
        total += s / pairs as f64;
        out.groups += 1;
    }
    if out.skipped > 0 {
        log::warn!(
            "representation alignment skipped {} single-member groups",
            out.skipped
        );
    }
    if out.groups > 0 {
        out.score = total / out.groups as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn labeled(labels: &str) -> LabeledSentence {
        let langs = toks(labels);
        let tokens = (0..langs.len()).map(|i| format!("w{i}x")).collect();
        LabeledSentence::new(tokens, langs).unwrap()
    }

    #[test]
    fn complexity_examples() {
        let c = codemix_complexity(&labeled("M M E E M")).unwrap();
        assert!((c.cmi - 40.0).abs() < 1e-4 && (c.spf - 50.0).abs() < 1e-4);
        let c = codemix_complexity(&labeled("M M M")).unwrap();
        assert_eq!((c.cmi, c.spf), (0.0, 0.0));
        let c = codemix_complexity(&labeled("M E")).unwrap();
        assert!((c.cmi - 50.0).abs() < 1e-4 && (c.spf - 100.0).abs() < 1e-4);
        let one = codemix_complexity(&labeled("E")).unwrap();
        assert_eq!((one.cmi, one.spf), (0.0, 0.0));
        assert!(codemix_complexity(&labeled("")).is_err());
    }

    #[test]
    fn neutral_tokens_are_excluded() {
        let s = LabeledSentence::new(toks("a 3 b ?"), toks("M M E E")).unwrap();
        assert_eq!(s.neutral, vec![false, true, false, true]);
        let c = codemix_complexity(&s).unwrap();
        assert!((c.cmi - 50.0).abs() < 1e-12);
        assert!((c.spf - 100.0 / 3.0).abs() < 1e-12);
        let all_neutral = LabeledSentence::new(toks("1 2"), toks("M E")).unwrap();
        assert_eq!(codemix_complexity(&all_neutral).unwrap().cmi, 0.0);
    }

    #[test]
    fn corpus_complexity_is_a_macro_mean() {
        let c = corpus_complexity(&[labeled("M E"), labeled("M M")]).unwrap();
        assert!((c.cmi - 25.0).abs() < 1e-12 && (c.spf - 50.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let r = toks("a b c d");
        let same = text_similarity(&r, &r).unwrap();
        assert_eq!((same.bleu, same.rouge_l, same.ter), (100.0, 100.0, 0.0));
        let s = text_similarity(&toks("a b d"), &r).unwrap();
        assert!((s.ter - 25.0).abs() < 1e-4);
        assert!((s.rouge_l - 600.0 / 7.0).abs() < 1e-4);
        assert!(s.bleu < 100.0);
        assert!(text_similarity(&r, &[]).is_err());
        assert_eq!(text_similarity(&[], &r).unwrap().bleu, 0.0);
    }

    #[test]
    fn bleu_matches_a_hand_computation() {
        // cand "a b c e", ref "a b c d": p1=3/4, p2=2/3, p3=1/2, p4=0 (smoothed)
        let b = corpus_bleu(&[(&toks("a b c e"), &toks("a b c d"))]);
        let p4 = 1e-9 / (1.0 + 1e-9);
        let exact = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * p4).powf(0.25);
        assert!((b - exact).abs() < 1e-9);
    }

    #[test]
    fn vqa_accuracy_examples() {
        let ten = |k: usize| {
            Gold::Annotators(
                (0..10)
                    .map(|i| if i < k { "cat" } else { "dog" }.to_string())
                    .collect(),
            )
        };
        assert_eq!(vqa_accuracy("cat", &ten(10)), 1.0);
        assert!((vqa_accuracy("cat", &ten(2)) - 2.0 / 3.0).abs() < 1e-4);
        assert_eq!(vqa_accuracy("cat", &ten(0)), 0.0);
        assert_eq!(vqa_accuracy("red", &Gold::Single("red".into())), 1.0);
        assert_eq!(vqa_accuracy("red", &Gold::Single("blue".into())), 0.0);
    }

    #[test]
    fn alignment_examples() {
        let mut g = BTreeMap::new();
        g.insert(
            "q1".to_string(),
            vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![2.0, 4.0]],
        );
        assert!((repr_alignment_score(&g).score - 1.0).abs() < 1e-12);
        g.clear();
        g.insert("q1".to_string(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(repr_alignment_score(&g).score, 0.0);
        g.clear();
        // cos(a,b)=1, cos(a,c)=0, cos(b,c)=0
        g.insert(
            "q1".to_string(),
            vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 1.0]],
        );
        g.insert("q2".to_string(), vec![vec![1.0, 1.0]]);
        let s = repr_alignment_score(&g);
        assert!((s.score - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!((s.groups, s.skipped), (1, 1));
    }
}
