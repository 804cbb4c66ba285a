use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParallelPair;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignerConfig {
    pub iterations: usize,
    /// Diagonal tension.
    pub lambda: f64,
    /// Probability of aligning to NULL.
    pub p0: f64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            iterations: 5,
            lambda: 4.0,
            p0: 0.08,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(
                "aligner: iterations must be at least 1".into(),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config("aligner: lambda must be positive".into()));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(Error::Config("aligner: p0 must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Source index 0 is NULL.
const NULL: usize = 0;

/// Lexical table `t(xx | en)` plus the distortion parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    pub config: AlignerConfig,
    /// Source words; index 0 is NULL.
    en_vocab: Vec<String>,
    en_ids: BTreeMap<String, usize>,
    xx_vocab: Vec<String>,
    xx_ids: BTreeMap<String, usize>,
    /// Per source id, `xx id -> t(xx | en)`.
    table: Vec<BTreeMap<usize, f64>>,
    /// Corpus log-likelihood before each M-step, then once after the last.
    pub log_likelihood: Vec<f64>,
}

/// Alignment of each foreign token to an English index or NULL.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub links: Vec<Option<usize>>,
    /// Foreign tokens absent from the training vocabulary.
    pub oov: usize,
}

fn lower(t: &str) -> String {
    t.to_lowercase()
}

/// Unnormalised diagonal weights `exp(-λ|i/m - j/n|)` for `i = 1..=m`, and
/// their sum.
fn diagonal(j: usize, m: usize, n: usize, lambda: f64) -> (Vec<f64>, f64) {
    let jj = j as f64 / n as f64;
    let w: Vec<f64> = (1..=m)
        .map(|i| (-lambda * (i as f64 / m as f64 - jj).abs()).exp())
        .collect();
    let z = w.iter().sum();
    (w, z)
}

struct Encoded {
    en: Vec<usize>,
    xx: Vec<usize>,
}

impl AlignmentModel {
    pub fn t(&self, xx: &str, en: Option<&str>) -> f64 {
        let src = match en {
            None => Some(NULL),
            Some(e) => self.en_ids.get(&lower(e)).copied(),
        };
        match (src, self.xx_ids.get(&lower(xx))) {
            (Some(s), Some(x)) => self.table[s].get(x).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// Largest deviation of any `Σ_xx t(xx|en)` from 1.
    pub fn normalization_error(&self) -> f64 {
        self.table
            .iter()
            .map(|row| (row.values().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `δ(i, j)` for a sentence pair of lengths `m` (English) and `n`; `i` is
    /// 1-based with 0 meaning NULL, `j` is 1-based.
    pub fn distortion(&self, i: usize, j: usize, m: usize, n: usize) -> f64 {
        if i == NULL {
            return self.config.p0;
        }
        let (w, z) = diagonal(j, m, n, self.config.lambda);
        (1.0 - self.config.p0) * w[i - 1] / z
    }

    fn encode_pairs(&mut self, pairs: &[ParallelPair]) -> Vec<Encoded> {
        for p in pairs {
            for e in &p.en_tokens {
                let e = lower(e);
                if !self.en_ids.contains_key(&e) {
                    self.en_ids.insert(e.clone(), self.en_vocab.len());
                    self.en_vocab.push(e);
                }
            }
            for x in &p.xx_tokens {
                let x = lower(x);
                if !self.xx_ids.contains_key(&x) {
                    self.xx_ids.insert(x.clone(), self.xx_vocab.len());
                    self.xx_vocab.push(x);
                }
            }
        }
        pairs
            .iter()
            .map(|p| Encoded {
                en: p.en_tokens.iter().map(|e| self.en_ids[&lower(e)]).collect(),
                xx: p.xx_tokens.iter().map(|x| self.xx_ids[&lower(x)]).collect(),
            })
            .collect()
    }

    /// E-step over the corpus: expected counts and log-likelihood.
    fn expect(&self, corpus: &[Encoded]) -> (Vec<BTreeMap<usize, f64>>, f64) {
        let mut counts: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); self.table.len()];
        let mut ll = 0.0;
        let mut post = Vec::new();
        for pair in corpus {
            let (m, n) = (pair.en.len(), pair.xx.len());
            for (j0, &x) in pair.xx.iter().enumerate() {
                let (w, z) = diagonal(j0 + 1, m, n, self.config.lambda);
                post.clear();
                post.push(self.config.p0 * self.table[NULL].get(&x).copied().unwrap_or(0.0));
                for (i0, &e) in pair.en.iter().enumerate() {
                    let d = (1.0 - self.config.p0) * w[i0] / z;
                    post.push(d * self.table[e].get(&x).copied().unwrap_or(0.0));
                }
                let total: f64 = post.iter().sum();
                if total <= 0.0 {
                    continue;
                }
                ll += total.ln();
                *counts[NULL].entry(x).or_insert(0.0) += post[0] / total;
                for (i0, &e) in pair.en.iter().enumerate() {
                    *counts[e].entry(x).or_insert(0.0) += post[i0 + 1] / total;
                }
            }
        }
        (counts, ll)
    }

    /// Best source for each foreign token: NULL is considered first and ties
    /// keep the earlier candidate.
    pub fn decode(&self, pair: &ParallelPair) -> Alignment {
        let (m, n) = (pair.en_tokens.len(), pair.xx_tokens.len());
        let en: Vec<Option<usize>> = pair
            .en_tokens
            .iter()
            .map(|e| self.en_ids.get(&lower(e)).copied())
            .collect();
        let mut out = Alignment {
            links: Vec::with_capacity(n),
            oov: 0,
        };
        for (j0, x) in pair.xx_tokens.iter().enumerate() {
            let Some(&x) = self.xx_ids.get(&lower(x)) else {
                out.links.push(None);
                out.oov += 1;
                continue;
            };
            let (w, z) = diagonal(j0 + 1, m, n, self.config.lambda);
            let mut best = (
                self.config.p0 * self.table[NULL].get(&x).copied().unwrap_or(0.0),
                None,
            );
            for (i0, e) in en.iter().enumerate() {
                let t = e
                    .and_then(|e| self.table[e].get(&x).copied())
                    .unwrap_or(0.0);
                let score = (1.0 - self.config.p0) * w[i0] / z * t;
                if score > best.0 {
                    best = (score, Some(i0));
                }
            }
            out.links.push(best.1);
        }
        out
    }
}

/// EM training of the lexical table with a fixed diagonal prior.
pub fn train_aligner(pairs: &[ParallelPair], cfg: &AlignerConfig) -> Result<AlignmentModel> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data(
            "cannot train an aligner on an empty corpus".into(),
        ));
    }
    for (n, p) in pairs.iter().enumerate() {
        if p.en_tokens.is_empty() || p.xx_tokens.is_empty() {
            return Err(Error::Data(format!("parallel pair {n} has an empty side")));
        }
    }
    let mut model = AlignmentModel {
        config: *cfg,
        en_vocab: vec![String::new()],
        en_ids: BTreeMap::new(),
        xx_vocab: Vec::new(),
        xx_ids: BTreeMap::new(),
        table: Vec::new(),
        log_likelihood: Vec::with_capacity(cfg.iterations + 1),
    };
    let corpus = model.encode_pairs(pairs);

    // Uniform over co-occurring foreign words; NULL co-occurs with all.
    let mut cooc: Vec<std::collections::BTreeSet<usize>> =
        vec![Default::default(); model.en_vocab.len()];
    for pair in &corpus {
        for &e in pair.en.iter().chain(std::iter::once(&NULL)) {
            cooc[e].extend(pair.xx.iter().copied());
        }
    }
    model.table = cooc
        .into_iter()
        .map(|set| {
            let u = 1.0 / set.len().max(1) as f64;
            set.into_iter().map(|x| (x, u)).collect()
        })
        .collect();

    for _ in 0..cfg.iterations {
        let (counts, ll) = model.expect(&corpus);
        model.log_likelihood.push(ll);
        for (row, c) in model.table.iter_mut().zip(counts) {
            let total: f64 = c.values().sum();
            if total > 0.0 {
                *row = c.into_iter().map(|(x, v)| (x, v / total)).collect();
            }
        }
    }
    let (_, ll) = model.expect(&corpus);
    model.log_likelihood.push(ll);
    Ok(model)
}
