use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_batch, AnswerType, Dataset, QAItem, Scene, Split, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{repr_alignment_score, vqa_accuracy, AlignmentScore, Gold};
use crate::model::{forward_frozen, ModelConfig, ModelParams};

/// One item's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub item_id: String,
    pub lang: String,
    pub answer_type: AnswerType,
    /// Argmax answer index; ties go to the lowest index.
    pub answer: usize,
    pub accuracy: f64,
    /// `[CLS]` output of the question encoder.
    pub question_cls: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

fn predict_chunk(
    model: &ModelConfig,
    params: &ModelParams,
    items: &[&QAItem],
    scenes: &BTreeMap<&str, &Scene>,
    vocab: &Vocab,
) -> Result<Vec<Prediction>> {
    let b = encode_batch(items, scenes, vocab, model.max_len)?;
    let tv = forward_frozen(model, params, &b.questions, &b.scenes)?;
    let a = model.answer_count;
    let d = model.hidden;
    Ok(items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let answer = argmax(&tv.answer_probs.data()[i * a..(i + 1) * a]);
            Prediction {
                item_id: it.id.clone(),
                lang: it.lang.clone(),
                answer_type: it.answer_type,
                answer,
                accuracy: vqa_accuracy(vocab.answer(answer), &Gold::Single(it.answer.clone())),
                question_cls: tv.question_cls.data()[i * d..(i + 1) * d].to_vec(),
            }
        })
        .collect())
}

/// Predictions for `items` in input order. Batches are split across up to
/// `threads` workers, each with a read-only view of `params`.
pub fn predict(
    model: &ModelConfig,
    params: &ModelParams,
    items: &[&QAItem],
    scenes: &BTreeMap<&str, &Scene>,
    vocab: &Vocab,
    batch: usize,
    threads: usize,
) -> Result<Vec<Prediction>> {
    if vocab.answer_count() != model.answer_count {
        return Err(Error::Config(format!(
            "answer vocabulary has {} entries, checkpoint expects {}",
            vocab.answer_count(),
            model.answer_count
        )));
    }
    let chunks: Vec<&[&QAItem]> = items.chunks(batch.max(1)).collect();
    let threads = threads.clamp(1, chunks.len().max(1));
    if threads == 1 {
        let mut out = Vec::with_capacity(items.len());
        for c in chunks {
            out.extend(predict_chunk(model, params, c, scenes, vocab)?);
        }
        return Ok(out);
    }
    let per = chunks.len().div_ceil(threads);
    let shards: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|shard| {
                s.spawn(move || -> Result<Vec<Prediction>> {
                    let mut out = Vec::new();
                    for c in shard {
                        out.extend(predict_chunk(model, params, c, scenes, vocab)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for s in shards {
        out.extend(s?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageRow {
    pub lang: String,
    pub items: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerTypeRow {
    pub lang: String,
    pub answer_type: String,
    pub items: usize,
    pub accuracy: f64,
}

/// Accuracy per language and per (language, answer type).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub languages: Vec<LanguageRow>,
    pub answer_types: Vec<AnswerTypeRow>,
}

impl EvalReport {
    fn from_predictions(split: Split, langs: &[String], preds: &[Prediction]) -> EvalReport {
        let mut languages = Vec::with_capacity(langs.len());
        let mut answer_types = Vec::new();
        for l in langs {
            let mine: Vec<&Prediction> = preds.iter().filter(|p| &p.lang == l).collect();
            languages.push(LanguageRow {
                lang: l.clone(),
                items: mine.len(),
                accuracy: mean(mine.iter().map(|p| p.accuracy)),
            });
            for t in AnswerType::ALL {
                let typed: Vec<&&Prediction> = mine.iter().filter(|p| p.answer_type == t).collect();
                answer_types.push(AnswerTypeRow {
                    lang: l.clone(),
                    answer_type: t.name().to_string(),
                    items: typed.len(),
                    accuracy: mean(typed.iter().map(|p| p.accuracy)),
                });
            }
        }
        EvalReport {
            split,
            languages,
            answer_types,
        }
    }

    pub fn accuracy(&self, lang: &str) -> Option<f64> {
        self.languages
            .iter()
            .find(|r| r.lang == lang)
            .map(|r| r.accuracy)
    }

    /// Unweighted mean over languages that have items.
    pub fn mean_accuracy(&self) -> f64 {
        mean(
            self.languages
                .iter()
                .filter(|r| r.items > 0)
                .map(|r| r.accuracy),
        )
    }

    /// Unweighted mean over the listed languages.
    pub fn mean_over(&self, langs: &[String]) -> f64 {
        mean(
            self.languages
                .iter()
                .filter(|r| r.items > 0 && langs.contains(&r.lang))
                .map(|r| r.accuracy),
        )
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_languages(ds: &Dataset, langs: &[String]) -> Result<()> {
    let known = ds.languages();
    match langs.iter().find(|l| !known.contains(l)) {
        Some(l) => Err(Error::Data(format!("unknown language {l}"))),
        None => Ok(()),
    }
}

/// Argmax accuracy on `split` for each of `langs`, by language and answer type.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParams,
    ds: &Dataset,
    vocab: &Vocab,
    split: Split,
    langs: &[String],
    batch: usize,
    threads: usize,
) -> Result<EvalReport> {
    check_languages(ds, langs)?;
    let items = ds.select(split, langs);
    let preds = predict(
        model,
        params,
        &items,
        &ds.scene_index(),
        vocab,
        batch,
        threads,
    )?;
    Ok(EvalReport::from_predictions(split, langs, &preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Split for the partial-question and zero-shot evaluations.
    pub eval_split: Split,
    /// Split whose parallel groups feed the representation-alignment score.
    pub alignment_split: Split,
    /// Question languages for the partial-question and alignment analyses.
    pub languages: Vec<String>,
    /// Languages never seen in student training.
    pub heldout: Vec<String>,
    pub fractions: Vec<f64>,
    pub batch: usize,
    pub threads: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            eval_split: Split::Test,
            alignment_split: Split::Val,
            languages: Vec::new(),
            heldout: Vec::new(),
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            batch: 64,
            threads: 1,
        }
    }
}

/// Accuracy on question prefixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialRow {
    pub fraction: f64,
    pub items: usize,
    pub accuracy: f64,
    /// Percent of predictions equal to the full-question prediction.
    pub unchanged: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub partial: Vec<PartialRow>,
    pub zero_shot: EvalReport,
    pub alignment: AlignmentScore,
}

fn mean_vector<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Tokens kept from a question of `len` tokens at fraction `f`.
pub fn prefix_len(f: f64, len: usize) -> usize {
    // 1e-9 absorbs products such as 0.6 * 5 = 3.0000000000000004
    ((f * len as f64 - 1e-9).ceil() as usize).clamp(1, len.max(1))
}

/// Partial-question curve, zero-shot accuracy on held-out languages and the
/// cross-language representation-alignment score of one checkpoint.
///
/// Alignment uses question-encoder `[CLS]` vectors centred on their mean over
/// the alignment split, so a component shared by every question does not
/// count as agreement.
pub fn analyze(
    model: &ModelConfig,
    params: &ModelParams,
    ds: &Dataset,
    vocab: &Vocab,
    cfg: &AnalysisConfig,
) -> Result<AnalysisReport> {
    if let Some(f) = cfg.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!(
            "analysis fraction {f} outside (0,1]"
        )));
    }
    check_languages(ds, &cfg.languages)?;
    check_languages(ds, &cfg.heldout)?;
    let scenes = ds.scene_index();
    let items = ds.select(cfg.eval_split, &cfg.languages);
    let full = predict(
        model,
        params,
        &items,
        &scenes,
        vocab,
        cfg.batch,
        cfg.threads,
    )?;
    let mut partial = Vec::with_capacity(cfg.fractions.len());
    for &f in &cfg.fractions {
        let cut: Vec<QAItem> = items
            .iter()
            .map(|it| QAItem {
                tokens: it.tokens[..prefix_len(f, it.tokens.len())].to_vec(),
                ..(*it).clone()
            })
            .collect();
        let refs: Vec<&QAItem> = cut.iter().collect();
        let preds = predict(model, params, &refs, &scenes, vocab, cfg.batch, cfg.threads)?;
        let same = preds
            .iter()
            .zip(&full)
            .filter(|(a, b)| a.answer == b.answer)
            .count();
        partial.push(PartialRow {
            fraction: f,
            items: preds.len(),
            accuracy: mean(preds.iter().map(|p| p.accuracy)),
            unchanged: if preds.is_empty() {
                0.0
            } else {
                100.0 * same as f64 / preds.len() as f64
            },
        });
    }

    let zero_shot = evaluate(
        model,
        params,
        ds,
        vocab,
        cfg.eval_split,
        &cfg.heldout,
        cfg.batch,
        cfg.threads,
    )?;

    let aligned = ds.select(cfg.alignment_split, &cfg.languages);
    let preds = predict(
        model,
        params,
        &aligned,
        &scenes,
        vocab,
        cfg.batch,
        cfg.threads,
    )?;
    let centre = mean_vector(
        preds.iter().map(|p| p.question_cls.as_slice()),
        model.hidden,
    );
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (it, p) in aligned.iter().zip(preds) {
        let v = p
            .question_cls
            .iter()
            .zip(&centre)
            .map(|(x, c)| x - c)
            .collect();
        groups.entry(it.parallel_en_id.clone()).or_default().push(v);
    }
    Ok(AnalysisReport {
        partial,
        zero_shot,
        alignment: repr_alignment_score(&groups),
    })
}
