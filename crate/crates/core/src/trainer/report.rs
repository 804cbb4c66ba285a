use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::{AnalysisReport, EpochRecord, EvalReport, StepRecord};
use crate::error::{Error, Result};
use crate::model::{write_checkpoint, ModelParams};

/// Everything a run directory can hold; absent parts are not written.
#[derive(Clone, Debug, Default)]
pub struct RunArtifacts<'a> {
    pub title: &'a str,
    /// Serialized run configuration, copied verbatim.
    pub config_json: &'a str,
    pub params: Option<&'a ModelParams>,
    pub steps: &'a [StepRecord],
    pub epochs: &'a [EpochRecord],
    pub best_epoch: Option<usize>,
    pub eval: Option<&'a EvalReport>,
    pub analysis: Option<&'a AnalysisReport>,
    /// Extra summary lines.
    pub notes: Vec<String>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.md";

/// Serializes `rows` as CSV with a header taken from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Markdown table of accuracy per language.
pub fn language_table(r: &EvalReport) -> String {
    let mut s = String::from("| language | items | accuracy |\n|---|---:|---:|\n");
    for row in &r.languages {
        let _ = writeln!(s, "| {} | {} | {:.4} |", row.lang, row.items, row.accuracy);
    }
    s
}

/// Markdown matrix with one row per language and one column per answer type.
pub fn answer_type_table(r: &EvalReport) -> String {
    let mut types: Vec<&str> = Vec::new();
    for row in &r.answer_types {
        if !types.contains(&row.answer_type.as_str()) {
            types.push(&row.answer_type);
        }
    }
    let mut s = format!(
        "| language | {} |\n|---|{}\n",
        types.join(" | "),
        "---:|".repeat(types.len())
    );
    for lang in &r.languages {
        let cells: Vec<String> = types
            .iter()
            .map(|t| {
                r.answer_types
                    .iter()
                    .find(|x| x.lang == lang.lang && x.answer_type == *t)
                    .filter(|x| x.items > 0)
                    .map_or_else(|| "n/a".to_string(), |x| format!("{:.4}", x.accuracy))
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |", lang.lang, cells.join(" | "));
    }
    s
}

/// Writes the run directory. Only `summary.md` carries a timestamp.
pub fn write_run(dir: &Path, a: &RunArtifacts<'_>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), a.config_json)?;
    if let Some(p) = a.params {
        write_checkpoint(&dir.join(CHECKPOINT_FILE), p)?;
    }
    if !a.steps.is_empty() {
        write_csv(&dir.join("loss_history.csv"), a.steps)?;
    }
    if !a.epochs.is_empty() {
        write_csv(&dir.join("epochs.csv"), a.epochs)?;
    }
    if let Some(r) = a.eval {
        write_csv(&dir.join(EVAL_FILE), &r.languages)?;
        write_csv(&dir.join("answer_types.csv"), &r.answer_types)?;
    }
    if let Some(an) = a.analysis {
        write_csv(&dir.join("partial_questions.csv"), &an.partial)?;
        write_csv(&dir.join("zero_shot.csv"), &an.zero_shot.languages)?;
        write_csv(&dir.join("alignment.csv"), &[an.alignment])?;
    }

    let mut s = format!("# {}\n\ngenerated: unix {}\n\n", a.title, timestamp());
    for n in &a.notes {
        let _ = writeln!(s, "{n}");
    }
    if !a.notes.is_empty() {
        s.push('\n');
    }
    if let (Some(best), Some(e)) = (a.best_epoch, a.epochs.last()) {
        let _ = writeln!(
            s,
            "Best epoch {best} of {}; final mean loss {:.4}.\n",
            e.epoch, e.mean_loss
        );
    }
    if let Some(r) = a.eval {
        let _ = writeln!(
            s,
            "## Accuracy ({:?} split)\n\n{}",
            r.split,
            language_table(r)
        );
        let _ = writeln!(s, "Mean over languages: {:.4}\n", r.mean_accuracy());
        let _ = writeln!(s, "## Accuracy by answer type\n\n{}", answer_type_table(r));
    }
    if let Some(an) = a.analysis {
        s.push_str(
            "## Partial questions\n\n| fraction | accuracy | unchanged % |\n|---:|---:|---:|\n",
        );
        for p in &an.partial {
            let _ = writeln!(
                s,
                "| {:.1} | {:.4} | {:.2} |",
                p.fraction, p.accuracy, p.unchanged
            );
        }
        let _ = writeln!(
            s,
            "\n## Zero-shot languages\n\n{}",
            language_table(&an.zero_shot)
        );
        let _ = writeln!(
            s,
            "## Representation alignment\n\nscore {:.4} over {} groups ({} skipped)",
            an.alignment.score, an.alignment.groups, an.alignment.skipped
        );
    }
    fs::write(dir.join(SUMMARY_FILE), s)?;
    Ok(())
}

/// One row per run and one column per language; languages missing from a run
/// are left empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub languages: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Comparison {
    pub fn new(runs: &[(String, EvalReport)]) -> Comparison {
        let mut languages: Vec<String> = Vec::new();
        for (_, r) in runs {
            for l in &r.languages {
                if !languages.contains(&l.lang) {
                    languages.push(l.lang.clone());
                }
            }
        }
        let rows = runs
            .iter()
            .map(|(name, r)| {
                (
                    name.clone(),
                    languages.iter().map(|l| r.accuracy(l)).collect(),
                )
            })
            .collect();
        Comparison { languages, rows }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["run".to_string()];
        header.extend(self.languages.iter().cloned());
        header.push("mean".into());
        w.write_record(&header)
            .map_err(|e| Error::Data(e.to_string()))?;
        for (name, cells) in &self.rows {
            let mut rec = vec![name.clone()];
            rec.extend(
                cells
                    .iter()
                    .map(|c| c.map(|v| v.to_string()).unwrap_or_default()),
            );
            rec.push(row_mean(cells).to_string());
            w.write_record(&rec)
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| run | {} | mean |\n|---|{}---:|\n",
            self.languages.join(" | "),
            "---:|".repeat(self.languages.len())
        );
        for (name, cells) in &self.rows {
            let c: Vec<String> = cells
                .iter()
                .map(|c| c.map_or_else(String::new, |v| format!("{:.4}", v)))
                .collect();
            let _ = writeln!(s, "| {name} | {} | {:.4} |", c.join(" | "), row_mean(cells));
        }
        s
    }
}

fn row_mean(cells: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = cells.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
