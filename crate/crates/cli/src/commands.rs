use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use mcm_core::codemix::{
    alignment_accuracy, codemix_corpus, satisfies_mlf, train_aligner, ParallelPair,
};
use mcm_core::config::RunConfig;
use mcm_core::corpus::{synth_shapes_world, write_jsonl, Dataset, QAItem, Split, ENGLISH};
use mcm_core::distill::Objective;
use mcm_core::gradcheck::{gradient_suite, TOLERANCE};
use mcm_core::metrics::{codemix_complexity, corpus_bleu, text_similarity, LabeledSentence};
use mcm_core::model::{read_checkpoint, ModelConfig};
use mcm_core::trainer::{
    self, analyze as run_analysis, answer_type_table, distill_student, evaluate, write_csv,
    write_run, AnalysisConfig, AnswerTypeRow, Comparison, EvalReport, LanguageRow, Mode,
    RunArtifacts, StudentSetup, CONFIG_FILE, EVAL_FILE, SUMMARY_FILE,
};

use crate::{Common, DataArg, Failure, StudentArgs};

type Outcome = Result<(), Failure>;

/// Worker cap from `MCM_THREADS`, default 1.
fn threads() -> Result<usize, Failure> {
    match std::env::var("MCM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Data(format!(
                "MCM_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

/// `--config` if given, else the `config.json` beside `beside`, else defaults.
fn load_config(common: &Common, beside: Option<&Path>) -> Result<RunConfig, Failure> {
    if let Some(p) = &common.config {
        return Ok(RunConfig::load(p)?);
    }
    if let Some(dir) = beside.and_then(Path::parent) {
        let p = dir.join(CONFIG_FILE);
        if p.is_file() {
            info!("using configuration {}", p.display());
            return Ok(RunConfig::load(&p)?);
        }
    }
    Ok(RunConfig::default())
}

fn load_data(cfg: &RunConfig, data: &DataArg) -> Result<Dataset, Failure> {
    match &data.data {
        Some(dir) => {
            info!("reading dataset from {}", dir.display());
            Ok(Dataset::read(dir)?)
        }
        None => {
            info!("generating dataset (seed {})", cfg.data.seed);
            Ok(synth_shapes_world(&cfg.data)?)
        }
    }
}

/// Model configuration, checked against the scenes actually loaded.
fn model_for(cfg: &RunConfig, ds: &Dataset) -> Result<ModelConfig, Failure> {
    let k = ds.objects_per_scene()?;
    if k != cfg.data.objects || ds.roi_dim() != cfg.data.roi_dim {
        return Err(Failure::Data(format!(
            "dataset has {k} objects of RoI size {} but the configuration expects {} of size {}",
            ds.roi_dim(),
            cfg.data.objects,
            cfg.data.roi_dim
        )));
    }
    Ok(cfg.model_config())
}

fn or_default(given: &[String], default: Vec<String>) -> Vec<String> {
    if given.is_empty() {
        default
    } else {
        given.to_vec()
    }
}

/// Languages present in `ds`, in the order of `wanted`.
fn present(ds: &Dataset, wanted: &[String]) -> Vec<String> {
    let known = ds.languages();
    wanted
        .iter()
        .filter(|l| known.contains(l))
        .cloned()
        .collect()
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Outcome {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(())
}

fn write_summary(out: &Path, title: &str, body: &str) -> Outcome {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::write(
        out.join(SUMMARY_FILE),
        format!("# {title}\n\ngenerated: unix {ts}\n\n{body}"),
    )?;
    Ok(())
}

pub fn synth(common: &Common) -> Outcome {
    let mut cfg = load_config(common, None)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let ds = synth_shapes_world(&cfg.data)?;
    ds.write(&common.out)?;
    prepare_out(&common.out, &cfg)?;
    fs::write(common.out.join("vocab.json"), cfg.vocab().to_json()?)?;

    let mut body = String::from("| language | train | val | test |\n|---|---:|---:|---:|\n");
    for l in ds.languages() {
        let n = |s: Split| {
            ds.items
                .iter()
                .filter(|i| i.lang == l && i.split == s)
                .count()
        };
        let _ = writeln!(
            body,
            "| {l} | {} | {} | {} |",
            n(Split::Train),
            n(Split::Val),
            n(Split::Test)
        );
    }
    let _ = writeln!(
        body,
        "\n{} scenes, {} items.",
        ds.scenes.len(),
        ds.items.len()
    );
    write_summary(&common.out, "Synthetic dataset", &body)?;
    info!(
        "wrote {} items over {} scenes to {}",
        ds.items.len(),
        ds.scenes.len(),
        common.out.display()
    );
    Ok(())
}

/// English/foreign pairs for one cipher language, in dataset order.
fn parallel_pairs<'a>(
    ds: &'a Dataset,
    lang: &str,
) -> Result<Vec<(&'a QAItem, ParallelPair)>, Failure> {
    if lang == ENGLISH || lang.contains('-') {
        return Err(Failure::Data(format!("{lang} is not a cipher language")));
    }
    let index = ds.item_index();
    let mut out = Vec::new();
    for en in ds.items.iter().filter(|i| i.is_english()) {
        if let Some(xx) = index.get(format!("{}.{lang}", en.id).as_str()) {
            out.push((
                en,
                ParallelPair {
                    lang: lang.to_string(),
                    en_tokens: en.tokens.clone(),
                    en_tags: en.tags.clone(),
                    xx_tokens: xx.tokens.clone(),
                    gold: (xx.gold_alignment.len() == xx.tokens.len())
                        .then(|| xx.gold_alignment.clone()),
                },
            ));
        }
    }
    if out.is_empty() {
        return Err(Failure::Data(format!(
            "no parallel items for language {lang}"
        )));
    }
    Ok(out)
}

#[derive(Serialize)]
struct AlignRow {
    lang: String,
    pairs: usize,
    accuracy: f64,
    initial_log_likelihood: f64,
    final_log_likelihood: f64,
}

#[derive(Serialize)]
struct LikelihoodRow {
    lang: String,
    iteration: usize,
    log_likelihood: f64,
}

pub fn align(common: &Common, data: &DataArg, languages: &[String]) -> Outcome {
    let mut cfg = load_config(common, None)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let ds = load_data(&cfg, data)?;
    let langs = or_default(languages, cfg.data.languages.clone());
    prepare_out(&common.out, &cfg)?;

    let mut rows = Vec::new();
    let mut history = Vec::new();
    for l in &langs {
        let pairs: Vec<ParallelPair> = parallel_pairs(&ds, l)?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let model = train_aligner(&pairs, &cfg.data.aligner)?;
        let accuracy = alignment_accuracy(&model, &pairs)?;
        info!(
            "{l}: alignment accuracy {accuracy:.4} over {} pairs",
            pairs.len()
        );
        for (i, &ll) in model.log_likelihood.iter().enumerate() {
            history.push(LikelihoodRow {
                lang: l.clone(),
                iteration: i,
                log_likelihood: ll,
            });
        }
        rows.push(AlignRow {
            lang: l.clone(),
            pairs: pairs.len(),
            accuracy,
            initial_log_likelihood: model.log_likelihood.first().copied().unwrap_or(0.0),
            final_log_likelihood: model.log_likelihood.last().copied().unwrap_or(0.0),
        });
    }
    write_csv(&common.out.join("alignment.csv"), &rows)?;
    write_csv(&common.out.join("log_likelihood.csv"), &history)?;

    let mut body = String::from("| language | pairs | accuracy |\n|---|---:|---:|\n");
    for r in &rows {
        let _ = writeln!(body, "| {} | {} | {:.4} |", r.lang, r.pairs, r.accuracy);
    }
    write_summary(&common.out, "Word alignment", &body)
}

#[derive(Serialize)]
struct CodemixRow {
    lang: String,
    sentences: usize,
    substituted: usize,
    mlf_violations: usize,
    cmi: f64,
    spf: f64,
}

pub fn codemix(common: &Common, data: &DataArg, languages: &[String]) -> Outcome {
    let mut cfg = load_config(common, None)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let ds = load_data(&cfg, data)?;
    let langs = or_default(languages, cfg.data.languages.clone());
    prepare_out(&common.out, &cfg)?;

    let mut items = Vec::new();
    let mut rows = Vec::new();
    for l in &langs {
        let paired = parallel_pairs(&ds, l)?;
        let pairs: Vec<ParallelPair> = paired.iter().map(|(_, p)| p.clone()).collect();
        let (_, mixed) = codemix_corpus(&pairs, &cfg.data.aligner)?;
        let cm_lang = format!("{ENGLISH}-{l}");
        let mut row = CodemixRow {
            lang: cm_lang.clone(),
            sentences: mixed.len(),
            substituted: 0,
            mlf_violations: 0,
            cmi: 0.0,
            spf: 0.0,
        };
        for ((en, pair), r) in paired.iter().zip(mixed) {
            if !r.applied.is_empty() {
                row.substituted += 1;
            }
            if !satisfies_mlf(&r, &pair.xx_tokens) {
                row.mlf_violations += 1;
            }
            let c = codemix_complexity(&LabeledSentence::from_origin(&r.tokens, &r.origin)?)?;
            row.cmi += c.cmi;
            row.spf += c.spf;
            items.push(QAItem {
                id: format!("{}.{cm_lang}", en.id),
                lang: cm_lang.clone(),
                tokens: r.tokens,
                tags: Vec::new(),
                gold_alignment: Vec::new(),
                origin: Some(r.origin),
                ..(*en).clone()
            });
        }
        if row.sentences > 0 {
            row.cmi /= row.sentences as f64;
            row.spf /= row.sentences as f64;
        }
        info!(
            "{cm_lang}: {} of {} sentences substituted",
            row.substituted, row.sentences
        );
        rows.push(row);
    }
    write_jsonl(&common.out.join("codemixed.jsonl"), &items)?;
    write_csv(&common.out.join("codemix.csv"), &rows)?;

    let mut body = String::from(
        "| language | sentences | substituted | MLF violations | CMI | SPF |\n|---|---:|---:|---:|---:|---:|\n",
    );
    for r in &rows {
        let _ = writeln!(
            body,
            "| {} | {} | {} | {} | {:.2} | {:.2} |",
            r.lang, r.sentences, r.substituted, r.mlf_violations, r.cmi, r.spf
        );
    }
    write_summary(&common.out, "Code-mixing", &body)
}

/// One metrics row. CF2 and CF3 have no formula and are always `n/a`.
#[derive(Serialize)]
struct MetricsRow {
    id: String,
    lang: String,
    tokens: usize,
    cmi: f64,
    spf: f64,
    bleu: f64,
    rouge_l: f64,
    ter: f64,
    cf2: &'static str,
    cf3: &'static str,
}

/// Per code-mixed question: CMI/SPF from token origins, and BLEU/ROUGE-L/TER
/// against its matrix-language question. The last row is the corpus summary.
pub fn metrics(common: &Common, data: &DataArg, languages: &[String]) -> Outcome {
    let mut cfg = load_config(common, None)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let ds = load_data(&cfg, data)?;
    let mixed_langs: Vec<String> = ds
        .languages()
        .into_iter()
        .filter(|l| l.contains('-'))
        .collect();
    let langs = or_default(languages, mixed_langs);
    prepare_out(&common.out, &cfg)?;

    let index = ds.item_index();
    let mut rows = Vec::new();
    let mut refs = Vec::new();
    for it in ds.items.iter().filter(|i| langs.contains(&i.lang)) {
        let origin = it
            .origin
            .as_ref()
            .ok_or_else(|| Failure::Data(format!("item {} has no token origins", it.id)))?;
        let matrix_lang = it.lang.rsplit('-').next().unwrap_or_default();
        let matrix = index
            .get(format!("{}.{matrix_lang}", it.parallel_en_id).as_str())
            .ok_or_else(|| {
                Failure::Data(format!("item {} has no {matrix_lang} counterpart", it.id))
            })?;
        let c = codemix_complexity(&LabeledSentence::from_origin(&it.tokens, origin)?)?;
        let s = text_similarity(&it.tokens, &matrix.tokens)?;
        rows.push(MetricsRow {
            id: it.id.clone(),
            lang: it.lang.clone(),
            tokens: it.tokens.len(),
            cmi: c.cmi,
            spf: c.spf,
            bleu: s.bleu,
            rouge_l: s.rouge_l,
            ter: s.ter,
            cf2: "n/a",
            cf3: "n/a",
        });
        refs.push((it.tokens.as_slice(), matrix.tokens.as_slice()));
    }
    if rows.is_empty() {
        return Err(Failure::Data("no code-mixed items to score".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let corpus = MetricsRow {
        id: "corpus".into(),
        lang: langs.join("+"),
        tokens: rows.iter().map(|r| r.tokens).sum(),
        cmi: mean(|r| r.cmi),
        spf: mean(|r| r.spf),
        bleu: corpus_bleu(&refs),
        rouge_l: mean(|r| r.rouge_l),
        ter: mean(|r| r.ter),
        cf2: "n/a",
        cf3: "n/a",
    };
    let body = format!(
        "{} sentences\n\n| CMI | SPF | BLEU | ROUGE-L | TER | CF2 | CF3 |\n|---:|---:|---:|---:|---:|---:|---:|\n\
         | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | n/a | n/a |\n",
        rows.len(),
        corpus.cmi,
        corpus.spf,
        corpus.bleu,
        corpus.rouge_l,
        corpus.ter
    );
    rows.push(corpus);
    write_csv(&common.out.join("metrics.csv"), &rows)?;
    write_summary(&common.out, "Code-mixing metrics", &body)
}

pub fn train_teacher(common: &Common, data: &DataArg) -> Outcome {
    let mut cfg = load_config(common, None)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let ds = load_data(&cfg, data)?;
    let model = model_for(&cfg, &ds)?;
    let vocab = cfg.vocab();
    let out = trainer::train_teacher(&ds, &vocab, &model, &cfg.train)?;
    let langs = vec![ENGLISH.to_string()];
    let eval = evaluate(
        &model,
        &out.params,
        &ds,
        &vocab,
        Split::Test,
        &langs,
        cfg.train.eval_batch_size,
        threads()?,
    )?;
    info!("teacher test accuracy {:.4}", eval.mean_accuracy());
    write_run(
        &common.out,
        &RunArtifacts {
            title: "teacher",
            config_json: &cfg.to_json(),
            params: Some(&out.params),
            steps: &out.steps,
            epochs: &out.epochs,
            best_epoch: Some(out.best_epoch),
            eval: Some(&eval),
            analysis: None,
            notes: Vec::new(),
        },
    )?;
    Ok(())
}

pub fn student(a: &StudentArgs, mode: Mode) -> Outcome {
    let mut cfg = load_config(&a.common, Some(&a.checkpoint))?;
    if let Some(s) = a.common.seed {
        cfg.train.seed = s;
    }
    let mut notes = vec![format!("mode: {}", mode.name())];
    if let Some(o) = &a.ablate {
        if mode != Mode::Distill {
            return Err(Failure::Data("--ablate only applies to distill".into()));
        }
        let o = Objective::parse(o)?;
        cfg.distill = cfg.distill.ablate(o);
        notes.push(format!("ablated objective: {}", o.name()));
    }
    cfg.validate()?;
    let ds = load_data(&cfg, &a.data)?;
    let model = model_for(&cfg, &ds)?;
    let vocab = cfg.vocab();
    let teacher = read_checkpoint(&a.checkpoint, &model)?;
    let langs = or_default(&a.languages.languages, cfg.data.student_languages());
    let out = distill_student(
        &ds,
        &vocab,
        StudentSetup {
            teacher_cfg: &model,
            teacher: &teacher,
            student_cfg: &model,
            train: &cfg.train,
            distill: &cfg.distill,
            languages: &langs,
        },
        mode,
    )?;
    let mut eval_langs = vec![ENGLISH.to_string()];
    eval_langs.extend(langs.iter().cloned());
    eval_langs.extend(cfg.data.heldout.iter().cloned());
    let eval_langs = present(&ds, &eval_langs);
    let eval = evaluate(
        &model,
        &out.params,
        &ds,
        &vocab,
        Split::Test,
        &eval_langs,
        cfg.train.eval_batch_size,
        threads()?,
    )?;
    let stream_mean = eval.mean_over(&langs);
    info!(
        "{} test accuracy over training languages {stream_mean:.4}",
        mode.name()
    );
    notes.push(format!(
        "mean test accuracy over training languages: {stream_mean:.4}"
    ));
    write_run(
        &a.common.out,
        &RunArtifacts {
            title: mode.name(),
            config_json: &cfg.to_json(),
            params: Some(&out.params),
            steps: &out.steps,
            epochs: &out.epochs,
            best_epoch: Some(out.best_epoch),
            eval: Some(&eval),
            analysis: None,
            notes,
        },
    )?;
    Ok(())
}

pub fn eval(common: &Common, data: &DataArg, checkpoint: &Path, languages: &[String]) -> Outcome {
    let cfg = load_config(common, Some(checkpoint))?;
    cfg.validate()?;
    let ds = load_data(&cfg, data)?;
    let model = model_for(&cfg, &ds)?;
    let params = read_checkpoint(checkpoint, &model)?;
    let langs = or_default(languages, ds.languages());
    let vocab = cfg.vocab();
    let eval = evaluate(
        &model,
        &params,
        &ds,
        &vocab,
        Split::Test,
        &langs,
        cfg.train.eval_batch_size,
        threads()?,
    )?;
    write_run(
        common.out.as_path(),
        &RunArtifacts {
            title: "evaluation",
            config_json: &cfg.to_json(),
            eval: Some(&eval),
            ..Default::default()
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct AnalysisRow {
    run: String,
    alignment: f64,
    zero_shot: f64,
    full_question: f64,
}

/// Directory names for the checkpoints, taken from their parent folders and
/// made unique.
fn run_names(paths: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let base = p
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("run{i}"));
        let name = if names.contains(&base) {
            format!("{base}-{i}")
        } else {
            base
        };
        names.push(name);
    }
    names
}

pub fn analyze(
    common: &Common,
    data: &DataArg,
    checkpoints: &[PathBuf],
    languages: &[String],
) -> Outcome {
    let cfg = load_config(common, checkpoints.first().map(PathBuf::as_path))?;
    cfg.validate()?;
    let ds = load_data(&cfg, data)?;
    let model = model_for(&cfg, &ds)?;
    let vocab = cfg.vocab();
    let acfg = AnalysisConfig {
        languages: or_default(languages, cfg.data.student_languages()),
        heldout: present(&ds, &cfg.data.heldout),
        batch: cfg.train.eval_batch_size,
        threads: threads()?,
        ..AnalysisConfig::default()
    };
    prepare_out(&common.out, &cfg)?;
    let mut rows = Vec::new();
    for (path, name) in checkpoints.iter().zip(run_names(checkpoints)) {
        let params = read_checkpoint(path, &model)?;
        let r = run_analysis(&model, &params, &ds, &vocab, &acfg)?;
        info!(
            "{name}: alignment {:.4}, zero-shot {:.4}",
            r.alignment.score,
            r.zero_shot.mean_accuracy()
        );
        rows.push(AnalysisRow {
            run: name.clone(),
            alignment: r.alignment.score,
            zero_shot: r.zero_shot.mean_accuracy(),
            full_question: r
                .partial
                .iter()
                .find(|p| p.fraction == 1.0)
                .map_or(0.0, |p| p.accuracy),
        });
        write_run(
            &common.out.join(&name),
            &RunArtifacts {
                title: &format!("analysis of {name}"),
                config_json: &cfg.to_json(),
                analysis: Some(&r),
                ..Default::default()
            },
        )?;
    }
    write_csv(&common.out.join("analysis.csv"), &rows)?;
    let mut body =
        String::from("| run | alignment | zero-shot | full question |\n|---|---:|---:|---:|\n");
    for r in &rows {
        let _ = writeln!(
            body,
            "| {} | {:.4} | {:.4} | {:.4} |",
            r.run, r.alignment, r.zero_shot, r.full_question
        );
    }
    write_summary(&common.out, "Analysis", &body)
}

pub fn gradcheck(seed: u64, out: Option<&Path>) -> Outcome {
    let rows = gradient_suite(seed)?;
    let width = rows.iter().map(|r| r.op.len()).max().unwrap_or(0);
    for r in &rows {
        println!(
            "{:width$}  {:.3e}  {}",
            r.op,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("gradcheck.csv"), &rows)?;
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.op.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient check above {TOLERANCE:e} for: {}",
            failed.join(", ")
        )))
    }
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub fn report(runs: &[PathBuf], out: &Path) -> Outcome {
    let mut reports = Vec::with_capacity(runs.len());
    for dir in runs {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let languages: Vec<LanguageRow> = read_rows(&dir.join(EVAL_FILE))?;
        let answer_types: Vec<AnswerTypeRow> = read_rows(&dir.join("answer_types.csv"))?;
        reports.push((
            name,
            EvalReport {
                split: Split::Test,
                languages,
                answer_types,
            },
        ));
    }
    let cmp = Comparison::new(&reports);
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.csv"), cmp.to_csv()?)?;
    fs::write(out.join("comparison.md"), cmp.to_markdown())?;

    let mut body = format!("## Accuracy by language\n\n{}\n", cmp.to_markdown());
    for (name, r) in &reports {
        let _ = writeln!(
            body,
            "## Accuracy by answer type: {name}\n\n{}",
            answer_type_table(r)
        );
    }
    write_summary(out, "Run comparison", &body)
}
