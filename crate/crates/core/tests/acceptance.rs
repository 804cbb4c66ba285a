//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line straight to
//! stderr, so the lines appear even when the harness captures output, then
//! asserts the same condition.
//!
//! The directional criteria share one pipeline per seed: synthesize, train a
//! teacher, then train the distilled student, the answer-loss-only baseline
//! and the four single-objective ablations on the same stream.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use mcm_core::codemix::{
    alignment_accuracy, codemix_corpus, extract_substitutable_spans, generate_codemixed,
    satisfies_mlf, train_aligner, AlignerConfig, Alignment, ParallelPair,
};
use mcm_core::config::RunConfig;
use mcm_core::corpus::{
    encode_batch, oracle_pairs, synth_shapes_world, CipherLanguage, Dataset, Origin, Split, Tag,
    Vocab, ENGLISH,
};
use mcm_core::distill::{total_loss, DistillConfig, Objective};
use mcm_core::gradcheck::{gradient_suite, TOLERANCE};
use mcm_core::metrics::{
    codemix_complexity, repr_alignment_score, text_similarity, vqa_accuracy, Gold, LabeledSentence,
};
use mcm_core::model::{forward, write_checkpoint_bytes, ModelConfig, ModelParams};
use mcm_core::rng::{stream, Rng};
use mcm_core::tensor::Graph;
use mcm_core::trainer::{
    analyze, distill_student, evaluate, train_teacher, AnalysisConfig, EvalReport, Mode,
    StudentSetup,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const GRADCHECK_BUDGET_SECS: f64 = 60.0;
const LOSS_IDENTITY_TOL: f64 = 1e-9;
/// Accuracy points the distilled student must gain over the baseline.
const MIN_GAP_POINTS: f64 = 3.0;
const MIN_TEACHER_ACCURACY: f64 = 0.95;
const RUN_BUDGET_SECS: f64 = 15.0 * 60.0;
const MIN_ALIGNMENT_GAP: f64 = 0.05;
const MIN_ALIGNER_ACCURACY: f64 = 0.95;
const ORACLE_PAIRS: usize = 10_000;
const ORACLE_LEXICON: usize = 200;
const UNIT_TOL: f64 = 5e-5;

fn line(criterion: &str, pass: bool, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[{tag}] {criterion}: {detail}");
    pass
}

#[test]
fn gradient_suite_passes_on_three_seeds() {
    let t = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut ops = 0;
    for seed in SEEDS {
        for r in gradient_suite(seed).unwrap() {
            ops += 1;
            if r.max_rel_error >= worst.1 {
                worst = (format!("{} (seed {seed})", r.op), r.max_rel_error);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = worst.1 <= TOLERANCE && secs < GRADCHECK_BUDGET_SECS;
    assert!(line(
        "gradient suite",
        ok,
        &format!(
            "{ops} checks, worst {:.2e} at {}, {secs:.1}s",
            worst.1, worst.0
        )
    ));
}

/// Summed binary cross-entropy per row, averaged over rows, with the same
/// probability clamp as the library.
fn hand_bce(targets: &[f64], probs: &[f64], rows: usize) -> f64 {
    let eps = 1e-7;
    let s: f64 = targets
        .iter()
        .zip(probs)
        .map(|(&t, &p)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    s / rows as f64
}

#[test]
fn copied_student_has_zero_matching_losses() {
    let rc = RunConfig::default();
    let data = mcm_core::corpus::DataConfig {
        train_scenes: 20,
        test_scenes: 0,
        ..rc.data.clone()
    };
    let ds = synth_shapes_world(&data).unwrap();
    let vocab = rc.vocab();
    let m = rc.model_config();
    let teacher = ModelParams::init(&m, &mut Rng::new(5, stream::TEACHER_INIT)).unwrap();
    let student = teacher.clone();
    let items = ds.select(Split::Train, &[ENGLISH.to_string()]);
    let b = encode_batch(&items[..32], &ds.scene_index(), &vocab, m.max_len).unwrap();

    let mut g = Graph::new();
    let tp = teacher.bind_frozen(&mut g).unwrap();
    let t = forward(&mut g, &m, &tp, &b.questions, &b.scenes).unwrap();
    let sp = student.bind_frozen(&mut g).unwrap();
    let s = forward(&mut g, &m, &sp, &b.questions, &b.scenes).unwrap();
    let gold = g.constant(b.gold.clone()).unwrap();
    let v = total_loss(&mut g, &t, &s, gold, &m, &DistillConfig::default())
        .unwrap()
        .values(&g);
    let p = g.value(t.answer_probs).data().to_vec();
    let expected = hand_bce(&p, &p, 32);
    let ok = v.l_cls.abs() <= LOSS_IDENTITY_TOL
        && v.l_object.abs() <= LOSS_IDENTITY_TOL
        && (v.l_pred - expected).abs() <= LOSS_IDENTITY_TOL;
    assert!(line(
        "loss identities",
        ok,
        &format!(
            "l_cls {:.1e}, l_object {:.1e}, l_pred {:.12} vs hand BCE {:.12}",
            v.l_cls, v.l_object, v.l_pred, expected
        )
    ));
}

#[test]
fn aligner_recovers_oracle_links() {
    let pairs = oracle_pairs(ORACLE_PAIRS, ORACLE_LEXICON, 0);
    let cfg = AlignerConfig::default();
    let model = train_aligner(&pairs, &cfg).unwrap();
    let acc = alignment_accuracy(&model, &pairs).unwrap();
    let ll = &model.log_likelihood;
    let monotone = ll.windows(2).all(|w| w[1] >= w[0]);
    let ok = acc >= MIN_ALIGNER_ACCURACY && monotone && cfg.iterations == 5;
    assert!(line(
        "aligner oracle",
        ok,
        &format!(
            "accuracy {acc:.4} on {ORACLE_PAIRS} pairs after {} iterations; log-likelihood {:.1} -> {:.1}, monotone {monotone}",
            cfg.iterations,
            ll.first().unwrap(),
            ll.last().unwrap()
        )
    ));
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn code_mixer_keeps_the_matrix_frame() {
    // Hand-traced: a reversed-order language, noun phrase applied before the
    // adjective, both spans clean.
    let p = ParallelPair {
        lang: "xb".into(),
        en_tokens: toks("is there a red circle"),
        en_tags: vec![Tag::O, Tag::O, Tag::O, Tag::Adj, Tag::Np],
        xx_tokens: toks("xb~ elcric_ xb~ der_ xb~ a_ xb~ ereht_ xb~ si_"),
        gold: None,
    };
    let a = Alignment {
        links: [4, 4, 3, 3, 2, 2, 1, 1, 0, 0]
            .into_iter()
            .map(Some)
            .collect(),
        oov: 0,
    };
    let c = extract_substitutable_spans(&p, &a);
    let r = generate_codemixed(&p, &c);
    let (m, e) = (Origin::Matrix, Origin::Embedded);
    let cx =
        codemix_complexity(&LabeledSentence::from_origin(&r.tokens, &r.origin).unwrap()).unwrap();
    let traced = c.iter().map(|c| c.tag).collect::<Vec<_>>() == [Tag::Np, Tag::Adj]
        && r.tokens == toks("circle red xb~ a_ xb~ ereht_ xb~ si_")
        && r.origin == [e, e, m, m, m, m, m, m]
        && (cx.cmi - 25.0).abs() < 1e-12
        && (cx.spf - 100.0 / 7.0).abs() < 1e-12;

    // Every generated sentence of the desk corpus.
    let rc = RunConfig::default();
    let ds = synth_shapes_world(&mcm_core::corpus::DataConfig {
        codemix: false,
        ..rc.data.clone()
    })
    .unwrap();
    let english: Vec<_> = ds.items.iter().filter(|i| i.is_english()).collect();
    let (mut total, mut mixed, mut mlf_bad, mut metric_bad) = (0, 0, 0, 0);
    for lang in &rc.data.languages {
        let cipher = CipherLanguage::get(lang).unwrap();
        let pairs: Vec<ParallelPair> = english
            .iter()
            .map(|en| {
                let (xx, _) = cipher.translate(&en.tokens);
                ParallelPair {
                    lang: lang.clone(),
                    en_tokens: en.tokens.clone(),
                    en_tags: en.tags.clone(),
                    xx_tokens: xx,
                    gold: None,
                }
            })
            .collect();
        let (_, out) = codemix_corpus(&pairs, &rc.data.aligner).unwrap();
        for (p, r) in pairs.iter().zip(&out) {
            total += 1;
            let substituted = !r.applied.is_empty();
            mixed += usize::from(substituted);
            mlf_bad += usize::from(!satisfies_mlf(r, &p.xx_tokens));
            let c =
                codemix_complexity(&LabeledSentence::from_origin(&r.tokens, &r.origin).unwrap())
                    .unwrap();
            metric_bad += usize::from((c.cmi > 0.0 && c.spf > 0.0) != substituted);
        }
    }
    let ok = traced && mlf_bad == 0 && metric_bad == 0;
    assert!(line(
        "code-mix generator",
        ok,
        &format!(
            "hand trace {traced}; {total} sentences, {mixed} substituted, {mlf_bad} MLF violations, {metric_bad} CMI/SPF mismatches"
        )
    ));
}

fn labels(s: &str) -> LabeledSentence {
    let langs: Vec<String> = s.split_whitespace().map(String::from).collect();
    let tokens = (0..langs.len()).map(|i| format!("w{i}")).collect();
    LabeledSentence::new(tokens, langs).unwrap()
}

#[test]
fn metric_unit_values_reproduce() {
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let same = text_similarity(&toks("a b c d"), &toks("a b c d")).unwrap();
    checks.push(("identical BLEU", same.bleu, 100.0));
    checks.push(("identical ROUGE-L", same.rouge_l, 100.0));
    checks.push(("identical TER", same.ter, 0.0));
    let c = codemix_complexity(&labels("M M E E M")).unwrap();
    checks.push(("CMI MMEEM", c.cmi, 40.0));
    checks.push(("SPF MMEEM", c.spf, 50.0));
    let c = codemix_complexity(&labels("M E")).unwrap();
    checks.push(("CMI ME", c.cmi, 50.0));
    checks.push(("SPF ME", c.spf, 100.0));
    let c = codemix_complexity(&labels("M M M")).unwrap();
    checks.push(("CMI monolingual", c.cmi, 0.0));
    checks.push(("SPF monolingual", c.spf, 0.0));
    let s = text_similarity(&toks("a b d"), &toks("a b c d")).unwrap();
    checks.push(("TER abd/abcd", s.ter, 25.0));
    checks.push(("ROUGE-L abd/abcd", s.rouge_l, 85.7143));
    let ten = |n: usize| {
        Gold::Annotators(
            (0..10)
                .map(|i| if i < n { "red" } else { "blue" }.to_string())
                .collect(),
        )
    };
    checks.push(("VQA 10 of 10", vqa_accuracy("red", &ten(10)), 1.0));
    checks.push(("VQA 2 of 10", vqa_accuracy("red", &ten(2)), 0.6667));
    checks.push(("VQA 0 of 10", vqa_accuracy("green", &ten(2)), 0.0));
    let mut groups = BTreeMap::new();
    groups.insert(
        "q".to_string(),
        vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
    );
    checks.push((
        "alignment {1,0,0}",
        repr_alignment_score(&groups).score,
        0.3333,
    ));

    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > UNIT_TOL)
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    assert!(line(
        "metric unit values",
        bad.is_empty(),
        &if bad.is_empty() {
            format!("{} values match to 4 decimals", checks.len())
        } else {
            bad.join("; ")
        }
    ));
}

struct StudentRun {
    name: String,
    report: EvalReport,
    alignment: Option<f64>,
    secs: f64,
}

struct SeedRun {
    seed: u64,
    config: RunConfig,
    dataset: Dataset,
    vocab: Vocab,
    model: ModelConfig,
    teacher: ModelParams,
    teacher_accuracy: f64,
    teacher_secs: f64,
    distill_bytes: Vec<u8>,
    runs: Vec<StudentRun>,
}

impl SeedRun {
    fn run(&self, name: &str) -> &StudentRun {
        self.runs
            .iter()
            .find(|r| r.name == name)
            .expect("run exists")
    }

    /// Mean accuracy over the student's training languages.
    fn stream_accuracy(&self, name: &str) -> f64 {
        self.run(name)
            .report
            .mean_over(&self.config.data.student_languages())
    }

    fn heldout_accuracy(&self, name: &str) -> f64 {
        self.run(name).report.mean_over(&self.config.data.heldout)
    }
}

fn student(s: &SeedRun, d: &DistillConfig, mode: Mode) -> ModelParams {
    let langs = s.config.data.student_languages();
    distill_student(
        &s.dataset,
        &s.vocab,
        StudentSetup {
            teacher_cfg: &s.model,
            teacher: &s.teacher,
            student_cfg: &s.model,
            train: &s.config.train,
            distill: d,
            languages: &langs,
        },
        mode,
    )
    .unwrap()
    .params
}

fn run_seed(seed: u64) -> SeedRun {
    let mut config = RunConfig::default();
    config.data.seed = seed;
    config.train.seed = seed;
    let dataset = synth_shapes_world(&config.data).unwrap();
    let vocab = config.vocab();
    let model = config.model_config();
    let t = Instant::now();
    let teacher = train_teacher(&dataset, &vocab, &model, &config.train)
        .unwrap()
        .params;
    let teacher_secs = t.elapsed().as_secs_f64();
    let en = [ENGLISH.to_string()];
    let teacher_accuracy = evaluate(&model, &teacher, &dataset, &vocab, Split::Test, &en, 64, 1)
        .unwrap()
        .mean_accuracy();
    let mut s = SeedRun {
        seed,
        config,
        dataset,
        vocab,
        model,
        teacher,
        teacher_accuracy,
        teacher_secs,
        distill_bytes: Vec::new(),
        runs: Vec::new(),
    };

    let langs = s.config.data.student_languages();
    let mut eval_langs = vec![ENGLISH.to_string()];
    eval_langs.extend(langs.iter().cloned());
    eval_langs.extend(s.config.data.heldout.iter().cloned());
    let base = s.config.distill.clone();
    let mut variants = vec![
        ("distill".to_string(), Mode::Distill, base.clone()),
        ("baseline".to_string(), Mode::JointBaseline, base.clone()),
    ];
    for o in Objective::ALL {
        variants.push((format!("-{}", o.name()), Mode::Distill, base.ablate(o)));
    }
    for (name, mode, d) in variants {
        let t = Instant::now();
        let params = student(&s, &d, mode);
        let secs = t.elapsed().as_secs_f64();
        let report = evaluate(
            &s.model,
            &params,
            &s.dataset,
            &s.vocab,
            Split::Test,
            &eval_langs,
            64,
            1,
        )
        .unwrap();
        let alignment = matches!(name.as_str(), "distill" | "baseline").then(|| {
            let acfg = AnalysisConfig {
                languages: langs.clone(),
                heldout: s.config.data.heldout.clone(),
                fractions: vec![1.0],
                ..AnalysisConfig::default()
            };
            analyze(&s.model, &params, &s.dataset, &s.vocab, &acfg)
                .unwrap()
                .alignment
                .score
        });
        if name == "distill" {
            s.distill_bytes = write_checkpoint_bytes(&params).unwrap();
        }
        let _ = writeln!(
            std::io::stderr().lock(),
            "  seed {seed} {name:9} stream {:.4} held-out {:.4} ({secs:.0}s)",
            report.mean_over(&langs),
            report.mean_over(&s.config.data.heldout)
        );
        s.runs.push(StudentRun {
            name,
            report,
            alignment,
            secs,
        });
    }
    s
}

fn pipeline() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s)).collect())
}

#[test]
fn distilled_student_beats_the_joint_baseline() {
    let runs = pipeline();
    let gaps: Vec<f64> = runs
        .iter()
        .map(|s| 100.0 * (s.stream_accuracy("distill") - s.stream_accuracy("baseline")))
        .collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let teacher_ok = runs
        .iter()
        .all(|s| s.teacher_accuracy >= MIN_TEACHER_ACCURACY);
    let worst_secs = runs
        .iter()
        .map(|s| s.teacher_secs + s.run("distill").secs)
        .fold(0.0, f64::max);
    let detail: Vec<String> = runs
        .iter()
        .zip(&gaps)
        .map(|(s, g)| {
            format!(
                "seed {}: teacher {:.4}, distill {:.4}, baseline {:.4}, gap {g:.2}",
                s.seed,
                s.teacher_accuracy,
                s.stream_accuracy("distill"),
                s.stream_accuracy("baseline")
            )
        })
        .collect();
    let ok = mean_gap >= MIN_GAP_POINTS && teacher_ok && worst_secs <= RUN_BUDGET_SECS;
    assert!(line(
        "distill vs joint baseline",
        ok,
        &format!(
            "mean gap {mean_gap:.2} points; slowest teacher+distill run {worst_secs:.0}s; {}",
            detail.join("; ")
        )
    ));
}

#[test]
fn object_loss_ablation_does_not_help() {
    let runs = pipeline();
    let names = ["distill", "baseline", "-cls", "-object", "-pred", "-nll"];
    let mut table = format!(
        "{:>6} {}",
        "seed",
        names.map(|n| format!("{n:>9}")).join("")
    );
    for s in runs {
        let cells: String = names
            .iter()
            .map(|n| format!("{:>9.4}", s.stream_accuracy(n)))
            .collect();
        table.push_str(&format!("\n{:>6} {cells}", s.seed));
    }
    let _ = writeln!(
        std::io::stderr().lock(),
        "ablation table (mean accuracy over training languages):\n{table}"
    );
    let holds = runs
        .iter()
        .filter(|s| s.stream_accuracy("-object") <= s.stream_accuracy("distill"))
        .count();
    let detail: Vec<String> = runs
        .iter()
        .map(|s| {
            format!(
                "seed {}: -object {:.4} vs full {:.4}",
                s.seed,
                s.stream_accuracy("-object"),
                s.stream_accuracy("distill")
            )
        })
        .collect();
    assert!(line(
        "object-loss ablation",
        holds >= 2,
        &format!(
            "holds in {holds} of {} seeds; {}",
            runs.len(),
            detail.join("; ")
        )
    ));
}

#[test]
fn distilled_representations_align_across_languages() {
    let runs = pipeline();
    let gaps: Vec<f64> = runs
        .iter()
        .map(|s| s.run("distill").alignment.unwrap() - s.run("baseline").alignment.unwrap())
        .collect();
    let detail: Vec<String> = runs
        .iter()
        .zip(&gaps)
        .map(|(s, g)| {
            format!(
                "seed {}: {:.4} vs {:.4} (gap {g:.4})",
                s.seed,
                s.run("distill").alignment.unwrap(),
                s.run("baseline").alignment.unwrap()
            )
        })
        .collect();
    assert!(line(
        "representation alignment",
        gaps.iter().all(|&g| g >= MIN_ALIGNMENT_GAP),
        &detail.join("; ")
    ));
}

#[test]
fn distilled_student_transfers_zero_shot() {
    let runs = pipeline();
    let detail: Vec<String> = runs
        .iter()
        .map(|s| {
            format!(
                "seed {}: {:.4} vs {:.4}",
                s.seed,
                s.heldout_accuracy("distill"),
                s.heldout_accuracy("baseline")
            )
        })
        .collect();
    let ok = runs
        .iter()
        .all(|s| s.heldout_accuracy("distill") > s.heldout_accuracy("baseline"));
    assert!(line("zero-shot languages", ok, &detail.join("; ")));
}

#[test]
fn distillation_is_bit_reproducible() {
    let s = &pipeline()[0];
    let again = write_checkpoint_bytes(&student(s, &s.config.distill, Mode::Distill)).unwrap();
    let ok = again == s.distill_bytes;
    assert!(line(
        "determinism",
        ok,
        &format!(
            "seed {}: two distill checkpoints of {} bytes identical: {ok}",
            s.seed,
            again.len()
        )
    ));
}
