//! Training loops, evaluation and behaviour analyses.
//!
//! The teacher learns English questions with `L_nll` only. It is then frozen
//! and a student is trained on a language-balanced stream of foreign and
//! code-mixed questions, either with the full distillation objective or, as
//! the joint baseline, with `L_nll` alone on the very same stream.

mod eval;
mod optim;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use eval::{
    analyze, evaluate, predict, AnalysisConfig, AnalysisReport, AnswerTypeRow, EvalReport,
    LanguageRow, PartialRow, Prediction,
};
pub use optim::{
    clip_global_norm, cosine_lr, global_norm, optimizer_step, AdamConfig, OptimizerState, StepInfo,
};
pub use report::{
    answer_type_table, language_table, write_csv, write_run, Comparison, RunArtifacts,
    CHECKPOINT_FILE, CONFIG_FILE, EVAL_FILE, SUMMARY_FILE,
};

use crate::corpus::{encode_batch, Dataset, EncodedBatch, QAItem, Split, Vocab, ENGLISH};
use crate::distill::{loss_nll, total_loss, DistillConfig, LossValues};
use crate::error::{Error, Result};
use crate::model::{forward, forward_frozen, ModelConfig, ModelParams, ParamGroup, TapValues};
use crate::rng::{stream, Rng};
use crate::tensor::Graph;

/// Which objective a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Teacher,
    Distill,
    JointBaseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Teacher => "teacher",
            Mode::Distill => "distill",
            Mode::JointBaseline => "joint-baseline",
        }
    }
}

/// How a student's parameters start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentInit {
    Random,
    /// Image encoder, cross-modality layers and answer head copied from the
    /// teacher; the language encoder starts random.
    Teacher,
    /// Every parameter copied from the teacher.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Teacher epochs.
    pub epochs: usize,
    /// Student epochs; each epoch visits every base question once, in one
    /// language.
    pub student_epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound.
    pub clip: f64,
    /// Bottom language layers (and the embeddings) kept fixed.
    pub freeze_lang_layers: usize,
    /// Bottom image layers (and the input projections) kept fixed.
    pub freeze_image_layers: usize,
    pub student_init: StudentInit,
    pub seed: u64,
    /// Items per forward pass during evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            student_epochs: 1,
            batch_size: 32,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 6.0,
            freeze_lang_layers: 0,
            freeze_image_layers: 0,
            student_init: StudentInit::Teacher,
            seed: 0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 16 epochs at a peak rate of 1e-5.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 16,
            student_epochs: 16,
            lr: 1e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0
            || self.student_epochs == 0
            || self.batch_size == 0
            || self.eval_batch_size == 0
        {
            return bad("epochs and batch sizes must be at least 1".into());
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) || !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("clip and lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return bad("Adam betas must lie in [0,1) and eps must be positive".into());
        }
        if self.freeze_lang_layers >= model.lang_layers {
            return bad(format!(
                "freeze_lang_layers {} must be below lang_layers {}",
                self.freeze_lang_layers, model.lang_layers
            ));
        }
        if self.freeze_image_layers >= model.image_layers {
            return bad(format!(
                "freeze_image_layers {} must be below image_layers {}",
                self.freeze_image_layers, model.image_layers
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip: self.clip,
        }
    }

    /// True when the freeze policy lets `name` change.
    pub fn is_trainable(&self, name: &str) -> bool {
        match ParamGroup::of(name) {
            Some(ParamGroup::LangEmbedding) => self.freeze_lang_layers == 0,
            Some(ParamGroup::LangLayer(i)) => i >= self.freeze_lang_layers,
            Some(ParamGroup::ImageProjection) => self.freeze_image_layers == 0,
            Some(ParamGroup::ImageLayer(i)) => i >= self.freeze_image_layers,
            _ => true,
        }
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub total: f64,
    pub l_cls: f64,
    pub l_object: f64,
    pub l_pred: f64,
    pub l_nll: f64,
}

/// Epoch means and the validation score used for checkpoint selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub mode: Mode,
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    /// 1-based epoch the parameters come from.
    pub best_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Validation report of the selected epoch.
    pub validation: EvalReport,
}

/// Parameters, optimizer state and the step counter of one run.
struct Learner<'a> {
    model: &'a ModelConfig,
    cfg: &'a TrainConfig,
    params: ModelParams,
    state: OptimizerState,
    total_steps: usize,
    step: usize,
}

impl Learner<'_> {
    /// One forward/backward/update. `teacher` carries detached teacher taps
    /// aligned with the batch rows; `None` trains on `L_nll` only.
    fn step(
        &mut self,
        batch: &EncodedBatch,
        teacher: Option<(&TapValues, &DistillConfig)>,
    ) -> Result<(LossValues, StepInfo)> {
        let mut g = Graph::new();
        let cfg = self.cfg;
        let p = self.params.bind(&mut g, |n| cfg.is_trainable(n))?;
        let student = forward(&mut g, self.model, &p, &batch.questions, &batch.scenes)?;
        let gold = g.constant(batch.gold.clone())?;
        let (loss, values) = match teacher {
            Some((tv, dcfg)) => {
                let t = tv.to_taps(&mut g)?;
                let lb = total_loss(&mut g, &t, &student, gold, self.model, dcfg)?;
                (lb.total, lb.values(&g))
            }
            None => {
                let l = loss_nll(&mut g, gold, student.answer_probs)?;
                let v = g.value(l).item();
                (
                    l,
                    LossValues {
                        l_nll: v,
                        total: v,
                        ..LossValues::default()
                    },
                )
            }
        };
        if !values.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "step {}: {values:?}",
                self.step
            )));
        }
        g.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &v) in p.iter() {
            if let Some(t) = g.grad(v) {
                grads.insert(name.clone(), t.clone());
            }
        }
        let lr = cosine_lr(cfg.lr, self.step, self.total_steps);
        let info = optimizer_step(&mut self.params, grads, &mut self.state, &cfg.adam(), lr)?;
        self.step += 1;
        Ok((values, info))
    }
}

fn mean_loss(steps: &[StepRecord]) -> f64 {
    if steps.is_empty() {
        0.0
    } else {
        steps.iter().map(|s| s.total).sum::<f64>() / steps.len() as f64
    }
}

fn record(epoch: usize, step: usize, v: LossValues, info: StepInfo) -> StepRecord {
    StepRecord {
        epoch,
        step,
        lr: info.lr,
        grad_norm: info.grad_norm,
        total: v.total,
        l_cls: v.l_cls,
        l_object: v.l_object,
        l_pred: v.l_pred,
        l_nll: v.l_nll,
    }
}

/// Trains a teacher from scratch on English training items with `L_nll`,
/// keeping the epoch with the best English validation accuracy.
pub fn train_teacher(
    ds: &Dataset,
    vocab: &Vocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    model.validate()?;
    cfg.validate(model)?;
    let en = [ENGLISH.to_string()];
    let train = ds.select(Split::Train, &en);
    if train.is_empty() {
        return Err(Error::Data("no English training items".into()));
    }
    let scenes = ds.scene_index();
    let params = ModelParams::init(model, &mut Rng::new(cfg.seed, stream::TEACHER_INIT))?;
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut learner = Learner {
        model,
        cfg,
        params,
        state: OptimizerState::default(),
        total_steps: per_epoch * cfg.epochs,
        step: 0,
    };
    let mut shuffle = Rng::new(cfg.seed, stream::SHUFFLE);
    let mut order = train;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams, EvalReport)> = None;
    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        let first = steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = encode_batch(chunk, &scenes, vocab, model.max_len)?;
            let (v, info) = learner.step(&batch, None)?;
            steps.push(record(epoch, learner.step, v, info));
        }
        let val = evaluate(
            model,
            &learner.params,
            ds,
            vocab,
            Split::Val,
            &en,
            cfg.eval_batch_size,
            1,
        )?;
        let score = val.mean_accuracy();
        log::info!(
            "teacher epoch {epoch}: loss {:.4}, val acc {score:.4}",
            mean_loss(&steps[first..])
        );
        epochs.push(EpochRecord {
            epoch,
            mean_loss: mean_loss(&steps[first..]),
            val_accuracy: score,
        });
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, learner.params.clone(), val));
        }
    }
    let (_, best_epoch, params, validation) = best.expect("at least one epoch");
    Ok(TrainOutput {
        mode: Mode::Teacher,
        params,
        best_epoch,
        steps,
        epochs,
        validation,
    })
}

/// Pairs every training item in `langs` with its English parallel:
/// `(english_item, [item per language])`, in dataset order.
fn parallel_table<'a>(
    ds: &'a Dataset,
    langs: &[String],
) -> Result<Vec<(&'a QAItem, Vec<&'a QAItem>)>> {
    let mut by_key: BTreeMap<(&str, &str), &QAItem> = BTreeMap::new();
    for it in ds.items.iter().filter(|i| i.split == Split::Train) {
        by_key.insert((it.parallel_en_id.as_str(), it.lang.as_str()), it);
    }
    let mut out = Vec::new();
    for en in ds
        .items
        .iter()
        .filter(|i| i.split == Split::Train && i.is_english())
    {
        let mut row = Vec::with_capacity(langs.len());
        for l in langs {
            let it = by_key.get(&(en.id.as_str(), l.as_str())).ok_or_else(|| {
                Error::Data(format!(
                    "training item {} has no parallel in language {l}",
                    en.id
                ))
            })?;
            row.push(*it);
        }
        out.push((en, row));
    }
    Ok(out)
}

/// The language-balanced stream of one epoch: base item `i` contributes its
/// `langs[(i + epoch) % L]` version.
fn epoch_stream<'a>(
    table: &[(&'a QAItem, Vec<&'a QAItem>)],
    epoch: usize,
) -> Vec<(&'a QAItem, &'a QAItem)> {
    table
        .iter()
        .enumerate()
        .map(|(i, (en, row))| (*en, row[(i + epoch) % row.len()]))
        .collect()
}

/// Checks that student and teacher share everything the distillation losses
/// and the warm start compare.
pub fn check_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    let pairs = [
        ("hidden", teacher.hidden, student.hidden),
        ("heads", teacher.heads, student.heads),
        ("cross_layers", teacher.cross_layers, student.cross_layers),
        ("objects", teacher.objects, student.objects),
        ("answer_count", teacher.answer_count, student.answer_count),
        ("roi_dim", teacher.roi_dim, student.roi_dim),
    ];
    for (name, t, s) in pairs {
        if t != s {
            return Err(Error::Config(format!(
                "teacher {name} {t} differs from student {name} {s}"
            )));
        }
    }
    Ok(())
}

/// Initial student parameters under `cfg.student_init`.
pub fn init_student(
    teacher: &ModelParams,
    student: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    let mut p = ModelParams::init(student, &mut Rng::new(cfg.seed, stream::STUDENT_INIT))?;
    match cfg.student_init {
        StudentInit::Random => {}
        StudentInit::Full => {
            p.copy_from(teacher, |_| true)?;
        }
        StudentInit::Teacher => {
            p.copy_from(teacher, |g| {
                !matches!(g, ParamGroup::LangEmbedding | ParamGroup::LangLayer(_))
            })?;
        }
    }
    Ok(p)
}

/// Detached teacher taps for every English training item, keyed by id.
fn teacher_cache(
    teacher_cfg: &ModelConfig,
    teacher: &ModelParams,
    ds: &Dataset,
    vocab: &Vocab,
    batch: usize,
) -> Result<BTreeMap<String, TapValues>> {
    let scenes = ds.scene_index();
    let en = ds.select(Split::Train, &[ENGLISH.to_string()]);
    let mut out = BTreeMap::new();
    for chunk in en.chunks(batch) {
        let b = encode_batch(chunk, &scenes, vocab, teacher_cfg.max_len)?;
        let tv = forward_frozen(teacher_cfg, teacher, &b.questions, &b.scenes)?;
        for (i, it) in chunk.iter().enumerate() {
            out.insert(it.id.clone(), tv.item(i));
        }
    }
    Ok(out)
}

/// Everything a student run needs besides the dataset.
#[derive(Clone, Copy, Debug)]
pub struct StudentSetup<'a> {
    pub teacher_cfg: &'a ModelConfig,
    pub teacher: &'a ModelParams,
    pub student_cfg: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub distill: &'a DistillConfig,
    /// Languages of the training stream.
    pub languages: &'a [String],
}

/// Trains a student on the language-balanced stream of `setup.languages`.
///
/// `Mode::Distill` minimizes the weighted four-part objective against the
/// frozen teacher; `Mode::JointBaseline` minimizes `L_nll` only on the same
/// stream. The epoch with the best mean validation accuracy over the stream
/// languages is kept.
pub fn distill_student(
    ds: &Dataset,
    vocab: &Vocab,
    setup: StudentSetup<'_>,
    mode: Mode,
) -> Result<TrainOutput> {
    let StudentSetup {
        teacher_cfg,
        teacher,
        student_cfg,
        train: cfg,
        distill: dcfg,
        languages,
    } = setup;
    if mode == Mode::Teacher {
        return Err(Error::Config(
            "distill_student needs distill or joint-baseline mode".into(),
        ));
    }
    teacher_cfg.validate()?;
    student_cfg.validate()?;
    cfg.validate(student_cfg)?;
    dcfg.validate(student_cfg)?;
    check_compatible(teacher_cfg, student_cfg)?;
    if languages.is_empty() {
        return Err(Error::Config(
            "student needs at least one training language".into(),
        ));
    }
    let known = ds.languages();
    if let Some(l) = languages.iter().find(|l| !known.contains(l)) {
        return Err(Error::Data(format!(
            "language {l} does not occur in the dataset"
        )));
    }
    let table = parallel_table(ds, languages)?;
    if table.is_empty() {
        return Err(Error::Data("no training items".into()));
    }
    let scenes = ds.scene_index();
    let cache = match mode {
        Mode::Distill => teacher_cache(teacher_cfg, teacher, ds, vocab, cfg.eval_batch_size)?,
        _ => BTreeMap::new(),
    };
    let per_epoch = table.len().div_ceil(cfg.batch_size);
    let mut learner = Learner {
        model: student_cfg,
        cfg,
        params: init_student(teacher, student_cfg, cfg)?,
        state: OptimizerState::default(),
        total_steps: per_epoch * cfg.student_epochs,
        step: 0,
    };
    let mut shuffle = Rng::new(cfg.seed, stream::SHUFFLE);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams, EvalReport)> = None;
    for epoch in 1..=cfg.student_epochs {
        let mut stream = epoch_stream(&table, epoch - 1);
        shuffle.shuffle(&mut stream);
        let first = steps.len();
        for chunk in stream.chunks(cfg.batch_size) {
            let items: Vec<&QAItem> = chunk.iter().map(|(_, it)| *it).collect();
            let batch = encode_batch(&items, &scenes, vocab, student_cfg.max_len)?;
            let (v, info) = if mode == Mode::Distill {
                let rows: Vec<&TapValues> = chunk.iter().map(|(en, _)| &cache[&en.id]).collect();
                let tv = TapValues::concat(&rows)?;
                learner.step(&batch, Some((&tv, dcfg)))?
            } else {
                learner.step(&batch, None)?
            };
            steps.push(record(epoch, learner.step, v, info));
        }
        let val = evaluate(
            student_cfg,
            &learner.params,
            ds,
            vocab,
            Split::Val,
            languages,
            cfg.eval_batch_size,
            1,
        )?;
        let score = val.mean_accuracy();
        log::info!(
            "{} epoch {epoch}: loss {:.4}, val acc {score:.4}",
            mode.name(),
            mean_loss(&steps[first..])
        );
        epochs.push(EpochRecord {
            epoch,
            mean_loss: mean_loss(&steps[first..]),
            val_accuracy: score,
        });
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, learner.params.clone(), val));
        }
    }
    let (_, best_epoch, params, validation) = best.expect("at least one epoch");
    Ok(TrainOutput {
        mode,
        params,
        best_epoch,
        steps,
        epochs,
        validation,
    })
}

/// Ids of the items a student run trains on over `epochs` epochs, in order.
pub fn stream_order(
    ds: &Dataset,
    languages: &[String],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<String>> {
    let table = parallel_table(ds, languages)?;
    let mut shuffle = Rng::new(cfg.seed, stream::SHUFFLE);
    let mut out = Vec::new();
    for epoch in 0..epochs {
        let mut s = epoch_stream(&table, epoch);
        shuffle.shuffle(&mut s);
        out.extend(s.into_iter().map(|(_, it)| it.id.clone()));
    }
    Ok(out)
}
