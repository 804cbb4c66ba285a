//! Distillation objectives.
//!
//! Teacher taps enter every loss as graph constants, so no gradient can reach
//! teacher parameters. Reductions sum over taps and answers and average over
//! the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TapKey, Taps};
use crate::tensor::{Graph, Var};

/// Which taps to match and how to weight the four objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// `(layer, head)` pairs, 1-based. `None` selects the default set for the
    /// model.
    pub tap_set: Option<Vec<TapKey>>,
    pub w_cls: f64,
    pub w_object: f64,
    pub w_pred: f64,
    pub w_nll: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tap_set: None,
            w_cls: 1.0,
            w_object: 1.0,
            w_pred: 1.0,
            w_nll: 1.0,
        }
    }
}

/// A single objective that can be switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Cls,
    Object,
    Pred,
    Nll,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::Cls,
        Objective::Object,
        Objective::Pred,
        Objective::Nll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Cls => "cls",
            Objective::Object => "object",
            Objective::Pred => "pred",
            Objective::Nll => "nll",
        }
    }

    pub fn parse(s: &str) -> Result<Objective> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown objective '{s}' (expected cls, object, pred or nll)"
                ))
            })
    }
}

impl DistillConfig {
    /// Every `(layer, head)` pair, or `{1,4}×{1,4,5}` when the model is at
    /// least that deep and wide.
    pub fn default_taps(model: &ModelConfig) -> Vec<TapKey> {
        if model.cross_layers >= 4 && model.heads >= 5 {
            let mut v = Vec::new();
            for l in [1, 4] {
                for h in [1, 4, 5] {
                    v.push(TapKey::new(l, h));
                }
            }
            return v;
        }
        let mut v = Vec::new();
        for l in 1..=model.cross_layers {
            for h in 1..=model.heads {
                v.push(TapKey::new(l, h));
            }
        }
        v
    }

    pub fn taps(&self, model: &ModelConfig) -> Vec<TapKey> {
        self.tap_set
            .clone()
            .unwrap_or_else(|| Self::default_taps(model))
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let taps = self.taps(model);
        if taps.is_empty() {
            return Err(Error::Config("distill: tap_set is empty".into()));
        }
        for t in &taps {
            if t.layer == 0 || t.layer > model.cross_layers || t.head == 0 || t.head > model.heads {
                return Err(Error::Config(format!(
                    "distill: tap ({}, {}) outside 1..={} x 1..={}",
                    t.layer, t.head, model.cross_layers, model.heads
                )));
            }
        }
        for (n, w) in [
            ("w_cls", self.w_cls),
            ("w_object", self.w_object),
            ("w_pred", self.w_pred),
            ("w_nll", self.w_nll),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "distill: {n} must be a nonnegative number"
                )));
            }
        }
        Ok(())
    }

    pub fn weight(&self, o: Objective) -> f64 {
        match o {
            Objective::Cls => self.w_cls,
            Objective::Object => self.w_object,
            Objective::Pred => self.w_pred,
            Objective::Nll => self.w_nll,
        }
    }

    /// The same config with one objective removed.
    pub fn ablate(&self, o: Objective) -> DistillConfig {
        let mut c = self.clone();
        match o {
            Objective::Cls => c.w_cls = 0.0,
            Objective::Object => c.w_object = 0.0,
            Objective::Pred => c.w_pred = 0.0,
            Objective::Nll => c.w_nll = 0.0,
        }
        c
    }
}

/// The four objectives and their weighted sum, as scalar graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_cls: Var,
    pub l_object: Var,
    pub l_pred: Var,
    pub l_nll: Var,
    pub total: Var,
}

/// Plain values of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_cls: f64,
    pub l_object: f64,
    pub l_pred: f64,
    pub l_nll: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            l_cls: g.value(self.l_cls).item(),
            l_object: g.value(self.l_object).item(),
            l_pred: g.value(self.l_pred).item(),
            l_nll: g.value(self.l_nll).item(),
            total: g.value(self.total).item(),
        }
    }
}

fn sum_all(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Config("distill: tap_set is empty".into()))?;
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Σ over taps of the mean squared difference between per-head `[CLS]`
/// contexts.
pub fn loss_cls(g: &mut Graph, teacher: &Taps, student: &Taps, taps: &[TapKey]) -> Result<Var> {
    let mut terms = Vec::with_capacity(taps.len());
    for key in taps {
        let missing = || Error::Config(format!("missing CLS tap ({}, {})", key.layer, key.head));
        let t = *teacher.cls.get(key).ok_or_else(missing)?;
        let s = *student.cls.get(key).ok_or_else(missing)?;
        terms.push(g.mse(s, t)?);
    }
    sum_all(g, terms)
}

/// Σ over taps of the mean squared difference between raw `[CLS]`→object
/// scores.
pub fn loss_object(g: &mut Graph, teacher: &Taps, student: &Taps, taps: &[TapKey]) -> Result<Var> {
    let mut terms = Vec::with_capacity(taps.len());
    for key in taps {
        let t = teacher.z_tap(g, *key)?;
        let s = student.z_tap(g, *key)?;
        terms.push(g.mse(s, t)?);
    }
    sum_all(g, terms)
}

fn bce_batch_mean(g: &mut Graph, probs: Var, targets: Var) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("bce", &shape, g.shape(targets)));
    }
    let s = g.bce_sum(probs, targets)?;
    g.scale(s, 1.0 / shape[0] as f64)
}

/// Binary cross-entropy of student probabilities against teacher
/// probabilities.
pub fn loss_pred(g: &mut Graph, teacher_probs: Var, student_probs: Var) -> Result<Var> {
    bce_batch_mean(g, student_probs, teacher_probs)
}

/// Binary cross-entropy against gold targets in `[0,1]`.
pub fn loss_nll(g: &mut Graph, gold: Var, student_probs: Var) -> Result<Var> {
    if g.value(gold)
        .data()
        .iter()
        .any(|y| !(0.0..=1.0).contains(y))
    {
        return Err(Error::Data("gold targets must lie in [0,1]".into()));
    }
    bce_batch_mean(g, student_probs, gold)
}

/// All four objectives and `w_cls·L_cls + w_object·L_object + w_pred·L_pred + w_nll·L_nll`.
pub fn total_loss(
    g: &mut Graph,
    teacher: &Taps,
    student: &Taps,
    gold: Var,
    model: &ModelConfig,
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    cfg.validate(model)?;
    let taps = cfg.taps(model);
    let l_cls = loss_cls(g, teacher, student, &taps)?;
    let l_object = loss_object(g, teacher, student, &taps)?;
    let l_pred = loss_pred(g, teacher.answer_probs, student.answer_probs)?;
    let l_nll = loss_nll(g, gold, student.answer_probs)?;
    let parts = [
        (l_cls, cfg.w_cls),
        (l_object, cfg.w_object),
        (l_pred, cfg.w_pred),
        (l_nll, cfg.w_nll),
    ];
    let mut weighted = Vec::with_capacity(4);
    for (v, w) in parts {
        weighted.push(g.scale(v, w)?);
    }
    let total = sum_all(g, weighted)?;
    Ok(LossBreakdown {
        l_cls,
        l_object,
        l_pred,
        l_nll,
        total,
    })
}
