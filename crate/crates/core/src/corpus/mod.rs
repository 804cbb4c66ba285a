//! Shapes-world: a closed-vocabulary multilingual VQA task.
//!
//! Scenes hold `k` coloured shapes. English questions come from four
//! templates; every other language is a deterministic cipher of the English
//! question, so parallel items share their gold answer and gold alignments are
//! known exactly.

mod cipher;
mod io;
mod synth;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cipher::{CipherLanguage, OrderRule};
pub use io::{read_jsonl, write_jsonl};
pub use synth::{oracle_pairs, synth_shapes_world, DataConfig};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::model::{QuestionBatch, SceneBatch};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SIZES: [&str; 2] = ["small", "large"];
/// `(x, y, w, h)`
pub const BOX_DIM: usize = 4;
/// Width of the one-hot and box blocks at the front of every RoI vector.
pub const ROI_FEATURES: usize = SHAPES.len() + COLORS.len() + SIZES.len() + BOX_DIM;

pub const ENGLISH: &str = "en";

/// Token-level tag consumed by the code-mixer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    #[serde(rename = "NE-PER")]
    NePer,
    #[serde(rename = "NE-LOC")]
    NeLoc,
    #[serde(rename = "NE-ORG")]
    NeOrg,
    #[serde(rename = "NP")]
    Np,
    #[serde(rename = "ADJ")]
    Adj,
    #[serde(rename = "O")]
    O,
}

impl Tag {
    /// Substitution tier: named entities first, then noun phrases, then
    /// adjectives. `None` for untagged tokens.
    pub fn tier(self) -> Option<u8> {
        match self {
            Tag::NePer | Tag::NeLoc | Tag::NeOrg => Some(0),
            Tag::Np => Some(1),
            Tag::Adj => Some(2),
            Tag::O => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Which language a code-mixed token comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Matrix,
    Embedded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Color,
    Shape,
    Count,
    #[serde(rename = "yes/no")]
    YesNo,
}

impl AnswerType {
    pub const ALL: [AnswerType; 4] = [
        AnswerType::Color,
        AnswerType::Shape,
        AnswerType::Count,
        AnswerType::YesNo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnswerType::Color => "color",
            AnswerType::Shape => "shape",
            AnswerType::Count => "count",
            AnswerType::YesNo => "yes/no",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub shape: String,
    pub color: String,
    pub size: String,
    /// Centre x, centre y, width, height, all in `[0,1]`.
    pub bbox: [f64; 4],
    pub roi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAItem {
    pub id: String,
    pub lang: String,
    pub tokens: Vec<String>,
    /// One tag per token for English items, empty otherwise.
    pub tags: Vec<Tag>,
    pub image_id: String,
    pub answer: String,
    pub answer_type: AnswerType,
    pub parallel_en_id: String,
    /// For cipher items, the English token index each token translates.
    pub gold_alignment: Vec<Option<usize>>,
    pub split: Split,
    /// Per-token origin for code-mixed items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Vec<Origin>>,
}

impl QAItem {
    pub fn is_english(&self) -> bool {
        self.lang == ENGLISH
    }
}

/// Items and scenes joined by `image_id`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub items: Vec<QAItem>,
}

pub const ITEMS_FILE: &str = "items.jsonl";
pub const SCENES_FILE: &str = "scenes.jsonl";

impl Dataset {
    /// Checks that every item's scene and English parallel exist and that
    /// parallel items agree on the answer.
    pub fn validate(&self) -> Result<()> {
        let scene_ids: BTreeSet<&str> = self.scenes.iter().map(|s| s.image_id.as_str()).collect();
        let dangling: BTreeSet<&str> = self
            .items
            .iter()
            .map(|i| i.image_id.as_str())
            .filter(|id| !scene_ids.contains(id))
            .collect();
        if !dangling.is_empty() {
            let ids: Vec<&str> = dangling.into_iter().collect();
            return Err(Error::Data(format!(
                "items reference unknown image ids: {}",
                ids.join(", ")
            )));
        }
        let mut seen = BTreeSet::new();
        for it in &self.items {
            if !seen.insert(it.id.as_str()) {
                return Err(Error::Data(format!("duplicate item id {}", it.id)));
            }
        }
        let english: BTreeMap<&str, &QAItem> = self
            .items
            .iter()
            .filter(|i| i.is_english())
            .map(|i| (i.id.as_str(), i))
            .collect();
        for it in &self.items {
            let en = english.get(it.parallel_en_id.as_str()).ok_or_else(|| {
                Error::Data(format!(
                    "item {} has no English parallel {}",
                    it.id, it.parallel_en_id
                ))
            })?;
            if en.answer != it.answer || en.image_id != it.image_id {
                return Err(Error::Data(format!(
                    "item {} disagrees with its English parallel",
                    it.id
                )));
            }
            if it.is_english() && it.tags.len() != it.tokens.len() {
                return Err(Error::Data(format!(
                    "item {} has {} tags for {} tokens",
                    it.id,
                    it.tags.len(),
                    it.tokens.len()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(SCENES_FILE), &self.scenes)?;
        write_jsonl(&dir.join(ITEMS_FILE), &self.items)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Dataset> {
        let ds = Dataset {
            scenes: read_jsonl(&dir.join(SCENES_FILE))?,
            items: read_jsonl(&dir.join(ITEMS_FILE))?,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn scene_index(&self) -> BTreeMap<&str, &Scene> {
        self.scenes
            .iter()
            .map(|s| (s.image_id.as_str(), s))
            .collect()
    }

    pub fn item_index(&self) -> BTreeMap<&str, &QAItem> {
        self.items.iter().map(|i| (i.id.as_str(), i)).collect()
    }

    /// Language ids in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for it in &self.items {
            if !out.contains(&it.lang) {
                out.push(it.lang.clone());
            }
        }
        out
    }

    pub fn select<'a>(&'a self, split: Split, langs: &[String]) -> Vec<&'a QAItem> {
        self.items
            .iter()
            .filter(|i| i.split == split && langs.contains(&i.lang))
            .collect()
    }

    /// Objects per scene, checked to be uniform.
    pub fn objects_per_scene(&self) -> Result<usize> {
        let k = self.scenes.first().map(|s| s.objects.len()).unwrap_or(0);
        if self.scenes.iter().any(|s| s.objects.len() != k) {
            return Err(Error::Data("scenes have differing object counts".into()));
        }
        Ok(k)
    }

    pub fn roi_dim(&self) -> usize {
        self.scenes
            .first()
            .and_then(|s| s.objects.first())
            .map(|o| o.roi.len())
            .unwrap_or(0)
    }
}

/// Tensors for one batch of items.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub questions: QuestionBatch,
    pub scenes: SceneBatch,
    /// `(B, |A|)` one-hot gold answers.
    pub gold: Tensor,
}

/// Tokens to ids (with `[CLS]` and padding), scenes to RoI/box tensors and
/// answers to one-hot targets.
pub fn encode_batch(
    items: &[&QAItem],
    scenes: &BTreeMap<&str, &Scene>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedBatch> {
    if items.is_empty() {
        return Err(Error::Data("cannot encode an empty batch".into()));
    }
    let mut seqs = Vec::with_capacity(items.len());
    for it in items {
        seqs.push(vocab.encode(&it.tokens)?);
    }
    let langs = items.iter().map(|i| i.lang.clone()).collect();
    let questions = QuestionBatch::from_sequences(&seqs, langs, max_len)?;

    let first = scenes
        .get(items[0].image_id.as_str())
        .ok_or_else(|| Error::Data(format!("unknown image id {}", items[0].image_id)))?;
    let k = first.objects.len();
    let dr = first.objects.first().map(|o| o.roi.len()).unwrap_or(0);
    let mut roi = Vec::with_capacity(items.len() * k * dr);
    let mut bbox = Vec::with_capacity(items.len() * k * 4);
    let mut gold = Tensor::zeros(&[items.len(), vocab.answer_count()]);
    for (b, it) in items.iter().enumerate() {
        let s = scenes
            .get(it.image_id.as_str())
            .ok_or_else(|| Error::Data(format!("unknown image id {}", it.image_id)))?;
        if s.objects.len() != k {
            return Err(Error::Data(format!(
                "scene {} has {} objects, expected {k}",
                s.image_id,
                s.objects.len()
            )));
        }
        for o in &s.objects {
            if o.roi.len() != dr {
                return Err(Error::Data(format!(
                    "scene {} has ragged RoI vectors",
                    s.image_id
                )));
            }
            roi.extend_from_slice(&o.roi);
            bbox.extend_from_slice(&o.bbox);
        }
        let a = vocab.answer_index(&it.answer)?;
        gold.data_mut()[b * vocab.answer_count() + a] = 1.0;
    }
    Ok(EncodedBatch {
        questions,
        scenes: SceneBatch {
            roi: Tensor::new(vec![items.len(), k, dr], roi)?,
            bbox: Tensor::new(vec![items.len(), k, BOX_DIM], bbox)?,
        },
        gold,
    })
}
