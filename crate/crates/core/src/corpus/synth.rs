use serde::{Deserialize, Serialize};

use super::{
    AnswerType, CipherLanguage, Dataset, QAItem, Scene, SceneObject, Split, Tag, COLORS, ENGLISH,
    ROI_FEATURES, SHAPES, SIZES,
};
use crate::codemix::{codemix_corpus, AlignerConfig, ParallelPair};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Generation settings for a shapes-world dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Objects per scene (k).
    pub objects: usize,
    pub roi_dim: usize,
    /// Standard deviation of the RoI feature noise.
    pub noise: f64,
    /// Share of training questions held out for validation.
    pub val_fraction: f64,
    /// Questions sampled per scene; 0 keeps every valid question.
    pub questions_per_scene: usize,
    /// Cipher languages used for student training.
    pub languages: Vec<String>,
    /// Cipher languages only used for zero-shot evaluation.
    pub heldout: Vec<String>,
    /// Emit an `en-<xx>` code-mixed variant per training language.
    pub codemix: bool,
    pub aligner: AlignerConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_scenes: 1000,
            test_scenes: 40,
            objects: 6,
            roi_dim: 32,
            noise: 0.05,
            val_fraction: 0.05,
            questions_per_scene: 0,
            languages: ["xa", "xb", "xc", "xd"].map(String::from).to_vec(),
            heldout: ["xe", "xf"].map(String::from).to_vec(),
            codemix: true,
            aligner: AlignerConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects < 2 {
            return Err(Error::Config("data: scenes need at least 2 objects".into()));
        }
        if self.roi_dim < ROI_FEATURES {
            return Err(Error::Config(format!(
                "data: roi_dim {} cannot hold the {ROI_FEATURES} shape/colour/size/box features",
                self.roi_dim
            )));
        }
        if self.train_scenes == 0 {
            return Err(Error::Config("data: train_scenes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(self.noise >= 0.0 && self.noise.is_finite())
        {
            return Err(Error::Config(
                "data: val_fraction must lie in [0,1) and noise must be nonnegative".into(),
            ));
        }
        for l in self.languages.iter().chain(&self.heldout) {
            CipherLanguage::get(l)?;
        }
        if self.heldout.iter().any(|l| self.languages.contains(l)) {
            return Err(Error::Config(
                "data: held-out languages must not be training languages".into(),
            ));
        }
        self.aligner.validate()
    }

    /// Code-mixed language ids, one per training language.
    pub fn codemix_languages(&self) -> Vec<String> {
        if !self.codemix {
            return Vec::new();
        }
        self.languages
            .iter()
            .map(|l| format!("{ENGLISH}-{l}"))
            .collect()
    }

    /// Languages the student trains on.
    pub fn student_languages(&self) -> Vec<String> {
        let mut v = self.languages.clone();
        v.extend(self.codemix_languages());
        v
    }
}

fn make_scene(id: usize, cfg: &DataConfig, rng: &mut Rng) -> Scene {
    let objects = (0..cfg.objects)
        .map(|_| {
            let s = rng.below(SHAPES.len());
            let c = rng.below(COLORS.len());
            let z = rng.below(SIZES.len());
            let side = if z == 0 { 0.1 } else { 0.2 };
            let x = rng.range(side / 2.0, 1.0 - side / 2.0);
            let y = rng.range(side / 2.0, 1.0 - side / 2.0);
            let bbox = [x, y, side, side];
            let mut roi = vec![0.0; cfg.roi_dim];
            roi[s] = 1.0;
            roi[SHAPES.len() + c] = 1.0;
            roi[SHAPES.len() + COLORS.len() + z] = 1.0;
            roi[ROI_FEATURES - 4..ROI_FEATURES].copy_from_slice(&bbox);
            for v in &mut roi[..ROI_FEATURES] {
                *v += rng.normal(0.0, cfg.noise);
            }
            SceneObject {
                shape: SHAPES[s].into(),
                color: COLORS[c].into(),
                size: SIZES[z].into(),
                bbox,
                roi,
            }
        })
        .collect();
    Scene {
        image_id: format!("img{id:05}"),
        objects,
    }
}

struct Question {
    tokens: Vec<String>,
    tags: Vec<Tag>,
    answer: String,
    answer_type: AnswerType,
}

fn question(
    words: &str,
    tagged: usize,
    tag: Tag,
    answer: String,
    answer_type: AnswerType,
) -> Question {
    let tokens: Vec<String> = words.split(' ').map(String::from).collect();
    let tags = (0..tokens.len())
        .map(|i| if i == tagged { tag } else { Tag::O })
        .collect();
    Question {
        tokens,
        tags,
        answer,
        answer_type,
    }
}

/// Every template instance whose answer is unambiguous in `scene`.
fn questions(scene: &Scene) -> Vec<Question> {
    let mut out = Vec::new();
    for shape in SHAPES {
        let mut colors: Vec<&str> = scene
            .objects
            .iter()
            .filter(|o| o.shape == shape)
            .map(|o| o.color.as_str())
            .collect();
        colors.sort_unstable();
        colors.dedup();
        if let [only] = colors[..] {
            out.push(question(
                &format!("what color is the {shape}"),
                4,
                Tag::Np,
                only.into(),
                AnswerType::Color,
            ));
        }
    }
    for color in COLORS {
        let mut shapes: Vec<&str> = scene
            .objects
            .iter()
            .filter(|o| o.color == color)
            .map(|o| o.shape.as_str())
            .collect();
        shapes.sort_unstable();
        shapes.dedup();
        if let [only] = shapes[..] {
            out.push(question(
                &format!("what shape is the {color} object"),
                4,
                Tag::Adj,
                only.into(),
                AnswerType::Shape,
            ));
        }
    }
    for color in COLORS {
        let n = scene.objects.iter().filter(|o| o.color == color).count();
        out.push(question(
            &format!("how many {color} objects"),
            2,
            Tag::Adj,
            n.to_string(),
            AnswerType::Count,
        ));
    }
    for shape in SHAPES {
        let yes = scene.objects.iter().any(|o| o.shape == shape);
        let a = if yes { "yes" } else { "no" };
        out.push(question(
            &format!("is there a {shape}"),
            3,
            Tag::Np,
            a.into(),
            AnswerType::YesNo,
        ));
    }
    out
}

/// Generates scenes, English questions, cipher translations and code-mixed
/// variants. The output is a pure function of `cfg`.
pub fn synth_shapes_world(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed, stream::DATA);
    let total_scenes = cfg.train_scenes + cfg.test_scenes;
    let scenes: Vec<Scene> = (0..total_scenes)
        .map(|i| make_scene(i, cfg, &mut rng))
        .collect();

    let mut english = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let mut qs = questions(scene);
        if cfg.questions_per_scene > 0 && qs.len() > cfg.questions_per_scene {
            let mut idx: Vec<usize> = (0..qs.len()).collect();
            rng.shuffle(&mut idx);
            let mut keep = idx[..cfg.questions_per_scene].to_vec();
            keep.sort_unstable();
            let mut all: Vec<Option<Question>> = qs.into_iter().map(Some).collect();
            qs = keep
                .into_iter()
                .map(|i| all[i].take().expect("indices are distinct"))
                .collect();
        }
        let split = if si < cfg.train_scenes {
            Split::Train
        } else {
            Split::Test
        };
        for q in qs {
            let id = format!("q{:06}", english.len());
            english.push(QAItem {
                parallel_en_id: id.clone(),
                id,
                lang: ENGLISH.into(),
                tokens: q.tokens,
                tags: q.tags,
                image_id: scene.image_id.clone(),
                answer: q.answer,
                answer_type: q.answer_type,
                gold_alignment: Vec::new(),
                split,
                origin: None,
            });
        }
    }

    let train_idx: Vec<usize> = (0..english.len())
        .filter(|&i| english[i].split == Split::Train)
        .collect();
    let n_val = (cfg.val_fraction * train_idx.len() as f64).round() as usize;
    let mut order = train_idx;
    Rng::new(cfg.seed, stream::SPLIT).shuffle(&mut order);
    for &i in &order[..n_val] {
        english[i].split = Split::Val;
    }

    let mut per_base: Vec<Vec<QAItem>> = english.iter().map(|e| vec![e.clone()]).collect();
    for lang in cfg.languages.iter().chain(&cfg.heldout) {
        let cipher = CipherLanguage::get(lang)?;
        for (b, en) in english.iter().enumerate() {
            let (tokens, gold) = cipher.translate(&en.tokens);
            per_base[b].push(QAItem {
                id: format!("{}.{lang}", en.id),
                lang: lang.clone(),
                tokens,
                tags: Vec::new(),
                gold_alignment: gold,
                origin: None,
                ..en.clone()
            });
        }
    }

    if cfg.codemix {
        for lang in &cfg.languages {
            let cipher = CipherLanguage::get(lang)?;
            let pairs: Vec<ParallelPair> = english
                .iter()
                .map(|en| {
                    let (xx, gold) = cipher.translate(&en.tokens);
                    ParallelPair {
                        lang: lang.clone(),
                        en_tokens: en.tokens.clone(),
                        en_tags: en.tags.clone(),
                        xx_tokens: xx,
                        gold: Some(gold),
                    }
                })
                .collect();
            let (_, mixed) = codemix_corpus(&pairs, &cfg.aligner)?;
            let cm_lang = format!("{ENGLISH}-{lang}");
            for (b, (en, r)) in english.iter().zip(mixed).enumerate() {
                per_base[b].push(QAItem {
                    id: format!("{}.{cm_lang}", en.id),
                    lang: cm_lang.clone(),
                    tokens: r.tokens,
                    tags: Vec::new(),
                    gold_alignment: Vec::new(),
                    origin: Some(r.origin),
                    ..en.clone()
                });
            }
        }
    }

    let ds = Dataset {
        scenes,
        items: per_base.into_iter().flatten().collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Random sentences over a bijective one-token lexicon `w<i> -> f<i>`, with
/// the foreign side in reverse word order and gold links attached.
pub fn oracle_pairs(count: usize, lexicon: usize, seed: u64) -> Vec<ParallelPair> {
    let mut rng = Rng::new(seed, stream::FIXTURE);
    (0..count)
        .map(|_| {
            let len = 3 + rng.below(6);
            let words: Vec<usize> = (0..len).map(|_| rng.below(lexicon)).collect();
            ParallelPair {
                lang: "xr".into(),
                en_tokens: words.iter().map(|w| format!("w{w}")).collect(),
                en_tags: vec![Tag::O; len],
                xx_tokens: words.iter().rev().map(|w| format!("f{w}")).collect(),
                gold: Some((0..len).map(|j| Some(len - 1 - j)).collect()),
            }
        })
        .collect()
}

#[cfg(test)]
pub(super) fn questions_for_test(scene: &Scene) -> std::collections::BTreeMap<String, String> {
    questions(scene)
        .into_iter()
        .map(|q| (q.tokens.join(" "), q.answer))
        .collect()
}
