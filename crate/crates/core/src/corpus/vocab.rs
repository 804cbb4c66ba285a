use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CipherLanguage, COLORS, SHAPES};
use crate::error::{Error, Result};
use crate::model::{CLS_ID, PAD_ID};

pub const CLS: &str = "[CLS]";
pub const PAD: &str = "[PAD]";

/// Token and answer index maps. `[CLS]` is 0 and `[PAD]` is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    tokens: Vec<String>,
    answers: Vec<String>,
    #[serde(skip)]
    token_ids: BTreeMap<String, usize>,
    #[serde(skip)]
    answer_ids: BTreeMap<String, usize>,
}

/// Template words other than shapes and colours.
const FRAME_WORDS: [&str; 10] = [
    "what", "color", "is", "the", "shape", "object", "how", "many", "objects", "there",
];
const ARTICLE: &str = "a";

impl Vocab {
    pub fn new(tokens: Vec<String>, answers: Vec<String>) -> Result<Vocab> {
        if tokens.first().map(String::as_str) != Some(CLS)
            || tokens.get(1).map(String::as_str) != Some(PAD)
        {
            return Err(Error::Data("vocab must start with [CLS], [PAD]".into()));
        }
        let mut v = Vocab {
            tokens,
            answers,
            token_ids: BTreeMap::new(),
            answer_ids: BTreeMap::new(),
        };
        v.reindex()?;
        Ok(v)
    }

    fn reindex(&mut self) -> Result<()> {
        self.token_ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.answer_ids = self
            .answers
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if self.token_ids.len() != self.tokens.len() || self.answer_ids.len() != self.answers.len()
        {
            return Err(Error::Data("vocab entries must be unique".into()));
        }
        Ok(())
    }

    /// The closed shapes-world vocabulary for `k` objects: English words,
    /// every cipher prefix and every stem.
    pub fn shapes_world(k: usize) -> Vocab {
        let mut english: BTreeSet<String> = FRAME_WORDS.iter().map(|s| s.to_string()).collect();
        english.insert(ARTICLE.into());
        english.extend(SHAPES.iter().map(|s| s.to_string()));
        english.extend(COLORS.iter().map(|s| s.to_string()));
        let mut tokens = vec![CLS.to_string(), PAD.to_string()];
        tokens.extend(english.iter().cloned());
        tokens.extend(CipherLanguage::all().iter().map(CipherLanguage::prefix));
        tokens.extend(english.iter().map(|w| CipherLanguage::stem(w)));
        Vocab::new(tokens, answer_list(k)).expect("closed vocabulary is unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn answer_count(&self) -> usize {
        self.answers.len()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn answer(&self, i: usize) -> &str {
        &self.answers[i]
    }

    pub fn answer_index(&self, a: &str) -> Result<usize> {
        self.answer_ids
            .get(a)
            .copied()
            .ok_or_else(|| Error::Data(format!("answer '{a}' is not in the answer vocabulary")))
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.token_ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown token '{token}'")))
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Inverse of [`encode`](Self::encode) after batching: drops `[CLS]`
    /// and padding.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != CLS_ID && i != PAD_ID)
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Vocab> {
        let mut v: Vocab = serde_json::from_str(s)?;
        v.reindex()?;
        Ok(v)
    }
}

/// Colours, shapes, counts `0..=k`, then yes/no.
pub fn answer_list(k: usize) -> Vec<String> {
    let mut a: Vec<String> = COLORS.iter().map(|s| s.to_string()).collect();
    a.extend(SHAPES.iter().map(|s| s.to_string()));
    a.extend((0..=k).map(|n| n.to_string()));
    a.push("yes".into());
    a.push("no".into());
    a
}
