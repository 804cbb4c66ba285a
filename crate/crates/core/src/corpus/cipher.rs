use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderRule {
    Identity,
    Reverse,
    /// First word moves to the end.
    RotateByOne,
}

impl OrderRule {
    /// Source word index for each output word position.
    pub fn order(self, n: usize) -> Vec<usize> {
        match self {
            OrderRule::Identity => (0..n).collect(),
            OrderRule::Reverse => (0..n).rev().collect(),
            OrderRule::RotateByOne => (1..n).chain((n > 0).then_some(0)).collect(),
        }
    }
}

/// A synthetic foreign language: every English word becomes a language
/// prefix token followed by a stem shared by all cipher languages, and words
/// are reordered by a fixed rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherLanguage {
    pub id: String,
    pub order: OrderRule,
}

const KNOWN: [(&str, OrderRule); 6] = [
    ("xa", OrderRule::Identity),
    ("xb", OrderRule::Reverse),
    ("xc", OrderRule::RotateByOne),
    ("xd", OrderRule::Identity),
    ("xe", OrderRule::Reverse),
    ("xf", OrderRule::RotateByOne),
];

impl CipherLanguage {
    pub fn get(id: &str) -> Result<CipherLanguage> {
        KNOWN
            .iter()
            .find(|(k, _)| *k == id)
            .map(|&(k, order)| CipherLanguage {
                id: k.to_string(),
                order,
            })
            .ok_or_else(|| {
                let ids: Vec<&str> = KNOWN.iter().map(|(k, _)| *k).collect();
                Error::Config(format!(
                    "unknown cipher language '{id}' (known: {})",
                    ids.join(", ")
                ))
            })
    }

    pub fn all() -> Vec<CipherLanguage> {
        KNOWN
            .iter()
            .map(|&(k, order)| CipherLanguage {
                id: k.to_string(),
                order,
            })
            .collect()
    }

    pub fn prefix(&self) -> String {
        format!("{}~", self.id)
    }

    /// Shared stem of an English word: its letters reversed, tagged with `_`.
    pub fn stem(word: &str) -> String {
        let mut s: String = word.chars().rev().collect();
        s.push('_');
        s
    }

    /// Translated tokens and, per token, the English index it came from.
    pub fn translate(&self, en: &[String]) -> (Vec<String>, Vec<Option<usize>>) {
        let prefix = self.prefix();
        let mut tokens = Vec::with_capacity(2 * en.len());
        let mut gold = Vec::with_capacity(2 * en.len());
        for i in self.order.order(en.len()) {
            tokens.push(prefix.clone());
            tokens.push(Self::stem(&en[i]));
            gold.push(Some(i));
            gold.push(Some(i));
        }
        (tokens, gold)
    }
}
