//! Token vocabulary with reserved padding and unknown ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Bijection between ids >= 2 and distinct retained tokens. Out-of-vocabulary
/// tokens map to [`UNK`] at lookup time only; raw token strings are kept
/// everywhere else so string scoring is unaffected.
#[derive(Debug, Clone, Serialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Shadow {
            id_to_token: Vec<String>,
        }
        let shadow = Shadow::deserialize(d)?;
        let mut v = Vocab {
            id_to_token: shadow.id_to_token,
            token_to_id: HashMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }
}

impl Vocab {
    /// Retain tokens seen at least `min_count` times, in first-seen order.
    pub fn build<'a>(token_streams: impl Iterator<Item = &'a [String]>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for stream in token_streams {
            for tok in stream {
                let c = counts.entry(tok).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        for tok in order {
            if counts[tok] >= min_count {
                id_to_token.push(tok.to_string());
            }
        }
        let mut v = Vocab {
            id_to_token,
            token_to_id: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}
