use std::collections::{BTreeSet, HashMap};

use crate::score::{Alignment, Feature, Sex, Side, Site, GRADE_WORDS};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 96;

const PUNCTUATION: [char; 3] = ['.', ',', ':'];

/// Fixed-length token ids, right-padded with [`PAD`].
pub type TokenSequence = Vec<u32>;

/// Lowercased words with `.`, `,` and `:` split off as their own tokens.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if PUNCTUATION.contains(&ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Closed vocabulary of the caption grammar plus `<pad>` and `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(words: I) -> Self {
        let unique: BTreeSet<String> = words.into_iter().collect();
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(unique.into_iter().filter(|w| w != "<pad>" && w != "<unk>"));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index }
    }

    /// Every terminal the caption grammar can emit.
    pub fn grammar() -> Self {
        let mut fragments: Vec<String> = vec![
            "osteoarthritis .,:".into(),
            "in compartment sign of no".into(),
            "image shows the knee it and is".into(),
            "the patient is a year old".into(),
        ];
        fragments.extend(GRADE_WORDS.iter().map(|w| w.to_string()));
        for f in Feature::ALL {
            fragments.push(f.title().into());
            fragments.push(f.noun().into());
        }
        fragments.extend(Site::ALL.iter().map(|s| s.phrase()));
        fragments.extend([Side::Left, Side::Right].iter().map(|s| s.word().to_string()));
        fragments.extend([Sex::Male, Sex::Female].iter().map(|s| s.word().to_string()));
        fragments.extend([Alignment::Varus, Alignment::Valgus].iter().map(|a| a.word().to_string()));
        fragments.extend((0..=120).map(|age: u32| age.to_string()));
        Self::from_tokens(fragments.iter().flat_map(|f| tokenize_words(f)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token ids of `text`, truncated or right-padded to exactly `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = tokenize_words(text).iter().take(max_len).map(|w| vocab.id(w)).collect();
    ids.resize(max_len, PAD);
    ids
}
