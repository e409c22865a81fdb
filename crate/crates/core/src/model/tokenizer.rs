use std::collections::{BTreeSet, HashMap};

use crate::corpus::{CLOSED_TEMPLATES, OPEN_TEMPLATE};
use crate::error::{Error, Result};
use crate::geometry::ANATOMIES;

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const SEG: &str = "<SEG>";

const PUNCT: [char; 3] = ['.', ',', '?'];

/// Sentence fragments the model has to produce besides the question
/// templates.
const RESPONSE_TEXT: [&str; 5] = [
    "The location of the is at <SEG>.",
    "Yes",
    "No",
    "No abnormalities are present in the .",
    "The suffers from , and .",
];

/// Closed word-level vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits on whitespace and peels trailing punctuation into separate tokens.
fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let trimmed = word.trim_end_matches(PUNCT);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        out.extend(word[trimmed.len()..].chars().map(|c| c.to_string()));
    }
    out
}

impl Tokenizer {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::InvalidConfig("duplicate vocabulary entry".into()));
        }
        for special in [BOS, EOS, SEG] {
            if !index.contains_key(special) {
                return Err(Error::InvalidConfig(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Every word the question/answer templates can produce for the given
    /// disease labels, plus the special tokens.
    pub fn standard_words(disease_labels: &[String]) -> Vec<String> {
        let mut words: BTreeSet<String> = BTreeSet::new();
        let mut texts: Vec<String> = RESPONSE_TEXT.iter().map(|s| s.to_string()).collect();
        texts.extend(CLOSED_TEMPLATES.iter().map(|s| s.replace("{anatomy}", "").replace("{disease}", "")));
        texts.push(OPEN_TEMPLATE.replace("{anatomy}", ""));
        texts.extend(ANATOMIES.iter().map(|s| s.to_string()));
        texts.extend(disease_labels.iter().cloned());
        for t in &texts {
            words.extend(split_words(t));
        }
        for p in PUNCT {
            words.insert(p.to_string());
        }
        for special in [BOS, EOS, SEG] {
            words.remove(special);
        }
        let mut out = vec![BOS.to_string(), EOS.to_string(), SEG.to_string()];
        out.extend(words);
        out
    }

    pub fn standard(disease_labels: &[String]) -> Self {
        Self::new(Self::standard_words(disease_labels)).expect("standard vocabulary is well formed")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn seg(&self) -> usize {
        self.index[SEG]
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(Error::UnknownWord(w)))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id);
            let is_punct = w.len() == 1 && w.chars().all(|c| PUNCT.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_closed, render_open, SceneConfig};

    fn tok() -> Tokenizer {
        Tokenizer::standard(&SceneConfig::default().disease_labels())
    }

    #[test]
    fn seg_is_a_single_special() {
        let t = tok();
        assert_eq!(t.tokenize("<SEG>").unwrap(), vec![t.seg()]);
        assert_eq!(t.tokenize("<SEG>.").unwrap(), vec![t.seg(), t.id(".").unwrap()]);
    }

    #[test]
    fn template_text_round_trips() {
        let t = tok();
        let texts = [
            render_closed(0, "left lower lung", "nodule/mass"),
            render_closed(1, "heart", "pleural effusion"),
            render_open("right upper lung"),
            "The location of the heart is at <SEG>. Yes".to_string(),
            "The trachea suffers from atelectasis, pneumonia and pulmonary fibrosis.".to_string(),
            "No abnormalities are present in the diaphragm.".to_string(),
        ];
        for text in texts {
            let ids = t.tokenize(&text).unwrap();
            assert_eq!(t.detokenize(&ids), text);
        }
    }

    #[test]
    fn unknown_word_is_an_error() {
        assert!(matches!(tok().tokenize("Does the kidney have pneumonia?"), Err(Error::UnknownWord(w)) if w == "kidney"));
    }
}
