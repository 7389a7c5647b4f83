//! JSON-lines datasets and the demo byte tokenizer.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Maps each UTF-8 byte to `byte % vocab_size`. Good enough for demo text.
pub fn byte_tokenize(text: &str, vocab_size: usize) -> Vec<TokenId> {
    text.bytes()
        .map(|b| (b as usize % vocab_size) as TokenId)
        .collect()
}

/// Token ids, or raw text run through [`byte_tokenize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptInput {
    Ids(Vec<TokenId>),
    Text(String),
}

impl PromptInput {
    pub fn tokens(&self, vocab_size: usize) -> Vec<TokenId> {
        match self {
            PromptInput::Ids(ids) => ids.clone(),
            PromptInput::Text(t) => byte_tokenize(t, vocab_size),
        }
    }
}

impl From<Vec<TokenId>> for PromptInput {
    fn from(ids: Vec<TokenId>) -> Self {
        PromptInput::Ids(ids)
    }
}

/// One multiple-choice question; several options may be true.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McItem {
    pub prompt: PromptInput,
    pub options: Vec<PromptInput>,
    pub labels: Vec<bool>,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::Data(format!(
                "an item needs at least two options, got {}",
                self.options.len()
            )));
        }
        if self.labels.len() != self.options.len() {
            return Err(Error::Data(format!(
                "{} labels for {} options",
                self.labels.len(),
                self.options.len()
            )));
        }
        if !self.labels.contains(&true) {
            return Err(Error::Data("an item needs at least one true option".into()));
        }
        Ok(())
    }
}

/// A prompt to continue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenItem {
    pub prompt: PromptInput,
}

/// Question and answer for layer analysis. Either give `answer` (appended to
/// the prompt) or an explicit `answer_range` over the prompt tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisItem {
    pub prompt: PromptInput,
    #[serde(default)]
    pub answer: Option<PromptInput>,
    #[serde(default)]
    pub answer_range: Option<[usize; 2]>,
}

impl AnalysisItem {
    /// The full token sequence and the half-open range of answer positions.
    pub fn resolve(&self, vocab_size: usize) -> Result<(Vec<TokenId>, std::ops::Range<usize>)> {
        let mut tokens = self.prompt.tokens(vocab_size);
        let range = match (&self.answer, self.answer_range) {
            (Some(a), None) => {
                let start = tokens.len();
                tokens.extend(a.tokens(vocab_size));
                start..tokens.len()
            }
            (None, Some([lo, hi])) => lo..hi,
            _ => {
                return Err(Error::invalid(
                    "give exactly one of `answer` and `answer_range`",
                ))
            }
        };
        // each answer token is predicted from the tokens before it
        if range.start == 0 || range.start >= range.end || range.end > tokens.len() {
            return Err(Error::invalid(format!(
                "answer range {}..{} outside a sequence of {} tokens",
                range.start,
                range.end,
                tokens.len()
            )));
        }
        Ok((tokens, range))
    }
}

/// Parses one JSON value per non-blank line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn load_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    parse_jsonl(&text)
}

pub fn load_mc_items(path: impl AsRef<Path>) -> Result<Vec<McItem>> {
    let items: Vec<McItem> = load_jsonl(path)?;
    for (i, item) in items.iter().enumerate() {
        item.validate()
            .map_err(|e| Error::Data(format!("item {}: {e}", i + 1)))?;
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_tokenizer_wraps() {
        assert_eq!(byte_tokenize("AB", 64), vec![65 % 64, 66 % 64]);
        assert_eq!(byte_tokenize("", 64), Vec::<u32>::new());
    }

    #[test]
    fn mc_items_parse_ids_and_text() {
        let text = r#"{"prompt": [1, 2], "options": [[3], "hi"], "labels": [true, false]}

{"prompt": "q", "options": [[1], [2], [3]], "labels": [false, true, true]}"#;
        let items: Vec<McItem> = parse_jsonl(text).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].options[1].tokens(64), byte_tokenize("hi", 64));
        items.iter().for_each(|i| i.validate().unwrap());
    }

    #[test]
    fn invalid_items() {
        let one: McItem =
            serde_json::from_str(r#"{"prompt": [1], "options": [[1]], "labels": [true]}"#).unwrap();
        assert!(one.validate().is_err());
        let none_true: McItem = serde_json::from_str(
            r#"{"prompt": [1], "options": [[1], [2]], "labels": [false, false]}"#,
        )
        .unwrap();
        assert!(none_true.validate().is_err());
        assert!(matches!(
            parse_jsonl::<McItem>("{nope"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn analysis_ranges() {
        let item = AnalysisItem {
            prompt: vec![1, 2, 3].into(),
            answer: Some(vec![4, 5].into()),
            answer_range: None,
        };
        assert_eq!(item.resolve(8).unwrap(), (vec![1, 2, 3, 4, 5], 3..5));
        let ranged = AnalysisItem {
            prompt: vec![1, 2, 3].into(),
            answer: None,
            answer_range: Some([1, 3]),
        };
        assert_eq!(ranged.resolve(8).unwrap().1, 1..3);
        for bad in [[0, 2], [2, 2], [1, 4]] {
            let item = AnalysisItem {
                answer_range: Some(bad),
                ..ranged.clone()
            };
            assert!(item.resolve(8).is_err());
        }
    }
}
