//! Text prompt templates with a `{query}` field and, for answer prompts, a
//! `{knowledge}` slot that becomes the single ANCHOR token.

use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};
use crate::lm::tokenizer::{tokenize, ANCHOR, BOS};

pub const QUERY_FIELD: &str = "{query}";
pub const KNOWLEDGE_FIELD: &str = "{knowledge}";

/// A prompt skeleton with exactly one `{query}` field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryTemplate(String);

impl QueryTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let n = text.matches(QUERY_FIELD).count();
        if n != 1 {
            return Err(GagError::Template(format!(
                "expected exactly one {QUERY_FIELD} field, found {n}"
            )));
        }
        Ok(Self(text))
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    pub fn fill(&self, query: &str) -> String {
        self.0.replace(QUERY_FIELD, query)
    }

    /// `BOS` followed by the filled template's bytes.
    pub fn fill_ids(&self, query: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(tokenize(&self.fill(query)));
        ids
    }
}

/// Answer template whose knowledge line holds one injection slot.
///
/// The line containing `{knowledge}` is dropped entirely for the general
/// route, so a plain prompt never carries an anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AnswerTemplate {
    text: String,
}

impl TryFrom<String> for AnswerTemplate {
    type Error = GagError;

    fn try_from(text: String) -> Result<Self> {
        let k = text.matches(KNOWLEDGE_FIELD).count();
        if k != 1 {
            return Err(GagError::Template(format!(
                "expected exactly one {KNOWLEDGE_FIELD} slot, found {k}"
            )));
        }
        QueryTemplate::new(text.clone())?;
        Ok(Self { text })
    }
}

impl From<AnswerTemplate> for String {
    fn from(t: AnswerTemplate) -> Self {
        t.text
    }
}

/// A filled answer prompt: token ids with exactly one ANCHOR at `anchor`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerPrompt {
    pub ids: Vec<u32>,
    pub anchor: usize,
}

impl AnswerPrompt {
    /// Validates a raw id sequence: exactly one ANCHOR must be present.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        let slots: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == ANCHOR).collect();
        match slots.as_slice() {
            [a] => Ok(Self { anchor: *a, ids }),
            [] => Err(GagError::Template("prompt has no anchor slot".into())),
            _ => Err(GagError::Template(format!("prompt has {} anchor slots", slots.len()))),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl AnswerTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        Self::try_from(text.into())
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Prompt with the knowledge slot, `BOS` first.
    pub fn with_slot(&self, query: &str) -> Result<AnswerPrompt> {
        let (before, after) = self.text.split_once(KNOWLEDGE_FIELD).expect("validated template");
        let mut ids = vec![BOS];
        ids.extend(tokenize(&before.replace(QUERY_FIELD, query)));
        ids.push(ANCHOR);
        ids.extend(tokenize(&after.replace(QUERY_FIELD, query)));
        AnswerPrompt::from_ids(ids)
    }

    /// Prompt for the general route: the knowledge line is omitted.
    pub fn without_slot(&self, query: &str) -> Vec<u32> {
        let kept: Vec<&str> = self
            .text
            .split_inclusive('\n')
            .filter(|line| !line.contains(KNOWLEDGE_FIELD))
            .collect();
        let mut ids = vec![BOS];
        ids.extend(tokenize(&kept.concat().replace(QUERY_FIELD, query)));
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer() -> AnswerTemplate {
        AnswerTemplate::new("Knowledge: {knowledge}\nQuestion: {query}\nAnswer: ").unwrap()
    }

    #[test]
    fn query_template_needs_one_field() {
        assert!(QueryTemplate::new("no field").is_err());
        assert!(QueryTemplate::new("{query} {query}").is_err());
        let t = QueryTemplate::new("Q: {query}").unwrap();
        assert_eq!(t.fill("x"), "Q: x");
        assert_eq!(t.fill_ids("x")[0], BOS);
    }

    #[test]
    fn slot_prompt_has_one_anchor_at_the_knowledge_position() {
        let p = answer().with_slot("who?").unwrap();
        assert_eq!(p.ids[p.anchor], ANCHOR);
        assert_eq!(p.anchor, 1 + "Knowledge: ".len());
        assert_eq!(p.ids.iter().filter(|&&t| t == ANCHOR).count(), 1);
    }

    #[test]
    fn general_prompt_drops_the_knowledge_line() {
        let t = answer();
        let ids = t.without_slot("who?");
        let mut want = vec![BOS];
        want.extend(tokenize("Question: who?\nAnswer: "));
        assert_eq!(ids, want);
        assert!(!ids.contains(&ANCHOR));
    }

    #[test]
    fn slot_prompt_length_is_fill_length_plus_one_line() {
        let t = answer();
        let a = t.with_slot("abc").unwrap().len();
        let b = t.with_slot("xyz").unwrap().len();
        assert_eq!(a, b);
        assert_eq!(a, t.without_slot("abc").len() + "Knowledge: \n".len() + 1);
    }

    #[test]
    fn bad_answer_templates_are_rejected() {
        assert!(AnswerTemplate::new("Question: {query}").is_err());
        assert!(AnswerTemplate::new("{knowledge} {knowledge} {query}").is_err());
        assert!(AnswerTemplate::new("{knowledge}").is_err());
        assert!(AnswerPrompt::from_ids(vec![BOS, 5]).is_err());
        assert!(AnswerPrompt::from_ids(vec![ANCHOR, ANCHOR]).is_err());
    }

    #[test]
    fn serde_validates() {
        let t: AnswerTemplate = serde_json::from_str("\"K: {knowledge}\\nQ: {query}\"").unwrap();
        assert_eq!(t.text(), "K: {knowledge}\nQ: {query}");
        assert!(serde_json::from_str::<AnswerTemplate>("\"Q: {query}\"").is_err());
    }
}
