//! Dataset records and JSON-lines loading.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};
use crate::example::Example;

/// One evaluation record: a question (QA datasets) or a conversation
/// (conversational datasets).
///
/// For conversations, `turns` holds the user turns in order and `answers`
/// holds one gold response per turn; `rewrite`, when present, substitutes
/// the first turn, which otherwise often assumes access to a gold document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Stable record id.
    pub id: String,
    /// The question, for QA datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// User turns, for conversational datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turns: Option<Vec<String>>,
    /// Acceptable gold answers (QA) or per-turn gold responses (conversations).
    pub answers: Vec<String>,
    /// First-turn substitution for conversational data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
}

impl DatasetRecord {
    /// True for conversational records.
    pub fn is_conversation(&self) -> bool {
        self.turns.is_some()
    }

    /// A train-pool example for this record: `{id, question, answer, answers}`
    /// for QA, `{id, turns, answer}` (final gold) for conversations.
    pub fn to_train_example(&self) -> Example {
        let mut x = Example::new().with("id", self.id.clone());
        if let Some(q) = &self.question {
            x.set("question", q.clone());
        }
        if let Some(turns) = &self.turns {
            x.set("turns", turns.clone());
        }
        // Conversations are supervised by the final turn's gold response;
        // QA records by their (possibly multiple) gold answers.
        let gold = if self.is_conversation() {
            self.answers.last()
        } else {
            self.answers.first()
        };
        if let Some(gold) = gold {
            x.set("answer", gold.clone());
        }
        if self.answers.len() > 1 && !self.is_conversation() {
            x.set("answers", self.answers.clone());
        }
        x
    }
}

/// Loads a JSON-lines dataset, validating that every record carries either a
/// question or turns, plus at least one answer.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let raw =
        std::fs::read_to_string(path).map_err(|e| DspError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| {
            DspError::parse(
                path.display().to_string(),
                format!("line {}: {e}", lineno + 1),
            )
        })?;
        if record.question.is_none() && record.turns.is_none() {
            return Err(DspError::parse(
                path.display().to_string(),
                format!("line {}: record needs a question or turns", lineno + 1),
            ));
        }
        if record.answers.is_empty() {
            return Err(DspError::parse(
                path.display().to_string(),
                format!("line {}: answers must be non-empty", lineno + 1),
            ));
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_and_validates_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"q1\",\"question\":\"who?\",\"answers\":[\"me\",\"myself\"]}\n",
                "{\"id\":\"c1\",\"turns\":[\"hi\",\"and then?\"],\"answers\":[\"hello\",\"more\"],\"rewrite\":\"hi there\"}\n",
            ),
        )
        .unwrap();
        let records = load_dataset(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert!(!records[0].is_conversation());
        assert!(records[1].is_conversation());
        let train = records[0].to_train_example();
        assert_eq!(train.question(), Some("who?"));
        assert_eq!(train.golds(), vec!["me".to_string(), "myself".to_string()]);
        // conversations are supervised by the final turn's gold
        let conv_train = records[1].to_train_example();
        assert_eq!(conv_train.answer(), Some("more"));
    }

    #[test]
    fn rejects_missing_answers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\":\"x\",\"question\":\"q\",\"answers\":[]}\n").unwrap();
        assert!(load_dataset(&path).is_err());
    }
}
