//! Question/answer records, JSONL corpora and exact-match scoring.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GagError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub route: u32,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_route: Option<u32>,
}

pub fn write_jsonl(path: &Path, records: &[QaRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| GagError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| GagError::io(path, e))?;
    }
    w.flush().map_err(|e| GagError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QaRecord>> {
    if !path.exists() {
        return Err(GagError::MissingArtifact(path.to_path_buf()));
    }
    let f = std::fs::File::open(path).map_err(|e| GagError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| GagError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| GagError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Lowercase, strip ASCII punctuation, drop leading articles, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let cleaned: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let mut words: Vec<&str> = cleaned.split_whitespace().collect();
    while matches!(words.first(), Some(&("a" | "an" | "the"))) {
        words.remove(0);
    }
    words.join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// Percentage of matching pairs; 0 for an empty set.
pub fn em_score<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, g) in pairs {
        n += 1;
        hit += exact_match(p, g) as usize;
    }
    if n == 0 {
        0.0
    } else {
        100.0 * hit as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert!(exact_match("The Eiffel Tower.", "eiffel tower"));
        assert!(!exact_match("42 km", "42"));
        assert!(exact_match("", ""));
        assert!(exact_match("  an   Apple ", "apple"));
        assert_eq!(normalize_answer("The the end"), "end");
    }

    #[test]
    fn em_percentages() {
        assert_eq!(em_score([("a", "a"), ("b", "c")]), 50.0);
        assert_eq!(em_score(std::iter::empty()), 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let recs = vec![
            QaRecord {
                id: "a".into(),
                route: 1,
                question: "q?".into(),
                answer: "ans".into(),
                gold_route: None,
            },
            QaRecord {
                id: "b".into(),
                route: 0,
                question: "\"quoted\"\nline".into(),
                answer: "".into(),
                gold_route: Some(0),
            },
        ];
        write_jsonl(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.lines().next().unwrap().contains("gold_route"));
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        assert!(matches!(
            read_jsonl(&dir.path().join("missing.jsonl")),
            Err(GagError::MissingArtifact(_))
        ));
    }
}
