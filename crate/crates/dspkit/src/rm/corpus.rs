//! Corpus loading: TSV (id, title, text; header optional) or JSON lines.

use std::path::Path;

use super::Passage;
use crate::error::{DspError, Result};

/// Loads a passage corpus. Files ending in `.jsonl`/`.json` are parsed as
/// JSON lines `{id, title, text}`; everything else as tab-separated
/// `id<TAB>title<TAB>text` with an optional header row.
pub fn load_corpus(path: &Path) -> Result<Vec<Passage>> {
    let raw =
        std::fs::read_to_string(path).map_err(|e| DspError::io(path.display().to_string(), e))?;
    let is_jsonl = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("jsonl") || e.eq_ignore_ascii_case("json"))
        || raw.trim_start().starts_with('{');
    if is_jsonl {
        load_jsonl(&raw, path)
    } else {
        load_tsv(&raw, path)
    }
}

fn load_jsonl(raw: &str, path: &Path) -> Result<Vec<Passage>> {
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let passage: Passage = serde_json::from_str(line).map_err(|e| {
            DspError::parse(
                path.display().to_string(),
                format!("line {}: {e}", lineno + 1),
            )
        })?;
        validate(&passage, lineno, path)?;
        out.push(passage);
    }
    Ok(out)
}

fn load_tsv(raw: &str, path: &Path) -> Result<Vec<Passage>> {
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if lineno == 0 && cols.first().is_some_and(|c| c.eq_ignore_ascii_case("id")) {
            continue;
        }
        if cols.len() != 3 {
            return Err(DspError::parse(
                path.display().to_string(),
                format!(
                    "line {}: expected 3 tab-separated columns, got {}",
                    lineno + 1,
                    cols.len()
                ),
            ));
        }
        let passage = Passage {
            id: cols[0].to_string(),
            title: cols[1].to_string(),
            text: cols[2].to_string(),
        };
        validate(&passage, lineno, path)?;
        out.push(passage);
    }
    Ok(out)
}

fn validate(passage: &Passage, lineno: usize, path: &Path) -> Result<()> {
    if passage.id.is_empty() || passage.text.is_empty() {
        return Err(DspError::parse(
            path.display().to_string(),
            format!("line {}: passage id and text must be non-empty", lineno + 1),
        ));
    }
    Ok(())
}
