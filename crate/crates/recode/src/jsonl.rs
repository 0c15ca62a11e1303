//! Paired-sample JSONL: one object per line with `src`, `asm` and `task`,
//! plus optional `id` and `exit_code`.

use std::fs;
use std::path::Path;

use recode_core::{Sample, Task};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    src: String,
    asm: String,
    task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exit_code: Option<u8>,
}

/// Parses JSONL text. Blank lines are skipped; a sample without an `id`
/// takes its 1-based line number.
pub fn parse_jsonl(text: &str, origin: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Line {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let rec: Line =
            serde_json::from_str(raw).map_err(|e| err(format!("malformed JSON: {e}")))?;
        let task: Task = rec
            .task
            .parse()
            .map_err(|_| err(format!("unknown task {:?}", rec.task)))?;
        let id = rec.id.unwrap_or_else(|| line.to_string());
        let sample =
            Sample::from_pair(id, &rec.src, &rec.asm, task).map_err(|e| err(e.to_string()))?;
        out.push(sample.with_expected_exit(rec.exit_code));
    }
    Ok(out)
}

pub fn ingest_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

/// Serializes samples so that [`parse_jsonl`] gives them back unchanged.
pub fn to_jsonl(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        let rec = Line {
            src: s.source_text().to_string(),
            asm: s.asm_text().to_string(),
            task: s.task.tag().to_string(),
            id: Some(s.id.clone()),
            exit_code: s.expected_exit,
        };
        out.push_str(&serde_json::to_string(&rec).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    fs::write(path, to_jsonl(samples)).map_err(|e| Error::io(path, e))
}
