use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompletionResponse, LlmError, Role};

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub fingerprint: String,
    pub role: Role,
    pub temperature: f64,
    pub prompt: String,
    pub response: CompletionResponse,
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, LlmError> {
    let file =
        File::open(path).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Transcript(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| LlmError::Transcript(format!("{} line {}: {e}", path.display(), i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}
