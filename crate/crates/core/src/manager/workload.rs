use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::pipeline::Attributes;

/// One input frame of a workload trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame_id: u64,
    #[serde(default)]
    pub attributes: Attributes,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trace line {line}: attribute {attribute} is negative")]
    Negative { line: usize, attribute: String },
    #[error("trace line {line}: frame {frame_id} repeats an earlier frame id")]
    DuplicateFrame { line: usize, frame_id: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads a JSON-lines trace; blank lines are skipped.
pub fn read_trace(r: impl BufRead) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|source| TraceError::Parse {
            line: i + 1,
            source,
        })?;
        if let Some((k, _)) = rec.attributes.iter().find(|(_, v)| **v < 0) {
            return Err(TraceError::Negative {
                line: i + 1,
                attribute: k.clone(),
            });
        }
        if !seen.insert(rec.frame_id) {
            return Err(TraceError::DuplicateFrame {
                line: i + 1,
                frame_id: rec.frame_id,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trace(mut w: impl Write, trace: &[TraceRecord]) -> io::Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
