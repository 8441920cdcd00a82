//! Session transcript files.
//!
//! One pretty-printed JSON document per session: a format tag, the config
//! snapshot and the full dialogue state (turns, distributions, entropy trace,
//! retrieval records, selection reports, diagnosis). No timestamps, so a
//! replayed session produces byte-identical output.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{DialogueState, SessionConfig};

pub const FORMAT: &str = "patience-transcript/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub format: String,
    pub config: SessionConfig,
    #[serde(flatten)]
    pub state: DialogueState,
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{path}: unsupported transcript format `{found}`")]
    Format { path: String, found: String },
}

impl Transcript {
    pub fn new(config: SessionConfig, state: DialogueState) -> Self {
        Self { format: FORMAT.to_string(), config, state }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcript serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Writes atomically (temp file + rename) so readers never see a partial
    /// transcript.
    pub fn write(&self, path: &Path) -> Result<(), TranscriptError> {
        let io_err = |source| TranscriptError::Io { path: path.display().to_string(), source };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<Self, TranscriptError> {
        let name = path.display().to_string();
        let text =
            fs::read_to_string(path).map_err(|source| TranscriptError::Io { path: name.clone(), source })?;
        let t =
            Self::from_json(&text).map_err(|source| TranscriptError::Parse { path: name.clone(), source })?;
        if t.format != FORMAT {
            return Err(TranscriptError::Format { path: name, found: t.format });
        }
        Ok(t)
    }
}
